//! Synthetic multi-camera pick-and-place demonstrations.

pub mod generate;
pub mod sampler;
pub mod scene;
pub mod store;

pub use generate::{generate_dataset, generate_demo, GeneratorConfig, PlacementConfig};
pub use sampler::{demo_images, sample_contrastive_batch, ContrastiveBatch, PairRef};
pub use scene::{render_view, Camera, CameraRig, Frame, SceneState, Stage, SEEN_VIEWS, UNSEEN_VIEWS};
pub use store::{Dataset, DatasetManifest, FrameLabel, Split};
