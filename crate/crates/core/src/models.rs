//! Encoder `f`, projection head `g` and small MLPs.

use rand::Rng as _;

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::rng::{substream, Rng};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const EMBED_DIM: usize = 32;
pub const PROJ_DIM: usize = 64;

/// Bound of the uniform weight initializer for a layer with `fan_in` inputs.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn init_weight<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = init_bound(fan_in);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// A frame encoder mapping `[B, 3, 64, 64]` images to `[B, D]` embeddings.
pub trait FrameEncoder {
    fn output_dim(&self) -> usize;

    fn init_params<T: Scalar>(&self, params: &mut ParameterSet<T>, rng: &mut Rng);

    fn forward<'t, T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: &'t Tape<T>,
        images: Var<'t, T>,
    ) -> Result<Var<'t, T>>;
}

/// Three stride-2 3x3 convolutions (16, 32, 64 channels) with relu, global
/// average pooling and a final 64 -> 32 linear layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeskCnn;

const CONVS: [(&str, usize, usize); 3] = [("conv1", 3, 16), ("conv2", 16, 32), ("conv3", 32, 64)];
const KERNEL: usize = 3;
const CONV_GEOM: ConvGeometry = ConvGeometry {
    stride: 2,
    padding: 1,
};

impl FrameEncoder for DeskCnn {
    fn output_dim(&self) -> usize {
        EMBED_DIM
    }

    fn init_params<T: Scalar>(&self, params: &mut ParameterSet<T>, rng: &mut Rng) {
        for (name, cin, cout) in CONVS {
            let fan_in = cin * KERNEL * KERNEL;
            params.insert(
                format!("encoder.{name}.weight"),
                init_weight(rng, &[cout, cin, KERNEL, KERNEL], fan_in),
            );
            params.insert(format!("encoder.{name}.bias"), Tensor::zeros(&[cout]));
        }
        params.insert("encoder.fc.weight", init_weight(rng, &[EMBED_DIM, 64], 64));
        params.insert("encoder.fc.bias", Tensor::zeros(&[EMBED_DIM]));
    }

    fn forward<'t, T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: &'t Tape<T>,
        images: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1..] != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(
                "encode",
                format!("expected [B, 3, 64, 64] images, got {shape:?}"),
            ));
        }
        let mut h = images;
        for (name, _, _) in CONVS {
            let w = params.var(tape, &format!("encoder.{name}.weight"))?;
            let b = params.var(tape, &format!("encoder.{name}.bias"))?;
            h = tape.relu(tape.conv2d(h, w, Some(b), CONV_GEOM)?)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = params.var(tape, "encoder.fc.weight")?;
        let b = params.var(tape, "encoder.fc.bias")?;
        tape.linear(pooled, w, Some(b))
    }
}

/// Output nonlinearity of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Fully connected network with relu between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    output: OutputActivation,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], output: OutputActivation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_name(&self, i: usize, part: &str) -> String {
        format!("{}.fc{}.{part}", self.prefix, i + 1)
    }

    pub fn init_params<T: Scalar>(&self, params: &mut ParameterSet<T>, rng: &mut Rng) {
        for (i, pair) in self.sizes.windows(2).enumerate() {
            params.insert(self.layer_name(i, "weight"), init_weight(rng, &[pair[1], pair[0]], pair[0]));
            params.insert(self.layer_name(i, "bias"), Tensor::zeros(&[pair[1]]));
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = params.var(tape, &self.layer_name(i, "weight"))?;
            let b = params.var(tape, &self.layer_name(i, "bias"))?;
            h = tape.linear(h, w, Some(b))?;
            if i + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        match self.output {
            OutputActivation::Identity => Ok(h),
            OutputActivation::Tanh => tape.tanh(h),
        }
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let input = tape.constant(x.clone());
        let out = self.forward(params, &tape, input)?;
        tape.value(out)
    }
}

/// Projection head `g`: 32 -> 32 (relu) -> 64.
pub fn projection_head() -> Mlp {
    Mlp::new("head", &[EMBED_DIM, EMBED_DIM, PROJ_DIM], OutputActivation::Identity)
}

/// Encoder plus projection head, the pair trained by the contrastive loop.
#[derive(Clone, Debug)]
pub struct ContrastiveModel {
    pub encoder: DeskCnn,
    pub head: Mlp,
}

impl Default for ContrastiveModel {
    fn default() -> Self {
        ContrastiveModel {
            encoder: DeskCnn,
            head: projection_head(),
        }
    }
}

/// Images per inference chunk; keeps im2col buffers small.
const INFER_CHUNK: usize = 64;

impl ContrastiveModel {
    /// Deterministic initialization: same seed, bit-identical parameters.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        let mut rng = substream(seed, "init");
        let mut params = ParameterSet::new();
        self.encoder.init_params(&mut params, &mut rng);
        self.head.init_params(&mut params, &mut rng);
        params
    }

    /// `h = f(x)` for a `[B, 3, 64, 64]` batch, evaluated in chunks.
    pub fn encode<T: Scalar>(&self, params: &ParameterSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(
                "encode",
                format!("expected [B, 3, 64, 64] images, got {shape:?}"),
            ));
        }
        let per_image = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
        let mut out = Vec::with_capacity(shape[0] * EMBED_DIM);
        for chunk in images.data().chunks(INFER_CHUNK * per_image) {
            let b = chunk.len() / per_image;
            let tape = Tape::inference();
            let x = tape.constant(Tensor::new(vec![b, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], chunk.to_vec())?);
            let h = self.encoder.forward(params, &tape, x)?;
            out.extend_from_slice(tape.value(h)?.data());
        }
        Tensor::new(vec![shape[0], EMBED_DIM], out)
    }

    /// `z = g(h)` for `[B, 32]` embeddings.
    pub fn project<T: Scalar>(&self, params: &ParameterSet<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        if embeddings.rank() != 2 || embeddings.shape()[1] != EMBED_DIM {
            return Err(Error::shape(
                "project",
                format!("expected [B, 32] embeddings, got {:?}", embeddings.shape()),
            ));
        }
        self.head.infer(params, embeddings)
    }
}
