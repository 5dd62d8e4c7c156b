//! Environment dynamics, reward, goal selection, hindsight relabeling and
//! the DDPG loop's bookkeeping.

use std::path::Path;

use clfd_core::data::scene::{distance, render_view, Stage};
use clfd_core::data::{generate_dataset, Dataset, GeneratorConfig};
use clfd_core::error::Error;
use clfd_core::eval::{Embedder, Encoder};
use clfd_core::rl::{
    compute_reward, evaluate_policy, her_final, oracle_action, select_goal, train_ddpg, DdpgConfig, Env, EnvConfig,
    Policy, RewardNorm, Task, Transition,
};
use clfd_core::tensor::Tensor;
use tempfile::TempDir;

fn dataset(dir: &Path) -> Dataset {
    let cfg = GeneratorConfig {
        demos: 12,
        frames_per_demo: 12,
        ..GeneratorConfig::default()
    };
    generate_dataset(dir, 4, &cfg).unwrap();
    Dataset::open(dir).unwrap()
}

fn embed_frame(enc: &dyn Embedder, ds: &Dataset, demo: usize, view: usize, t: usize) -> Vec<f32> {
    let mut data = Vec::new();
    ds.extend_chw(demo, view, t, &mut data).unwrap();
    enc.embed(&Tensor::new(vec![1, 3, 64, 64], data).unwrap()).unwrap().into_data()
}

#[test]
fn reward_examples() {
    let e = [1.0, 0.0, 0.0];
    let g = [0.0, 1.0, 0.0];
    assert_eq!(compute_reward(&e, &e, RewardNorm::L2).unwrap(), 0.0);
    assert!((compute_reward(&e, &g, RewardNorm::L2).unwrap() + 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(compute_reward(&e, &g, RewardNorm::L1).unwrap(), -2.0);
    let a = [0.3, -1.2, 0.5];
    let b = [1.1, 0.4, -0.7];
    let r = compute_reward(&a, &b, RewardNorm::L2).unwrap();
    let a2 = a.map(|x| 2.0 * x);
    let b2 = b.map(|x| 2.0 * x);
    assert!((compute_reward(&a2, &b2, RewardNorm::L2).unwrap() - 2.0 * r).abs() < 1e-6);
    assert!(compute_reward(&a, &b[..2], RewardNorm::L2).is_err());
}

#[test]
fn reset_is_deterministic_and_starts_at_home() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(1);
    let mut env = Env::from_dataset(EnvConfig::default(), &enc, &ds).unwrap();
    let a = env.reset(7).unwrap();
    let scene = env.scene().clone();
    assert!(!scene.holding && !scene.gripper_closed && !a.gripper_closed);
    assert_eq!(a.velocities, [0.0; 4]);
    let b = env.reset(7).unwrap();
    assert_eq!(a, b);
    assert_eq!(&scene, env.scene());

    let camera = ds.manifest.rig.cameras[env.cfg.camera];
    let mut data = Vec::new();
    render_view(env.scene(), &camera).extend_chw(&mut data);
    let direct = enc.embed(&Tensor::new(vec![1, 3, 64, 64], data).unwrap()).unwrap();
    assert_eq!(a.embedding, direct.into_data());

    let c = env.reset(8).unwrap();
    assert_ne!(&scene, env.scene());
    assert_eq!(c.joints[3], a.joints[3]);
}

#[test]
fn zero_action_is_a_fixed_point() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(1);
    let mut env = Env::from_dataset(EnvConfig::default(), &enc, &ds).unwrap();
    let s0 = env.reset(3).unwrap();
    let r0 = compute_reward(&s0.embedding, &env.task.goal, RewardNorm::L2).unwrap();
    let scene = env.scene().clone();
    for k in 1..=3 {
        let out = env.step(&[0.0; 5]).unwrap();
        assert_eq!(out.state, s0);
        assert_eq!(out.reward, r0);
        assert_eq!(env.scene(), &scene);
        assert_eq!(env.steps(), k);
    }
}

#[test]
fn grasp_needs_the_gripper_within_the_radius() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(1);
    let cfg = EnvConfig::default();
    let mut env = Env::from_dataset(cfg.clone(), &enc, &ds).unwrap();
    env.reset(1).unwrap();
    let out = env.step(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(out.state.gripper_closed);
    assert!(!env.scene().holding && !out.achieved);

    // Walk to the box with the gripper open, then close.
    env.reset(1).unwrap();
    let mut out = None;
    for _ in 0..cfg.step_limit - 1 {
        let mut a = oracle_action(&env);
        if distance(&env.scene().gripper, &env.scene().box_pos) > cfg.grasp_radius {
            a[4] = -1.0;
            out = Some(env.step(&a).unwrap());
            continue;
        }
        assert!(!env.scene().holding);
        out = Some(env.step(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        break;
    }
    let out = out.unwrap();
    assert!(env.scene().holding && out.achieved);
    assert_eq!(env.scene().box_pos, env.scene().gripper);
}

#[test]
fn actions_are_clamped_and_the_episode_ends_at_the_step_limit() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(1);
    let cfg = EnvConfig {
        step_limit: 4,
        ..EnvConfig::default()
    };
    let mut env = Env::from_dataset(cfg.clone(), &enc, &ds).unwrap();
    env.reset(2).unwrap();
    let start = env.scene().gripper;
    let out = env.step(&[10.0, -10.0, 0.0, 0.0, -1.0]).unwrap();
    assert!((env.scene().gripper[0] - start[0] - cfg.v_max).abs() < 1e-12);
    assert!((env.scene().gripper[1] - start[1] + cfg.v_max).abs() < 1e-12);
    assert!((out.state.velocities[0] - cfg.v_max).abs() < 1e-12);
    for _ in 0..3 {
        assert!(!env.step(&[0.0; 5]).unwrap().done || env.steps() == 4);
    }
    assert_eq!(env.steps(), 4);
    assert!(matches!(env.step(&[0.0; 5]), Err(Error::Env(_))));
    assert!(env.step(&[0.0; 3]).is_err());
}

#[test]
fn identical_seeds_and_actions_give_identical_trajectories() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(1);
    let run = || {
        let mut env = Env::from_dataset(EnvConfig::default(), &enc, &ds).unwrap();
        env.reset(11).unwrap();
        (0..20)
            .map(|k| {
                let a = [0.03 * (k as f64).sin(), -0.02, -0.04, 0.0, (k % 3) as f64 - 1.0];
                let o = env.step(&a).unwrap();
                (o.state, o.reward)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn goals_are_the_last_frame_of_each_stage() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(2);
    let demo = ds.manifest.splits.test[0];
    let labels = ds.labels(demo).unwrap();
    let last_pick = labels.iter().rposition(|l| l.stage == Stage::Pick).unwrap();
    assert_eq!(labels[last_pick + 1].stage, Stage::Place);
    let pick = select_goal(&enc, &ds, demo, Stage::Pick, 1).unwrap();
    let place = select_goal(&enc, &ds, demo, Stage::Place, 1).unwrap();
    assert_eq!(pick, embed_frame(&enc, &ds, demo, 1, last_pick));
    assert_eq!(place, embed_frame(&enc, &ds, demo, 1, labels.len() - 1));

    let cfg = EnvConfig::default();
    let task = Task::from_dataset(&enc, &ds, &cfg).unwrap();
    assert_eq!(task.guide_demo, demo);
    assert_eq!(task.goal, pick);
    assert!(task.threshold >= 0.0);

    let train_demo = ds.manifest.splits.train[0];
    let bad = EnvConfig {
        guide_demo: Some(train_demo),
        ..cfg
    };
    assert!(matches!(Task::from_dataset(&enc, &ds, &bad), Err(Error::Env(_))));
}

#[test]
fn oracle_always_succeeds_and_random_rarely_does() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(3);
    for stage in [Stage::Pick, Stage::Place] {
        let cfg = EnvConfig {
            stage,
            ..EnvConfig::default()
        };
        let task = Task::from_dataset(&enc, &ds, &cfg).unwrap();
        let camera = ds.manifest.rig.cameras[cfg.camera];
        let oracle = evaluate_policy(Policy::Oracle, &cfg, &task, &enc, camera, 100, 5).unwrap();
        assert_eq!(oracle.success_rate, 1.0, "{stage:?}");
        if stage == Stage::Pick {
            let random = evaluate_policy(Policy::Random, &cfg, &task, &enc, camera, 100, 5).unwrap();
            assert!(random.success_rate < 0.05, "random pick success {}", random.success_rate);
            assert!(random.mean_return <= 0.0);
        }
    }
}

#[test]
fn hindsight_copies_keep_rewards_non_positive() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(4);
    let mut env = Env::from_dataset(EnvConfig::default(), &enc, &ds).unwrap();
    let mut state = env.reset(5).unwrap();
    let mut episode = Vec::new();
    for k in 0..30 {
        let a = [0.01, -0.03 * (k as f64).cos(), -0.02, 0.0, -1.0];
        let out = env.step(&a).unwrap();
        episode.push(Transition {
            state: state.features(0.05),
            action: a.iter().map(|&x| x as f32).collect(),
            reward: out.reward as f32,
            next_state: out.state.features(0.05),
            done: out.success,
            goal: env.task.goal.clone(),
            achieved: out.state.embedding.clone(),
        });
        state = out.state;
    }
    let k = 4;
    let relabeled = her_final(&episode, k, RewardNorm::L2, env.task.threshold).unwrap();
    assert_eq!(relabeled.len(), k * episode.len());
    assert!(episode.iter().chain(&relabeled).all(|t| t.reward <= 0.0));
    for t in &relabeled[relabeled.len() - k..] {
        assert_eq!(t.reward, 0.0);
        assert!(t.done);
    }
    assert!(relabeled.iter().filter(|t| t.done).all(|t| -(t.reward as f64) <= env.task.threshold));
}

#[test]
fn ddpg_stores_one_plus_k_copies_per_step_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let enc = Encoder::random(5);
    let cfg = DdpgConfig {
        hidden: vec![16, 16],
        episodes: 3,
        batch_size: 16,
        updates_per_episode: 2,
        ..DdpgConfig::default()
    };
    let env_cfg = EnvConfig {
        step_limit: 10,
        ..EnvConfig::default()
    };
    let run = || {
        let mut env = Env::from_dataset(env_cfg.clone(), &enc, &ds).unwrap();
        let mut seen = 0;
        let out = train_ddpg(&cfg, &mut env, |_| seen += 1).unwrap();
        assert_eq!(seen, cfg.episodes);
        out
    };
    let a = run();
    let steps: usize = a.log.iter().map(|r| r.steps).sum();
    assert_eq!(a.stored, steps * (1 + cfg.her_k));
    assert!(a.log.iter().all(|r| r.accumulated_reward <= 0.0));
    let b = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.agent.online_params().content_hash(), b.agent.online_params().content_hash());
}
