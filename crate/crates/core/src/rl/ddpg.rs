//! Goal-conditioned DDPG with target networks and hindsight replay.

use std::path::Path;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::buffer::{her_final, ReplayBuffer, Transition};
use super::env::{oracle_action, Env, EnvConfig, Task, ACTION_DIM, STATE_DIM};
use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::scene::Camera;
use crate::error::{Error, Result};
use crate::eval::{Embedder, EncoderSource};
use crate::models::{Mlp, OutputActivation, EMBED_DIM};
use crate::params::{AdamConfig, ParameterSet};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

const ACTOR_IN: usize = STATE_DIM + EMBED_DIM;
const CRITIC_IN: usize = ACTOR_IN + ACTION_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Soft-update rate of the target networks.
    pub target_rate: f64,
    pub noise_std: f64,
    /// Probability of replacing the policy action by a uniform random one
    /// during training.
    pub random_action_prob: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub her_k: usize,
    pub updates_per_episode: usize,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            gamma: 0.99,
            hidden: vec![128, 128],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            target_rate: 0.005,
            noise_std: 0.1,
            random_action_prob: 0.2,
            buffer_capacity: 100_000,
            batch_size: 128,
            episodes: 3000,
            her_k: 4,
            updates_per_episode: 40,
            seed: 1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && !self.hidden.is_empty()
            && self.hidden.iter().all(|&h| h > 0)
            && self.actor_lr >= 0.0
            && self.critic_lr >= 0.0
            && (0.0..=1.0).contains(&self.target_rate)
            && self.noise_std >= 0.0
            && (0.0..=1.0).contains(&self.random_action_prob)
            && self.buffer_capacity >= 1
            && self.batch_size >= 1
            && self.episodes >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid DDPG config: {self:?}")))
        }
    }
}

/// Actor, critic and their target copies.
#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_params: ParameterSet<f32>,
    pub critic_params: ParameterSet<f32>,
    pub target_actor: ParameterSet<f32>,
    pub target_critic: ParameterSet<f32>,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl Agent {
    pub fn new(hidden: &[usize], rng: &mut Rng) -> Self {
        let actor = Mlp::new("actor", &sizes(ACTOR_IN, hidden, ACTION_DIM), OutputActivation::Tanh);
        let critic = Mlp::new("critic", &sizes(CRITIC_IN, hidden, 1), OutputActivation::Identity);
        let mut actor_params = ParameterSet::new();
        actor.init_params(&mut actor_params, rng);
        let mut critic_params = ParameterSet::new();
        critic.init_params(&mut critic_params, rng);
        Agent {
            actor,
            critic,
            target_actor: actor_params.clone(),
            target_critic: critic_params.clone(),
            actor_params,
            critic_params,
        }
    }

    /// Deterministic action in `[-1, 1]^5` for state features and a goal.
    pub fn act(&self, features: &[f32], goal: &[f32]) -> Result<Vec<f32>> {
        let mut x = features.to_vec();
        x.extend_from_slice(goal);
        Ok(self.actor.infer(&self.actor_params, &Tensor::new(vec![1, x.len()], x)?)?.into_data())
    }

    /// `rate = 1` copies the online networks, `rate = 0` leaves targets unchanged.
    pub fn soft_update(&mut self, rate: f64) -> Result<()> {
        self.target_actor.soft_update_from(&self.actor_params, rate)?;
        self.target_critic.soft_update_from(&self.critic_params, rate)
    }

    /// One critic and one actor step on `batch`; returns the critic loss.
    fn update(&mut self, batch: &[&Transition], cfg: &DdpgConfig) -> Result<f64> {
        let n = batch.len();
        let mut x_next = Vec::with_capacity(n * ACTOR_IN);
        let mut x_now = Vec::with_capacity(n * ACTOR_IN);
        let mut x_sa = Vec::with_capacity(n * CRITIC_IN);
        for t in batch {
            x_next.extend_from_slice(&t.next_state);
            x_next.extend_from_slice(&t.goal);
            x_now.extend_from_slice(&t.state);
            x_now.extend_from_slice(&t.goal);
            x_sa.extend_from_slice(&t.state);
            x_sa.extend_from_slice(&t.goal);
            x_sa.extend_from_slice(&t.action);
        }
        let x_next = Tensor::new(vec![n, ACTOR_IN], x_next)?;
        let a_next = self.actor.infer(&self.target_actor, &x_next)?;
        let mut xa_next = Vec::with_capacity(n * CRITIC_IN);
        for i in 0..n {
            xa_next.extend_from_slice(x_next.row(i));
            xa_next.extend_from_slice(a_next.row(i));
        }
        let q_next = self.critic.infer(&self.target_critic, &Tensor::new(vec![n, CRITIC_IN], xa_next)?)?;
        let gamma = cfg.gamma as f32;
        let targets: Vec<f32> = batch
            .iter()
            .zip(q_next.data())
            .map(|(t, &q)| t.reward + if t.done { 0.0 } else { gamma * q })
            .collect();

        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, CRITIC_IN], x_sa)?);
        let q = self.critic.forward(&self.critic_params, &tape, x)?;
        let loss = tape.mse(q, &targets)?;
        let critic_loss = tape.value(loss)?.item() as f64;
        if !critic_loss.is_finite() {
            return Ok(critic_loss);
        }
        let grads = tape.backward(loss)?;
        let adam = AdamConfig {
            lr: cfg.critic_lr,
            ..AdamConfig::default()
        };
        self.critic_params.adam_step(&grads, &adam)?;

        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, ACTOR_IN], x_now)?);
        let a = self.actor.forward(&self.actor_params, &tape, x)?;
        let xa = tape.concat(x, a)?;
        let q = self.critic.forward(&self.critic_params, &tape, xa)?;
        let loss = tape.scale(tape.sum(tape.batch_mean(q)?)?, -1.0)?;
        let grads = tape.backward(loss)?.retain_prefix("actor.");
        let adam = AdamConfig {
            lr: cfg.actor_lr,
            ..AdamConfig::default()
        };
        self.actor_params.adam_step(&grads, &adam)?;
        self.soft_update(cfg.target_rate)?;
        Ok(critic_loss)
    }

    /// Online actor and critic in one set (names are prefixed `actor.` / `critic.`).
    pub fn online_params(&self) -> ParameterSet<f32> {
        let mut p = self.actor_params.clone();
        for (name, t) in self.critic_params.iter() {
            p.insert(name, t.clone());
        }
        p
    }

    pub fn from_params(params: &ParameterSet<f32>, hidden: &[usize]) -> Result<Self> {
        let mut agent = Agent::new(hidden, &mut substream(0, "unused"));
        for target in [&mut agent.actor_params, &mut agent.critic_params] {
            let names: Vec<String> = target.names().map(str::to_string).collect();
            for name in names {
                let src = params.expect(&name)?;
                if src.shape() != target.expect(&name)?.shape() {
                    return Err(Error::Checkpoint(format!("policy parameter `{name}` has the wrong shape")));
                }
                target.insert(name.clone(), src.clone());
            }
        }
        agent.target_actor = agent.actor_params.clone();
        agent.target_critic = agent.critic_params.clone();
        Ok(agent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub accumulated_reward: f64,
    pub steps: usize,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub agent: Agent,
    pub log: Vec<EpisodeRow>,
    /// Transitions stored, counting hindsight copies.
    pub stored: usize,
}

fn env_action(a: &[f32], v_max: f64) -> [f64; ACTION_DIM] {
    std::array::from_fn(|i| if i < 4 { a[i] as f64 * v_max } else { a[i] as f64 })
}

/// Train a policy for the env's stage. `on_episode` sees every logged row.
pub fn train_ddpg(cfg: &DdpgConfig, env: &mut Env<'_>, mut on_episode: impl FnMut(&EpisodeRow)) -> Result<RlOutcome> {
    cfg.validate()?;
    let mut agent = Agent::new(&cfg.hidden, &mut substream(cfg.seed, "rl/init"));
    let mut env_rng = substream(cfg.seed, "rl/env");
    let mut noise_rng = substream(cfg.seed, "rl/noise");
    let mut batch_rng = substream(cfg.seed, "rl/batch");
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let goal = env.task.goal.clone();
    let v_max = env.cfg.v_max;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut stored = 0usize;

    for episode in 1..=cfg.episodes {
        let mut state = env.reset(env_rng.next_u64())?;
        let mut transitions = Vec::new();
        let (mut ret, mut success) = (0.0, false);
        loop {
            let features = state.features(v_max);
            let action: Vec<f32> = if noise_rng.gen_bool(cfg.random_action_prob) {
                (0..ACTION_DIM).map(|_| noise_rng.gen_range(-1.0f32..=1.0)).collect()
            } else {
                agent
                    .act(&features, &goal)?
                    .into_iter()
                    .map(|a| (a + noise.sample(&mut noise_rng) as f32).clamp(-1.0, 1.0))
                    .collect()
            };
            let out = env.step(&env_action(&action, v_max))?;
            ret += out.reward;
            success |= out.achieved;
            transitions.push(Transition {
                state: features,
                action,
                reward: out.reward as f32,
                next_state: out.state.features(v_max),
                done: out.success,
                goal: goal.clone(),
                achieved: out.state.embedding.clone(),
            });
            state = out.state;
            if out.done {
                break;
            }
        }
        let relabeled = her_final(&transitions, cfg.her_k, env.cfg.norm, env.task.threshold)?;
        stored += transitions.len() + relabeled.len();
        let steps = transitions.len();
        transitions.into_iter().chain(relabeled).for_each(|t| buffer.push(t));

        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.updates_per_episode {
                let batch = buffer.sample(cfg.batch_size, &mut batch_rng);
                let loss = agent.update(&batch, cfg)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: episode,
                        batch: 0,
                        loss,
                        history: log.iter().rev().take(10).map(|r: &EpisodeRow| r.accumulated_reward).collect(),
                    });
                }
            }
        }
        let row = EpisodeRow {
            episode,
            accumulated_reward: ret,
            steps,
            success,
        };
        on_episode(&row);
        log.push(row);
    }
    Ok(RlOutcome { agent, log, stored })
}

/// How actions are chosen during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Agent(&'a Agent),
    Random,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Noise-free rollouts; episode `i` resets with a seed derived from `(seed, i)`.
pub fn evaluate_policy(
    policy: Policy<'_>,
    env_cfg: &EnvConfig,
    task: &Task,
    encoder: &dyn Embedder,
    camera: Camera,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let results = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut env = Env::new(env_cfg.clone(), task.clone(), encoder, camera)?;
            let mut rng = substream(seed, &format!("eval/{i}"));
            let mut state = env.reset(rng.next_u64())?;
            let (mut ret, mut success) = (0.0, false);
            loop {
                let action = match policy {
                    Policy::Agent(agent) => env_action(&agent.act(&state.features(env_cfg.v_max), &task.goal)?, env_cfg.v_max),
                    Policy::Random => {
                        let a: Vec<f32> = (0..ACTION_DIM).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
                        env_action(&a, env_cfg.v_max)
                    }
                    Policy::Oracle => oracle_action(&env),
                };
                let out = env.step(&action)?;
                ret += out.reward;
                success |= out.achieved;
                state = out.state;
                if out.done {
                    break;
                }
            }
            Ok((success, ret))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok(EvalReport {
        episodes,
        success_rate: results.iter().filter(|r| r.0).count() as f64 / n,
        mean_return: results.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

pub fn write_episode_log(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Everything needed to rebuild the environment and agent for evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyMetadata {
    pub kind: String,
    pub ddpg: DdpgConfig,
    pub env: EnvConfig,
    pub task: Task,
    pub encoder: EncoderSource,
    pub dataset: String,
}

pub fn save_policy(path: &Path, agent: &Agent, meta: &PolicyMetadata) -> Result<()> {
    checkpoint::save(path, &agent.online_params(), &serde_json::to_value(meta)?, false)
}

pub fn load_policy(path: &Path) -> Result<(Agent, PolicyMetadata)> {
    let ck = checkpoint::load::<f32>(path)?;
    let meta: PolicyMetadata = serde_json::from_value(ck.metadata)
        .map_err(|e| Error::Checkpoint(format!("not a policy checkpoint: {e}")))?;
    Ok((Agent::from_params(&ck.params, &meta.ddpg.hidden)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_update_endpoints() {
        let mut agent = Agent::new(&[8], &mut substream(1, "a"));
        let before = agent.target_actor.clone();
        let mut shifted = agent.actor_params.clone();
        let names: Vec<String> = shifted.names().map(str::to_string).collect();
        for n in &names {
            shifted.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        agent.actor_params = shifted;
        agent.soft_update(0.0).unwrap();
        assert_eq!(agent.target_actor, before);
        agent.soft_update(1.0).unwrap();
        assert_eq!(agent.target_actor, agent.actor_params);
        assert_eq!(agent.target_critic, agent.critic_params);
    }

    #[test]
    fn policy_params_round_trip() {
        let agent = Agent::new(&[8, 8], &mut substream(2, "a"));
        let back = Agent::from_params(&agent.online_params(), &[8, 8]).unwrap();
        assert_eq!(back.actor_params, agent.actor_params);
        assert_eq!(back.critic_params, agent.critic_params);
    }
}
