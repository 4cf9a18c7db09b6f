//! Residual off-policy RL on top of a frozen behavior-cloned base policy:
//! observation building, replay buffers with symmetric offline/online
//! sampling, offline relabeling, and the soft actor-critic learner.

pub mod bc;
pub mod sac;
pub mod train;

pub use bc::{train_bc, BasePolicy, BcConfig};
pub use sac::{SacAgent, SacConfig, UpdateLosses};
pub use train::{evaluate_policy, train_online, EpisodeRow, OnlineConfig, RunResult};

use crate::error::{CoreError, CoreResult};
use crate::reward::{label_episode, RewardProvider};
use crate::tracks::{EpisodeTracks, PointLabel, TrackFrame};
use crate::worldsim::{EnvKind, EnvState, ObjectState};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Observation layout: gripper (2), grip flag (1), object feature (door
/// angle or fold corner), flattened object-point coordinates (64), base
/// policy action (3).
pub fn obs_width(kind: EnvKind) -> usize {
    match kind {
        EnvKind::HingedDoor => 2 + 1 + 1 + 64 + 3,
        EnvKind::CornerFold => 2 + 1 + 2 + 64 + 3,
    }
}

pub fn rl_observation(
    kind: EnvKind,
    state: &EnvState,
    frame: &TrackFrame,
    base_action: [f64; 3],
) -> Vec<f64> {
    let mut obs = Vec::with_capacity(obs_width(kind));
    obs.push(state.gripper.0);
    obs.push(state.gripper.1);
    obs.push(if state.grip_closed { 1.0 } else { 0.0 });
    match state.object {
        ObjectState::Door { angle } => obs.push(angle),
        ObjectState::Fold { corner, .. } => {
            obs.push(corner.0);
            obs.push(corner.1);
        }
    }
    let mut n = 0;
    for (p, l) in frame.points.iter().zip(&frame.labels) {
        if *l == PointLabel::Object && n < 32 {
            obs.push(p.0);
            obs.push(p.1);
            n += 1;
        }
    }
    while n < 32 {
        obs.push(0.0);
        obs.push(0.0);
        n += 1;
    }
    obs.extend_from_slice(&base_action);
    obs
}

/// Frozen per-dimension input standardization, fitted on a network's
/// training observations and stored with its checkpoint. Position-like
/// features vary on the 0.01 scale while the nets see unit-scale inputs.
#[derive(Debug, Clone)]
pub struct ObsNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl ObsNorm {
    const STD_FLOOR: f64 = 0.02;

    pub fn identity(dim: usize) -> ObsNorm {
        ObsNorm {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    pub fn fit(samples: &[Vec<f64>]) -> CoreResult<ObsNorm> {
        let n = samples.len();
        if n == 0 {
            return Err(CoreError::config("ObsNorm::fit: no samples"));
        }
        let dim = samples[0].len();
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for j in 0..dim {
                var[j] += (s[j] - mean[j]) * (s[j] - mean[j]);
            }
        }
        let inv_std = var
            .iter()
            .map(|v| 1.0 / (v / n as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(ObsNorm { mean, inv_std })
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn apply_batch(&self, obs: &[f64], rows: usize) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for j in 0..dim {
                out.push((obs[r * dim + j] - self.mean[j]) * self.inv_std[j]);
            }
        }
        out
    }

    /// Persist as two rank-1 tensors in a parameter store.
    pub fn store_into(&self, store: &mut crate::numcore::nn::ParamStore, prefix: &str) {
        store.insert(
            format!("{prefix}.mu"),
            crate::numcore::Tensor::new(vec![self.mean.len()], self.mean.clone()).expect("shape"),
        );
        store.insert(
            format!("{prefix}.inv"),
            crate::numcore::Tensor::new(vec![self.inv_std.len()], self.inv_std.clone())
                .expect("shape"),
        );
    }

    pub fn load_from(store: &crate::numcore::nn::ParamStore, prefix: &str) -> CoreResult<ObsNorm> {
        let mu = store
            .get(&format!("{prefix}.mu"))
            .ok_or_else(|| CoreError::config("missing obs normalizer in checkpoint"))?;
        let inv = store
            .get(&format!("{prefix}.inv"))
            .ok_or_else(|| CoreError::config("missing obs normalizer in checkpoint"))?;
        Ok(ObsNorm {
            mean: mu.data.clone(),
            inv_std: inv.data.clone(),
        })
    }
}

/// Combined policy: clip(base + alpha * residual, -1, 1).
pub fn combine_action(base: [f64; 3], residual: [f64; 3], alpha: f64) -> [f64; 3] {
    [
        (base[0] + alpha * residual[0]).clamp(-1.0, 1.0),
        (base[1] + alpha * residual[1]).clamp(-1.0, 1.0),
        (base[2] + alpha * residual[2]).clamp(-1.0, 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionSource {
    Offline,
    Online,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub residual: [f64; 3],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub source: TransitionSource,
}

#[derive(Debug, Default)]
pub struct ReplayBuffer {
    pub items: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        self.items.push(t);
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut ChaCha12Rng) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Symmetric batch: exactly half offline, half online, uniform with
/// replacement within each buffer.
pub fn sample_symmetric<'a>(
    offline: &'a ReplayBuffer,
    online: &'a ReplayBuffer,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> CoreResult<Vec<&'a Transition>> {
    if offline.is_empty() || online.is_empty() {
        return Err(CoreError::config(
            "sample_symmetric: both buffers must be non-empty",
        ));
    }
    let half = batch / 2;
    let mut out = offline.sample(half, rng);
    out.extend(online.sample(batch - half, rng));
    Ok(out)
}

/// Convert demonstrations into offline transitions: the stored action is
/// the clipped residual (a_demo - base(s)) / alpha, rewards come from the
/// provider, and `done` marks success terminals only (timeouts bootstrap).
pub fn relabel_offline(
    kind: EnvKind,
    demos: &[EpisodeTracks],
    base: &BasePolicy,
    provider: &RewardProvider,
    alpha: f64,
    horizon: u32,
    label_seed: u64,
) -> CoreResult<Vec<Transition>> {
    let mut out = Vec::new();
    for (di, demo) in demos.iter().enumerate() {
        let states = demo
            .states
            .as_ref()
            .ok_or_else(|| CoreError::config("relabel_offline: demo without states"))?;
        let actions = demo
            .actions
            .as_ref()
            .ok_or_else(|| CoreError::config("relabel_offline: demo without actions"))?;
        let frames = &demo.seq.frames;
        if states.len() != frames.len() || actions.len() + 1 != frames.len() {
            return Err(CoreError::config(format!(
                "relabel_offline: demo {di} has inconsistent lengths"
            )));
        }
        let rewards = label_episode(
            provider,
            demo,
            horizon,
            crate::predictor::splitmix64(label_seed ^ (di as u64)),
        )?;
        // Per-frame base actions and observations.
        let mut base_actions = Vec::with_capacity(frames.len());
        let mut observations = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let st = crate::worldsim::state_from_features(kind, &states[t], t as u32, horizon)?;
            let ba = base.act(&st, &frames[t]);
            observations.push(rl_observation(kind, &st, &frames[t], ba));
            base_actions.push(ba);
        }
        for t in 0..actions.len() {
            let residual = [
                ((actions[t][0] - base_actions[t][0]) / alpha).clamp(-1.0, 1.0),
                ((actions[t][1] - base_actions[t][1]) / alpha).clamp(-1.0, 1.0),
                ((actions[t][2] - base_actions[t][2]) / alpha).clamp(-1.0, 1.0),
            ];
            out.push(Transition {
                obs: observations[t].clone(),
                residual,
                reward: rewards[t].reward,
                next_obs: observations[t + 1].clone(),
                done: demo.success && t + 1 == actions.len(),
                source: TransitionSource::Offline,
            });
        }
    }
    Ok(out)
}
