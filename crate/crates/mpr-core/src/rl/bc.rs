//! Behavior cloning: MSE regression of demo actions on observations.

use super::{obs_width, rl_observation};
use crate::error::{CoreError, CoreResult};
use crate::numcore::nn::{Mlp, ParamStore};
use crate::numcore::optim::AdamW;
use crate::numcore::tape::Tape;
use crate::predictor::splitmix64;
use crate::tracks::{EpisodeTracks, TrackFrame};
use crate::worldsim::{state_from_features, EnvKind, EnvState, HORIZON};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Frozen deterministic policy: 3x256 MLP with tanh-squashed output over
/// standardized observations. The observation's base-action slot is zeroed
/// for this network.
#[derive(Clone)]
pub struct BasePolicy {
    pub kind: EnvKind,
    pub params: ParamStore,
    pub norm: super::ObsNorm,
    net: Mlp,
    pub frozen: bool,
}

impl BasePolicy {
    pub fn init(kind: EnvKind, norm: super::ObsNorm, rng: &mut ChaCha12Rng) -> CoreResult<BasePolicy> {
        let mut params = ParamStore::new();
        let net = Mlp::orthogonal(
            &mut params,
            "bc",
            &[obs_width(kind), 256, 256, 256, 3],
            false,
            std::f64::consts::SQRT_2,
            1.0,
            rng,
        )?;
        norm.store_into(&mut params, "norm");
        Ok(BasePolicy {
            kind,
            params,
            norm,
            net,
            frozen: false,
        })
    }

    pub fn from_store(kind: EnvKind, store: ParamStore) -> CoreResult<BasePolicy> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let fresh = BasePolicy::init(kind, super::ObsNorm::identity(obs_width(kind)), &mut rng)?;
        if fresh.params.len() != store.len() {
            return Err(CoreError::config("base policy checkpoint layout mismatch"));
        }
        let norm = super::ObsNorm::load_from(&store, "norm")?;
        Ok(BasePolicy {
            kind,
            params: store,
            norm,
            net: fresh.net,
            frozen: true,
        })
    }

    pub fn act(&self, state: &EnvState, frame: &TrackFrame) -> [f64; 3] {
        let obs = rl_observation(self.kind, state, frame, [0.0; 3]);
        let x = self.norm.apply(&obs);
        let out = self
            .net
            .forward_nograd(&self.params, &x, 1)
            .expect("base policy forward");
        [out[0].tanh(), out[1].tanh(), out[2].tanh()]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 1200,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train on the first `n_demos` demonstrations and freeze. Returns the
/// policy and its final training MSE.
pub fn train_bc(
    kind: EnvKind,
    demos: &[EpisodeTracks],
    n_demos: usize,
    cfg: &BcConfig,
) -> CoreResult<(BasePolicy, f64)> {
    if n_demos > demos.len() {
        return Err(CoreError::config(format!(
            "train_bc: requested {n_demos} demos, only {} available",
            demos.len()
        )));
    }
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<[f64; 3]> = Vec::new();
    for demo in &demos[..n_demos] {
        let states = demo
            .states
            .as_ref()
            .ok_or_else(|| CoreError::config("train_bc: demo without states"))?;
        let actions = demo
            .actions
            .as_ref()
            .ok_or_else(|| CoreError::config("train_bc: demo without actions"))?;
        for t in 0..actions.len() {
            let st = state_from_features(kind, &states[t], t as u32, HORIZON)?;
            xs.push(rl_observation(kind, &st, &demo.seq.frames[t], [0.0; 3]));
            ys.push(actions[t]);
        }
    }
    if xs.is_empty() {
        return Err(CoreError::config("train_bc: no transitions in demos"));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xbc));
    let norm = super::ObsNorm::fit(&xs)?;
    let normed: Vec<Vec<f64>> = xs.iter().map(|x| norm.apply(x)).collect();
    let mut policy = BasePolicy::init(kind, norm, &mut rng)?;
    let mut opt = AdamW::new(&policy.params, cfg.lr, 0.0);
    let width = obs_width(kind);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut last_mse = f64::INFINITY;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let mut x = Vec::with_capacity(rows * width);
            let mut y = Vec::with_capacity(rows * 3);
            for &i in chunk {
                x.extend_from_slice(&normed[i]);
                y.extend_from_slice(&ys[i]);
            }
            let mut tape = Tape::new();
            let ids = policy.params.register(&mut tape);
            let xin = tape.leaf(rows, width, &x, false);
            let out = policy.net.forward(&mut tape, &ids, xin)?;
            let squashed = tape.tanh(out)?;
            let target = tape.leaf(rows, 3, &y, false);
            let loss = tape.mse(squashed, target)?;
            total += tape.scalar_value(loss) * rows as f64;
            let grads = tape.backward(loss)?;
            let g = policy.params.grads(&ids, &grads);
            opt.step(&mut policy.params, &g)?;
        }
        last_mse = total / xs.len() as f64;
    }
    policy.frozen = true;
    Ok((policy, last_mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{generate_corpus, CorpusSpec, Embodiment};

    #[test]
    fn bc_fits_a_small_demo_set() {
        let spec = CorpusSpec {
            env_id: EnvKind::HingedDoor,
            n_episodes: 3,
            hesitation_prob: 0.0,
            pause_length_range: [0, 0],
            camera_jitter_std: 0.0,
            expert_noise_std: 0.05,
            embodiment: Embodiment::Robot,
            seed: 4,
           vary_style: false,
        };
        let demos = generate_corpus(&spec).unwrap();
        let cfg = BcConfig {
            epochs: 300,
            ..Default::default()
        };
        let (policy, mse) = train_bc(EnvKind::HingedDoor, &demos, 3, &cfg).unwrap();
        assert!(policy.frozen);
        assert!(mse < 0.05, "training MSE {mse} should drop below 0.05");
    }

    #[test]
    fn bc_rejects_missing_demos() {
        let err = train_bc(EnvKind::HingedDoor, &[], 5, &BcConfig::default());
        assert!(matches!(err, Err(CoreError::Config(_))));
    }
}
