//! Soft actor-critic over residual actions.
//!
//! Twin critics with layernorm after every hidden layer; targets take the
//! minimum across critics; the squashed-Gaussian actor uses orthogonal
//! initialization with zero biases; the entropy temperature is tuned
//! toward a fixed target entropy. Target critics track via polyak
//! averaging.

use super::Transition;
use crate::error::{CoreError, CoreResult};
use crate::numcore::init::gaussian;
use crate::numcore::nn::{Linear, Mlp, ParamStore};
use crate::numcore::optim::AdamW;
use crate::numcore::tape::Tape;
use crate::predictor::splitmix64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

const LOG_STD_LO: f64 = -5.0;
const LOG_STD_HI: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const HALF_LN_TAU: f64 = 0.9189385332046727; // 0.5 ln(2 pi)

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub polyak: f64,
    /// Residual action scale in the combined policy.
    pub residual_alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub learning_starts: usize,
    /// Gradient updates per collected environment step.
    pub utd: usize,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub pretrain_steps: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            polyak: 0.005,
            residual_alpha: 0.2,
            lr: 1e-4,
            batch_size: 64,
            learning_starts: 1024,
            utd: 4,
            target_entropy: -3.0,
            init_alpha: 1.0,
            pretrain_steps: 10_000,
            hidden: 256,
            hidden_layers: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
}

struct ActorLayout {
    trunk: Mlp,
    mean: Linear,
    log_std: Linear,
}

pub struct SacAgent {
    pub cfg: SacConfig,
    pub obs_dim: usize,
    pub norm: super::ObsNorm,
    pub actor: ParamStore,
    actor_net: ActorLayout,
    pub critic1: ParamStore,
    pub critic2: ParamStore,
    critic_net: Mlp,
    pub target1: ParamStore,
    pub target2: ParamStore,
    pub log_alpha: f64,
    alpha_m: f64,
    alpha_v: f64,
    alpha_steps: u64,
    opt_actor: AdamW,
    opt_c1: AdamW,
    opt_c2: AdamW,
    pub updates: u64,
    pub pretrain_updates: u64,
}

impl SacAgent {
    pub fn init(obs_dim: usize, cfg: SacConfig, norm: super::ObsNorm) -> CoreResult<SacAgent> {
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5ac));
        let mut actor = ParamStore::new();
        let mut dims = vec![obs_dim];
        for _ in 0..cfg.hidden_layers {
            dims.push(cfg.hidden);
        }
        let trunk = Mlp::orthogonal(
            &mut actor,
            "actor",
            &dims,
            false,
            1.0,
            1.0,
            &mut rng,
        )?;
        let mean = Linear::orthogonal(&mut actor, "actor.mean", cfg.hidden, 3, 1.0, &mut rng)?;
        let log_std = Linear::orthogonal(&mut actor, "actor.lsr", cfg.hidden, 3, 1.0, &mut rng)?;
        norm.store_into(&mut actor, "norm");

        let mut cdims = vec![obs_dim + 3];
        for _ in 0..cfg.hidden_layers {
            cdims.push(cfg.hidden);
        }
        cdims.push(1);
        let mut critic1 = ParamStore::new();
        let critic_net = Mlp::orthogonal(
            &mut critic1,
            "critic",
            &cdims,
            true,
            std::f64::consts::SQRT_2,
            1.0,
            &mut rng,
        )?;
        let mut critic2 = ParamStore::new();
        let _ = Mlp::orthogonal(
            &mut critic2,
            "critic",
            &cdims,
            true,
            std::f64::consts::SQRT_2,
            1.0,
            &mut rng,
        )?;
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        let opt_actor = AdamW::new(&actor, cfg.lr, 0.0);
        let opt_c1 = AdamW::new(&critic1, cfg.lr, 0.0);
        let opt_c2 = AdamW::new(&critic2, cfg.lr, 0.0);
        Ok(SacAgent {
            obs_dim,
            norm,
            log_alpha: cfg.init_alpha.max(1e-12).ln(),
            cfg,
            actor,
            actor_net: ActorLayout {
                trunk,
                mean,
                log_std,
            },
            critic1,
            critic2,
            critic_net,
            target1,
            target2,
            alpha_m: 0.0,
            alpha_v: 0.0,
            alpha_steps: 0,
            opt_actor,
            opt_c1,
            opt_c2,
            updates: 0,
            pretrain_updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn squash_log_std(raw: f64) -> f64 {
        LOG_STD_LO + 0.5 * (LOG_STD_HI - LOG_STD_LO) * (raw.tanh() + 1.0)
    }

    /// Actor heads without a tape: (mean, log_std) rows for a batch of raw
    /// observations.
    fn actor_heads(&self, obs: &[f64], rows: usize) -> CoreResult<(Vec<f64>, Vec<f64>)> {
        let x = self.norm.apply_batch(obs, rows);
        let h = self
            .actor_net
            .trunk
            .forward_nograd(&self.actor, &x, rows)?;
        // Trunk output passes through relu between layers only; its final
        // layer is linear, so apply relu before the heads to match the
        // taped graph below (trunk dims end at the last hidden layer).
        let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let wm = self.actor.at(self.actor_net.mean.w);
        let bm = self.actor.at(self.actor_net.mean.b);
        let wl = self.actor.at(self.actor_net.log_std.w);
        let bl = self.actor.at(self.actor_net.log_std.b);
        let hidden = self.cfg.hidden;
        let mut mean = vec![0.0; rows * 3];
        let mut lsr = vec![0.0; rows * 3];
        crate::numcore::tape::matmul_acc(&h, &wm.data, &mut mean, rows, hidden, 3);
        crate::numcore::tape::matmul_acc(&h, &wl.data, &mut lsr, rows, hidden, 3);
        for r in 0..rows {
            for j in 0..3 {
                mean[r * 3 + j] += bm.data[j];
                lsr[r * 3 + j] += bl.data[j];
            }
        }
        for v in lsr.iter_mut() {
            *v = Self::squash_log_std(*v);
        }
        Ok((mean, lsr))
    }

    /// Sample a residual action with its log-probability.
    pub fn sample_residual(
        &self,
        obs: &[f64],
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<([f64; 3], f64)> {
        let (mean, log_std) = self.actor_heads(obs, 1)?;
        let mut action = [0.0; 3];
        let mut logp = 0.0;
        for j in 0..3 {
            let sigma = log_std[j].exp();
            let xi = gaussian(rng);
            let u = mean[j] + sigma * xi;
            let a = u.tanh();
            action[j] = a;
            logp += -log_std[j] - 0.5 * xi * xi - HALF_LN_TAU - (1.0 - a * a + SQUASH_EPS).ln();
        }
        Ok((action, logp))
    }

    /// Deterministic residual (tanh of the mean head).
    pub fn mean_residual(&self, obs: &[f64]) -> CoreResult<[f64; 3]> {
        let (mean, _) = self.actor_heads(obs, 1)?;
        Ok([mean[0].tanh(), mean[1].tanh(), mean[2].tanh()])
    }

    /// Critic value without gradients (current or target parameters).
    fn critic_value(&self, params: &ParamStore, obs_action: &[f64], rows: usize) -> CoreResult<Vec<f64>> {
        self.critic_net.forward_nograd(params, obs_action, rows)
    }

    /// Bootstrapped critic targets: r + gamma (1 - done) (min_i Q'_i(s', a')
    /// - alpha log pi(a'|s')), with a' freshly sampled from the actor.
    pub fn critic_targets(
        &self,
        batch: &[&Transition],
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<Vec<f64>> {
        let rows = batch.len();
        let obs_dim = self.obs_dim;
        let mut next_obs = Vec::with_capacity(rows * obs_dim);
        for t in batch {
            next_obs.extend_from_slice(&t.next_obs);
        }
        let (mean, log_std) = self.actor_heads(&next_obs, rows)?;
        let next_norm = self.norm.apply_batch(&next_obs, rows);
        let mut next_in = Vec::with_capacity(rows * (obs_dim + 3));
        let mut logp = vec![0.0; rows];
        for r in 0..rows {
            next_in.extend_from_slice(&next_norm[r * obs_dim..(r + 1) * obs_dim]);
            for j in 0..3 {
                let sigma = log_std[r * 3 + j].exp();
                let xi = gaussian(rng);
                let u = mean[r * 3 + j] + sigma * xi;
                let a = u.tanh();
                next_in.push(a);
                logp[r] += -log_std[r * 3 + j]
                    - 0.5 * xi * xi
                    - HALF_LN_TAU
                    - (1.0 - a * a + SQUASH_EPS).ln();
            }
        }
        let q1 = self.critic_value(&self.target1, &next_in, rows)?;
        let q2 = self.critic_value(&self.target2, &next_in, rows)?;
        let alpha = self.alpha();
        let mut y = Vec::with_capacity(rows);
        for r in 0..rows {
            let minq = q1[r].min(q2[r]);
            let cont = if batch[r].done { 0.0 } else { 1.0 };
            y.push(batch[r].reward + self.cfg.gamma * cont * (minq - alpha * logp[r]));
        }
        Ok(y)
    }

    fn critic_step(
        &mut self,
        batch: &[&Transition],
        targets: &[f64],
    ) -> CoreResult<f64> {
        let rows = batch.len();
        let in_dim = self.obs_dim + 3;
        let mut x = Vec::with_capacity(rows * in_dim);
        for t in batch {
            x.extend_from_slice(&self.norm.apply(&t.obs));
            x.extend_from_slice(&t.residual);
        }
        let mut tape = Tape::new();
        let ids1 = self.critic1.register(&mut tape);
        let ids2 = self.critic2.register(&mut tape);
        let xin = tape.leaf(rows, in_dim, &x, false);
        let y = tape.leaf(rows, 1, targets, false);
        let q1 = self.critic_net.forward(&mut tape, &ids1, xin)?;
        let q2 = self.critic_net.forward(&mut tape, &ids2, xin)?;
        let l1 = tape.mse(q1, y)?;
        let l2 = tape.mse(q2, y)?;
        let sum = tape.add(l1, l2)?;
        let loss = tape.scale(sum, 0.5)?;
        let loss_v = tape.scalar_value(loss);
        let grads = tape.backward(loss)?;
        let g1 = self.critic1.grads(&ids1, &grads);
        let g2 = self.critic2.grads(&ids2, &grads);
        self.opt_c1.step(&mut self.critic1, &g1)?;
        self.opt_c2.step(&mut self.critic2, &g2)?;
        Ok(loss_v)
    }

    /// Actor loss graph: mean(alpha * log pi(a|s) - min_i Q_i(s, a)) with
    /// a reparameterized through tanh(mean + sigma * xi) and critics
    /// frozen. Returns (tape, actor leaf ids, logp node, loss node).
    fn build_actor_graph(
        &self,
        batch: &[&Transition],
        xi: &[f64],
        actor_grads: bool,
    ) -> CoreResult<(Tape, Vec<crate::numcore::tape::VarId>, crate::numcore::tape::VarId, crate::numcore::tape::VarId)> {
        let rows = batch.len();
        let obs_dim = self.obs_dim;
        let mut x = Vec::with_capacity(rows * obs_dim);
        for t in batch {
            x.extend_from_slice(&self.norm.apply(&t.obs));
        }

        let mut tape = Tape::new();
        let aids = if actor_grads {
            self.actor.register(&mut tape)
        } else {
            self.actor.register_frozen(&mut tape)
        };
        let c1ids = self.critic1.register_frozen(&mut tape);
        let c2ids = self.critic2.register_frozen(&mut tape);
        let xin = tape.leaf(rows, obs_dim, &x, false);
        let h = self.actor_net.trunk.forward(&mut tape, &aids, xin)?;
        let h = tape.relu(h)?;
        let mean = self.actor_net.mean.forward(&mut tape, &aids, h)?;
        let lsr = self.actor_net.log_std.forward(&mut tape, &aids, h)?;
        // log_std = LO + (HI - LO)/2 (tanh(raw) + 1)
        let t = tape.tanh(lsr)?;
        let scaled = tape.scale(t, 0.5 * (LOG_STD_HI - LOG_STD_LO))?;
        let mid = tape.leaf(1, 3, &[0.5 * (LOG_STD_HI + LOG_STD_LO); 3], false);
        let log_std = tape.add(scaled, mid)?;
        let sigma = tape.exp(log_std)?;
        let xi_leaf = tape.leaf(rows, 3, xi, false);
        let noise = tape.mul(sigma, xi_leaf)?;
        let u = tape.add(mean, noise)?;
        let a = tape.tanh(u)?;
        // log pi = sum_j [ -log_std - xi^2/2 - ln sqrt(2 pi) - ln(1 - a^2 + eps) ]
        let const_terms: Vec<f64> = xi
            .iter()
            .map(|v| -0.5 * v * v - HALF_LN_TAU)
            .collect();
        let consts = tape.leaf(rows, 3, &const_terms, false);
        let neg_log_std = tape.scale(log_std, -1.0)?;
        let a2 = tape.mul(a, a)?;
        let neg_a2 = tape.scale(a2, -1.0)?;
        let ones = tape.leaf(rows, 3, &vec![1.0 + SQUASH_EPS; rows * 3], false);
        let one_minus = tape.add(neg_a2, ones)?;
        let ln_jac = tape.log(one_minus)?;
        let neg_jac = tape.scale(ln_jac, -1.0)?;
        let s1 = tape.add(neg_log_std, consts)?;
        let s2 = tape.add(s1, neg_jac)?;
        let logp = tape.sum_last(s2)?;

        let qin = tape.concat(&[xin, a])?;
        let q1 = self.critic_net.forward(&mut tape, &c1ids, qin)?;
        let q2 = self.critic_net.forward(&mut tape, &c2ids, qin)?;
        // min(q1, q2) = q1 - relu(q1 - q2)
        let nq2 = tape.scale(q2, -1.0)?;
        let diff = tape.add(q1, nq2)?;
        let rd = tape.relu(diff)?;
        let nrd = tape.scale(rd, -1.0)?;
        let minq = tape.add(q1, nrd)?;

        let ent = tape.scale(logp, self.alpha())?;
        let nminq = tape.scale(minq, -1.0)?;
        let obj = tape.add(ent, nminq)?;
        let loss = tape.mean_all(obj)?;
        Ok((tape, aids, logp, loss))
    }

    fn actor_step(&mut self, batch: &[&Transition], rng: &mut ChaCha12Rng) -> CoreResult<(f64, f64)> {
        let mut xi = Vec::with_capacity(batch.len() * 3);
        for _ in 0..batch.len() * 3 {
            xi.push(gaussian(rng));
        }
        let (tape, aids, logp, loss) = self.build_actor_graph(batch, &xi, true)?;
        let loss_v = tape.scalar_value(loss);
        let mean_logp = tape.value(logp).iter().sum::<f64>() / batch.len() as f64;
        let grads = tape.backward(loss)?;
        let g = self.actor.grads(&aids, &grads);
        self.opt_actor.step(&mut self.actor, &g)?;
        Ok((loss_v, mean_logp))
    }

    /// Loss value for a fixed noise draw (finite-difference audits).
    pub fn actor_loss_value(&self, batch: &[&Transition], xi: &[f64]) -> CoreResult<f64> {
        let (tape, _, _, loss) = self.build_actor_graph(batch, xi, false)?;
        Ok(tape.scalar_value(loss))
    }

    /// Analytic actor gradients for a fixed noise draw.
    pub fn actor_loss_grads(
        &self,
        batch: &[&Transition],
        xi: &[f64],
    ) -> CoreResult<Vec<Option<Vec<f64>>>> {
        let (tape, aids, _, loss) = self.build_actor_graph(batch, xi, true)?;
        let grads = tape.backward(loss)?;
        Ok(self.actor.grads(&aids, &grads))
    }

    fn alpha_step(&mut self, mean_logp: f64) {
        // d/d(log alpha) of -log_alpha * (logp + target_entropy).
        let grad = -(mean_logp + self.cfg.target_entropy);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.alpha_steps += 1;
        self.alpha_m = b1 * self.alpha_m + (1.0 - b1) * grad;
        self.alpha_v = b2 * self.alpha_v + (1.0 - b2) * grad * grad;
        let mh = self.alpha_m / (1.0 - b1_pow(b1, self.alpha_steps));
        let vh = self.alpha_v / (1.0 - b1_pow(b2, self.alpha_steps));
        self.log_alpha -= self.cfg.lr * mh / (vh.sqrt() + eps);
    }

    fn polyak_targets(&mut self) {
        let tau = self.cfg.polyak;
        self.target1.polyak_from(&self.critic1, tau);
        self.target2.polyak_from(&self.critic2, tau);
    }

    /// Per-phase wall times of one update, for performance diagnosis.
    #[doc(hidden)]
    pub fn update_profiled(
        &mut self,
        batch: &[&Transition],
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<[f64; 4]> {
        let t0 = std::time::Instant::now();
        let targets = self.critic_targets(batch, rng)?;
        let t1 = std::time::Instant::now();
        let _ = self.critic_step(batch, &targets)?;
        let t2 = std::time::Instant::now();
        let (_, mean_logp) = self.actor_step(batch, rng)?;
        let t3 = std::time::Instant::now();
        self.alpha_step(mean_logp);
        self.polyak_targets();
        self.updates += 1;
        let t4 = std::time::Instant::now();
        Ok([
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t4 - t3).as_secs_f64(),
        ])
    }

    /// One full SAC update on a batch.
    pub fn update(&mut self, batch: &[&Transition], rng: &mut ChaCha12Rng) -> CoreResult<UpdateLosses> {
        let targets = self.critic_targets(batch, rng)?;
        let critic = self.critic_step(batch, &targets)?;
        let (actor, mean_logp) = self.actor_step(batch, rng)?;
        self.alpha_step(mean_logp);
        self.polyak_targets();
        self.updates += 1;
        if !critic.is_finite() || !actor.is_finite() {
            return Err(CoreError::numeric("sac.update", "non-finite loss"));
        }
        Ok(UpdateLosses {
            critic,
            actor,
            alpha: self.alpha(),
        })
    }

    /// Critic-only updates on offline batches; the actor and temperature
    /// stay frozen (targets still sample a' from the frozen actor).
    /// Returns (first loss, last loss).
    pub fn pretrain_critic(
        &mut self,
        offline: &super::ReplayBuffer,
        steps: usize,
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<(f64, f64)> {
        if offline.is_empty() {
            return Err(CoreError::config("pretrain_critic: empty offline buffer"));
        }
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for i in 0..steps {
            let batch = offline.sample(self.cfg.batch_size, rng);
            let targets = self.critic_targets(&batch, rng)?;
            let loss = self.critic_step(&batch, &targets)?;
            self.polyak_targets();
            self.pretrain_updates += 1;
            if i == 0 {
                first = loss;
            }
            last = loss;
        }
        Ok((first, last))
    }
}

fn b1_pow(b: f64, steps: u64) -> f64 {
    b.powi(steps.min(i32::MAX as u64) as i32)
}

/// Finite-difference audit of the full critic and actor loss graphs:
/// random agents and batches, analytic gradients versus central
/// differences on sampled parameter coordinates. Returns the worst
/// relative error per loss, for the numeric acceptance checks.
pub fn fd_audit(
    obs_dim: usize,
    seeds: std::ops::Range<u64>,
    coords_per_seed: usize,
) -> CoreResult<(f64, f64)> {
    let mut worst_critic: f64 = 0.0;
    let mut worst_actor: f64 = 0.0;
    for seed in seeds {
        let cfg = SacConfig {
            hidden: 16,
            hidden_layers: 2,
            seed,
            ..Default::default()
        };
        let mut agent = SacAgent::init(obs_dim, cfg, super::ObsNorm::identity(obs_dim))?;
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0xfd));
        let rows = 4;
        let mk = |rng: &mut ChaCha12Rng| {
            use rand::Rng;
            Transition {
                obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                residual: [
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                ],
                reward: rng.random_range(-1.0..0.0),
                next_obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: rng.random_range(0..4) == 0,
                source: super::TransitionSource::Offline,
            }
        };
        let owned: Vec<Transition> = (0..rows).map(|_| mk(&mut rng)).collect();
        let batch: Vec<&Transition> = owned.iter().collect();
        let targets: Vec<f64> = (0..rows).map(|_| -2.0).collect();
        let xi: Vec<f64> = (0..rows * 3).map(|_| gaussian(&mut rng)).collect();

        // Critic loss: analytic grads for both critics.
        let critic_loss = |agent: &SacAgent| -> CoreResult<f64> {
            let mut x = Vec::new();
            for t in &batch {
                x.extend_from_slice(&agent.norm.apply(&t.obs));
                x.extend_from_slice(&t.residual);
            }
            let mut tape = Tape::new();
            let ids1 = agent.critic1.register_frozen(&mut tape);
            let ids2 = agent.critic2.register_frozen(&mut tape);
            let xin = tape.leaf(rows, obs_dim + 3, &x, false);
            let y = tape.leaf(rows, 1, &targets, false);
            let q1 = agent.critic_net.forward(&mut tape, &ids1, xin)?;
            let q2 = agent.critic_net.forward(&mut tape, &ids2, xin)?;
            let l1 = tape.mse(q1, y)?;
            let l2 = tape.mse(q2, y)?;
            let s = tape.add(l1, l2)?;
            let l = tape.scale(s, 0.5)?;
            Ok(tape.scalar_value(l))
        };
        let critic_grads = {
            let mut x = Vec::new();
            for t in &batch {
                x.extend_from_slice(&agent.norm.apply(&t.obs));
                x.extend_from_slice(&t.residual);
            }
            let mut tape = Tape::new();
            let ids1 = agent.critic1.register(&mut tape);
            let xin = tape.leaf(rows, obs_dim + 3, &x, false);
            let y = tape.leaf(rows, 1, &targets, false);
            let q1 = agent.critic_net.forward(&mut tape, &ids1, xin)?;
            let l1 = tape.mse(q1, y)?;
            let l = tape.scale(l1, 0.5)?;
            let grads = tape.backward(l)?;
            agent.critic1.grads(&ids1, &grads)
        };
        use rand::Rng;
        for _ in 0..coords_per_seed {
            let pi = rng.random_range(0..agent.critic1.len());
            let n = agent.critic1.at(pi).numel();
            let ci = rng.random_range(0..n);
            let an = critic_grads[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
            let h = 1e-5;
            let orig = agent.critic1.at(pi).data[ci];
            agent.critic1.at_mut(pi).data[ci] = orig + h;
            let fp = critic_loss(&agent)?;
            agent.critic1.at_mut(pi).data[ci] = orig - h;
            let fm = critic_loss(&agent)?;
            agent.critic1.at_mut(pi).data[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst_critic = worst_critic.max(rel);
        }

        // Actor loss with critics frozen.
        let actor_loss = |agent: &SacAgent| -> CoreResult<f64> {
            agent.actor_loss_value(&batch, &xi)
        };
        let actor_grads = agent.actor_loss_grads(&batch, &xi)?;
        for _ in 0..coords_per_seed {
            let pi = rng.random_range(0..agent.actor.len());
            let n = agent.actor.at(pi).numel();
            let ci = rng.random_range(0..n);
            let an = actor_grads[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
            let h = 1e-5;
            let orig = agent.actor.at(pi).data[ci];
            agent.actor.at_mut(pi).data[ci] = orig + h;
            let fp = actor_loss(&agent)?;
            agent.actor.at_mut(pi).data[ci] = orig - h;
            let fm = actor_loss(&agent)?;
            agent.actor.at_mut(pi).data[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst_actor = worst_actor.max(rel);
        }
    }
    Ok((worst_critic, worst_actor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::TransitionSource;

    fn mk_transition(obs_dim: usize, reward: f64, done: bool) -> Transition {
        Transition {
            obs: vec![0.1; obs_dim],
            residual: [0.0, 0.1, -0.1],
            reward,
            next_obs: vec![0.2; obs_dim],
            done,
            source: TransitionSource::Offline,
        }
    }

    fn zeroed_critics_with_bias(agent: &mut SacAgent, b1: f64, b2: f64) {
        // Zero every critic weight and set the output bias, making
        // Q1 = b1 and Q2 = b2 identically.
        for store in [&mut agent.critic1, &mut agent.critic2] {
            for t in store.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        // Layernorm gammas were zeroed too; that's fine, outputs stay 0.
        let n = agent.critic1.len();
        agent.critic1.at_mut(n - 1).data[0] = b1;
        agent.critic2.at_mut(n - 1).data[0] = b2;
        agent.target1 = agent.critic1.clone();
        agent.target2 = agent.critic2.clone();
    }

    #[test]
    fn zero_gamma_target_is_reward() {
        let cfg = SacConfig {
            gamma: 0.0,
            seed: 3,
            ..Default::default()
        };
        let mut agent = SacAgent::init(8, cfg, crate::rl::ObsNorm::identity(8)).unwrap();
        zeroed_critics_with_bias(&mut agent, 5.0, 4.0);
        let t = mk_transition(8, -1.0, false);
        let batch = vec![&t];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let y = agent.critic_targets(&batch, &mut rng).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_uses_min_over_critics() {
        // alpha ~ 0 so the entropy term vanishes; gamma = 1, r = 0:
        // y = min(Q1, Q2) = 1.5.
        let cfg = SacConfig {
            gamma: 1.0,
            init_alpha: 1e-300,
            seed: 4,
            ..Default::default()
        };
        let mut agent = SacAgent::init(8, cfg, crate::rl::ObsNorm::identity(8)).unwrap();
        zeroed_critics_with_bias(&mut agent, 2.0, 1.5);
        let t = mk_transition(8, 0.0, false);
        let batch = vec![&t];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y = agent.critic_targets(&batch, &mut rng).unwrap();
        assert!((y[0] - 1.5).abs() < 1e-9, "target {}", y[0]);
    }

    #[test]
    fn terminal_transition_target_is_reward() {
        let cfg = SacConfig {
            gamma: 0.99,
            seed: 5,
            ..Default::default()
        };
        let mut agent = SacAgent::init(8, cfg, crate::rl::ObsNorm::identity(8)).unwrap();
        zeroed_critics_with_bias(&mut agent, 7.0, 7.0);
        let t = mk_transition(8, -0.25, true);
        let batch = vec![&t];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let y = agent.critic_targets(&batch, &mut rng).unwrap();
        assert!((y[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn polyak_tracking_converges_under_frozen_critics() {
        let mut agent = SacAgent::init(8, SacConfig::default(), crate::rl::ObsNorm::identity(8)).unwrap();
        // Perturb targets away from critics, then track.
        for t in agent.target1.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += 0.5;
            }
        }
        let mut prev = agent.target1.l2_distance(&agent.critic1);
        for _ in 0..20 {
            agent.polyak_targets();
            let d = agent.target1.l2_distance(&agent.critic1);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn pretraining_freezes_actor_and_counts_steps() {
        let mut agent = SacAgent::init(8, SacConfig { seed: 6, ..Default::default() }, crate::rl::ObsNorm::identity(8)).unwrap();
        let actor_before = agent.actor.clone();
        let mut offline = super::super::ReplayBuffer::new();
        for i in 0..20 {
            offline.push(mk_transition(8, -0.5 - 0.01 * i as f64, i % 7 == 0));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (first, last) = agent.pretrain_critic(&offline, 50, &mut rng).unwrap();
        assert_eq!(agent.pretrain_updates, 50);
        assert!(agent.actor.bit_identical(&actor_before));
        assert!(first.is_finite() && last.is_finite());
    }

    #[test]
    fn updates_reduce_critic_loss_on_fixed_rewards() {
        let cfg = SacConfig {
            seed: 7,
            lr: 3e-4,
            ..Default::default()
        };
        let mut agent = SacAgent::init(8, cfg, crate::rl::ObsNorm::identity(8)).unwrap();
        let mut offline = super::super::ReplayBuffer::new();
        for _ in 0..40 {
            offline.push(mk_transition(8, -1.0, false));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (first, last) = agent.pretrain_critic(&offline, 400, &mut rng).unwrap();
        assert!(
            last < first,
            "critic loss should fall: first {first}, last {last}"
        );
    }

    #[test]
    fn sampled_actions_are_bounded_and_deterministic_per_seed() {
        let agent = SacAgent::init(8, SacConfig { seed: 8, ..Default::default() }, crate::rl::ObsNorm::identity(8)).unwrap();
        let obs = vec![0.3; 8];
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let (a1, lp1) = agent.sample_residual(&obs, &mut r1).unwrap();
        let (a2, lp2) = agent.sample_residual(&obs, &mut r2).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(lp1, lp2);
        assert!(a1.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[cfg(test)]
mod fd_tests {
    use super::*;

    #[test]
    fn actor_and_critic_losses_pass_finite_difference_audit() {
        let (critic, actor) = fd_audit(10, 0..5, 4).unwrap();
        assert!(critic < 1e-3, "critic fd rel err {critic}");
        assert!(actor < 1e-3, "actor fd rel err {actor}");
    }
}
