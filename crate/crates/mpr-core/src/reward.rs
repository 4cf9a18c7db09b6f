//! Per-transition reward providers.
//!
//! The motion-alignment reward scores a learner's observed point motion
//! against the predictor's output: mean clamped cosine similarity over
//! contributing slots, shifted by -1 into [-1, 0] so that idling is
//! penalized and finishing the episode is attractive. Three comparison
//! providers share the same per-transition interface: a temporal-distance
//! value baseline (potential differences of a frames-to-go regressor), a
//! sparse success reward, and a privileged dense-progress reward.

use crate::error::{CoreError, CoreResult};
use crate::numcore::nn::{Mlp, ParamStore};
use crate::numcore::optim::AdamW;
use crate::numcore::tape::Tape;
use crate::predictor::{predict_episode, splitmix64, PredictorModel};
use crate::tracks::{EpisodeTracks, MixtureBatchItem, PointLabel, TrackFrame};
use crate::worldsim::{EnvKind, DOOR_SUCCESS_ANGLE, FOLD_FIXED_CORNER, FOLD_START_CORNER};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Slots where either motion norm falls below this contribute zero.
pub const EPS_MOTION: f64 = 1e-4;
/// Per-step cost of the privileged dense reward.
const DENSE_STEP_COST: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mpr,
    TemporalDistance,
    Sparse,
    PrivilegedDense,
}

impl ProviderKind {
    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "mpr" => Ok(ProviderKind::Mpr),
            "temporal_distance" => Ok(ProviderKind::TemporalDistance),
            "sparse" => Ok(ProviderKind::Sparse),
            "privileged_dense" => Ok(ProviderKind::PrivilegedDense),
            other => Err(CoreError::config(format!("unknown provider `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ProviderKind::Mpr => "mpr",
            ProviderKind::TemporalDistance => "temporal_distance",
            ProviderKind::Sparse => "sparse",
            ProviderKind::PrivilegedDense => "privileged_dense",
        }
    }
}

/// One labeled transition.
#[derive(Debug, Clone, Copy)]
pub struct RewardStep {
    pub t: usize,
    /// The reward handed to the learner.
    pub reward: f64,
    /// Pre-shift value for motion alignment (equals `reward` elsewhere).
    pub raw: f64,
    /// No slot contributed (zero motion everywhere or a resample boundary).
    pub degenerate: bool,
}

#[derive(Clone)]
pub enum RewardProvider {
    Mpr {
        model: PredictorModel,
        eps_motion: f64,
        use_masks: bool,
    },
    TemporalDistance {
        net: ValueNet,
    },
    Sparse,
    PrivilegedDense {
        kind: EnvKind,
    },
}

impl RewardProvider {
    pub fn kind(&self) -> ProviderKind {
        match self {
            RewardProvider::Mpr { .. } => ProviderKind::Mpr,
            RewardProvider::TemporalDistance { .. } => ProviderKind::TemporalDistance,
            RewardProvider::Sparse => ProviderKind::Sparse,
            RewardProvider::PrivilegedDense { .. } => ProviderKind::PrivilegedDense,
        }
    }
}

// ── Motion-alignment reward ──────────────────────────────────────────

/// Mean clamped cosine similarity between predicted and tracked deltas,
/// over contributing slots, shifted by -1. Returns (reward, raw, degenerate).
///
/// Contributing slots are non-pad (object-labeled only when `use_masks`).
/// A contributing slot whose predicted or tracked norm is below
/// `eps_motion` adds zero. With no contributing slots at all the reward is
/// -1 and the transition is flagged degenerate.
pub fn mpr_reward(
    predicted: &[(f64, f64)],
    tracked: &[(f64, f64)],
    labels: &[PointLabel],
    pad_mask: &[bool],
    use_masks: bool,
    eps_motion: f64,
) -> (f64, f64, bool) {
    debug_assert_eq!(predicted.len(), tracked.len());
    let mut n = 0usize;
    let mut sum = 0.0;
    for i in 0..predicted.len() {
        if pad_mask[i] || (use_masks && labels[i] != PointLabel::Object) {
            continue;
        }
        n += 1;
        let p = predicted[i];
        let q = tracked[i];
        let np = (p.0 * p.0 + p.1 * p.1).sqrt();
        let nq = (q.0 * q.0 + q.1 * q.1).sqrt();
        if np < eps_motion || nq < eps_motion {
            continue;
        }
        let cosine = (p.0 * q.0 + p.1 * q.1) / (np * nq);
        sum += cosine.max(0.0);
    }
    if n == 0 {
        return (-1.0, 0.0, true);
    }
    let raw = sum / n as f64;
    (raw - 1.0, raw, false)
}

fn mpr_step(
    model_item: &MixtureBatchItem,
    predicted_points: &[(f64, f64)],
    use_masks: bool,
    eps_motion: f64,
    t: usize,
) -> RewardStep {
    let pred_deltas: Vec<(f64, f64)> = predicted_points
        .iter()
        .zip(&model_item.current_points)
        .map(|(p, c)| (p.0 - c.0, p.1 - c.1))
        .collect();
    let track_deltas: Vec<(f64, f64)> = model_item
        .target_points
        .iter()
        .zip(&model_item.current_points)
        .map(|(p, c)| (p.0 - c.0, p.1 - c.1))
        .collect();
    let (reward, raw, degenerate) = mpr_reward(
        &pred_deltas,
        &track_deltas,
        &model_item.labels,
        &model_item.pad_mask,
        use_masks,
        eps_motion,
    );
    RewardStep {
        t,
        reward,
        raw,
        degenerate,
    }
}

// ── Temporal-distance value baseline ─────────────────────────────────

/// Observation features: flattened object-point coordinates (32 x 2) plus
/// the mean agent position.
pub const VALUE_FEATURES: usize = 66;

#[derive(Clone)]
pub struct ValueNet {
    pub params: ParamStore,
    net: Mlp,
}

impl ValueNet {
    pub fn init(rng: &mut ChaCha12Rng) -> CoreResult<ValueNet> {
        let mut params = ParamStore::new();
        let net = Mlp::orthogonal(
            &mut params,
            "value",
            &[VALUE_FEATURES, 256, 256, 256, 1],
            false,
            std::f64::consts::SQRT_2,
            1.0,
            rng,
        )?;
        Ok(ValueNet { params, net })
    }

    pub fn from_store(store: ParamStore) -> CoreResult<ValueNet> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let fresh = ValueNet::init(&mut rng)?;
        if fresh.params.len() != store.len() {
            return Err(CoreError::config("value checkpoint layout mismatch"));
        }
        Ok(ValueNet {
            net: fresh.net,
            params: store,
        })
    }

    /// Track-derived observation features for one frame.
    pub fn features(frame: &TrackFrame) -> Vec<f64> {
        let mut object = Vec::with_capacity(VALUE_FEATURES);
        let mut agent = (0.0, 0.0);
        let mut n_agent = 0usize;
        for (p, l) in frame.points.iter().zip(&frame.labels) {
            match l {
                PointLabel::Object => {
                    if object.len() < 64 {
                        object.push(p.0);
                        object.push(p.1);
                    }
                }
                PointLabel::Agent => {
                    agent.0 += p.0;
                    agent.1 += p.1;
                    n_agent += 1;
                }
                PointLabel::Background => {}
            }
        }
        while object.len() < 64 {
            object.push(0.0);
        }
        if n_agent > 0 {
            agent.0 /= n_agent as f64;
            agent.1 /= n_agent as f64;
        }
        object.push(agent.0);
        object.push(agent.1);
        object
    }

    pub fn value(&self, frame: &TrackFrame) -> CoreResult<f64> {
        let feats = Self::features(frame);
        let out = self.net.forward_nograd(&self.params, &feats, 1)?;
        Ok(out[0])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for TemporalTrainConfig {
    fn default() -> Self {
        TemporalTrainConfig {
            epochs: 120,
            batch_size: 64,
            lr: 1e-3,
            val_ratio: 0.1,
            seed: 0,
        }
    }
}

/// Regress V(o_t) onto the normalized frames-to-go target -(T - t)/T over
/// successful episodes; the best-validation checkpoint is returned.
pub fn train_temporal_value(
    episodes: &[EpisodeTracks],
    cfg: &TemporalTrainConfig,
) -> CoreResult<ValueNet> {
    let successes: Vec<&EpisodeTracks> = episodes.iter().filter(|e| e.success).collect();
    if successes.is_empty() {
        return Err(CoreError::config(
            "train_temporal_value: no successful episodes",
        ));
    }
    let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut val_samples: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut order: Vec<usize> = (0..successes.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7e41));
    order.shuffle(&mut rng);
    let n_val = ((successes.len() as f64 * cfg.val_ratio).ceil() as usize)
        .max(1)
        .min(successes.len().saturating_sub(1).max(1));
    for (rank, &ei) in order.iter().enumerate() {
        let ep = successes[ei];
        let last = ep.seq.len() - 1;
        if last == 0 {
            continue;
        }
        for (t, frame) in ep.seq.frames.iter().enumerate() {
            let target = -((last - t) as f64) / last as f64;
            let entry = (ValueNet::features(frame), target);
            if rank < n_val {
                val_samples.push(entry);
            } else {
                samples.push(entry);
            }
        }
    }
    if samples.is_empty() {
        return Err(CoreError::config("train_temporal_value: empty train split"));
    }

    let mut net = ValueNet::init(&mut rng)?;
    let mut opt = AdamW::new(&net.params, cfg.lr, 0.0);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut index: Vec<usize> = (0..samples.len()).collect();
    for _epoch in 0..cfg.epochs {
        index.shuffle(&mut rng);
        for chunk in index.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let mut x = Vec::with_capacity(rows * VALUE_FEATURES);
            let mut y = Vec::with_capacity(rows);
            for &i in chunk {
                x.extend_from_slice(&samples[i].0);
                y.push(samples[i].1);
            }
            let mut tape = Tape::new();
            let ids = net.params.register(&mut tape);
            let xin = tape.leaf(rows, VALUE_FEATURES, &x, false);
            let out = net.net.forward(&mut tape, &ids, xin)?;
            let target = tape.leaf(rows, 1, &y, false);
            let loss = tape.mse(out, target)?;
            let grads = tape.backward(loss)?;
            let g = net.params.grads(&ids, &grads);
            opt.step(&mut net.params, &g)?;
        }
        let mut vloss = 0.0;
        for (f, target) in &val_samples {
            let v = net.net.forward_nograd(&net.params, f, 1)?[0];
            vloss += (v - target) * (v - target);
        }
        let vloss = vloss / val_samples.len().max(1) as f64;
        if best.as_ref().map(|(b, _)| vloss < *b).unwrap_or(true) {
            best = Some((vloss, net.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        net.params = params;
    }
    Ok(net)
}

/// Potential-difference reward: V(o_{t+1}) - V(o_t).
pub fn temporal_reward(net: &ValueNet, o_t: &TrackFrame, o_next: &TrackFrame) -> CoreResult<f64> {
    Ok(net.value(o_next)? - net.value(o_t)?)
}

// ── Privileged providers ─────────────────────────────────────────────

/// Hand-designed progress reward from privileged state features, with a
/// small per-step cost and a success bonus.
pub fn privileged_dense(
    kind: EnvKind,
    state_t: &[f64],
    state_next: &[f64],
    success_at_next: bool,
) -> CoreResult<f64> {
    let progress = match kind {
        EnvKind::HingedDoor => {
            if state_t.len() != 4 || state_next.len() != 4 {
                return Err(CoreError::config(
                    "privileged_dense: door state features must have 4 entries",
                ));
            }
            (state_next[3] - state_t[3]) / DOOR_SUCCESS_ANGLE
        }
        EnvKind::CornerFold => {
            if state_t.len() != 6 || state_next.len() != 6 {
                return Err(CoreError::config(
                    "privileged_dense: fold state features must have 6 entries",
                ));
            }
            let d = |s: &[f64]| {
                ((s[3] - FOLD_FIXED_CORNER.0).powi(2) + (s[4] - FOLD_FIXED_CORNER.1).powi(2)).sqrt()
            };
            let total = ((FOLD_START_CORNER.0 - FOLD_FIXED_CORNER.0).powi(2)
                + (FOLD_START_CORNER.1 - FOLD_FIXED_CORNER.1).powi(2))
            .sqrt();
            (d(state_t) - d(state_next)) / total
        }
    };
    Ok(progress - DENSE_STEP_COST + if success_at_next { 1.0 } else { 0.0 })
}

pub fn sparse(success_at_transition: bool) -> f64 {
    if success_at_transition {
        1.0
    } else {
        0.0
    }
}

// ── Episode labeling ─────────────────────────────────────────────────

/// Label every transition of an episode. Rewards align with transitions
/// (s_t, a_t) -> s_{t+1}; motion-alignment transitions that span a
/// resample event (or have no usable points) get -1 with the degenerate
/// flag. `horizon` fixes the task-progress denominator, `seed` the
/// background sampling.
pub fn label_episode(
    provider: &RewardProvider,
    episode: &EpisodeTracks,
    horizon: u32,
    seed: u64,
) -> CoreResult<Vec<RewardStep>> {
    let frames = episode.seq.len();
    if frames < 2 {
        return Ok(Vec::new());
    }
    let n_transitions = frames - 1;
    match provider {
        RewardProvider::Mpr {
            model,
            eps_motion,
            use_masks,
        } => {
            let preds = predict_episode(model, &episode.seq, horizon, seed)?;
            let mut out: Vec<RewardStep> = (0..n_transitions)
                .map(|t| RewardStep {
                    t,
                    reward: -1.0,
                    raw: 0.0,
                    degenerate: true,
                })
                .collect();
            for p in preds {
                out[p.t] = mpr_step(&p.item, &p.output.predicted, *use_masks, *eps_motion, p.t);
            }
            Ok(out)
        }
        RewardProvider::TemporalDistance { net } => {
            let mut out = Vec::with_capacity(n_transitions);
            let mut prev = net.value(&episode.seq.frames[0])?;
            for t in 0..n_transitions {
                let next = net.value(&episode.seq.frames[t + 1])?;
                out.push(RewardStep {
                    t,
                    reward: next - prev,
                    raw: next - prev,
                    degenerate: false,
                });
                prev = next;
            }
            Ok(out)
        }
        RewardProvider::Sparse => {
            let mut out: Vec<RewardStep> = (0..n_transitions)
                .map(|t| RewardStep {
                    t,
                    reward: 0.0,
                    raw: 0.0,
                    degenerate: false,
                })
                .collect();
            // Episodes terminate at success, so the success step is the
            // final transition of a successful episode.
            if episode.success {
                out[n_transitions - 1].reward = 1.0;
                out[n_transitions - 1].raw = 1.0;
            }
            Ok(out)
        }
        RewardProvider::PrivilegedDense { kind } => {
            let states = episode.states.as_ref().ok_or_else(|| {
                CoreError::config("privileged_dense requires simulator states (robot rollouts)")
            })?;
            if states.len() != frames {
                return Err(CoreError::config(format!(
                    "privileged_dense: {} states for {} frames",
                    states.len(),
                    frames
                )));
            }
            let mut out = Vec::with_capacity(n_transitions);
            for t in 0..n_transitions {
                let success_at_next = episode.success && t + 1 == frames - 1;
                let r = privileged_dense(*kind, &states[t], &states[t + 1], success_at_next)?;
                out.push(RewardStep {
                    t,
                    reward: r,
                    raw: r,
                    degenerate: false,
                });
            }
            Ok(out)
        }
    }
}
