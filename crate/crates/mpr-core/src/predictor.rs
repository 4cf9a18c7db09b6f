//! Point-motion prediction: F(context, points, tau) -> next points.
//!
//! The default architecture embeds each slot's current position and context
//! motion into a token, adds a task-progress embedding, runs two
//! pre-layernorm self-attention blocks and predicts a per-slot delta from a
//! zero-initialized head, so an untrained model is the identity map on
//! points. A cheaper mlp-pool architecture (per-slot MLP with a mean-pooled
//! global vector) is kept as a fallback.
//!
//! Batch items are cyclically padded to 300 slots. For canonical items the
//! attention runs on the unique tokens only, with slot multiplicities
//! folded into the softmax as a log-count bias; this is algebraically
//! identical to attending over the padded slots and is checked against the
//! naive path in tests.

use crate::error::{CoreError, CoreResult};
use crate::numcore::nn::{Linear, LnParams, ParamStore};
use crate::numcore::optim::AdamW;
use crate::numcore::tape::{Tape, VarId};
use crate::tracks::{
    build_mixture, filter_static_frames, trim_inactive, EpisodeTracks, MixtureBatchItem,
    MixtureOptions, TrackSequence, DEFAULT_PIXEL_SCALE, MIXTURE_WIDTH,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Context-motion features are rescaled to roughly unit range before
/// embedding (per-step motion is on the order of the action cap).
const DELTA_FEATURE_SCALE: f64 = 25.0;
const TOKEN_FEATURES: usize = 4;
const TAU_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorArch {
    Attention,
    MlpPool,
}

/// Architecture dimensions; the descriptor fully determines the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorDims {
    pub token_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_width: usize,
}

impl Default for PredictorDims {
    fn default() -> Self {
        PredictorDims {
            token_width: 64,
            heads: 2,
            blocks: 2,
            mlp_width: 128,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1: LnParams,
    // Per head: (wq, wk, wv) parameter indices, projections without bias.
    head_qkv: Vec<(usize, usize, usize)>,
    wo: Linear,
    ln2: LnParams,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed1: Linear,
    embed2: Linear,
    tau: Linear,
    blocks: Vec<BlockLayout>,
    // MlpPool only.
    mid1: Option<Linear>,
    mid2: Option<Linear>,
    ln_f: LnParams,
    head: Linear,
}

/// Model metadata persisted in the checkpoint sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub arch: PredictorArch,
    pub dims: PredictorDims,
    pub pixel_scale: u32,
    pub use_masks: bool,
    pub corpus_hash: String,
    pub best_val_loss: f64,
}

#[derive(Clone)]
pub struct PredictorModel {
    pub arch: PredictorArch,
    pub dims: PredictorDims,
    pub params: ParamStore,
    pub use_masks: bool,
    pub pixel_scale: u32,
    pub corpus_hash: String,
    layout: Layout,
}

/// Predicted next-frame positions aligned to the input slots.
#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub predicted: Vec<(f64, f64)>,
}

impl PredictorModel {
    pub fn init(
        arch: PredictorArch,
        dims: PredictorDims,
        use_masks: bool,
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<Self> {
        if dims.token_width % dims.heads != 0 {
            return Err(CoreError::config(
                "token_width must be divisible by heads".to_string(),
            ));
        }
        let mut store = ParamStore::new();
        let layout = build_layout(arch, dims, &mut store, rng)?;
        Ok(PredictorModel {
            arch,
            dims,
            params: store,
            use_masks,
            pixel_scale: DEFAULT_PIXEL_SCALE,
            corpus_hash: String::new(),
            layout,
        })
    }

    /// Rebuild a model around a loaded parameter store, validating the
    /// layout against the architecture descriptor.
    pub fn from_store(meta: &PredictorMeta, store: ParamStore) -> CoreResult<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut fresh = PredictorModel::init(meta.arch, meta.dims, meta.use_masks, &mut rng)?;
        if fresh.params.len() != store.len() {
            return Err(CoreError::config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                store.len(),
                fresh.params.len()
            )));
        }
        for ((ln, lt), (rn, rt)) in fresh.params.entries().zip(store.entries()) {
            if ln != rn || lt.shape != rt.shape {
                return Err(CoreError::config(format!(
                    "checkpoint tensor `{rn}` {:?} does not match layout `{ln}` {:?}",
                    rt.shape, lt.shape
                )));
            }
        }
        fresh.params = store;
        fresh.pixel_scale = meta.pixel_scale;
        fresh.corpus_hash = meta.corpus_hash.clone();
        Ok(fresh)
    }

    pub fn meta(&self, best_val_loss: f64) -> PredictorMeta {
        PredictorMeta {
            arch: self.arch,
            dims: self.dims,
            pixel_scale: self.pixel_scale,
            use_masks: self.use_masks,
            corpus_hash: self.corpus_hash.clone(),
            best_val_loss,
        }
    }

    /// Predict next positions for every slot of an item.
    pub fn forward(&self, item: &MixtureBatchItem) -> CoreResult<PredictionOutput> {
        let mut tape = Tape::new();
        let ids = self.params.register_frozen(&mut tape);
        let (delta, map) = self.delta_graph(&mut tape, &ids, item)?;
        let dv = tape.value(delta);
        let mut predicted = Vec::with_capacity(MIXTURE_WIDTH);
        for (slot, &tok) in map.iter().enumerate() {
            let p = item.current_points[slot];
            predicted.push((p.0 + dv[tok * 2], p.1 + dv[tok * 2 + 1]));
        }
        if predicted.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(CoreError::numeric("predictor.forward", "non-finite output"));
        }
        Ok(PredictionOutput { predicted })
    }

    /// Build the per-token delta graph. Returns (delta node: n_tokens x 2,
    /// slot -> token map of length 300). Parameters must already be
    /// registered as `ids`.
    fn delta_graph(
        &self,
        tape: &mut Tape,
        ids: &[VarId],
        item: &MixtureBatchItem,
    ) -> CoreResult<(VarId, Vec<usize>)> {
        let n_slots = item.current_points.len();
        if n_slots != MIXTURE_WIDTH {
            return Err(CoreError::config(format!(
                "mixture item has {n_slots} slots, expected {MIXTURE_WIDTH}"
            )));
        }
        let dedup = self.arch == PredictorArch::Attention && item_is_canonical_cyclic(item);
        let (tokens, counts, map): (Vec<usize>, Vec<f64>, Vec<usize>) = if dedup {
            let n = item.raw_len;
            let base = (MIXTURE_WIDTH / n) as f64;
            let extra = MIXTURE_WIDTH % n;
            let counts = (0..n)
                .map(|i| if i < extra { base + 1.0 } else { base })
                .collect();
            (
                (0..n).collect(),
                counts,
                (0..MIXTURE_WIDTH).map(|i| i % n).collect(),
            )
        } else {
            (
                (0..n_slots).collect(),
                vec![1.0; n_slots],
                (0..n_slots).collect(),
            )
        };

        let n = tokens.len();
        let mut feats = Vec::with_capacity(n * TOKEN_FEATURES);
        for &i in &tokens {
            let c = item.current_points[i];
            let p = item.context_points[i];
            feats.push(c.0);
            feats.push(c.1);
            feats.push((c.0 - p.0) * DELTA_FEATURE_SCALE);
            feats.push((c.1 - p.1) * DELTA_FEATURE_SCALE);
        }
        let x_in = tape.leaf(n, TOKEN_FEATURES, &feats, false);

        let tau = item.tau;
        let tau_feats = [
            tau,
            (2.0 * std::f64::consts::PI * tau).sin(),
            (2.0 * std::f64::consts::PI * tau).cos(),
            (4.0 * std::f64::consts::PI * tau).sin(),
            (4.0 * std::f64::consts::PI * tau).cos(),
        ];
        let tau_in = tape.leaf(1, TAU_FEATURES, &tau_feats, false);

        let lay = &self.layout;
        let h = lay.embed1.forward(tape, ids, x_in)?;
        let h = tape.gelu(h)?;
        let h = lay.embed2.forward(tape, ids, h)?;
        let tau_emb = lay.tau.forward(tape, ids, tau_in)?;
        let mut x = tape.add(h, tau_emb)?;

        match self.arch {
            PredictorArch::Attention => {
                let head_dim = self.dims.token_width / self.dims.heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let ln_counts: Vec<f64> = counts.iter().map(|c| c.ln()).collect();
                let count_bias = tape.leaf(1, n, &ln_counts, false);
                for blk in &lay.blocks {
                    let normed = blk.ln1.forward(tape, ids, x)?;
                    let mut head_outs = Vec::with_capacity(self.dims.heads);
                    for &(wq, wk, wv) in &blk.head_qkv {
                        let q = tape.matmul(normed, ids[wq])?;
                        let k = tape.matmul(normed, ids[wk])?;
                        let v = tape.matmul(normed, ids[wv])?;
                        let s = tape.matmul_nt(q, k)?;
                        let s = tape.scale(s, scale)?;
                        let s = tape.add(s, count_bias)?;
                        let a = tape.softmax(s)?;
                        head_outs.push(tape.matmul(a, v)?);
                    }
                    let concat = tape.concat(&head_outs)?;
                    let o = blk.wo.forward(tape, ids, concat)?;
                    x = tape.add(x, o)?;
                    let normed = blk.ln2.forward(tape, ids, x)?;
                    let m = blk.mlp1.forward(tape, ids, normed)?;
                    let m = tape.gelu(m)?;
                    let m = blk.mlp2.forward(tape, ids, m)?;
                    x = tape.add(x, m)?;
                }
            }
            PredictorArch::MlpPool => {
                let pooled = tape.mean_rows(x)?;
                let broadcast = tape.gather_rows(pooled, &vec![0; n])?;
                let cat = tape.concat(&[x, broadcast])?;
                let m = lay.mid1.as_ref().unwrap().forward(tape, ids, cat)?;
                let m = tape.gelu(m)?;
                x = lay.mid2.as_ref().unwrap().forward(tape, ids, m)?;
            }
        }

        let normed = lay.ln_f.forward(tape, ids, x)?;
        let delta = lay.head.forward(tape, ids, normed)?;
        Ok((delta, map))
    }

    /// Training loss for one item: MSE over non-pad slots and coordinates.
    pub fn item_loss(
        &self,
        tape: &mut Tape,
        ids: &[VarId],
        item: &MixtureBatchItem,
    ) -> CoreResult<VarId> {
        let (delta, map) = self.delta_graph(tape, ids, item)?;
        // Non-pad slots map 1:1 onto distinct tokens in both paths.
        let nonpad: Vec<usize> = (0..MIXTURE_WIDTH).filter(|&i| !item.pad_mask[i]).collect();
        let tok_rows: Vec<usize> = nonpad.iter().map(|&i| map[i]).collect();
        let delta_np = tape.gather_rows(delta, &tok_rows)?;
        let mut cur = Vec::with_capacity(nonpad.len() * 2);
        let mut tgt = Vec::with_capacity(nonpad.len() * 2);
        for &i in &nonpad {
            cur.push(item.current_points[i].0);
            cur.push(item.current_points[i].1);
            tgt.push(item.target_points[i].0);
            tgt.push(item.target_points[i].1);
        }
        let cur = tape.leaf(nonpad.len(), 2, &cur, false);
        let tgt = tape.leaf(nonpad.len(), 2, &tgt, false);
        let pred = tape.add(delta_np, cur)?;
        tape.mse(pred, tgt)
    }
}

/// True when padding follows the canonical cyclic rule produced by
/// `build_mixture`: slot i repeats raw slot i % raw_len.
fn item_is_canonical_cyclic(item: &MixtureBatchItem) -> bool {
    let n = item.raw_len;
    if n == 0 || n > MIXTURE_WIDTH {
        return false;
    }
    for i in 0..MIXTURE_WIDTH {
        if item.pad_mask[i] != (i >= n) {
            return false;
        }
        if i >= n {
            let j = i % n;
            if item.current_points[i] != item.current_points[j]
                || item.context_points[i] != item.context_points[j]
                || item.target_points[i] != item.target_points[j]
            {
                return false;
            }
        }
    }
    true
}

fn build_layout(
    arch: PredictorArch,
    dims: PredictorDims,
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
) -> CoreResult<Layout> {
    let d = dims.token_width;
    let w = dims.mlp_width;
    let g = std::f64::consts::SQRT_2;
    let embed1 = Linear::orthogonal(store, "embed1", TOKEN_FEATURES, w, g, rng)?;
    let embed2 = Linear::orthogonal(store, "embed2", w, d, 1.0, rng)?;
    let tau = Linear::orthogonal(store, "tau", TAU_FEATURES, d, 1.0, rng)?;
    let mut blocks = Vec::new();
    let mut mid1 = None;
    let mut mid2 = None;
    match arch {
        PredictorArch::Attention => {
            let head_dim = d / dims.heads;
            for b in 0..dims.blocks {
                let ln1 = LnParams::unit(store, &format!("blk{b}.ln1"), d);
                let mut head_qkv = Vec::new();
                for hd in 0..dims.heads {
                    let wq = store.insert(
                        format!("blk{b}.h{hd}.wq"),
                        crate::numcore::init::orthogonal_init(d, head_dim, 1.0, rng)?.with_grad(),
                    );
                    let wk = store.insert(
                        format!("blk{b}.h{hd}.wk"),
                        crate::numcore::init::orthogonal_init(d, head_dim, 1.0, rng)?.with_grad(),
                    );
                    let wv = store.insert(
                        format!("blk{b}.h{hd}.wv"),
                        crate::numcore::init::orthogonal_init(d, head_dim, 1.0, rng)?.with_grad(),
                    );
                    head_qkv.push((wq, wk, wv));
                }
                let wo = Linear::orthogonal(store, &format!("blk{b}.wo"), d, d, 1.0, rng)?;
                let ln2 = LnParams::unit(store, &format!("blk{b}.ln2"), d);
                let mlp1 = Linear::orthogonal(store, &format!("blk{b}.mlp1"), d, w, g, rng)?;
                let mlp2 = Linear::orthogonal(store, &format!("blk{b}.mlp2"), w, d, 1.0, rng)?;
                blocks.push(BlockLayout {
                    ln1,
                    head_qkv,
                    wo,
                    ln2,
                    mlp1,
                    mlp2,
                });
            }
        }
        PredictorArch::MlpPool => {
            mid1 = Some(Linear::orthogonal(store, "mid1", 2 * d, w, g, rng)?);
            mid2 = Some(Linear::orthogonal(store, "mid2", w, d, 1.0, rng)?);
        }
    }
    let ln_f = LnParams::unit(store, "ln_f", d);
    let head = Linear::zeros(store, "head", d, 2);
    Ok(Layout {
        embed1,
        embed2,
        tau,
        blocks,
        mid1,
        mid2,
        ln_f,
        head,
    })
}

// ── Dataset preparation ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Per-epoch item cap (0 = no cap) to keep desk-scale epochs bounded.
    pub max_items_per_epoch: usize,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            epochs: 200,
            batch_size: 20,
            lr: 1e-4,
            val_ratio: 0.1,
            weight_decay: 1e-6,
            seed: 0,
            max_items_per_epoch: 0,
        }
    }
}

/// Mixture items prepared from a corpus, split train/val by episode.
pub struct PreparedDataset {
    pub train: Vec<MixtureBatchItem>,
    pub val: Vec<MixtureBatchItem>,
    pub train_episode_ids: Vec<u64>,
    pub val_episode_ids: Vec<u64>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Trim, filter and build mixture items for every usable frame pair of an
/// episode. The per-frame sampling rng is derived from (seed, episode, t),
/// so items are stable regardless of iteration order.
pub fn episode_items(
    ep: &EpisodeTracks,
    use_masks: bool,
    tau_denom: Option<f64>,
    seed: u64,
) -> CoreResult<Vec<MixtureBatchItem>> {
    let seq = trim_inactive(&ep.seq)?;
    let usable = filter_static_frames(&seq, DEFAULT_PIXEL_SCALE);
    let denom = tau_denom.unwrap_or((seq.len().max(2) - 1) as f64);
    let mut items = Vec::with_capacity(usable.len());
    for t in usable {
        let mut rng =
            ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(ep.episode_id) ^ t as u64));
        let opts = MixtureOptions {
            use_masks,
            tau_denom: denom,
        };
        match build_mixture(&seq, t, opts, &mut rng) {
            Ok(item) => items.push(item),
            // Frames without enough visible points are skipped, not fatal.
            Err(CoreError::Preprocess(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(items)
}

pub fn prepare_dataset(
    episodes: &[EpisodeTracks],
    use_masks: bool,
    val_ratio: f64,
    seed: u64,
) -> CoreResult<PreparedDataset> {
    if episodes.is_empty() {
        return Err(CoreError::config("prepare_dataset: empty corpus"));
    }
    if !(0.0..1.0).contains(&val_ratio) || val_ratio <= 0.0 {
        return Err(CoreError::config("val_ratio must be in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0x5157));
    order.shuffle(&mut rng);
    let n_val = ((episodes.len() as f64 * val_ratio).ceil() as usize)
        .max(1)
        .min(episodes.len() - 1);
    let (val_eps, train_eps) = order.split_at(n_val);

    let mut ds = PreparedDataset {
        train: Vec::new(),
        val: Vec::new(),
        train_episode_ids: train_eps.iter().map(|&i| episodes[i].episode_id).collect(),
        val_episode_ids: val_eps.iter().map(|&i| episodes[i].episode_id).collect(),
    };
    for &i in train_eps {
        ds.train
            .extend(episode_items(&episodes[i], use_masks, None, seed)?);
    }
    for &i in val_eps {
        ds.val
            .extend(episode_items(&episodes[i], use_masks, None, seed)?);
    }
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(CoreError::config(
            "prepare_dataset: no usable frames after filtering",
        ));
    }
    Ok(ds)
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub model: PredictorModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

/// Mean item loss of the model over a set of items (no gradients).
pub fn dataset_loss(model: &PredictorModel, items: &[MixtureBatchItem]) -> CoreResult<f64> {
    if items.is_empty() {
        return Err(CoreError::config("dataset_loss: no items"));
    }
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::new();
        let ids = model.params.register_frozen(&mut tape);
        let loss = model.item_loss(&mut tape, &ids, item)?;
        total += tape.scalar_value(loss);
    }
    Ok(total / items.len() as f64)
}

/// Train a predictor on prepared items, returning the checkpoint with
/// minimum validation loss.
pub fn train(
    arch: PredictorArch,
    use_masks: bool,
    ds: &PreparedDataset,
    cfg: &PredictorTrainConfig,
) -> CoreResult<TrainOutcome> {
    if ds.train.is_empty() {
        return Err(CoreError::config("train: empty training set"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x11a0de1));
    let mut model = PredictorModel::init(arch, PredictorDims::default(), use_masks, &mut rng)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let take = if cfg.max_items_per_epoch == 0 {
            order.len()
        } else {
            cfg.max_items_per_epoch.min(order.len())
        };
        let mut train_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order[..take].chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let ids = model.params.register(&mut tape);
            let mut acc: Option<VarId> = None;
            for &ix in chunk {
                let l = model.item_loss(&mut tape, &ids, &ds.train[ix])?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let total = acc.expect("non-empty chunk");
            let loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
            train_loss += tape.scalar_value(loss) * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss)?;
            let g = model.params.grads(&ids, &grads);
            opt.step(&mut model.params, &g)?;
        }
        let train_loss = train_loss / seen.max(1) as f64;
        let val_loss = dataset_loss(&model, &ds.val)?;
        if !val_loss.is_finite() {
            return Err(CoreError::numeric("predictor.train", "validation loss NaN"));
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
        });
        let better = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if better {
            best = Some((val_loss, model.params.clone(), epoch));
        }
    }

    let (best_val_loss, params, best_epoch) =
        best.ok_or_else(|| CoreError::config("train: zero epochs"))?;
    model.params = params;
    Ok(TrainOutcome {
        model,
        metrics,
        best_val_loss,
        best_epoch,
    })
}

// ── Inference over an episode ────────────────────────────────────────

pub struct EpisodePrediction {
    pub t: usize,
    pub item: MixtureBatchItem,
    pub output: PredictionOutput,
}

/// One prediction per consecutive frame pair within each resample span,
/// with tau = t / horizon (the fixed environment horizon).
pub fn predict_episode(
    model: &PredictorModel,
    seq: &TrackSequence,
    horizon: u32,
    seed: u64,
) -> CoreResult<Vec<EpisodePrediction>> {
    let mut out = Vec::new();
    for t in 0..seq.len().saturating_sub(1) {
        if !seq.pair_in_span(t) {
            continue;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ ((t as u64) << 1)));
        let opts = MixtureOptions {
            use_masks: model.use_masks,
            tau_denom: horizon as f64,
        };
        let item = match build_mixture(seq, t, opts, &mut rng) {
            Ok(item) => item,
            Err(CoreError::Preprocess(_)) => continue,
            Err(e) => return Err(e),
        };
        let output = model.forward(&item)?;
        out.push(EpisodePrediction { t, item, output });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::{PointLabel, TrackFrame, TrackSource};
    use rand::Rng;

    fn tiny_item(rng: &mut ChaCha12Rng, raw_len: usize) -> MixtureBatchItem {
        let mut item = MixtureBatchItem {
            context_points: Vec::new(),
            current_points: Vec::new(),
            target_points: Vec::new(),
            pad_mask: Vec::new(),
            labels: Vec::new(),
            tau: 0.4,
            raw_len,
        };
        let raw: Vec<((f64, f64), (f64, f64), (f64, f64))> = (0..raw_len)
            .map(|_| {
                let c = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
                let d = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                let e = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                ((c.0 - d.0, c.1 - d.1), c, (c.0 + e.0, c.1 + e.1))
            })
            .collect();
        for i in 0..MIXTURE_WIDTH {
            let (p, c, t) = raw[i % raw_len];
            item.context_points.push(p);
            item.current_points.push(c);
            item.target_points.push(t);
            item.pad_mask.push(i >= raw_len);
            item.labels.push(if i % raw_len < raw_len / 2 {
                PointLabel::Object
            } else {
                PointLabel::Background
            });
        }
        item
    }

    fn model(arch: PredictorArch, seed: u64) -> PredictorModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        PredictorModel::init(arch, PredictorDims::default(), true, &mut rng).unwrap()
    }

    fn randomize_head(m: &mut PredictorModel, seed: u64) {
        let head_w = m.params.len() - 2;
        let mut wr = ChaCha12Rng::seed_from_u64(seed);
        for v in m.params.at_mut(head_w).data.iter_mut() {
            *v = 0.05 * crate::numcore::init::gaussian(&mut wr);
        }
    }

    #[test]
    fn zero_head_is_identity_on_points() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let item = tiny_item(&mut rng, 48);
        for arch in [PredictorArch::Attention, PredictorArch::MlpPool] {
            let m = model(arch, 2);
            let out = m.forward(&item).unwrap();
            for (p, c) in out.predicted.iter().zip(&item.current_points) {
                assert!((p.0 - c.0).abs() < 1e-12 && (p.1 - c.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dedup_attention_matches_naive_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let item = tiny_item(&mut rng, 48);
        let mut m = model(PredictorArch::Attention, 4);
        randomize_head(&mut m, 5);
        let fast = m.forward(&item).unwrap();
        // Same content, but mark every slot raw: the cyclic detection fails
        // and the naive full-width path runs.
        let mut naive_item = item.clone();
        naive_item.raw_len = MIXTURE_WIDTH;
        naive_item.pad_mask = vec![false; MIXTURE_WIDTH];
        let naive = m.forward(&naive_item).unwrap();
        for (a, b) in fast.predicted.iter().zip(&naive.predicted) {
            assert!((a.0 - b.0).abs() < 1e-9, "{} vs {}", a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn permutation_equivariance_of_attention() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let item = tiny_item(&mut rng, MIXTURE_WIDTH); // no padding
        let mut m = model(PredictorArch::Attention, 7);
        randomize_head(&mut m, 8);
        let base = m.forward(&item).unwrap();
        let mut perm: Vec<usize> = (0..MIXTURE_WIDTH).collect();
        perm.shuffle(&mut rng);
        let mut per = item.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            per.context_points[new_i] = item.context_points[old_i];
            per.current_points[new_i] = item.current_points[old_i];
            per.target_points[new_i] = item.target_points[old_i];
            per.labels[new_i] = item.labels[old_i];
            per.pad_mask[new_i] = item.pad_mask[old_i];
        }
        let shuffled = m.forward(&per).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            let a = shuffled.predicted[new_i];
            let b = base.predicted[old_i];
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn predictor_loss_gradcheck() {
        // Full-graph finite differences on random parameter coordinates;
        // looser tolerance than the primitive checks (deeper graph).
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let item = tiny_item(&mut rng, 12);
        for arch in [PredictorArch::Attention, PredictorArch::MlpPool] {
            let mut m = model(arch, 10);
            randomize_head(&mut m, 11);
            let loss_of = |m: &PredictorModel| -> f64 {
                let mut tape = Tape::new();
                let ids = m.params.register_frozen(&mut tape);
                let l = m.item_loss(&mut tape, &ids, &item).unwrap();
                tape.scalar_value(l)
            };
            let analytic = {
                let mut tape = Tape::new();
                let ids = m.params.register(&mut tape);
                let l = m.item_loss(&mut tape, &ids, &item).unwrap();
                let grads = tape.backward(l).unwrap();
                m.params.grads(&ids, &grads)
            };
            let param_count = m.params.len();
            let mut pick = ChaCha12Rng::seed_from_u64(12);
            for _ in 0..10 {
                let pi = pick.random_range(0..param_count);
                let n = m.params.at(pi).numel();
                let ci = pick.random_range(0..n);
                let an = analytic[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
                let h = 1e-5;
                let orig = m.params.at(pi).data[ci];
                m.params.at_mut(pi).data[ci] = orig + h;
                let fp = loss_of(&m);
                m.params.at_mut(pi).data[ci] = orig - h;
                let fm = loss_of(&m);
                m.params.at_mut(pi).data[ci] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-3,
                    "{arch:?} param {pi}[{ci}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn static_scene_corpus_stays_converged() {
        // Targets equal inputs: the zero-initialized head already achieves
        // zero loss, and a few training epochs keep it there.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mk_static = |rng: &mut ChaCha12Rng| {
            let mut it = tiny_item(rng, 60);
            for i in 0..MIXTURE_WIDTH {
                it.context_points[i] = it.current_points[i];
                it.target_points[i] = it.current_points[i];
            }
            it
        };
        let train_items: Vec<_> = (0..10).map(|_| mk_static(&mut rng)).collect();
        let val_items: Vec<_> = (0..3).map(|_| mk_static(&mut rng)).collect();
        let ds = PreparedDataset {
            train: train_items,
            val: val_items,
            train_episode_ids: vec![0],
            val_episode_ids: vec![1],
        };
        let cfg = PredictorTrainConfig {
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        let out = train(PredictorArch::Attention, true, &ds, &cfg).unwrap();
        assert!(out.best_val_loss < 1e-6);
    }

    #[test]
    fn episode_split_keeps_validation_frames_out_of_training() {
        let mut eps = Vec::new();
        for id in 0..10u64 {
            let mut frames = Vec::new();
            for t in 0..6 {
                let base = 0.3 + 0.01 * t as f64 + 0.001 * id as f64;
                let points = vec![
                    (base, 0.5),
                    (base, 0.52),
                    (base, 0.54),
                    (base, 0.56),
                    (0.1, 0.1),
                    (0.9, 0.1),
                ];
                let labels = vec![
                    PointLabel::Object,
                    PointLabel::Object,
                    PointLabel::Object,
                    PointLabel::Object,
                    PointLabel::Background,
                    PointLabel::Background,
                ];
                frames.push(TrackFrame {
                    points,
                    visible: vec![true; 6],
                    labels,
                    frame_index: t,
                });
            }
            eps.push(EpisodeTracks {
                episode_id: id,
                source: TrackSource::RobotRollout,
                success: true,
                seq: TrackSequence {
                    frames,
                    resample_events: vec![],
                    source: TrackSource::RobotRollout,
                },
                states: None,
                actions: None,
            });
        }
        let ds = prepare_dataset(&eps, true, 0.2, 99).unwrap();
        for vid in &ds.val_episode_ids {
            assert!(!ds.train_episode_ids.contains(vid));
        }
        assert_eq!(ds.train_episode_ids.len() + ds.val_episode_ids.len(), 10);
    }

    fn line_sequence(frames_n: usize, resamples: Vec<usize>) -> TrackSequence {
        let mut frames = Vec::new();
        for t in 0..frames_n {
            let x = 0.3 + 0.002 * t as f64;
            frames.push(TrackFrame {
                points: vec![(x, 0.5), (x, 0.52), (0.1, 0.1), (0.9, 0.9)],
                visible: vec![true; 4],
                labels: vec![
                    PointLabel::Object,
                    PointLabel::Object,
                    PointLabel::Background,
                    PointLabel::Background,
                ],
                frame_index: t,
            });
        }
        TrackSequence {
            frames,
            resample_events: resamples,
            source: TrackSource::RobotRollout,
        }
    }

    #[test]
    fn tau_uses_fixed_horizon_at_inference() {
        let m = model(PredictorArch::Attention, 21);
        let seq = line_sequence(100, vec![]);
        let preds = predict_episode(&m, &seq, 100, 33).unwrap();
        assert_eq!(preds.len(), 99);
        let p50 = preds.iter().find(|p| p.t == 50).unwrap();
        assert!((p50.item.tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_event_splits_prediction_pairs() {
        let m = model(PredictorArch::Attention, 22);
        let seq = line_sequence(80, vec![40]);
        let preds = predict_episode(&m, &seq, 100, 7).unwrap();
        assert_eq!(preds.len(), 78); // 79 pairs minus the (39, 40) boundary
        assert!(preds.iter().all(|p| p.t != 39));
        assert!(preds.iter().any(|p| p.t == 40));
    }
}
