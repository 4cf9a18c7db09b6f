//! Point-track data model and preprocessing: background-motion
//! compensation, visibility-triggered resampling checks, minimum-motion
//! frame filtering, object/background mixture construction, and the
//! JSON-lines corpus format.

use crate::error::{CoreError, CoreResult};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;
use std::io::{BufRead, Write};
use std::path::Path;

/// Fixed slot width of a model input batch item.
pub const MIXTURE_WIDTH: usize = 300;
/// Nominal image resolution used to convert normalized units to pixels.
pub const DEFAULT_PIXEL_SCALE: u32 = 256;
/// Frames whose max point motion is below this many pixels are unusable.
pub const MIN_MOTION_PIXELS: f64 = 0.5;
/// Resample when more than this fraction of tracked object points is lost.
pub const RESAMPLE_LOSS_FRACTION: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Object,
    Background,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackSource {
    HumanCorpus,
    RobotRollout,
}

/// One frame of tracked points in normalized image coordinates.
#[derive(Debug, Clone)]
pub struct TrackFrame {
    pub points: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
    pub labels: Vec<PointLabel>,
    pub frame_index: usize,
}

impl TrackFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self, label: PointLabel) -> usize {
        self.labels
            .iter()
            .zip(&self.visible)
            .filter(|(l, v)| **l == label && **v)
            .count()
    }
}

/// Ordered frames sharing one point identity space between resample events.
#[derive(Debug, Clone)]
pub struct TrackSequence {
    pub frames: Vec<TrackFrame>,
    /// Frame indices where the point grid was re-seeded; point identities
    /// do not carry across these boundaries.
    pub resample_events: Vec<usize>,
    pub source: TrackSource,
}

impl TrackSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// True when frames t and t+1 lie within one resample span.
    pub fn pair_in_span(&self, t: usize) -> bool {
        t + 1 < self.frames.len() && !self.resample_events.contains(&(t + 1))
    }
}

/// Per-point motion between two consecutive frames.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    pub deltas: Vec<(f64, f64)>,
    pub labels: Vec<PointLabel>,
    pub t: usize,
}

/// Model input: two context frames, targets, cyclic padding to
/// [`MIXTURE_WIDTH`], and the normalized task-progress scalar.
#[derive(Debug, Clone)]
pub struct MixtureBatchItem {
    pub context_points: Vec<(f64, f64)>,
    pub current_points: Vec<(f64, f64)>,
    pub target_points: Vec<(f64, f64)>,
    /// True for slots that repeat an earlier raw slot.
    pub pad_mask: Vec<bool>,
    pub labels: Vec<PointLabel>,
    pub tau: f64,
    /// Number of raw (non-pad) slots; slot i repeats raw slot i % raw_len.
    pub raw_len: usize,
}

// ── Preprocessing operations ─────────────────────────────────────────

/// Subtract the mean background-point motion from every delta. Only
/// background-labeled points enter the mean: agent points are kept out so
/// that the actor's own motion does not bias the camera estimate (they stay
/// eligible as background for mixture sampling).
pub fn compensate_background(frame_deltas: &DeltaSet) -> CoreResult<DeltaSet> {
    let mut n = 0usize;
    let mut mean = (0.0, 0.0);
    for (d, l) in frame_deltas.deltas.iter().zip(&frame_deltas.labels) {
        if *l == PointLabel::Background {
            mean.0 += d.0;
            mean.1 += d.1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Preprocess(
            "compensate_background: no background points".to_string(),
        ));
    }
    mean.0 /= n as f64;
    mean.1 /= n as f64;
    Ok(DeltaSet {
        deltas: frame_deltas
            .deltas
            .iter()
            .map(|d| (d.0 - mean.0, d.1 - mean.1))
            .collect(),
        labels: frame_deltas.labels.clone(),
        t: frame_deltas.t,
    })
}

/// Deltas between frames t and t+1 for points visible at both.
pub fn frame_deltas(seq: &TrackSequence, t: usize) -> CoreResult<DeltaSet> {
    if t + 1 >= seq.frames.len() {
        return Err(CoreError::Usage(format!(
            "frame_deltas: pair ({}, {}) out of range",
            t,
            t + 1
        )));
    }
    let a = &seq.frames[t];
    let b = &seq.frames[t + 1];
    let mut deltas = Vec::new();
    let mut labels = Vec::new();
    for i in 0..a.len().min(b.len()) {
        if a.visible[i] && b.visible[i] {
            deltas.push((b.points[i].0 - a.points[i].0, b.points[i].1 - a.points[i].1));
            labels.push(a.labels[i]);
        }
    }
    Ok(DeltaSet { deltas, labels, t })
}

/// True when more than 30% of the baseline object points are no longer
/// visible in `frame`.
pub fn check_resample(frame: &TrackFrame, baseline_object_count: usize) -> bool {
    if baseline_object_count == 0 {
        return false;
    }
    let visible = frame.visible_count(PointLabel::Object);
    let lost = baseline_object_count.saturating_sub(visible);
    (lost as f64) / (baseline_object_count as f64) > RESAMPLE_LOSS_FRACTION
}

/// Indices t of usable frame pairs (t, t+1): max raw point motion at least
/// 0.5 pixels at the given pixel scale, and both frames in one resample
/// span.
pub fn filter_static_frames(seq: &TrackSequence, pixel_scale: u32) -> Vec<usize> {
    let mut keep = Vec::new();
    for t in 0..seq.frames.len().saturating_sub(1) {
        if !seq.pair_in_span(t) {
            continue;
        }
        let a = &seq.frames[t];
        let b = &seq.frames[t + 1];
        let mut max_motion = 0.0f64;
        for i in 0..a.len().min(b.len()) {
            let dx = b.points[i].0 - a.points[i].0;
            let dy = b.points[i].1 - a.points[i].1;
            max_motion = max_motion.max((dx * dx + dy * dy).sqrt());
        }
        if max_motion * pixel_scale as f64 >= MIN_MOTION_PIXELS {
            keep.push(t);
        }
    }
    keep
}

/// Remove leading/trailing frames with zero visible object points.
pub fn trim_inactive(seq: &TrackSequence) -> CoreResult<TrackSequence> {
    let active = |f: &TrackFrame| f.visible_count(PointLabel::Object) > 0;
    let first = seq.frames.iter().position(active);
    let last = seq.frames.iter().rposition(active);
    match (first, last) {
        (Some(a), Some(b)) if a <= b => Ok(TrackSequence {
            frames: seq.frames[a..=b].to_vec(),
            resample_events: seq
                .resample_events
                .iter()
                .filter(|&&e| e > a && e <= b)
                .map(|&e| e - a)
                .collect(),
            source: seq.source,
        }),
        _ => Err(CoreError::Preprocess(
            "trim_inactive: no frames with visible object points".to_string(),
        )),
    }
}

/// Options for [`build_mixture`].
#[derive(Debug, Clone, Copy)]
pub struct MixtureOptions {
    /// When false, every point enters the mixture and no background
    /// compensation is applied (the masking ablation).
    pub use_masks: bool,
    /// Normalized-progress denominator. Training uses the source video
    /// length; inference uses the fixed environment horizon.
    pub tau_denom: f64,
}

/// Build one model input for the pair (t, t+1) with two-frame context
/// (t-1, t). At a span start the context frame falls back to the current
/// frame (zero context motion).
///
/// Masked mode keeps all object points co-visible across the three frames
/// plus `floor(n_obj/2)` background points sampled without replacement
/// (the whole pool when it is smaller). Raw slots are repeated cyclically
/// to width 300. Background compensation (human corpus only) is applied to
/// the context and target positions anchored at the current frame.
pub fn build_mixture(
    seq: &TrackSequence,
    t: usize,
    opts: MixtureOptions,
    rng: &mut ChaCha12Rng,
) -> CoreResult<MixtureBatchItem> {
    if t + 1 >= seq.frames.len() {
        return Err(CoreError::Usage(format!(
            "build_mixture: pair ({}, {}) out of range",
            t,
            t + 1
        )));
    }
    if !seq.pair_in_span(t) {
        return Err(CoreError::Preprocess(format!(
            "build_mixture: pair ({}, {}) spans a resample event",
            t,
            t + 1
        )));
    }
    // Context must not reach across a resample boundary either.
    let ctx_t = if t > 0 && !seq.resample_events.contains(&t) {
        t - 1
    } else {
        t
    };
    let cur = &seq.frames[t];
    let nxt = &seq.frames[t + 1];
    let ctx = &seq.frames[ctx_t];

    let covisible = |i: usize| cur.visible[i] && nxt.visible[i] && ctx.visible[i];
    let mut object_idx = Vec::new();
    let mut background_pool = Vec::new();
    for i in 0..cur.len() {
        if !covisible(i) {
            continue;
        }
        match cur.labels[i] {
            PointLabel::Object => object_idx.push(i),
            _ => background_pool.push(i),
        }
    }

    let selected: Vec<usize> = if opts.use_masks {
        if object_idx.is_empty() {
            return Err(CoreError::Preprocess(
                "build_mixture: no visible object points".to_string(),
            ));
        }
        let want_bg = (object_idx.len() / 2).min(background_pool.len());
        let mut pool = background_pool.clone();
        let mut bg = Vec::with_capacity(want_bg);
        for _ in 0..want_bg {
            let k = rng.random_range(0..pool.len());
            bg.push(pool.swap_remove(k));
        }
        bg.sort_unstable();
        object_idx.iter().chain(bg.iter()).copied().collect()
    } else {
        let all: Vec<usize> = object_idx
            .iter()
            .chain(background_pool.iter())
            .copied()
            .collect();
        if all.is_empty() {
            return Err(CoreError::Preprocess(
                "build_mixture: no visible points".to_string(),
            ));
        }
        all
    };

    // Positions anchored at the current frame; camera compensation rewrites
    // the context/target positions from compensated deltas.
    let compensate = opts.use_masks && seq.source == TrackSource::HumanCorpus;
    let (ctx_shift, tgt_shift) = if compensate {
        (
            background_mean_shift(ctx, cur, &cur.labels)?,
            background_mean_shift(cur, nxt, &cur.labels)?,
        )
    } else {
        ((0.0, 0.0), (0.0, 0.0))
    };

    let raw_len = selected.len();
    let mut item = MixtureBatchItem {
        context_points: Vec::with_capacity(MIXTURE_WIDTH),
        current_points: Vec::with_capacity(MIXTURE_WIDTH),
        target_points: Vec::with_capacity(MIXTURE_WIDTH),
        pad_mask: Vec::with_capacity(MIXTURE_WIDTH),
        labels: Vec::with_capacity(MIXTURE_WIDTH),
        tau: (t as f64 / opts.tau_denom).clamp(0.0, 1.0),
        raw_len,
    };
    for slot in 0..MIXTURE_WIDTH {
        let i = selected[slot % raw_len];
        let c = cur.points[i];
        // Compensated context: current minus compensated context->current
        // delta; compensated target: current plus compensated delta.
        let ctx_p = (
            ctx.points[i].0 + ctx_shift.0,
            ctx.points[i].1 + ctx_shift.1,
        );
        let tgt_p = (
            nxt.points[i].0 - tgt_shift.0,
            nxt.points[i].1 - tgt_shift.1,
        );
        item.context_points.push(ctx_p);
        item.current_points.push(c);
        item.target_points.push(tgt_p);
        item.pad_mask.push(slot >= raw_len);
        item.labels.push(cur.labels[i]);
    }
    Ok(item)
}

/// Mean background motion from frame `a` to frame `b` over co-visible
/// background-labeled points.
fn background_mean_shift(
    a: &TrackFrame,
    b: &TrackFrame,
    labels: &[PointLabel],
) -> CoreResult<(f64, f64)> {
    let mut n = 0usize;
    let mut mean = (0.0, 0.0);
    for i in 0..a.len().min(b.len()) {
        if labels[i] == PointLabel::Background && a.visible[i] && b.visible[i] {
            mean.0 += b.points[i].0 - a.points[i].0;
            mean.1 += b.points[i].1 - a.points[i].1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Preprocess(
            "background compensation: no background points".to_string(),
        ));
    }
    Ok((mean.0 / n as f64, mean.1 / n as f64))
}

// ── Corpus file format ───────────────────────────────────────────────
//
// One episode per JSON line. Floats are serialized with 9 significant
// digits; reading accepts any JSON float.

/// One corpus record: a track sequence plus outcome metadata, and, for
/// robot rollouts, the privileged states and actions.
#[derive(Debug, Clone)]
pub struct EpisodeTracks {
    pub episode_id: u64,
    pub source: TrackSource,
    pub success: bool,
    pub seq: TrackSequence,
    /// Robot rollouts only: per-frame privileged state features.
    pub states: Option<Vec<Vec<f64>>>,
    /// Robot rollouts only: per-step actions (length frames-1).
    pub actions: Option<Vec<[f64; 3]>>,
}

fn fmt_f9(x: f64) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    format!("{:.8e}", x)
}

fn write_points(out: &mut String, pts: &[(f64, f64)]) {
    out.push('[');
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        out.push_str(&fmt_f9(p.0));
        out.push(',');
        out.push_str(&fmt_f9(p.1));
        out.push(']');
    }
    out.push(']');
}

impl EpisodeTracks {
    /// Serialize as one JSON line.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(4096);
        s.push_str(&format!(
            "{{\"episode_id\":{},\"source\":{},\"success\":{},\"frames\":[",
            self.episode_id,
            match self.source {
                TrackSource::HumanCorpus => "\"human_corpus\"",
                TrackSource::RobotRollout => "\"robot_rollout\"",
            },
            self.success
        ));
        for (fi, f) in self.seq.frames.iter().enumerate() {
            if fi > 0 {
                s.push(',');
            }
            s.push_str(&format!("{{\"t\":{},\"points\":", f.frame_index));
            write_points(&mut s, &f.points);
            s.push_str(",\"visible\":[");
            for (i, v) in f.visible.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(if *v { "true" } else { "false" });
            }
            s.push_str("],\"labels\":[");
            for (i, l) in f.labels.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(match l {
                    PointLabel::Object => "\"object\"",
                    PointLabel::Background => "\"background\"",
                    PointLabel::Agent => "\"agent\"",
                });
            }
            s.push_str("]}");
        }
        s.push_str("],\"resample_events\":[");
        for (i, e) in self.seq.resample_events.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&e.to_string());
        }
        s.push(']');
        if let Some(states) = &self.states {
            s.push_str(",\"states\":[");
            for (i, st) in states.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push('[');
                for (j, v) in st.iter().enumerate() {
                    if j > 0 {
                        s.push(',');
                    }
                    s.push_str(&fmt_f9(*v));
                }
                s.push(']');
            }
            s.push(']');
        }
        if let Some(actions) = &self.actions {
            s.push_str(",\"actions\":[");
            for (i, a) in actions.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(&format!(
                    "[{},{},{}]",
                    fmt_f9(a[0]),
                    fmt_f9(a[1]),
                    fmt_f9(a[2])
                ));
            }
            s.push(']');
        }
        s.push('}');
        s
    }
}

#[derive(Deserialize)]
struct FrameJson {
    t: usize,
    points: Vec<[f64; 2]>,
    visible: Vec<bool>,
    labels: Vec<PointLabel>,
}

#[derive(Deserialize)]
struct EpisodeJson {
    episode_id: u64,
    source: TrackSource,
    success: bool,
    frames: Vec<FrameJson>,
    resample_events: Vec<usize>,
    #[serde(default)]
    states: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    actions: Option<Vec<[f64; 3]>>,
}

pub fn write_corpus(path: &Path, episodes: &[EpisodeTracks]) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        writeln!(w, "{}", ep.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> CoreResult<Vec<EpisodeTracks>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ej: EpisodeJson = serde_json::from_str(&line)
            .map_err(|e| CoreError::Serde(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        let frames = ej
            .frames
            .into_iter()
            .map(|f| TrackFrame {
                points: f.points.iter().map(|p| (p[0], p[1])).collect(),
                visible: f.visible,
                labels: f.labels,
                frame_index: f.t,
            })
            .collect();
        out.push(EpisodeTracks {
            episode_id: ej.episode_id,
            source: ej.source,
            success: ej.success,
            seq: TrackSequence {
                frames,
                resample_events: ej.resample_events,
                source: ej.source,
            },
            states: ej.states,
            actions: ej.actions,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn frame(points: Vec<(f64, f64)>, labels: Vec<PointLabel>, t: usize) -> TrackFrame {
        let visible = vec![true; points.len()];
        TrackFrame {
            points,
            visible,
            labels,
            frame_index: t,
        }
    }

    fn two_frame_seq(p0: Vec<(f64, f64)>, p1: Vec<(f64, f64)>, labels: Vec<PointLabel>) -> TrackSequence {
        TrackSequence {
            frames: vec![frame(p0, labels.clone(), 0), frame(p1, labels, 1)],
            resample_events: vec![],
            source: TrackSource::HumanCorpus,
        }
    }

    #[test]
    fn compensation_subtracts_mean_bg() {
        use PointLabel::*;
        let ds = DeltaSet {
            deltas: vec![(0.03, 0.03), (0.02, 0.03), (0.02, 0.03)],
            labels: vec![Object, Background, Background],
            t: 0,
        };
        let out = compensate_background(&ds).unwrap();
        assert!((out.deltas[0].0 - 0.01).abs() < 1e-15);
        assert!(out.deltas[0].1.abs() < 1e-15);
        for d in &out.deltas[1..] {
            assert!(d.0.abs() < 1e-12 && d.1.abs() < 1e-12);
        }
    }

    #[test]
    fn compensation_zero_camera_keeps_object() {
        use PointLabel::*;
        let ds = DeltaSet {
            deltas: vec![(0.05, -0.02), (0.0, 0.0), (0.0, 0.0)],
            labels: vec![Object, Background, Background],
            t: 0,
        };
        let out = compensate_background(&ds).unwrap();
        assert_eq!(out.deltas[0], (0.05, -0.02));
    }

    #[test]
    fn compensation_hand_case() {
        use PointLabel::*;
        let ds = DeltaSet {
            deltas: vec![(0.02, 0.01), (0.01, 0.0), (0.03, 0.0)],
            labels: vec![Object, Background, Background],
            t: 0,
        };
        let out = compensate_background(&ds).unwrap();
        assert!((out.deltas[0].0 - 0.0).abs() < 1e-15);
        assert!((out.deltas[0].1 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn compensation_without_background_errors() {
        let ds = DeltaSet {
            deltas: vec![(0.02, 0.01)],
            labels: vec![PointLabel::Object],
            t: 0,
        };
        assert!(matches!(
            compensate_background(&ds),
            Err(CoreError::Preprocess(_))
        ));
    }

    #[test]
    fn compensation_is_idempotent() {
        use PointLabel::*;
        let ds = DeltaSet {
            deltas: vec![(0.03, 0.01), (0.011, -0.004), (0.019, 0.002), (0.03, 0.002)],
            labels: vec![Object, Background, Background, Agent],
            t: 3,
        };
        let once = compensate_background(&ds).unwrap();
        let twice = compensate_background(&once).unwrap();
        for (a, b) in once.deltas.iter().zip(&twice.deltas) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_threshold() {
        let mut f = frame(
            vec![(0.5, 0.5); 32],
            vec![PointLabel::Object; 32],
            0,
        );
        for i in 0..10 {
            f.visible[i] = false;
        }
        assert!(check_resample(&f, 32)); // 31.25% lost
        f.visible[9] = true;
        assert!(!check_resample(&f, 32)); // 28.1% lost
        for v in f.visible.iter_mut() {
            *v = true;
        }
        assert!(!check_resample(&f, 32));
    }

    #[test]
    fn static_frame_filter_thresholds() {
        use PointLabel::*;
        // 0.4 px at 256 -> dropped; 0.6 px -> kept; identical frames -> dropped.
        let mk = |px: f64| {
            let d = px / 256.0;
            two_frame_seq(
                vec![(0.5, 0.5), (0.2, 0.2)],
                vec![(0.5 + d, 0.5), (0.2, 0.2)],
                vec![Object, Background],
            )
        };
        assert!(filter_static_frames(&mk(0.4), 256).is_empty());
        assert_eq!(filter_static_frames(&mk(0.6), 256), vec![0]);
        assert!(filter_static_frames(&mk(0.0), 256).is_empty());
    }

    #[test]
    fn trim_leading_trailing_hidden() {
        use PointLabel::*;
        let mut frames = Vec::new();
        for t in 0..100 {
            let mut f = frame(vec![(0.5, 0.5), (0.1, 0.1)], vec![Object, Background], t);
            if !(5..=80).contains(&t) {
                f.visible[0] = false;
            }
            frames.push(f);
        }
        let seq = TrackSequence {
            frames,
            resample_events: vec![],
            source: TrackSource::HumanCorpus,
        };
        let trimmed = trim_inactive(&seq).unwrap();
        assert_eq!(trimmed.frames.len(), 76);
        assert_eq!(trimmed.frames[0].frame_index, 5);
        assert_eq!(trimmed.frames.last().unwrap().frame_index, 80);

        // Fully visible sequence is untouched.
        let seq2 = two_frame_seq(
            vec![(0.5, 0.5)],
            vec![(0.6, 0.5)],
            vec![Object],
        );
        assert_eq!(trim_inactive(&seq2).unwrap().frames.len(), 2);
    }

    fn mixture_seq(n_obj: usize, n_bg: usize) -> TrackSequence {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_obj {
            points.push((0.5 + 0.001 * i as f64, 0.5));
            labels.push(PointLabel::Object);
        }
        for i in 0..n_bg {
            points.push((0.1 + 0.001 * i as f64, 0.1));
            labels.push(PointLabel::Background);
        }
        let moved: Vec<(f64, f64)> = points.iter().map(|p| (p.0 + 0.01, p.1)).collect();
        TrackSequence {
            frames: vec![
                frame(points.clone(), labels.clone(), 0),
                frame(points, labels.clone(), 1),
                frame(moved, labels, 2),
            ],
            resample_events: vec![],
            source: TrackSource::RobotRollout,
        }
    }

    fn opts() -> MixtureOptions {
        MixtureOptions {
            use_masks: true,
            tau_denom: 100.0,
        }
    }

    #[test]
    fn mixture_counts_and_padding() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // 100 object + 50 background = 150 raw, repeated twice.
        let item = build_mixture(&mixture_seq(100, 120), 1, opts(), &mut rng).unwrap();
        assert_eq!(item.raw_len, 150);
        assert_eq!(item.pad_mask.iter().filter(|p| !**p).count(), 150);
        assert_eq!(item.current_points.len(), MIXTURE_WIDTH);
        assert_eq!(item.current_points[0], item.current_points[150]);

        // 200 object + 100 background: exact fit, no padding.
        let item = build_mixture(&mixture_seq(200, 150), 1, opts(), &mut rng).unwrap();
        assert_eq!(item.raw_len, 300);
        assert!(item.pad_mask.iter().all(|p| !*p));

        // Pool exhaustion: 64 object, 16 background -> 80 raw, cyclic pad.
        let item = build_mixture(&mixture_seq(64, 16), 1, opts(), &mut rng).unwrap();
        assert_eq!(item.raw_len, 80);
        assert_eq!(item.current_points[80], item.current_points[0]);
        assert_eq!(item.current_points[299], item.current_points[299 % 80]);
    }

    #[test]
    fn mixture_label_conservation() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let item = build_mixture(&mixture_seq(40, 60), 1, opts(), &mut rng).unwrap();
        let n_obj = item
            .labels
            .iter()
            .zip(&item.pad_mask)
            .filter(|(l, p)| **l == PointLabel::Object && !**p)
            .count();
        let n_bg = item
            .labels
            .iter()
            .zip(&item.pad_mask)
            .filter(|(l, p)| **l != PointLabel::Object && !**p)
            .count();
        assert_eq!(n_obj, 40);
        assert_eq!(n_bg, 20);
        assert!(n_obj >= n_bg);
    }

    #[test]
    fn mixture_deterministic_per_seed() {
        let seq = mixture_seq(30, 40);
        let a = build_mixture(&seq, 1, opts(), &mut ChaCha12Rng::seed_from_u64(77)).unwrap();
        let b = build_mixture(&seq, 1, opts(), &mut ChaCha12Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a.current_points, b.current_points);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn mixture_rejects_resample_spans_and_empty_objects() {
        let mut seq = mixture_seq(10, 10);
        seq.resample_events = vec![2];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            build_mixture(&seq, 1, opts(), &mut rng),
            Err(CoreError::Preprocess(_))
        ));
        let seq2 = mixture_seq(0, 10);
        assert!(matches!(
            build_mixture(&seq2, 1, opts(), &mut rng),
            Err(CoreError::Preprocess(_))
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let seq = mixture_seq(3, 2);
        let eps = vec![EpisodeTracks {
            episode_id: 7,
            source: TrackSource::RobotRollout,
            success: true,
            seq,
            states: Some(vec![vec![0.123456789012, 1.0], vec![0.5, -2.0]]),
            actions: Some(vec![[0.1, -0.2, 1.0]]),
        }];
        write_corpus(&path, &eps).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].episode_id, 7);
        assert!(back[0].success);
        assert_eq!(back[0].seq.frames.len(), 3);
        assert_eq!(back[0].actions.as_ref().unwrap()[0][2], 1.0);
        // 9 significant digits survive.
        let v = back[0].states.as_ref().unwrap()[0][0];
        assert!((v - 0.123456789012).abs() < 1e-9);
    }
}
