//! Experiment pipeline stages shared by the CLI subcommands and the
//! acceptance suite. All randomness flows from the config's root seed,
//! split per component through a counter-based scheme so stages can be
//! re-run in isolation.

use crate::config::RunConfig;
use crate::csvio;
use crate::manifest::hex_digest;
use mpr_core::error::{CoreError, CoreResult};
use mpr_core::predictor::{
    self, prepare_dataset, PredictorMeta, PredictorModel, TrainOutcome,
};
use mpr_core::reward::{
    label_episode, train_temporal_value, ProviderKind, RewardProvider, RewardStep, ValueNet,
};
use mpr_core::rl::{train_bc, train_online, BasePolicy, RunResult};
use mpr_core::tracks::{write_corpus, EpisodeTracks};
use mpr_core::worldsim::{
    generate_corpus, render_tracks, reset, scripted_expert, scripted_failure, step, CorpusSpec,
    Embodiment, EnvKind, EnvParams, FailureMode, HORIZON,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Component tags for seed splitting.
pub mod tag {
    pub const CORPUS: u64 = 1;
    pub const DEMOS: u64 = 2;
    pub const PREDICTOR: u64 = 3;
    pub const BC: u64 = 4;
    pub const VALUE: u64 = 5;
    pub const RL: u64 = 6;
    pub const LABEL: u64 = 7;
    pub const STUDY: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic per-component seed from the root seed and a tag chain.
pub fn component_seed(root: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(root);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

pub fn ensure_dir(path: &Path) -> CoreResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CoreError::config(format!("cannot create {}: {e}", path.display())))
}

// ── Corpus and demo generation ───────────────────────────────────────

pub struct CorpusArtifacts {
    pub episodes: Vec<EpisodeTracks>,
    pub spec: CorpusSpec,
    pub n_generated: usize,
}

/// Generate the corpus described by `[corpus]` (or the robot demo spec).
pub fn gen_corpus(cfg: &RunConfig) -> CoreResult<CorpusArtifacts> {
    let spec = cfg.corpus_spec(component_seed(cfg.seed, &[tag::CORPUS]))?;
    let episodes = generate_corpus(&spec)?;
    let n_generated = episodes.len();
    Ok(CorpusArtifacts {
        episodes,
        spec,
        n_generated,
    })
}

/// Robot demonstrations for behavior cloning and the offline buffer:
/// generate with the demo expert and keep the first `n_demos` successes.
pub fn gen_demos(cfg: &RunConfig) -> CoreResult<Vec<EpisodeTracks>> {
    let spec = cfg.demo_spec(component_seed(cfg.seed, &[tag::DEMOS]))?;
    let all = generate_corpus(&spec)?;
    let demos: Vec<EpisodeTracks> = all.into_iter().filter(|e| e.success).collect();
    if demos.len() < cfg.rl.n_demos {
        return Err(CoreError::config(format!(
            "only {} successful demos generated, need {} (raise rl.demo_episodes or lower rl.demo_noise_std)",
            demos.len(),
            cfg.rl.n_demos
        )));
    }
    Ok(demos.into_iter().take(cfg.rl.n_demos).collect())
}

#[derive(Serialize)]
pub struct CorpusManifestInfo {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub n_success: usize,
    pub n_generated: usize,
}

pub fn write_corpus_with_manifest(
    dir: &Path,
    name: &str,
    art: &CorpusArtifacts,
) -> CoreResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    write_corpus(&path, &art.episodes)?;
    let info = CorpusManifestInfo {
        spec: art.spec.clone(),
        seed: art.spec.seed,
        n_success: art.episodes.iter().filter(|e| e.success).count(),
        n_generated: art.n_generated,
    };
    let sidecar = path.with_extension("manifest.json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&info).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    Ok(path)
}

// ── Predictor ────────────────────────────────────────────────────────

pub struct PredictorArtifacts {
    pub model: PredictorModel,
    pub outcome_metrics: Vec<predictor::EpochMetrics>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub dataset: predictor::PreparedDataset,
}

/// Train the motion predictor on a human corpus.
pub fn train_predictor(
    cfg: &RunConfig,
    episodes: &[EpisodeTracks],
    use_masks: bool,
) -> CoreResult<PredictorArtifacts> {
    let seed = component_seed(cfg.seed, &[tag::PREDICTOR, use_masks as u64]);
    let tcfg = cfg.predictor_cfg(seed);
    let ds = prepare_dataset(episodes, use_masks, tcfg.val_ratio, seed)?;
    let arch = cfg.predictor_arch()?;
    let TrainOutcome {
        mut model,
        metrics,
        best_val_loss,
        best_epoch,
    } = predictor::train(arch, use_masks, &ds, &tcfg)?;
    model.corpus_hash = corpus_content_hash(episodes);
    Ok(PredictorArtifacts {
        model,
        outcome_metrics: metrics,
        best_val_loss,
        best_epoch,
        dataset: ds,
    })
}

/// Content hash over episode identities and track geometry.
pub fn corpus_content_hash(episodes: &[EpisodeTracks]) -> String {
    let mut bytes = Vec::new();
    for ep in episodes {
        bytes.extend_from_slice(&ep.episode_id.to_le_bytes());
        bytes.extend_from_slice(&(ep.seq.len() as u64).to_le_bytes());
        if let Some(f) = ep.seq.frames.first() {
            for p in &f.points {
                bytes.extend_from_slice(&p.0.to_le_bytes());
                bytes.extend_from_slice(&p.1.to_le_bytes());
            }
        }
    }
    hex_digest(&bytes)
}

pub fn save_predictor(dir: &Path, art: &PredictorArtifacts) -> CoreResult<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let ckpt = dir.join("predictor.ckpt");
    mpr_core::numcore::save_checkpoint(&ckpt, &art.model.params)?;
    let meta = art.model.meta(art.best_val_loss);
    let sidecar = dir.join("predictor.json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&meta).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    let metrics = dir.join("predictor_metrics.csv");
    csvio::write_predictor_metrics(&metrics, &art.outcome_metrics)?;
    Ok((ckpt, sidecar))
}

pub fn load_predictor(ckpt: &Path) -> CoreResult<PredictorModel> {
    if !ckpt.exists() {
        return Err(CoreError::config(format!(
            "missing predictor checkpoint: {}",
            ckpt.display()
        )));
    }
    let sidecar = ckpt.with_extension("json");
    if !sidecar.exists() {
        return Err(CoreError::config(format!(
            "missing predictor sidecar: {}",
            sidecar.display()
        )));
    }
    let meta: PredictorMeta = serde_json::from_str(
        &std::fs::read_to_string(&sidecar)
            .map_err(|e| CoreError::config(format!("cannot read {}: {e}", sidecar.display())))?,
    )
    .map_err(|e| CoreError::Serde(e.to_string()))?;
    let store = mpr_core::numcore::load_checkpoint(ckpt)?;
    PredictorModel::from_store(&meta, store)
}

// ── Base policy ──────────────────────────────────────────────────────

pub struct BcArtifacts {
    pub policy: BasePolicy,
    pub train_mse: f64,
    pub eval_success: f64,
}

pub fn train_base_policy(cfg: &RunConfig, demos: &[EpisodeTracks]) -> CoreResult<BcArtifacts> {
    let kind = cfg.env_kind();
    let seed = component_seed(cfg.seed, &[tag::BC]);
    let (policy, train_mse) = train_bc(kind, demos, cfg.rl.n_demos, &cfg.bc_cfg(seed))?;
    // Evaluate on a fixed battery drawn from the BC component seed.
    let params = EnvParams::robot(kind);
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0xe7a));
    let battery: Vec<_> = (0..cfg.eval.episodes).map(|_| reset(&params, &mut rng)).collect();
    let eval_success =
        mpr_core::rl::evaluate_policy(&params, &battery, &policy, None, 0.0)?;
    Ok(BcArtifacts {
        policy,
        train_mse,
        eval_success,
    })
}

#[derive(Serialize)]
pub struct BcSidecar {
    pub train_mse: f64,
    pub eval_success: f64,
    pub n_demos: usize,
}

pub fn save_base_policy(dir: &Path, art: &BcArtifacts, n_demos: usize) -> CoreResult<PathBuf> {
    ensure_dir(dir)?;
    let ckpt = dir.join("bc.ckpt");
    mpr_core::numcore::save_checkpoint(&ckpt, &art.policy.params)?;
    let sidecar = dir.join("bc.json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&BcSidecar {
            train_mse: art.train_mse,
            eval_success: (art.eval_success * 100.0).round() / 100.0,
            n_demos,
        })
        .map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    Ok(ckpt)
}

pub fn load_base_policy(kind: EnvKind, ckpt: &Path) -> CoreResult<BasePolicy> {
    if !ckpt.exists() {
        return Err(CoreError::config(format!(
            "missing base policy checkpoint: {}",
            ckpt.display()
        )));
    }
    BasePolicy::from_store(kind, mpr_core::numcore::load_checkpoint(ckpt)?)
}

// ── Providers ────────────────────────────────────────────────────────

/// Assemble a reward provider from config plus the learned pieces it
/// needs (a predictor for motion alignment, a value net for the
/// temporal-distance baseline).
pub fn build_provider(
    cfg: &RunConfig,
    kind: ProviderKind,
    predictor_model: Option<&PredictorModel>,
    value_net: Option<&ValueNet>,
) -> CoreResult<RewardProvider> {
    match kind {
        ProviderKind::Mpr => {
            let model = predictor_model.ok_or_else(|| {
                CoreError::config("provider `mpr` needs a trained predictor checkpoint")
            })?;
            Ok(RewardProvider::Mpr {
                model: model.clone(),
                eps_motion: cfg.reward.eps_motion,
                use_masks: cfg.reward.use_masks,
            })
        }
        ProviderKind::TemporalDistance => {
            let net = value_net.ok_or_else(|| {
                CoreError::config("provider `temporal_distance` needs a trained value net")
            })?;
            Ok(RewardProvider::TemporalDistance { net: net.clone() })
        }
        ProviderKind::Sparse => Ok(RewardProvider::Sparse),
        ProviderKind::PrivilegedDense => Ok(RewardProvider::PrivilegedDense {
            kind: cfg.env_kind(),
        }),
    }
}

pub fn train_value_net(cfg: &RunConfig, corpus: &[EpisodeTracks]) -> CoreResult<ValueNet> {
    let seed = component_seed(cfg.seed, &[tag::VALUE]);
    train_temporal_value(corpus, &cfg.temporal_cfg(seed))
}

// ── RL runs ──────────────────────────────────────────────────────────

pub struct RlRunOutput {
    pub provider: ProviderKind,
    pub seed_index: u64,
    pub result: RunResult,
}

/// One seeded residual-RL run.
pub fn run_rl(
    cfg: &RunConfig,
    provider: &RewardProvider,
    demos: &[EpisodeTracks],
    base: &BasePolicy,
    seed_index: u64,
) -> CoreResult<RlRunOutput> {
    let kind = cfg.env_kind();
    let params = EnvParams::robot(kind);
    let run_seed = component_seed(
        cfg.seed,
        &[tag::RL, provider_tag(provider.kind()), seed_index],
    );
    let result = train_online(
        &params,
        demos,
        base,
        provider,
        &cfg.sac_cfg(run_seed),
        &cfg.online_cfg(run_seed),
    )?;
    Ok(RlRunOutput {
        provider: provider.kind(),
        seed_index,
        result,
    })
}

fn provider_tag(kind: ProviderKind) -> u64 {
    match kind {
        ProviderKind::Mpr => 11,
        ProviderKind::TemporalDistance => 12,
        ProviderKind::Sparse => 13,
        ProviderKind::PrivilegedDense => 14,
    }
}

pub fn save_run(dir: &Path, out: &RlRunOutput) -> CoreResult<PathBuf> {
    ensure_dir(dir)?;
    let metrics = dir.join("metrics.csv");
    csvio::write_run_metrics(&metrics, &out.result.rows)?;
    let actor_ckpt = dir.join("actor.ckpt");
    mpr_core::numcore::save_checkpoint(&actor_ckpt, &out.result.agent.actor)?;
    #[derive(Serialize)]
    struct RunSidecar {
        provider: String,
        seed_index: u64,
        base_success: f64,
        final_success: f64,
        best_success: f64,
        pretrain_first_loss: f64,
        pretrain_last_loss: f64,
        updates: u64,
    }
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&RunSidecar {
            provider: out.provider.id().to_string(),
            seed_index: out.seed_index,
            base_success: out.result.base_success,
            final_success: out.result.final_success,
            best_success: out.result.best_success,
            pretrain_first_loss: out.result.pretrain_first_loss,
            pretrain_last_loss: out.result.pretrain_last_loss,
            updates: out.result.agent.updates,
        })
        .map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    Ok(metrics)
}

/// Run a set of jobs on a small worker pool (isolated single-threaded
/// runs; results are returned in job order).
pub fn run_jobs<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> CoreResult<Vec<R>>
where
    J: Send,
    R: Send,
    F: Fn(J) -> CoreResult<R> + Sync,
{
    let n = jobs.len();
    let queue: Mutex<VecDeque<(usize, J)>> = Mutex::new(jobs.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<CoreResult<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(n.max(1)) {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop_front();
                match job {
                    Some((i, j)) => {
                        let r = f(j);
                        results.lock().expect("results lock")[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("job completed"))
        .collect()
}

// ── Scripted batteries for reward studies ────────────────────────────

/// Scripted success episodes on the robot embodiment (fixed camera).
pub fn robot_success_battery(
    kind: EnvKind,
    n: usize,
    sigma_a: f64,
    seed: u64,
) -> CoreResult<Vec<EpisodeTracks>> {
    let params = EnvParams::robot(kind);
    let spec = CorpusSpec {
        env_id: kind,
        n_episodes: n,
        hesitation_prob: 0.0,
        pause_length_range: [0, 0],
        camera_jitter_std: 0.0,
        expert_noise_std: sigma_a,
        embodiment: Embodiment::Robot,
        seed,
        vary_style: false,
    };
    let episodes = generate_corpus(&spec)?;
    let successes: Vec<EpisodeTracks> = episodes.into_iter().filter(|e| e.success).take(n).collect();
    if successes.len() < n {
        return Err(CoreError::config(format!(
            "robot success battery: only {} successes of {n} requested",
            successes.len()
        )));
    }
    let _ = params;
    Ok(successes)
}

/// Scripted miss-handle failures on the robot embodiment.
pub fn robot_failure_battery(
    kind: EnvKind,
    n: usize,
    sigma_a: f64,
    seed: u64,
) -> CoreResult<Vec<EpisodeTracks>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ep = scripted_failure(kind, FailureMode::MissHandle, i as u64, sigma_a, &mut rng);
        if ep.success {
            return Err(CoreError::config(
                "miss-handle script unexpectedly succeeded",
            ));
        }
        out.push(ep);
    }
    Ok(out)
}

/// Label a battery with a provider and write one reward dump per episode.
pub fn label_battery(
    provider: &RewardProvider,
    episodes: &[EpisodeTracks],
    dir: Option<&Path>,
    seed: u64,
) -> CoreResult<Vec<Vec<RewardStep>>> {
    if let Some(dir) = dir {
        ensure_dir(dir)?;
    }
    let mut out = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let steps = label_episode(provider, ep, HORIZON, component_seed(seed, &[tag::LABEL, i as u64]))?;
        if let Some(dir) = dir {
            let path = dir.join(format!("ep_{:04}.csv", ep.episode_id));
            csvio::write_reward_dump(&path, provider.kind().id(), &steps)?;
        }
        out.push(steps);
    }
    Ok(out)
}

// ── Hesitation study corpora ─────────────────────────────────────────

pub struct PausedPair {
    pub control: Vec<EpisodeTracks>,
    pub paused: Vec<EpisodeTracks>,
    /// Per-episode pause insertion index (first inserted frame position).
    pub pause_at: Vec<usize>,
    pub pause_len: Vec<usize>,
}

/// Generate a pause-free human corpus and a paused variant sharing every
/// original frame (same states, same jitter draws); pause frames re-render
/// the frozen state with fresh jitter.
pub fn paused_corpus_pair(
    kind: EnvKind,
    n_episodes: usize,
    sigma_a: f64,
    jitter_std: f64,
    pause_range: [u32; 2],
    seed: u64,
) -> CoreResult<PausedPair> {
    let params = EnvParams::human(kind);
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0x9a15e));
    let mut control = Vec::new();
    let mut paused = Vec::new();
    let mut pause_at = Vec::new();
    let mut pause_len = Vec::new();
    let mut episode_id = 0u64;
    while control.len() < n_episodes {
        // Roll one expert episode capturing states and jitter draws.
        let mut state = reset(&params, &mut rng);
        let mut states = vec![state];
        let mut jitters = Vec::new();
        let mut success = false;
        loop {
            let action = scripted_expert(&params, &state, sigma_a, &mut rng);
            let (next, done, info) = step(&params, &state, &action);
            states.push(next);
            success |= info.success;
            state = next;
            if done {
                break;
            }
        }
        for _ in 0..states.len() {
            jitters.push((
                jitter_std * mpr_core::numcore::init::gaussian(&mut rng),
                jitter_std * mpr_core::numcore::init::gaussian(&mut rng),
            ));
        }
        episode_id += 1;
        if !success {
            continue;
        }

        let render = |st: &mpr_core::worldsim::EnvState, j: (f64, f64), t: usize| {
            let mut f = render_tracks(&params, st, j);
            f.frame_index = t;
            f
        };

        let control_frames: Vec<_> = states
            .iter()
            .zip(&jitters)
            .enumerate()
            .map(|(t, (st, j))| render(st, *j, t))
            .collect();

        // Insert one pause at a random interior position.
        let m = rng.random_range(3..states.len().saturating_sub(3).max(4));
        let k = rng.random_range(pause_range[0]..=pause_range[1]) as usize;
        let mut paused_frames = Vec::with_capacity(states.len() + k);
        for t in 0..m {
            paused_frames.push(control_frames[t].clone());
        }
        for i in 0..k {
            let j = (
                jitter_std * mpr_core::numcore::init::gaussian(&mut rng),
                jitter_std * mpr_core::numcore::init::gaussian(&mut rng),
            );
            paused_frames.push(render(&states[m], j, m + i));
        }
        for t in m..states.len() {
            let mut f = control_frames[t].clone();
            f.frame_index = t + k;
            paused_frames.push(f);
        }

        let src = mpr_core::tracks::TrackSource::HumanCorpus;
        control.push(EpisodeTracks {
            episode_id,
            source: src,
            success: true,
            seq: mpr_core::tracks::TrackSequence {
                frames: control_frames,
                resample_events: vec![],
                source: src,
            },
            states: None,
            actions: None,
        });
        paused.push(EpisodeTracks {
            episode_id,
            source: src,
            success: true,
            seq: mpr_core::tracks::TrackSequence {
                frames: paused_frames,
                resample_events: vec![],
                source: src,
            },
            states: None,
            actions: None,
        });
        pause_at.push(m);
        pause_len.push(k);
    }
    Ok(PausedPair {
        control,
        paused,
        pause_at,
        pause_len,
    })
}

// ── Human-embodiment fixed-start battery (reward curves, ablation) ──

/// Scripted success demonstrations with the human embodiment and camera
/// jitter, from a fixed nominal start so episode phases align across the
/// battery (reward-curve figures and the masking ablation).
pub fn human_success_battery(
    kind: EnvKind,
    n: usize,
    sigma_a: f64,
    jitter_std: f64,
    seed: u64,
) -> CoreResult<Vec<EpisodeTracks>> {
    let params = EnvParams::human(kind);
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0xba77e51));
    let mut out = Vec::new();
    let mut episode_id = 0u64;
    while out.len() < n {
        let mut state = reset(&params, &mut rng);
        // Fixed nominal start: pin the gripper to the box center.
        state.gripper = match kind {
            EnvKind::HingedDoor => (0.84, 0.5),
            EnvKind::CornerFold => (0.36, 0.75),
        };
        let draw = |rng: &mut ChaCha12Rng| {
            (
                jitter_std * mpr_core::numcore::init::gaussian(rng),
                jitter_std * mpr_core::numcore::init::gaussian(rng),
            )
        };
        let j0 = draw(&mut rng);
        let mut frames = vec![{
            let mut f = render_tracks(&params, &state, j0);
            f.frame_index = 0;
            f
        }];
        let mut success = false;
        loop {
            let action = scripted_expert(&params, &state, sigma_a, &mut rng);
            let (next, done, info) = step(&params, &state, &action);
            let j = draw(&mut rng);
            let mut f = render_tracks(&params, &next, j);
            f.frame_index = frames.len();
            frames.push(f);
            success |= info.success;
            state = next;
            if done {
                break;
            }
        }
        episode_id += 1;
        if !success {
            continue;
        }
        let src = mpr_core::tracks::TrackSource::HumanCorpus;
        out.push(EpisodeTracks {
            episode_id,
            source: src,
            success: true,
            seq: mpr_core::tracks::TrackSequence {
                frames,
                resample_events: vec![],
                source: src,
            },
            states: None,
            actions: None,
        });
    }
    Ok(out)
}
