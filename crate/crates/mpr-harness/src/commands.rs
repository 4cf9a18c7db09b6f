//! Subcommand implementations. Each writes its artifacts plus a manifest
//! with input/output hashes into the config's output directory; the same
//! entry points drive the acceptance suite.

use crate::aggregate::{
    self, mean_raw_reward, pooled_reward_std, provider_aggregate, reward_curve_rows,
    success_curve_rows, ProviderAggregate,
};
use crate::config::RunConfig;
use crate::csvio;
use crate::manifest::Manifest;
use crate::pipeline::{self, component_seed, ensure_dir, tag};
use mpr_core::error::{CoreError, CoreResult};
use mpr_core::predictor::PredictorModel;
use mpr_core::reward::{ProviderKind, RewardProvider, ValueNet};
use mpr_core::rl::{evaluate_policy, BasePolicy, SacAgent};
use mpr_core::tracks::{read_corpus, EpisodeTracks};
use mpr_core::worldsim::{reset, EnvParams};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Artifact locations within an output directory.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Paths {
        Paths {
            root: cfg.output_root(),
        }
    }

    pub fn corpus(&self, embodiment: &str) -> PathBuf {
        self.root.join(format!("corpus_{embodiment}.jsonl"))
    }

    pub fn demos(&self) -> PathBuf {
        self.root.join("demos_robot.jsonl")
    }

    pub fn predictor_dir(&self, use_masks: bool) -> PathBuf {
        if use_masks {
            self.root.clone()
        } else {
            self.root.join("nomask")
        }
    }

    pub fn bc_ckpt(&self) -> PathBuf {
        self.root.join("bc.ckpt")
    }

    pub fn run_dir(&self, provider: &str, seed_index: u64) -> PathBuf {
        self.root.join(format!("run_{provider}_s{seed_index}"))
    }
}

fn write_config_copy(cfg: &RunConfig, dir: &Path) -> CoreResult<String> {
    ensure_dir(dir)?;
    let text = cfg.to_toml();
    std::fs::write(dir.join("config.toml"), &text)?;
    Ok(text)
}

// ── gen-demos ────────────────────────────────────────────────────────

pub fn cmd_gen_demos(cfg: &RunConfig) -> CoreResult<PathBuf> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let art = pipeline::gen_corpus(cfg)?;
    let name = format!("corpus_{}.jsonl", cfg.corpus.embodiment);
    let path = pipeline::write_corpus_with_manifest(&paths.root, &name, &art)?;
    let mut m = Manifest::new("gen-demos", cfg.seed, &text);
    m.add_output(&path)?;
    m.write(&paths.root.join("gen_demos_manifest.json"), started)?;
    Ok(path)
}

// ── train-predictor ──────────────────────────────────────────────────

pub fn cmd_train_predictor(cfg: &RunConfig, corpus_path: Option<&Path>) -> CoreResult<PathBuf> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let use_masks = cfg.reward.use_masks;
    let dir = paths.predictor_dir(use_masks);
    let text = write_config_copy(cfg, &dir)?;
    let corpus_path = corpus_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.corpus("human"));
    if !corpus_path.exists() {
        return Err(CoreError::config(format!(
            "missing corpus: {} (run gen-demos first)",
            corpus_path.display()
        )));
    }
    let episodes = read_corpus(&corpus_path)?;
    let art = pipeline::train_predictor(cfg, &episodes, use_masks)?;
    let (ckpt, sidecar) = pipeline::save_predictor(&dir, &art)?;
    let mut m = Manifest::new("train-predictor", cfg.seed, &text);
    m.add_input(&corpus_path)?;
    m.add_output(&ckpt)?;
    m.add_output(&sidecar)?;
    m.add_output(&dir.join("predictor_metrics.csv"))?;
    m.write(&dir.join("train_predictor_manifest.json"), started)?;
    Ok(ckpt)
}

// ── train-bc ─────────────────────────────────────────────────────────

pub fn cmd_train_bc(cfg: &RunConfig) -> CoreResult<PathBuf> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let demos = pipeline::gen_demos(cfg)?;
    mpr_core::tracks::write_corpus(&paths.demos(), &demos)?;
    let art = pipeline::train_base_policy(cfg, &demos)?;
    let ckpt = pipeline::save_base_policy(&paths.root, &art, cfg.rl.n_demos)?;
    let mut m = Manifest::new("train-bc", cfg.seed, &text);
    m.add_output(&paths.demos())?;
    m.add_output(&ckpt)?;
    m.write(&paths.root.join("train_bc_manifest.json"), started)?;
    Ok(ckpt)
}

// ── provider assembly from artifacts on disk ─────────────────────────

pub fn provider_from_artifacts(
    cfg: &RunConfig,
    kind: ProviderKind,
    paths: &Paths,
) -> CoreResult<RewardProvider> {
    match kind {
        ProviderKind::Mpr => {
            let ckpt = paths.predictor_dir(cfg.reward.use_masks).join("predictor.ckpt");
            let model = pipeline::load_predictor(&ckpt)?;
            pipeline::build_provider(cfg, kind, Some(&model), None)
        }
        ProviderKind::TemporalDistance => {
            let corpus_path = paths.corpus("human");
            if !corpus_path.exists() {
                return Err(CoreError::config(format!(
                    "missing corpus for temporal value net: {}",
                    corpus_path.display()
                )));
            }
            let episodes = read_corpus(&corpus_path)?;
            let net = pipeline::train_value_net(cfg, &episodes)?;
            pipeline::build_provider(cfg, kind, None, Some(&net))
        }
        _ => pipeline::build_provider(cfg, kind, None, None),
    }
}

// ── label ────────────────────────────────────────────────────────────

pub fn cmd_label(cfg: &RunConfig, corpus_path: &Path) -> CoreResult<PathBuf> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    if !corpus_path.exists() {
        return Err(CoreError::config(format!(
            "missing corpus: {}",
            corpus_path.display()
        )));
    }
    let kind = cfg.provider_kind();
    let provider = provider_from_artifacts(cfg, kind, &paths)?;
    let episodes = read_corpus(corpus_path)?;
    let dir = paths.root.join(format!("rewards_{}", kind.id()));
    pipeline::label_battery(
        &provider,
        &episodes,
        Some(&dir),
        component_seed(cfg.seed, &[tag::LABEL]),
    )?;
    let mut m = Manifest::new("label", cfg.seed, &text);
    m.add_input(corpus_path)?;
    m.write(&dir.join("label_manifest.json"), started)?;
    Ok(dir)
}

// ── train-rl ─────────────────────────────────────────────────────────

pub fn cmd_train_rl(cfg: &RunConfig, seed_index: u64) -> CoreResult<PathBuf> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let kind = cfg.env_kind();
    let demos_path = paths.demos();
    if !demos_path.exists() {
        return Err(CoreError::config(format!(
            "missing demos: {} (run train-bc first)",
            demos_path.display()
        )));
    }
    let demos = read_corpus(&demos_path)?;
    let base = pipeline::load_base_policy(kind, &paths.bc_ckpt())?;
    let provider = provider_from_artifacts(cfg, cfg.provider_kind(), &paths)?;
    let out = pipeline::run_rl(cfg, &provider, &demos, &base, seed_index)?;
    let dir = paths.run_dir(cfg.provider_kind().id(), seed_index);
    let metrics = pipeline::save_run(&dir, &out)?;
    let mut m = Manifest::new("train-rl", cfg.seed, &text);
    m.add_input(&demos_path)?;
    m.add_input(&paths.bc_ckpt())?;
    m.add_output(&metrics)?;
    m.write(&dir.join("train_rl_manifest.json"), started)?;
    Ok(metrics)
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: usize,
    pub checkpoint: String,
}

/// Evaluate the final checkpoint of a run directory (or, with no run, the
/// bare base policy) over the config's evaluation battery.
pub fn cmd_evaluate(cfg: &RunConfig, run_dir: Option<&Path>) -> CoreResult<EvalReport> {
    let paths = Paths::new(cfg);
    let kind = cfg.env_kind();
    let base = pipeline::load_base_policy(kind, &paths.bc_ckpt())?;
    let params = EnvParams::robot(kind);
    let eval_seed = component_seed(cfg.seed, &[tag::RL, 0xe7a1]);
    let mut rng = ChaCha12Rng::seed_from_u64(eval_seed);
    let battery: Vec<_> = (0..cfg.eval.episodes)
        .map(|_| reset(&params, &mut rng))
        .collect();
    let (success, name) = match run_dir {
        Some(dir) => {
            let actor_path = dir.join("actor.ckpt");
            if !actor_path.exists() {
                return Err(CoreError::config(format!(
                    "missing actor checkpoint: {}",
                    actor_path.display()
                )));
            }
            let store = mpr_core::numcore::load_checkpoint(&actor_path)?;
            let agent = agent_for_eval(cfg, kind, store)?;
            (
                evaluate_policy(&params, &battery, &base, Some(&agent), cfg.rl.residual_alpha)?,
                actor_path.display().to_string(),
            )
        }
        None => (
            evaluate_policy(&params, &battery, &base, None, 0.0)?,
            paths.bc_ckpt().display().to_string(),
        ),
    };
    let report = EvalReport {
        success_rate: (success * 100.0).round() / 100.0,
        episodes: cfg.eval.episodes,
        checkpoint: name,
    };
    let out = paths.root.join("eval.json");
    ensure_dir(&paths.root)?;
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    Ok(report)
}

/// Rebuild an agent around a saved actor store (critics untouched; only
/// the deterministic policy is needed for evaluation).
fn agent_for_eval(cfg: &RunConfig, kind: mpr_core::worldsim::EnvKind, store: mpr_core::numcore::ParamStore) -> CoreResult<SacAgent> {
    let obs_dim = mpr_core::rl::obs_width(kind);
    let norm = mpr_core::rl::ObsNorm::load_from(&store, "norm")?;
    let mut agent = SacAgent::init(obs_dim, cfg.sac_cfg(0), norm)?;
    if agent.actor.len() != store.len() {
        return Err(CoreError::config("actor checkpoint layout mismatch"));
    }
    agent.actor = store;
    Ok(agent)
}

// ── compare ──────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct ExperimentReport {
    pub env: String,
    pub base_success: f64,
    pub bc_train_mse: f64,
    pub seeds_per_provider: usize,
    pub providers: Vec<ProviderAggregate>,
    pub metrics_paths: Vec<String>,
}

/// Shared preparation for multi-provider experiments: human corpus,
/// predictor (when needed), value net (when needed), demos, base policy.
pub struct Prepared {
    pub corpus: Vec<EpisodeTracks>,
    pub predictor: Option<PredictorModel>,
    pub value_net: Option<ValueNet>,
    pub demos: Vec<EpisodeTracks>,
    pub base: BasePolicy,
    pub bc_train_mse: f64,
    pub bc_eval_success: f64,
}

pub fn prepare_shared(
    cfg: &RunConfig,
    providers: &[ProviderKind],
    reuse_predictor: Option<PredictorModel>,
) -> CoreResult<Prepared> {
    let corpus = pipeline::gen_corpus(cfg)?.episodes;
    let predictor = if providers.contains(&ProviderKind::Mpr) {
        match reuse_predictor {
            Some(m) => Some(m),
            None => Some(pipeline::train_predictor(cfg, &corpus, cfg.reward.use_masks)?.model),
        }
    } else {
        None
    };
    let value_net = if providers.contains(&ProviderKind::TemporalDistance) {
        Some(pipeline::train_value_net(cfg, &corpus)?)
    } else {
        None
    };
    let demos = pipeline::gen_demos(cfg)?;
    let bc = pipeline::train_base_policy(cfg, &demos)?;
    Ok(Prepared {
        corpus,
        predictor,
        value_net,
        demos,
        base: bc.policy,
        bc_train_mse: bc.train_mse,
        bc_eval_success: bc.eval_success,
    })
}

/// Train every provider x seed combination (parallel isolated jobs),
/// write per-run artifacts and the aggregate report + figure CSVs.
pub fn cmd_compare(
    cfg: &RunConfig,
    providers: &[ProviderKind],
    n_seeds: usize,
    workers: usize,
) -> CoreResult<ExperimentReport> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let prep = prepare_shared(cfg, providers, None)?;

    let mut jobs = Vec::new();
    for &p in providers {
        let provider = pipeline::build_provider(cfg, p, prep.predictor.as_ref(), prep.value_net.as_ref())?;
        for s in 0..n_seeds {
            jobs.push((provider.clone(), s as u64));
        }
    }
    let demos = &prep.demos;
    let base = &prep.base;
    let outputs = pipeline::run_jobs(jobs, workers, |(provider, seed_index)| {
        pipeline::run_rl(cfg, &provider, demos, base, seed_index)
    })?;

    let mut metrics_paths = Vec::new();
    for out in &outputs {
        let dir = paths.run_dir(out.provider.id(), out.seed_index);
        let metrics = pipeline::save_run(&dir, out)?;
        metrics_paths.push(metrics.display().to_string());
    }

    // Aggregate per provider.
    let mut provider_rows = Vec::new();
    let mut aggregates = Vec::new();
    let base_success = outputs
        .first()
        .map(|o| o.result.base_success)
        .unwrap_or(prep.bc_eval_success);
    for &p in providers {
        let runs: Vec<&pipeline::RlRunOutput> =
            outputs.iter().filter(|o| o.provider == p).collect();
        let per_seed_rows: Vec<&[mpr_core::rl::EpisodeRow]> =
            runs.iter().map(|r| r.result.rows.as_slice()).collect();
        provider_rows.extend(success_curve_rows(p.id(), &per_seed_rows, base_success)?);
        let seeds: Vec<u64> = runs.iter().map(|r| r.seed_index).collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.result.final_success).collect();
        let bests: Vec<f64> = runs.iter().map(|r| r.result.best_success).collect();
        aggregates.push(provider_aggregate(p.id(), &seeds, &finals, &bests));
    }
    csvio::write_success_curves(&paths.root.join("success_curves.csv"), &provider_rows)?;

    // Reward-curve figures over a scripted robot success battery.
    let battery = pipeline::robot_success_battery(
        cfg.env_kind(),
        50,
        cfg.rl.demo_noise_std,
        component_seed(cfg.seed, &[tag::STUDY, 0x5b]),
    )?;
    let mut curve_rows = Vec::new();
    for &p in providers {
        let provider = pipeline::build_provider(cfg, p, prep.predictor.as_ref(), prep.value_net.as_ref())?;
        let labels = pipeline::label_battery(
            &provider,
            &battery,
            None,
            component_seed(cfg.seed, &[tag::STUDY, 0xcb]),
        )?;
        curve_rows.extend(reward_curve_rows(p.id(), &labels, 20));
    }
    csvio::write_reward_curves(&paths.root.join("reward_curves.csv"), &curve_rows)?;

    let report = ExperimentReport {
        env: cfg.env.id.clone(),
        base_success,
        bc_train_mse: prep.bc_train_mse,
        seeds_per_provider: n_seeds,
        providers: aggregates,
        metrics_paths,
    };
    std::fs::write(
        paths.root.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    let mut m = Manifest::new("compare", cfg.seed, &text);
    m.add_output(&paths.root.join("success_curves.csv"))?;
    m.add_output(&paths.root.join("reward_curves.csv"))?;
    m.add_output(&paths.root.join("report.json"))?;
    m.write(&paths.root.join("compare_manifest.json"), started)?;
    Ok(report)
}

// ── ablate-nomask ────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct AblationReport {
    pub masked_reward_std: f64,
    pub unmasked_reward_std: f64,
    pub masked_mean_raw: f64,
    pub unmasked_mean_raw: f64,
    pub episodes: usize,
    pub rl: Option<AblationRl>,
}

#[derive(Serialize)]
pub struct AblationRl {
    pub masked_median_final: f64,
    pub unmasked_median_final: f64,
}

/// The masking ablation: train an unmasked predictor, label a battery of
/// 50 demonstration-style episodes under both configurations and compare
/// per-step reward noise; optionally run the residual-RL comparison.
pub fn cmd_ablate_nomask(cfg: &RunConfig, rl_seeds: usize, workers: usize) -> CoreResult<AblationReport> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let corpus = pipeline::gen_corpus(cfg)?.episodes;
    let masked = pipeline::train_predictor(cfg, &corpus, true)?;
    let unmasked = pipeline::train_predictor(cfg, &corpus, false)?;
    pipeline::save_predictor(&paths.predictor_dir(true), &masked)?;
    pipeline::save_predictor(&paths.predictor_dir(false), &unmasked)?;

    let battery = pipeline::human_success_battery(
        cfg.env_kind(),
        50,
        cfg.corpus.expert_noise_std,
        cfg.corpus.camera_jitter_std,
        component_seed(cfg.seed, &[tag::STUDY, 0xab]),
    )?;
    let masked_provider = RewardProvider::Mpr {
        model: masked.model.clone(),
        eps_motion: cfg.reward.eps_motion,
        use_masks: true,
    };
    let unmasked_provider = RewardProvider::Mpr {
        model: unmasked.model.clone(),
        eps_motion: cfg.reward.eps_motion,
        use_masks: false,
    };
    let label_seed = component_seed(cfg.seed, &[tag::STUDY, 0xab, 2]);
    let masked_labels = pipeline::label_battery(&masked_provider, &battery, None, label_seed)?;
    let unmasked_labels = pipeline::label_battery(&unmasked_provider, &battery, None, label_seed)?;

    let mut curve_rows = reward_curve_rows("mpr", &masked_labels, 20);
    curve_rows.extend(reward_curve_rows("mpr_nomask", &unmasked_labels, 20));
    csvio::write_reward_curves(&paths.root.join("ablation_reward_curves.csv"), &curve_rows)?;

    let rl = if rl_seeds > 0 {
        let mut with_rl_cfg = cfg.clone();
        with_rl_cfg.reward.use_masks = true;
        let prep = prepare_shared(&with_rl_cfg, &[ProviderKind::Mpr], Some(masked.model.clone()))?;
        let mut jobs = Vec::new();
        for s in 0..rl_seeds {
            jobs.push((masked_provider.clone(), true, s as u64));
            jobs.push((unmasked_provider.clone(), false, s as u64));
        }
        let demos = &prep.demos;
        let base = &prep.base;
        let outputs = pipeline::run_jobs(jobs, workers, |(provider, is_masked, seed_index)| {
            let mut run_cfg = cfg.clone();
            run_cfg.reward.use_masks = is_masked;
            pipeline::run_rl(&run_cfg, &provider, demos, base, seed_index)
                .map(|o| (is_masked, o))
        })?;
        for (is_masked, out) in &outputs {
            let name = if *is_masked { "mpr" } else { "mpr_nomask" };
            pipeline::save_run(&paths.run_dir(name, out.seed_index), out)?;
        }
        let mut masked_finals: Vec<f64> = outputs
            .iter()
            .filter(|(m, _)| *m)
            .map(|(_, o)| o.result.final_success)
            .collect();
        let mut unmasked_finals: Vec<f64> = outputs
            .iter()
            .filter(|(m, _)| !*m)
            .map(|(_, o)| o.result.final_success)
            .collect();
        Some(AblationRl {
            masked_median_final: aggregate::median(&mut masked_finals),
            unmasked_median_final: aggregate::median(&mut unmasked_finals),
        })
    } else {
        None
    };

    let report = AblationReport {
        masked_reward_std: pooled_reward_std(&masked_labels),
        unmasked_reward_std: pooled_reward_std(&unmasked_labels),
        masked_mean_raw: mean_raw_reward(&masked_labels),
        unmasked_mean_raw: mean_raw_reward(&unmasked_labels),
        episodes: battery.len(),
        rl,
    };
    std::fs::write(
        paths.root.join("ablation.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    let mut m = Manifest::new("ablate-nomask", cfg.seed, &text);
    m.add_output(&paths.root.join("ablation.json"))?;
    m.write(&paths.root.join("ablate_manifest.json"), started)?;
    Ok(report)
}

// ── hesitation-study ─────────────────────────────────────────────────

#[derive(Serialize)]
pub struct HesitationReport {
    pub episodes: usize,
    /// Mean over pre-pause frames of V_paused - V_control (negative when
    /// hesitation biases earlier frames down).
    pub value_gap: f64,
    /// Max |reward difference| on shared pre-pause transitions.
    pub mpr_max_pre_pause_diff: f64,
    /// Mean |reward difference| on post-pause transitions (shifted task
    /// progress; reported, not asserted).
    pub mpr_mean_post_pause_diff: f64,
}

pub fn cmd_hesitation_study(cfg: &RunConfig, predictor: Option<&PredictorModel>) -> CoreResult<HesitationReport> {
    let started = Instant::now();
    let paths = Paths::new(cfg);
    let text = write_config_copy(cfg, &paths.root)?;
    let kind = cfg.env_kind();
    let study_seed = component_seed(cfg.seed, &[tag::STUDY, 0x4e]);
    let pair = pipeline::paused_corpus_pair(
        kind,
        60,
        cfg.corpus.expert_noise_std,
        cfg.corpus.camera_jitter_std,
        [15, 30],
        study_seed,
    )?;

    // Temporal-distance value nets on each corpus.
    let vc = pipeline::train_value_net(cfg, &pair.control)?;
    let vp = {
        // Separate component seed so the two trainings are independent.
        let mut cfg2 = cfg.clone();
        cfg2.seed = cfg.seed ^ 0x77;
        pipeline::train_value_net(&cfg2, &pair.paused)?
    };
    let mut gaps = Vec::new();
    for (ei, ep) in pair.control.iter().enumerate() {
        let m = pair.pause_at[ei];
        for t in 0..m {
            let frame = &ep.seq.frames[t];
            gaps.push(vp.value(frame)? - vc.value(frame)?);
        }
    }
    let value_gap = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;

    // Motion-alignment rewards on shared transitions.
    let model = match predictor {
        Some(m) => m.clone(),
        None => {
            let ckpt = paths.predictor_dir(true).join("predictor.ckpt");
            pipeline::load_predictor(&ckpt)?
        }
    };
    let provider = RewardProvider::Mpr {
        model,
        eps_motion: cfg.reward.eps_motion,
        use_masks: cfg.reward.use_masks,
    };
    let label_seed = component_seed(cfg.seed, &[tag::STUDY, 0x4e, 3]);
    let control_labels = pipeline::label_battery(&provider, &pair.control, None, label_seed)?;
    let paused_labels = pipeline::label_battery(&provider, &pair.paused, None, label_seed)?;
    let mut pre_max: f64 = 0.0;
    let mut post_sum = 0.0;
    let mut post_n = 0usize;
    for ei in 0..pair.control.len() {
        let m = pair.pause_at[ei];
        let k = pair.pause_len[ei];
        let control = &control_labels[ei];
        let paused = &paused_labels[ei];
        for t in 0..control.len() {
            if t + 1 < m {
                pre_max = pre_max.max((control[t].reward - paused[t].reward).abs());
            } else if t >= m {
                // Shifted by k frames in the paused corpus.
                let shifted = t + k;
                if shifted < paused.len() {
                    post_sum += (control[t].reward - paused[shifted].reward).abs();
                    post_n += 1;
                }
            }
        }
    }

    let report = HesitationReport {
        episodes: pair.control.len(),
        value_gap,
        mpr_max_pre_pause_diff: pre_max,
        mpr_mean_post_pause_diff: post_sum / post_n.max(1) as f64,
    };
    std::fs::write(
        paths.root.join("hesitation.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::Serde(e.to_string()))?,
    )?;
    let mut m = Manifest::new("hesitation-study", cfg.seed, &text);
    m.add_output(&paths.root.join("hesitation.json"))?;
    m.write(&paths.root.join("hesitation_manifest.json"), started)?;
    Ok(report)
}
