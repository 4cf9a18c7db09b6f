//! Experiment configuration: a TOML file with one table per component,
//! a root seed, and dotted-path `--set key=value` overrides. Unknown keys
//! are rejected.

use mpr_core::error::{CoreError, CoreResult};
use mpr_core::predictor::{PredictorArch, PredictorTrainConfig};
use mpr_core::reward::{ProviderKind, TemporalTrainConfig};
use mpr_core::rl::{BcConfig, OnlineConfig, SacConfig};
use mpr_core::worldsim::{CorpusSpec, Embodiment, EnvKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub id: String,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            id: "hinged_door".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_episodes: usize,
    pub hesitation_prob: f64,
    pub pause_min: u32,
    pub pause_max: u32,
    pub camera_jitter_std: f64,
    pub expert_noise_std: f64,
    pub embodiment: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_episodes: 200,
            hesitation_prob: 0.05,
            pause_min: 5,
            pause_max: 15,
            camera_jitter_std: 0.004,
            expert_noise_std: 0.1,
            embodiment: "human".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_ratio: f64,
    pub weight_decay: f64,
    pub max_items_per_epoch: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        PredictorSection {
            arch: "attention".to_string(),
            epochs: 200,
            batch_size: 20,
            lr: 1e-4,
            val_ratio: 0.1,
            weight_decay: 1e-6,
            max_items_per_epoch: 3000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub eps_motion: f64,
    pub use_masks: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            eps_motion: 1e-4,
            use_masks: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    // Robot demonstration generation + behavior cloning. Teleoperators
    // hesitate: pauses in the demos are what keeps the cloned base policy
    // imperfect (regression averages the frozen frames into a slowed,
    // occasionally stalling policy).
    pub demo_episodes: usize,
    pub demo_noise_std: f64,
    pub demo_hesitation_prob: f64,
    pub demo_pause_min: u32,
    pub demo_pause_max: u32,
    pub n_demos: usize,
    pub bc_epochs: usize,
    pub bc_batch_size: usize,
    pub bc_lr: f64,
    // Online residual SAC.
    pub episodes: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub residual_alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub learning_starts: usize,
    pub utd: usize,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub pretrain_steps: usize,
    // Temporal-distance baseline value net.
    pub value_epochs: usize,
    pub value_lr: f64,
}

impl Default for RlSection {
    fn default() -> Self {
        RlSection {
            demo_episodes: 60,
            demo_noise_std: 0.1,
            demo_hesitation_prob: 0.08,
            demo_pause_min: 8,
            demo_pause_max: 20,
            n_demos: 20,
            bc_epochs: 3000,
            bc_batch_size: 64,
            bc_lr: 1e-3,
            episodes: 300,
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
            value_epochs: 120,
            value_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub interval: usize,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            interval: 10,
            episodes: 20,
        }
    }
}

fn default_provider() -> String {
    "mpr".to_string()
}

fn default_output_dir() -> String {
    "runs/out".to_string()
}

/// Full experiment configuration with a deterministic root seed. Every
/// field has a default; unknown keys are rejected at parse time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub provider: String,
    pub env: EnvSection,
    pub corpus: CorpusSection,
    pub predictor: PredictorSection,
    pub reward: RewardSection,
    pub rl: RlSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output_dir: default_output_dir(),
            provider: default_provider(),
            env: EnvSection {
                id: "hinged_door".to_string(),
            },
            corpus: CorpusSection::default(),
            predictor: PredictorSection::default(),
            reward: RewardSection::default(),
            rl: RlSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> CoreResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> CoreResult<RunConfig> {
        let mut doc: toml::Value = toml::from_str(text)
            .map_err(|e| CoreError::config(format!("config parse error: {e}")))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e| CoreError::config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CoreResult<()> {
        EnvKind::parse(&self.env.id)?;
        ProviderKind::parse(&self.provider)?;
        self.corpus_spec(0)?.validate()?;
        if !(0.0..1.0).contains(&self.predictor.val_ratio) || self.predictor.val_ratio <= 0.0 {
            return Err(CoreError::config("predictor.val_ratio must be in (0, 1)"));
        }
        if self.rl.n_demos == 0 {
            return Err(CoreError::config("rl.n_demos must be positive"));
        }
        Ok(())
    }

    pub fn env_kind(&self) -> EnvKind {
        EnvKind::parse(&self.env.id).expect("validated")
    }

    pub fn provider_kind(&self) -> ProviderKind {
        ProviderKind::parse(&self.provider).expect("validated")
    }

    /// The human-corpus generation spec with a component-derived seed.
    pub fn corpus_spec(&self, seed: u64) -> CoreResult<CorpusSpec> {
        let embodiment = match self.corpus.embodiment.as_str() {
            "human" => Embodiment::Human,
            "robot" => Embodiment::Robot,
            other => {
                return Err(CoreError::config(format!(
                    "unknown embodiment `{other}` (human|robot)"
                )))
            }
        };
        Ok(CorpusSpec {
            env_id: EnvKind::parse(&self.env.id)?,
            n_episodes: self.corpus.n_episodes,
            hesitation_prob: self.corpus.hesitation_prob,
            pause_length_range: [self.corpus.pause_min, self.corpus.pause_max],
            camera_jitter_std: self.corpus.camera_jitter_std,
            expert_noise_std: self.corpus.expert_noise_std,
            embodiment,
            seed,
            vary_style: false,
        })
    }

    /// Robot demonstration spec (fixed camera, robot embodiment).
    pub fn demo_spec(&self, seed: u64) -> CoreResult<CorpusSpec> {
        Ok(CorpusSpec {
            env_id: EnvKind::parse(&self.env.id)?,
            n_episodes: self.rl.demo_episodes,
            hesitation_prob: self.rl.demo_hesitation_prob,
            pause_length_range: [self.rl.demo_pause_min, self.rl.demo_pause_max],
            camera_jitter_std: 0.0,
            expert_noise_std: self.rl.demo_noise_std,
            embodiment: Embodiment::Robot,
            seed,
            vary_style: false,
        })
    }

    pub fn predictor_arch(&self) -> CoreResult<PredictorArch> {
        match self.predictor.arch.as_str() {
            "attention" => Ok(PredictorArch::Attention),
            "mlp_pool" => Ok(PredictorArch::MlpPool),
            other => Err(CoreError::config(format!(
                "unknown predictor arch `{other}` (attention|mlp_pool)"
            ))),
        }
    }

    pub fn predictor_cfg(&self, seed: u64) -> PredictorTrainConfig {
        PredictorTrainConfig {
            epochs: self.predictor.epochs,
            batch_size: self.predictor.batch_size,
            lr: self.predictor.lr,
            val_ratio: self.predictor.val_ratio,
            weight_decay: self.predictor.weight_decay,
            seed,
            max_items_per_epoch: self.predictor.max_items_per_epoch,
        }
    }

    pub fn bc_cfg(&self, seed: u64) -> BcConfig {
        BcConfig {
            epochs: self.rl.bc_epochs,
            batch_size: self.rl.bc_batch_size,
            lr: self.rl.bc_lr,
            seed,
        }
    }

    pub fn sac_cfg(&self, seed: u64) -> SacConfig {
        SacConfig {
            gamma: self.rl.gamma,
            polyak: self.rl.polyak,
            residual_alpha: self.rl.residual_alpha,
            lr: self.rl.lr,
            batch_size: self.rl.batch_size,
            learning_starts: self.rl.learning_starts,
            utd: self.rl.utd,
            target_entropy: self.rl.target_entropy,
            init_alpha: self.rl.init_alpha,
            pretrain_steps: self.rl.pretrain_steps,
            hidden: 256,
            hidden_layers: 3,
            seed,
        }
    }

    pub fn online_cfg(&self, seed: u64) -> OnlineConfig {
        OnlineConfig {
            episodes: self.rl.episodes,
            eval_interval: self.eval.interval,
            eval_episodes: self.eval.episodes,
            seed,
        }
    }

    pub fn temporal_cfg(&self, seed: u64) -> TemporalTrainConfig {
        TemporalTrainConfig {
            epochs: self.rl.value_epochs,
            batch_size: 64,
            lr: self.rl.value_lr,
            val_ratio: 0.1,
            seed,
        }
    }

    /// Output root, honoring the MPRLAB_OUT environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var("MPRLAB_OUT") {
            Ok(root) if !root.is_empty() => PathBuf::from(root).join(&self.output_dir),
            _ => PathBuf::from(&self.output_dir),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply one `key.path=value` override onto a parsed TOML document.
fn apply_override(doc: &mut toml::Value, spec: &str) -> CoreResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CoreError::config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.is_empty() {
        return Err(CoreError::config("empty override path"));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CoreError::config(format!("override path `{path}` not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let value: toml::Value = {
        let raw = raw.trim();
        if let Ok(v) = raw.parse::<i64>() {
            toml::Value::Integer(v)
        } else if let Ok(v) = raw.parse::<f64>() {
            toml::Value::Float(v)
        } else if let Ok(v) = raw.parse::<bool>() {
            toml::Value::Boolean(v)
        } else {
            toml::Value::String(raw.trim_matches('"').to_string())
        }
    };
    let table = cur
        .as_table_mut()
        .ok_or_else(|| CoreError::config(format!("override path `{path}` not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg.provider, "mpr");
        assert_eq!(cfg.rl.utd, 4);
        assert_eq!(cfg.rl.batch_size, 64);
        assert!((cfg.rl.gamma - 0.99).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("banana = 3", &[]);
        assert!(err.is_err());
        let err = RunConfig::parse("[rl]\nbanana = 3", &[]);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = RunConfig::parse(
            "seed = 5",
            &[
                "corpus.n_episodes=42".to_string(),
                "provider=sparse".to_string(),
                "rl.residual_alpha=0.3".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.corpus.n_episodes, 42);
        assert_eq!(cfg.provider, "sparse");
        assert!((cfg.rl.residual_alpha - 0.3).abs() < 1e-12);
    }

    #[test]
    fn bad_provider_is_config_error() {
        assert!(RunConfig::parse("provider = \"nope\"", &[]).is_err());
    }
}
