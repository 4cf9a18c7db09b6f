//! Online residual-RL training: episode rollouts, end-of-episode labeling
//! and updates, periodic evaluation on a fixed start battery.

use super::bc::BasePolicy;
use super::sac::{SacAgent, SacConfig};
use super::{
    combine_action, relabel_offline, rl_observation, sample_symmetric, ReplayBuffer, Transition,
    TransitionSource,
};
use crate::error::{CoreError, CoreResult};
use crate::predictor::splitmix64;
use crate::reward::{label_episode, RewardProvider};
use crate::tracks::{check_resample, EpisodeTracks, PointLabel, TrackSequence, TrackSource};
use crate::worldsim::{render_tracks, reset, state_features, step, Action, EnvParams, EnvState};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub episodes: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            episodes: 300,
            eval_interval: 10,
            eval_episodes: 20,
            seed: 0,
        }
    }
}

/// One metrics row per training episode.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub episode: usize,
    pub env_steps: usize,
    pub eval_success: Option<f64>,
    pub running20: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha_ent: f64,
    pub mean_reward: f64,
}

pub struct RunResult {
    pub rows: Vec<EpisodeRow>,
    pub base_success: f64,
    pub final_success: f64,
    pub best_success: f64,
    pub pretrain_first_loss: f64,
    pub pretrain_last_loss: f64,
    pub agent: SacAgent,
}

/// Roll out the combined policy on a fixed battery of start states and
/// report the success fraction. `residual` of `None` evaluates the bare
/// base policy.
pub fn evaluate_policy(
    params: &EnvParams,
    battery: &[EnvState],
    base: &BasePolicy,
    agent: Option<&SacAgent>,
    residual_alpha: f64,
) -> CoreResult<f64> {
    let mut successes = 0usize;
    for start in battery {
        let mut state = *start;
        loop {
            let frame = render_tracks(params, &state, (0.0, 0.0));
            let base_a = base.act(&state, &frame);
            let action = match agent {
                Some(agent) => {
                    let obs = rl_observation(params.kind, &state, &frame, base_a);
                    let res = agent.mean_residual(&obs)?;
                    combine_action(base_a, res, residual_alpha)
                }
                None => base_a,
            };
            let (next, done, info) = step(params, &state, &Action::from_array(action));
            if done {
                if info.success {
                    successes += 1;
                }
                break;
            }
            state = next;
        }
    }
    Ok(successes as f64 / battery.len().max(1) as f64)
}

/// Online training loop. After each episode the provider labels the fresh
/// rollout, its transitions join the online buffer, and (once the online
/// buffer holds `learning_starts` steps) episode_length x utd updates run
/// on symmetric half-offline/half-online batches.
pub fn train_online(
    params: &EnvParams,
    demos: &[EpisodeTracks],
    base: &BasePolicy,
    provider: &RewardProvider,
    sac_cfg: &SacConfig,
    cfg: &OnlineConfig,
) -> CoreResult<RunResult> {
    if !base.frozen {
        return Err(CoreError::config("train_online: base policy must be frozen"));
    }
    let kind = params.kind;
    let horizon = params.horizon;
    let obs_dim = super::obs_width(kind);
    let root = cfg.seed;
    let mut rng_env = ChaCha12Rng::seed_from_u64(splitmix64(root ^ 0xe0));
    let mut rng_actor = ChaCha12Rng::seed_from_u64(splitmix64(root ^ 0xac));
    let mut rng_batch = ChaCha12Rng::seed_from_u64(splitmix64(root ^ 0xba));
    let mut rng_eval = ChaCha12Rng::seed_from_u64(splitmix64(root ^ 0xef));
    let label_seed = splitmix64(root ^ 0x1ab);

    // Fixed evaluation battery reused at every eval point, so checkpoints
    // and the base policy are compared on identical starts.
    let battery: Vec<EnvState> = (0..cfg.eval_episodes)
        .map(|_| reset(params, &mut rng_eval))
        .collect();
    let base_success = evaluate_policy(params, &battery, base, None, 0.0)?;

    let mut offline = ReplayBuffer::new();
    for t in relabel_offline(
        kind,
        demos,
        base,
        provider,
        sac_cfg.residual_alpha,
        horizon,
        label_seed,
    )? {
        offline.push(t);
    }
    // Standardize network inputs with statistics of the demo observations.
    let norm = super::ObsNorm::fit(
        &offline
            .items
            .iter()
            .map(|t| t.obs.clone())
            .collect::<Vec<_>>(),
    )?;
    let mut agent = SacAgent::init(obs_dim, sac_cfg.clone(), norm)?;
    let (pretrain_first_loss, pretrain_last_loss) = if sac_cfg.pretrain_steps > 0 {
        agent.pretrain_critic(&offline, sac_cfg.pretrain_steps, &mut rng_batch)?
    } else {
        (f64::NAN, f64::NAN)
    };

    let mut online = ReplayBuffer::new();
    let mut rows = Vec::with_capacity(cfg.episodes);
    let mut recent: Vec<bool> = Vec::new();
    let mut env_steps = 0usize;
    let mut best_success = base_success;
    let mut final_success = base_success;

    for episode in 1..=cfg.episodes {
        // ── Collect one episode with the stochastic residual ──
        let mut state = reset(params, &mut rng_env);
        let mut frames = vec![render_tracks(params, &state, (0.0, 0.0))];
        let mut states_feat = vec![state_features(&state)];
        let mut obs_seq: Vec<Vec<f64>> = Vec::new();
        let mut residuals: Vec<[f64; 3]> = Vec::new();
        let mut actions: Vec<[f64; 3]> = Vec::new();
        let mut resample_events = Vec::new();
        let mut baseline = frames[0].visible_count(PointLabel::Object).max(1);
        let mut success = false;
        loop {
            let frame = frames.last().unwrap();
            let base_a = base.act(&state, frame);
            let obs = rl_observation(kind, &state, frame, base_a);
            let (res, _) = agent.sample_residual(&obs, &mut rng_actor)?;
            let action = combine_action(base_a, res, sac_cfg.residual_alpha);
            obs_seq.push(obs);
            residuals.push(res);
            actions.push(action);
            let (next, done, info) = step(params, &state, &Action::from_array(action));
            let frame = render_tracks(params, &next, (0.0, 0.0));
            if check_resample(&frame, baseline) {
                resample_events.push(frames.len());
                baseline = frame.visible_count(PointLabel::Object).max(1);
            }
            frames.push(frame);
            states_feat.push(state_features(&next));
            success |= info.success;
            state = next;
            if done {
                break;
            }
        }
        let ep_len = actions.len();
        env_steps += ep_len;

        // Final observation (for bootstrapping) uses the base action at the
        // terminal state.
        {
            let frame = frames.last().unwrap();
            let base_a = base.act(&state, frame);
            obs_seq.push(rl_observation(kind, &state, frame, base_a));
        }

        // ── Label and store ──
        let episode_tracks = EpisodeTracks {
            episode_id: episode as u64,
            source: TrackSource::RobotRollout,
            success,
            seq: TrackSequence {
                frames,
                resample_events,
                source: TrackSource::RobotRollout,
            },
            states: Some(states_feat),
            actions: Some(actions),
        };
        let rewards = label_episode(
            provider,
            &episode_tracks,
            horizon,
            splitmix64(label_seed ^ (episode as u64) << 8),
        )?;
        let mut ep_reward_sum = 0.0;
        for t in 0..ep_len {
            ep_reward_sum += rewards[t].reward;
            online.push(Transition {
                obs: obs_seq[t].clone(),
                residual: residuals[t],
                reward: rewards[t].reward,
                next_obs: obs_seq[t + 1].clone(),
                done: success && t + 1 == ep_len,
                source: TransitionSource::Online,
            });
        }

        // ── Updates at the end of the episode ──
        let mut actor_loss = f64::NAN;
        let mut critic_loss = f64::NAN;
        let mut n_updates = 0usize;
        if online.len() >= sac_cfg.learning_starts {
            let mut a_sum = 0.0;
            let mut c_sum = 0.0;
            for _ in 0..ep_len * sac_cfg.utd {
                let batch = sample_symmetric(&offline, &online, sac_cfg.batch_size, &mut rng_batch)?;
                let losses = agent.update(&batch, &mut rng_batch)?;
                a_sum += losses.actor;
                c_sum += losses.critic;
                n_updates += 1;
            }
            actor_loss = a_sum / n_updates as f64;
            critic_loss = c_sum / n_updates as f64;
        }

        recent.push(success);
        if recent.len() > 20 {
            recent.remove(0);
        }
        let running20 = recent.iter().filter(|s| **s).count() as f64 / recent.len() as f64;

        let eval_success = if episode % cfg.eval_interval == 0 || episode == cfg.episodes {
            let s = evaluate_policy(params, &battery, base, Some(&agent), sac_cfg.residual_alpha)?;
            best_success = best_success.max(s);
            final_success = s;
            Some(s)
        } else {
            None
        };

        rows.push(EpisodeRow {
            episode,
            env_steps,
            eval_success,
            running20,
            actor_loss,
            critic_loss,
            alpha_ent: agent.alpha(),
            mean_reward: ep_reward_sum / ep_len.max(1) as f64,
        });
    }

    Ok(RunResult {
        rows,
        base_success,
        final_success,
        best_success,
        pretrain_first_loss,
        pretrain_last_loss,
        agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardProvider;
    use crate::rl::bc::{train_bc, BcConfig};
    use crate::worldsim::{generate_corpus, CorpusSpec, Embodiment, EnvKind};

    fn robot_demos(n: usize, seed: u64) -> Vec<EpisodeTracks> {
        let spec = CorpusSpec {
            env_id: EnvKind::HingedDoor,
            n_episodes: n,
            hesitation_prob: 0.0,
            pause_length_range: [0, 0],
            camera_jitter_std: 0.0,
            expert_noise_std: 0.1,
            embodiment: Embodiment::Robot,
            seed,
            vary_style: false,
        };
        generate_corpus(&spec).unwrap()
    }

    #[test]
    fn frozen_base_is_bit_identical_after_training() {
        let demos = robot_demos(3, 21);
        let (base, _) = train_bc(
            EnvKind::HingedDoor,
            &demos,
            3,
            &BcConfig {
                epochs: 30,
                ..Default::default()
            },
        )
        .unwrap();
        let before = base.params.clone();
        let params = EnvParams::robot(EnvKind::HingedDoor);
        let sac_cfg = SacConfig {
            pretrain_steps: 5,
            learning_starts: 10,
            seed: 1,
            ..Default::default()
        };
        let cfg = OnlineConfig {
            episodes: 2,
            eval_interval: 2,
            eval_episodes: 2,
            seed: 2,
        };
        let provider = RewardProvider::Sparse;
        let result = train_online(&params, &demos, &base, &provider, &sac_cfg, &cfg).unwrap();
        assert!(base.params.bit_identical(&before));
        assert_eq!(result.rows.len(), 2);
        // Update counting: ep_len x utd after learning starts.
        let row = &result.rows[1];
        assert!(row.env_steps > 0);
    }

    #[test]
    fn update_count_is_episode_length_times_utd() {
        let demos = robot_demos(2, 22);
        let (base, _) = train_bc(
            EnvKind::HingedDoor,
            &demos,
            2,
            &BcConfig {
                epochs: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let params = EnvParams::robot(EnvKind::HingedDoor);
        let sac_cfg = SacConfig {
            pretrain_steps: 0,
            learning_starts: 1, // updates from the first episode on
            utd: 4,
            seed: 3,
            ..Default::default()
        };
        let cfg = OnlineConfig {
            episodes: 1,
            eval_interval: 5,
            eval_episodes: 1,
            seed: 4,
        };
        let provider = RewardProvider::Sparse;
        let result = train_online(&params, &demos, &base, &provider, &sac_cfg, &cfg).unwrap();
        let ep_len = result.rows[0].env_steps;
        assert_eq!(result.agent.updates as usize, ep_len * 4);
    }

    #[test]
    fn zero_episodes_reports_base_only() {
        let demos = robot_demos(2, 23);
        let (base, _) = train_bc(
            EnvKind::HingedDoor,
            &demos,
            2,
            &BcConfig {
                epochs: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let params = EnvParams::robot(EnvKind::HingedDoor);
        let sac_cfg = SacConfig {
            pretrain_steps: 0,
            seed: 5,
            ..Default::default()
        };
        let cfg = OnlineConfig {
            episodes: 0,
            eval_interval: 10,
            eval_episodes: 4,
            seed: 6,
        };
        let provider = RewardProvider::Sparse;
        let result = train_online(&params, &demos, &base, &provider, &sac_cfg, &cfg).unwrap();
        assert!(result.rows.is_empty());
        assert_eq!(result.final_success, result.base_success);
    }
}
