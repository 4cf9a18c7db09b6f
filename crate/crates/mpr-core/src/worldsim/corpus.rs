//! Demonstration-corpus generation with the nuisances video data carries:
//! camera jitter, demonstrator hesitation, and an embodiment gap.

use super::expert::{
    scripted_expert, scripted_expert_styled, scripted_failure_action, ApproachStyle,
    ScriptedFailureMode,
};
use super::{render_tracks, reset, state_features, step, Action, EnvKind, EnvParams, EnvState};
use crate::error::{CoreError, CoreResult};
use crate::numcore::init::gaussian;
use crate::tracks::{check_resample, EpisodeTracks, PointLabel, TrackSequence, TrackSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embodiment {
    Human,
    Robot,
}

/// Generation knobs for one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub env_id: EnvKind,
    pub n_episodes: usize,
    /// Probability per step of starting a pause.
    pub hesitation_prob: f64,
    /// Pause length range [k_min, k_max], inclusive.
    pub pause_length_range: [u32; 2],
    /// Per-frame global translation noise (human embodiment only).
    pub camera_jitter_std: f64,
    /// Gaussian noise on expert translation actions, in action units.
    pub expert_noise_std: f64,
    pub embodiment: Embodiment,
    pub seed: u64,
    /// Alternate demonstrator techniques (orbit styles) across episodes,
    /// the way different teleoperators approach the same task.
    #[serde(default)]
    pub vary_style: bool,
}

impl CorpusSpec {
    pub fn validate(&self) -> CoreResult<()> {
        if !(0.0..=1.0).contains(&self.hesitation_prob) {
            return Err(CoreError::config("hesitation_prob must be in [0, 1]"));
        }
        if self.camera_jitter_std < 0.0 || self.expert_noise_std < 0.0 {
            return Err(CoreError::config("noise stds must be >= 0"));
        }
        if self.pause_length_range[0] > self.pause_length_range[1] {
            return Err(CoreError::config("pause_length_range must be ordered"));
        }
        Ok(())
    }

    pub fn env_params(&self) -> EnvParams {
        match self.embodiment {
            Embodiment::Human => EnvParams::human(self.env_id),
            Embodiment::Robot => EnvParams::robot(self.env_id),
        }
    }

    fn source(&self) -> TrackSource {
        match self.embodiment {
            Embodiment::Human => TrackSource::HumanCorpus,
            Embodiment::Robot => TrackSource::RobotRollout,
        }
    }
}

/// Roll out one episode under a policy closure, rendering tracks and
/// tracking visibility-triggered resample events.
pub fn record_episode<P>(
    params: &EnvParams,
    spec: &CorpusSpec,
    episode_id: u64,
    rng: &mut ChaCha12Rng,
    mut policy: P,
) -> EpisodeTracks
where
    P: FnMut(&EnvState, &mut ChaCha12Rng) -> Action,
{
    let human = spec.embodiment == Embodiment::Human;
    let mut state = reset(params, rng);

    let mut frames = Vec::new();
    let mut resample_events = Vec::new();
    let mut states = Vec::new();
    let mut actions: Vec<[f64; 3]> = Vec::new();
    let mut success = false;

    let draw_jitter = |rng: &mut ChaCha12Rng| -> (f64, f64) {
        if human && spec.camera_jitter_std > 0.0 {
            (
                spec.camera_jitter_std * gaussian(rng),
                spec.camera_jitter_std * gaussian(rng),
            )
        } else {
            (0.0, 0.0)
        }
    };

    let first = render_tracks(params, &state, draw_jitter(rng));
    let mut baseline = first.visible_count(PointLabel::Object).max(1);
    frames.push(first);
    states.push(state_features(&state));

    let mut pause_remaining = 0u32;
    loop {
        let action = if pause_remaining > 0 {
            pause_remaining -= 1;
            Action {
                dx: 0.0,
                dy: 0.0,
                grip: if state.grip_closed { 1.0 } else { -1.0 },
            }
        } else {
            if spec.hesitation_prob > 0.0 && rng.random::<f64>() < spec.hesitation_prob {
                pause_remaining =
                    rng.random_range(spec.pause_length_range[0]..=spec.pause_length_range[1]);
            }
            policy(&state, rng)
        };
        let (next, done, info) = step(params, &state, &action);
        actions.push(action.to_array());
        let frame = render_tracks(params, &next, draw_jitter(rng));
        if check_resample(&frame, baseline) {
            resample_events.push(frames.len());
            baseline = frame.visible_count(PointLabel::Object).max(1);
        }
        frames.push(frame);
        states.push(state_features(&next));
        success |= info.success;
        state = next;
        if done {
            break;
        }
    }

    let robot = spec.embodiment == Embodiment::Robot;
    EpisodeTracks {
        episode_id,
        source: spec.source(),
        success,
        seq: TrackSequence {
            frames,
            resample_events,
            source: spec.source(),
        },
        states: robot.then_some(states),
        actions: robot.then(|| actions.clone()),
    }
}

/// Generate a corpus. Human corpora retain only successful episodes
/// (regenerating until the quota is met); robot corpora keep everything.
pub fn generate_corpus(spec: &CorpusSpec) -> CoreResult<Vec<EpisodeTracks>> {
    spec.validate()?;
    let params = spec.env_params();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut episodes = Vec::with_capacity(spec.n_episodes);
    let mut attempts = 0usize;
    let keep_all = spec.embodiment == Embodiment::Robot;
    while episodes.len() < spec.n_episodes {
        let style = if spec.vary_style {
            if attempts % 2 == 0 {
                ApproachStyle::OrbitCw
            } else {
                ApproachStyle::OrbitCcw
            }
        } else {
            ApproachStyle::Direct
        };
        let ep = record_episode(&params, spec, attempts as u64, &mut rng, |s, r| {
            scripted_expert_styled(&params, s, style, spec.expert_noise_std, r)
        });
        attempts += 1;
        if keep_all || ep.success {
            episodes.push(ep);
        }
        if attempts >= 20.max(2 * spec.n_episodes)
            && (episodes.len() as f64) < 0.1 * attempts as f64
        {
            return Err(CoreError::config(format!(
                "expert failure rate above 90% ({} kept of {} attempts): task unreachable",
                episodes.len(),
                attempts
            )));
        }
    }
    Ok(episodes)
}

pub use super::expert::ScriptedFailureMode as FailureMode;

/// One scripted failure episode on the robot embodiment.
pub fn scripted_failure(
    env_id: EnvKind,
    mode: ScriptedFailureMode,
    episode_id: u64,
    sigma_a: f64,
    rng: &mut ChaCha12Rng,
) -> EpisodeTracks {
    let params = EnvParams::robot(env_id);
    let spec = CorpusSpec {
        env_id,
        n_episodes: 1,
        hesitation_prob: 0.0,
        pause_length_range: [0, 0],
        camera_jitter_std: 0.0,
        expert_noise_std: sigma_a,
        embodiment: Embodiment::Robot,
        seed: 0,
        vary_style: false,
    };
    let mut phase = 0.0f64;
    let mut approach_done = 0u32;
    record_episode(&params, &spec, episode_id, rng, |s, r| match mode {
        ScriptedFailureMode::MissHandle => {
            scripted_failure_action(&params, s, mode, &mut phase, sigma_a, r)
        }
        ScriptedFailureMode::Stall => {
            // Approach for a fixed number of steps, then freeze.
            approach_done += 1;
            if approach_done <= 6 {
                scripted_expert(&params, s, sigma_a, r)
            } else {
                scripted_failure_action(&params, s, mode, &mut phase, 0.0, r)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::compensate_background;
    use crate::tracks::frame_deltas;

    fn door_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            env_id: EnvKind::HingedDoor,
            n_episodes: 4,
            hesitation_prob: 0.0,
            pause_length_range: [3, 8],
            camera_jitter_std: 0.0,
            expert_noise_std: 0.0,
            embodiment: Embodiment::Robot,
            seed,
            vary_style: false,
        }
    }

    #[test]
    fn noiseless_expert_succeeds_within_horizon() {
        let spec = door_spec(1);
        let params = spec.env_params();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for i in 0..5 {
            let ep = record_episode(&params, &spec, i, &mut rng, |s, r| {
                scripted_expert(&params, s, 0.0, r)
            });
            assert!(ep.success, "episode {i} should succeed");
            assert!(ep.seq.frames.len() <= 101);
        }
    }

    #[test]
    fn fold_expert_succeeds() {
        let mut spec = door_spec(3);
        spec.env_id = EnvKind::CornerFold;
        let params = spec.env_params();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ep = record_episode(&params, &spec, 0, &mut rng, |s, r| {
            scripted_expert(&params, s, 0.0, r)
        });
        assert!(ep.success);
    }

    #[test]
    fn degenerate_pause_fails() {
        let mut spec = door_spec(5);
        spec.hesitation_prob = 1.0;
        spec.pause_length_range = [100, 100];
        let params = spec.env_params();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let ep = record_episode(&params, &spec, 0, &mut rng, |s, r| {
            scripted_expert(&params, s, 0.0, r)
        });
        assert!(!ep.success);
        assert_eq!(ep.seq.frames.len(), 101);
    }

    #[test]
    fn expert_is_deterministic_per_seed() {
        let spec = door_spec(7);
        let params = spec.env_params();
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            record_episode(&params, &spec, 0, &mut rng, |s, r| {
                scripted_expert(&params, s, 0.2, r)
            })
        };
        let a = run();
        let b = run();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.seq.frames.len(), b.seq.frames.len());
    }

    #[test]
    fn human_corpus_keeps_only_successes() {
        let mut spec = door_spec(8);
        spec.embodiment = Embodiment::Human;
        spec.n_episodes = 6;
        spec.hesitation_prob = 0.05;
        spec.camera_jitter_std = 0.004;
        spec.expert_noise_std = 0.1;
        let eps = generate_corpus(&spec).unwrap();
        assert_eq!(eps.len(), 6);
        assert!(eps.iter().all(|e| e.success));
        assert!(eps.iter().all(|e| e.states.is_none() && e.actions.is_none()));
    }

    #[test]
    fn jitter_is_common_mode_and_compensable() {
        let mut spec = door_spec(9);
        spec.embodiment = Embodiment::Human;
        spec.camera_jitter_std = 0.004;
        spec.n_episodes = 1;
        let eps = generate_corpus(&spec).unwrap();
        let seq = &eps[0].seq;
        // On a clean frame pair, compensated background deltas vanish and the
        // recovered object deltas match jitter-free rendering to 1e-3.
        let spec0 = door_spec(9);
        let eps0 = {
            let mut s = spec0;
            s.embodiment = Embodiment::Human;
            s.camera_jitter_std = 0.0;
            generate_corpus(&s).unwrap()
        };
        let clean = &eps0[0].seq;
        let n = seq.frames.len().min(clean.frames.len());
        for t in 0..n - 1 {
            let noisy = compensate_background(&frame_deltas(seq, t).unwrap()).unwrap();
            let base = frame_deltas(clean, t).unwrap();
            if noisy.deltas.len() != base.deltas.len() {
                continue; // occlusion sets may differ near the agent
            }
            for (a, b) in noisy.deltas.iter().zip(base.deltas.iter()) {
                assert!((a.0 - b.0).abs() < 1e-3 && (a.1 - b.1).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn miss_handle_never_moves_object() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let ep = scripted_failure(EnvKind::HingedDoor, ScriptedFailureMode::MissHandle, 0, 0.0, &mut rng);
        assert!(!ep.success);
        let first = &ep.seq.frames[0];
        for f in &ep.seq.frames {
            for i in 0..32 {
                let d = ((f.points[i].0 - first.points[i].0).powi(2)
                    + (f.points[i].1 - first.points[i].1).powi(2))
                .sqrt();
                assert!(d < 1e-9, "object moved in miss_handle episode");
            }
        }
    }

    #[test]
    fn stall_freezes_after_approach() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ep = scripted_failure(EnvKind::HingedDoor, ScriptedFailureMode::Stall, 0, 0.0, &mut rng);
        assert!(!ep.success);
        let n = ep.seq.frames.len();
        // All deltas zero from the freeze onward.
        for t in 10..n - 1 {
            let a = &ep.seq.frames[t];
            let b = &ep.seq.frames[t + 1];
            for i in 0..a.points.len() {
                assert_eq!(a.points[i], b.points[i]);
            }
        }
    }

    #[test]
    fn miss_handle_agent_arc_resembles_success_arc() {
        // Agent trajectories of a miss episode and a success episode trace
        // similar shapes (offset by the aim error): compare total path
        // lengths and net displacement directions.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let miss = scripted_failure(EnvKind::HingedDoor, ScriptedFailureMode::MissHandle, 0, 0.0, &mut rng);
        let spec = door_spec(13);
        let params = spec.env_params();
        let mut rng2 = ChaCha12Rng::seed_from_u64(13);
        let good = record_episode(&params, &spec, 0, &mut rng2, |s, r| {
            scripted_expert(&params, s, 0.0, r)
        });
        let path_len = |ep: &EpisodeTracks| {
            let idx = 32 + 60; // first agent point
            let mut l = 0.0;
            for t in 0..ep.seq.frames.len() - 1 {
                let a = ep.seq.frames[t].points[idx];
                let b = ep.seq.frames[t + 1].points[idx];
                l += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            }
            l
        };
        let lm = path_len(&miss);
        let lg = path_len(&good);
        assert!(lm > 0.3 * lg, "miss arc should cover a comparable path");
    }
}
