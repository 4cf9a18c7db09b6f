//! Kinematic 2D manipulation environments with ground-truth point tracks.
//!
//! Two tasks: a hinged door opened by grabbing its handle and dragging it
//! along a circular arc, and a cloth corner folded onto a fixed corner.
//! Both expose the same gripper/action interface and render object,
//! background and agent point tracks directly from state.

pub mod corpus;
pub mod expert;

pub use corpus::{generate_corpus, scripted_failure, CorpusSpec, Embodiment, FailureMode};
pub use expert::scripted_expert;

use crate::error::{CoreError, CoreResult};
use crate::tracks::{PointLabel, TrackFrame};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const HORIZON: u32 = 100;
pub const ACTION_MAX: f64 = 0.02;
pub const GRAB_RADIUS: f64 = 0.02;
pub const DOOR_PIVOT: (f64, f64) = (0.7, 0.5);
pub const DOOR_LENGTH: f64 = 0.25;
pub const DOOR_SUCCESS_ANGLE: f64 = 1.40;
pub const FOLD_FIXED_CORNER: (f64, f64) = (0.8, 0.2);
pub const FOLD_START_CORNER: (f64, f64) = (0.25, 0.75);
pub const FOLD_SUCCESS_DIST: f64 = 0.03;
pub const OBJECT_POINTS: usize = 32;
pub const BACKGROUND_POINTS: usize = 60;
pub const AGENT_POINTS: usize = 4;
/// Object points within this distance of an agent point are occluded.
pub const OCCLUSION_RADIUS: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    HingedDoor,
    CornerFold,
}

impl EnvKind {
    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "hinged_door" => Ok(EnvKind::HingedDoor),
            "corner_fold" => Ok(EnvKind::CornerFold),
            other => Err(CoreError::config(format!("unknown env id `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::HingedDoor => "hinged_door",
            EnvKind::CornerFold => "corner_fold",
        }
    }
}

/// Static environment parameters. `speed_scale` and `agent_spread` encode
/// the embodiment gap: the human demonstrator moves up to 1.5x faster and
/// has a wider point cluster than the robot gripper.
#[derive(Debug, Clone, Copy)]
pub struct EnvParams {
    pub kind: EnvKind,
    pub horizon: u32,
    pub speed_scale: f64,
    pub agent_spread: f64,
}

impl EnvParams {
    pub fn robot(kind: EnvKind) -> Self {
        EnvParams {
            kind,
            horizon: HORIZON,
            speed_scale: 1.0,
            agent_spread: 0.02,
        }
    }

    pub fn human(kind: EnvKind) -> Self {
        EnvParams {
            kind,
            horizon: HORIZON,
            speed_scale: 1.5,
            agent_spread: 0.04,
        }
    }

    /// Per-step translation cap in normalized units.
    pub fn step_cap(&self) -> f64 {
        ACTION_MAX * self.speed_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectState {
    Door { angle: f64 },
    Fold { corner: (f64, f64), grabbed: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub gripper: (f64, f64),
    pub grip_closed: bool,
    pub object: ObjectState,
    pub t: u32,
    pub horizon: u32,
}

/// (dx, dy, grip) with every component in [-1, 1]; translation scales by
/// the per-step cap, grip > 0 closes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub fn clipped(&self) -> Action {
        Action {
            dx: self.dx.clamp(-1.0, 1.0),
            dy: self.dy.clamp(-1.0, 1.0),
            grip: self.grip.clamp(-1.0, 1.0),
        }
    }

    pub fn from_array(a: [f64; 3]) -> Action {
        Action {
            dx: a[0],
            dy: a[1],
            grip: a[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepInfo {
    pub success: bool,
    pub attached: bool,
}

/// Handle position on the door arc at the given angle.
pub fn door_handle(angle: f64) -> (f64, f64) {
    (
        DOOR_PIVOT.0 + DOOR_LENGTH * angle.cos(),
        DOOR_PIVOT.1 + DOOR_LENGTH * angle.sin(),
    )
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Reset with the gripper placed near the object (interaction-clip style
/// start), randomized within a small box.
pub fn reset(params: &EnvParams, rng: &mut ChaCha12Rng) -> EnvState {
    let (anchor, object) = match params.kind {
        EnvKind::HingedDoor => (door_handle(0.0), ObjectState::Door { angle: 0.0 }),
        EnvKind::CornerFold => (
            FOLD_START_CORNER,
            ObjectState::Fold {
                corner: FOLD_START_CORNER,
                grabbed: false,
            },
        ),
    };
    let du = rng.random_range(0.05..0.17);
    let dv = rng.random_range(-0.09..0.09);
    // Offset pointing into the workspace interior.
    let gripper = match params.kind {
        EnvKind::HingedDoor => (anchor.0 - du, anchor.1 + dv),
        EnvKind::CornerFold => ((anchor.0 + du).min(0.98), (anchor.1 + dv).clamp(0.02, 0.98)),
    };
    EnvState {
        gripper,
        grip_closed: false,
        object,
        t: 0,
        horizon: params.horizon,
    }
}

pub fn success(params: &EnvParams, state: &EnvState) -> bool {
    match (params.kind, &state.object) {
        (EnvKind::HingedDoor, ObjectState::Door { angle }) => *angle >= DOOR_SUCCESS_ANGLE,
        (EnvKind::CornerFold, ObjectState::Fold { corner, .. }) => {
            dist(*corner, FOLD_FIXED_CORNER) <= FOLD_SUCCESS_DIST && !state.grip_closed
        }
        _ => false,
    }
}

/// Advance one step. Actions are clipped, never rejected.
///
/// Door: while the grip is closed within the grab radius of the handle,
/// gripper motion is projected onto the handle arc's tangent (capped at the
/// per-step cap) and the angle advances by projection / length; the gripper
/// snaps onto the arc. Fold: a grabbed corner follows the gripper; interior
/// cloth points follow fractionally.
pub fn step(params: &EnvParams, state: &EnvState, action: &Action) -> (EnvState, bool, StepInfo) {
    let a = action.clipped();
    let cap = params.step_cap();
    let delta = (a.dx * cap, a.dy * cap);
    let mut next = *state;
    next.grip_closed = a.grip > 0.0;
    let mut info = StepInfo::default();

    match state.object {
        ObjectState::Door { angle } => {
            let handle = door_handle(angle);
            let attached = next.grip_closed && dist(state.gripper, handle) <= GRAB_RADIUS;
            info.attached = attached;
            if attached {
                let tangent = (-angle.sin(), angle.cos());
                let proj = (delta.0 * tangent.0 + delta.1 * tangent.1).clamp(-cap, cap);
                let new_angle = (angle + proj / DOOR_LENGTH).clamp(0.0, std::f64::consts::FRAC_PI_2);
                next.object = ObjectState::Door { angle: new_angle };
                next.gripper = door_handle(new_angle);
            } else {
                next.gripper = (
                    (state.gripper.0 + delta.0).clamp(0.0, 1.0),
                    (state.gripper.1 + delta.1).clamp(0.0, 1.0),
                );
            }
        }
        ObjectState::Fold { corner, grabbed } => {
            let hold = next.grip_closed && (grabbed || dist(state.gripper, corner) <= GRAB_RADIUS);
            info.attached = hold;
            let new_gripper = (
                (state.gripper.0 + delta.0).clamp(0.0, 1.0),
                (state.gripper.1 + delta.1).clamp(0.0, 1.0),
            );
            next.gripper = new_gripper;
            next.object = ObjectState::Fold {
                corner: if hold { new_gripper } else { corner },
                grabbed: hold,
            };
        }
    }

    next.t = state.t + 1;
    info.success = success(params, &next);
    let done = info.success || next.t >= state.horizon;
    (next, done, info)
}

/// Ground-truth point tracks for a state: 32 object points, 60 background
/// grid points, 4 agent points around the gripper. Object points are marked
/// invisible outside the frame or when occluded by the agent cluster.
pub fn render_tracks(params: &EnvParams, state: &EnvState, jitter: (f64, f64)) -> TrackFrame {
    let mut points = Vec::with_capacity(OBJECT_POINTS + BACKGROUND_POINTS + AGENT_POINTS);
    let mut labels = Vec::with_capacity(points.capacity());

    match state.object {
        ObjectState::Door { angle } => {
            for i in 0..OBJECT_POINTS {
                let s = (i + 1) as f64 / OBJECT_POINTS as f64;
                points.push((
                    DOOR_PIVOT.0 + s * DOOR_LENGTH * angle.cos(),
                    DOOR_PIVOT.1 + s * DOOR_LENGTH * angle.sin(),
                ));
                labels.push(PointLabel::Object);
            }
        }
        ObjectState::Fold { corner, .. } => {
            let shift = (
                corner.0 - FOLD_START_CORNER.0,
                corner.1 - FOLD_START_CORNER.1,
            );
            for i in 0..OBJECT_POINTS {
                let s = (i + 1) as f64 / OBJECT_POINTS as f64;
                // Rest positions along the fixed-to-moving corner diagonal
                // with a small alternating perpendicular offset.
                let perp = if i % 2 == 0 { 0.02 } else { -0.02 };
                let dir = (
                    FOLD_START_CORNER.0 - FOLD_FIXED_CORNER.0,
                    FOLD_START_CORNER.1 - FOLD_FIXED_CORNER.1,
                );
                let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
                let orth = (-dir.1 / norm, dir.0 / norm);
                let rest = (
                    FOLD_FIXED_CORNER.0 + s * dir.0 + perp * orth.0,
                    FOLD_FIXED_CORNER.1 + s * dir.1 + perp * orth.1,
                );
                points.push((rest.0 + s * shift.0, rest.1 + s * shift.1));
                labels.push(PointLabel::Object);
            }
        }
    }

    // 10 x 6 static grid.
    for j in 0..6 {
        for i in 0..10 {
            points.push((0.05 + 0.1 * i as f64, 0.08 + 0.168 * j as f64));
            labels.push(PointLabel::Background);
        }
    }

    let w = params.agent_spread / 2.0;
    for off in [(-w, -w), (w, -w), (-w, w), (w, w)] {
        points.push((state.gripper.0 + off.0, state.gripper.1 + off.1));
        labels.push(PointLabel::Agent);
    }

    for p in points.iter_mut() {
        p.0 += jitter.0;
        p.1 += jitter.1;
    }

    let agent_slice: Vec<(f64, f64)> =
        points[OBJECT_POINTS + BACKGROUND_POINTS..].to_vec();
    let visible = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if labels[i] != PointLabel::Object {
                return true;
            }
            if p.0.abs() > 1.0 || p.1.abs() > 1.0 {
                return false;
            }
            !agent_slice.iter().any(|a| dist(*p, *a) <= OCCLUSION_RADIUS)
        })
        .collect();

    TrackFrame {
        points,
        visible,
        labels,
        frame_index: state.t as usize,
    }
}

/// Compact privileged state features stored with robot rollouts:
/// door `[gx, gy, grip, angle]`, fold `[gx, gy, grip, cx, cy, grabbed]`.
pub fn state_features(state: &EnvState) -> Vec<f64> {
    let mut v = vec![
        state.gripper.0,
        state.gripper.1,
        if state.grip_closed { 1.0 } else { 0.0 },
    ];
    match state.object {
        ObjectState::Door { angle } => v.push(angle),
        ObjectState::Fold { corner, grabbed } => {
            v.push(corner.0);
            v.push(corner.1);
            v.push(if grabbed { 1.0 } else { 0.0 });
        }
    }
    v
}

/// Rebuild an [`EnvState`] from stored features.
pub fn state_from_features(kind: EnvKind, f: &[f64], t: u32, horizon: u32) -> CoreResult<EnvState> {
    let object = match kind {
        EnvKind::HingedDoor => {
            if f.len() != 4 {
                return Err(CoreError::config("door state features must have 4 entries"));
            }
            ObjectState::Door { angle: f[3] }
        }
        EnvKind::CornerFold => {
            if f.len() != 6 {
                return Err(CoreError::config("fold state features must have 6 entries"));
            }
            ObjectState::Fold {
                corner: (f[3], f[4]),
                grabbed: f[5] > 0.5,
            }
        }
    };
    Ok(EnvState {
        gripper: (f[0], f[1]),
        grip_closed: f[2] > 0.5,
        object,
        t,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn door_params() -> EnvParams {
        EnvParams::robot(EnvKind::HingedDoor)
    }

    fn attached_state(angle: f64) -> EnvState {
        EnvState {
            gripper: door_handle(angle),
            grip_closed: true,
            object: ObjectState::Door { angle },
            t: 0,
            horizon: HORIZON,
        }
    }

    #[test]
    fn tangential_move_advances_angle_by_arc_length() {
        // Displacement of 0.025 along the tangent -> 0.025 / 0.25 = 0.1 rad.
        // A displacement above the robot cap requires the human embodiment
        // (cap 0.03).
        let params = EnvParams::human(EnvKind::HingedDoor);
        let state = attached_state(0.3);
        let cap = params.step_cap();
        let action = Action {
            dx: -0.3f64.sin() * 0.025 / cap,
            dy: 0.3f64.cos() * 0.025 / cap,
            grip: 1.0,
        };
        let (next, _, info) = step(&params, &state, &action);
        assert!(info.attached);
        match next.object {
            ObjectState::Door { angle } => assert!((angle - 0.4).abs() < 1e-12),
            _ => unreachable!(),
        }
        // Gripper snapped onto the arc.
        assert!(dist(next.gripper, door_handle(0.4)) < 1e-12);
    }

    #[test]
    fn unattached_motion_leaves_door() {
        let params = door_params();
        let state = EnvState {
            gripper: (0.5, 0.5),
            grip_closed: false,
            object: ObjectState::Door { angle: 0.2 },
            t: 0,
            horizon: HORIZON,
        };
        let (next, _, info) = step(&params, &state, &Action { dx: 1.0, dy: 0.0, grip: -1.0 });
        assert!(!info.attached);
        assert!((next.gripper.0 - 0.52).abs() < 1e-12);
        assert_eq!(next.object, ObjectState::Door { angle: 0.2 });
    }

    #[test]
    fn angle_rate_bounded_on_robot() {
        let params = door_params();
        let mut state = attached_state(0.5);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let action = Action {
                dx: rng.random_range(-1.0..1.0),
                dy: rng.random_range(-1.0..1.0),
                grip: 1.0,
            };
            let before = match state.object {
                ObjectState::Door { angle } => angle,
                _ => unreachable!(),
            };
            let (next, done, _) = step(&params, &state, &action);
            let after = match next.object {
                ObjectState::Door { angle } => angle,
                _ => unreachable!(),
            };
            assert!((after - before).abs() <= ACTION_MAX / DOOR_LENGTH + 1e-12);
            if done {
                break;
            }
            state = next;
        }
    }

    #[test]
    fn angle_only_changes_while_attached() {
        let params = door_params();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut state = reset(&params, &mut rng);
        for _ in 0..60 {
            let action = Action {
                dx: rng.random_range(-1.0..1.0),
                dy: rng.random_range(-1.0..1.0),
                grip: if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 },
            };
            let before = match state.object {
                ObjectState::Door { angle } => angle,
                _ => unreachable!(),
            };
            let (next, done, info) = step(&params, &state, &action);
            let after = match next.object {
                ObjectState::Door { angle } => angle,
                _ => unreachable!(),
            };
            if !info.attached {
                assert_eq!(before, after);
            }
            if done {
                break;
            }
            state = next;
        }
    }

    #[test]
    fn fold_success_needs_release() {
        let params = EnvParams::robot(EnvKind::CornerFold);
        let near = (FOLD_FIXED_CORNER.0 + 0.01, FOLD_FIXED_CORNER.1 + 0.01);
        let held = EnvState {
            gripper: near,
            grip_closed: true,
            object: ObjectState::Fold {
                corner: near,
                grabbed: true,
            },
            t: 10,
            horizon: HORIZON,
        };
        assert!(!success(&params, &held));
        let (next, done, info) = step(&params, &held, &Action { dx: 0.0, dy: 0.0, grip: -1.0 });
        assert!(info.success && done);
        assert!(success(&params, &next));
    }

    #[test]
    fn closed_door_points_collinear_toward_tip() {
        let params = door_params();
        let state = EnvState {
            gripper: (0.3, 0.3),
            grip_closed: false,
            object: ObjectState::Door { angle: 0.0 },
            t: 0,
            horizon: HORIZON,
        };
        let frame = render_tracks(&params, &state, (0.0, 0.0));
        for i in 0..OBJECT_POINTS {
            let p = frame.points[i];
            assert!((p.1 - 0.5).abs() < 1e-12, "collinear along y=0.5");
            assert!(p.0 > DOOR_PIVOT.0 && p.0 <= DOOR_PIVOT.0 + DOOR_LENGTH + 1e-12);
        }
        // Tip is exactly pivot + length.
        let tip = frame.points[OBJECT_POINTS - 1];
        assert!((tip.0 - 0.95).abs() < 1e-12);
    }

    #[test]
    fn static_background_without_jitter() {
        let params = door_params();
        let s0 = attached_state(0.3);
        let (s1, _, _) = step(&params, &s0, &Action { dx: -1.0, dy: 0.5, grip: 1.0 });
        let f0 = render_tracks(&params, &s0, (0.0, 0.0));
        let f1 = render_tracks(&params, &s1, (0.0, 0.0));
        for i in OBJECT_POINTS..OBJECT_POINTS + BACKGROUND_POINTS {
            assert_eq!(f0.points[i], f1.points[i]);
        }
    }

    #[test]
    fn tip_chord_matches_arc_length_for_small_angles() {
        let d_theta = 0.004f64;
        let p0 = door_handle(0.8);
        let p1 = door_handle(0.8 + d_theta);
        let chord = dist(p0, p1);
        let exact = 2.0 * DOOR_LENGTH * (d_theta / 2.0).sin();
        assert!((chord - exact).abs() < 1e-12);
        assert!((chord - DOOR_LENGTH * d_theta).abs() < 1e-9);
    }

    #[test]
    fn rendering_is_deterministic_function_of_state() {
        let params = door_params();
        let state = attached_state(0.7);
        let a = render_tracks(&params, &state, (0.0, 0.0));
        let b = render_tracks(&params, &state, (0.0, 0.0));
        assert_eq!(a.points, b.points);
        assert_eq!(a.visible, b.visible);
    }

    #[test]
    fn occlusion_hides_object_points_near_agent() {
        let params = door_params();
        // Gripper sitting on the door midpoint occludes nearby points.
        let state = EnvState {
            gripper: (DOOR_PIVOT.0 + 0.5 * DOOR_LENGTH, 0.5),
            grip_closed: false,
            object: ObjectState::Door { angle: 0.0 },
            t: 0,
            horizon: HORIZON,
        };
        let frame = render_tracks(&params, &state, (0.0, 0.0));
        let hidden = frame.visible[..OBJECT_POINTS].iter().filter(|v| !**v).count();
        assert!(hidden > 0, "agent cluster should occlude door points");
    }
}
