//! Scripted waypoint experts and scripted failure modes.

use super::{
    door_handle, Action, EnvKind, EnvParams, EnvState, ObjectState, FOLD_FIXED_CORNER,
    FOLD_SUCCESS_DIST, GRAB_RADIUS,
};
use crate::numcore::init::gaussian;
use rand_chacha::ChaCha12Rng;

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Action that moves the gripper toward `target`, decelerating so it does
/// not overshoot. Returned components are pre-noise, in [-1, 1].
fn approach(gripper: (f64, f64), target: (f64, f64), cap: f64) -> (f64, f64) {
    let d = (target.0 - gripper.0, target.1 - gripper.1);
    let n = (d.0 * d.0 + d.1 * d.1).sqrt();
    if n < 1e-12 {
        return (0.0, 0.0);
    }
    let speed = (n / cap).min(1.0);
    (d.0 / n * speed, d.1 / n * speed)
}

/// The demonstrator closes its grip only deep inside the grab radius.
/// The tight window is what makes the grab a precision skill: cloned
/// policies smooth the close boundary over a scale comparable to the
/// window itself.
pub const GRAB_CLOSE_FRAC: f64 = 0.5;

/// Ring radius of the orbit approach styles.
pub const ORBIT_RADIUS: f64 = 0.07;
/// Half-width of the grab sector (radians of azimuth around the handle).
pub const GRAB_SECTOR_HALF: f64 = 0.4;

/// Demonstrator technique. Direct goes straight for the handle; the orbit
/// styles circle the handle on a small ring (one per direction) and grab
/// only from the pivot-side sector, the way different teleoperators
/// approach the same task with different habits. Mean-squared regression
/// over a mixture of the two orbit styles blends opposing tangential
/// commands, which is exactly the imperfection the residual learner has to
/// correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproachStyle {
    Direct,
    OrbitCw,
    OrbitCcw,
}

/// Waypoint expert: approach the handle/corner (directly or via an orbit
/// style), close the grip when deep inside the grab radius, then follow
/// the arc (door) or a straight line to the fold target, releasing at the
/// goal. Gaussian noise `sigma_a` (action units) is added to the
/// translation components.
pub fn scripted_expert_styled(
    params: &EnvParams,
    state: &EnvState,
    style: ApproachStyle,
    sigma_a: f64,
    rng: &mut ChaCha12Rng,
) -> Action {
    let cap = params.step_cap();
    let close_r = GRAB_CLOSE_FRAC * GRAB_RADIUS;
    let (mut dx, mut dy, grip) = match state.object {
        ObjectState::Door { angle } => {
            let handle = door_handle(angle);
            let d = dist(state.gripper, handle);
            if state.grip_closed && d <= GRAB_RADIUS {
                // Attached: pull along the opening tangent at 0.8 speed.
                (-angle.sin() * 0.8, angle.cos() * 0.8, 1.0)
            } else if d <= close_r {
                // Deep in the window: close and start pulling.
                (-angle.sin() * 0.8, angle.cos() * 0.8, 1.0)
            } else {
                let direct = style == ApproachStyle::Direct
                    || in_grab_sector(state.gripper, handle)
                    || state.grip_closed;
                if direct {
                    // Approach (or reapproach after slipping) straight in.
                    let (x, y) = approach(state.gripper, handle, cap);
                    (x, y, -1.0)
                } else {
                    let (x, y) = orbit_move(state.gripper, handle, style, cap);
                    (x, y, -1.0)
                }
            }
        }
        ObjectState::Fold { corner, grabbed } => {
            if grabbed {
                let d = dist(corner, FOLD_FIXED_CORNER);
                if d <= 0.6 * FOLD_SUCCESS_DIST {
                    (0.0, 0.0, -1.0) // release at the goal
                } else {
                    let (x, y) = approach(state.gripper, FOLD_FIXED_CORNER, cap);
                    (x, y, 1.0)
                }
            } else {
                let d = dist(state.gripper, corner);
                if d <= close_r {
                    (0.0, 0.0, 1.0) // close on the corner before moving
                } else {
                    let (x, y) = approach(state.gripper, corner, cap);
                    (x, y, -1.0)
                }
            }
        }
    };
    dx += sigma_a * gaussian(rng);
    dy += sigma_a * gaussian(rng);
    Action { dx, dy, grip }.clipped()
}

/// Direct-style expert (reward batteries, human demonstrations).
pub fn scripted_expert(
    params: &EnvParams,
    state: &EnvState,
    sigma_a: f64,
    rng: &mut ChaCha12Rng,
) -> Action {
    scripted_expert_styled(params, state, ApproachStyle::Direct, sigma_a, rng)
}

/// The grab sector sits on the side the door opens toward (the tangent
/// direction), so demonstrations starting elsewhere must circle the
/// handle before grabbing.
fn in_grab_sector(gripper: (f64, f64), handle: (f64, f64)) -> bool {
    let rel = (handle.0 - super::DOOR_PIVOT.0, handle.1 - super::DOOR_PIVOT.1);
    let norm = (rel.0 * rel.0 + rel.1 * rel.1).sqrt().max(1e-9);
    let tangent = (-rel.1 / norm, rel.0 / norm);
    let to_gripper = (gripper.0 - handle.0, gripper.1 - handle.1);
    let dot = tangent.0 * to_gripper.0 + tangent.1 * to_gripper.1;
    let cross = tangent.0 * to_gripper.1 - tangent.1 * to_gripper.0;
    cross.atan2(dot).abs() <= GRAB_SECTOR_HALF
}

/// One orbit step: hold the ring radius while circling toward the grab
/// sector in the style's direction.
fn orbit_move(
    gripper: (f64, f64),
    handle: (f64, f64),
    style: ApproachStyle,
    cap: f64,
) -> (f64, f64) {
    let rel = (gripper.0 - handle.0, gripper.1 - handle.1);
    let d = (rel.0 * rel.0 + rel.1 * rel.1).sqrt().max(1e-9);
    let radial = (rel.0 / d, rel.1 / d);
    // Radial correction toward the ring, tangential drive along it.
    let radial_err = ORBIT_RADIUS - d; // positive: push outward
    let tangent = match style {
        ApproachStyle::OrbitCcw => (-radial.1, radial.0),
        _ => (radial.1, -radial.0),
    };
    let radial_gain = (radial_err / cap).clamp(-1.0, 1.0);
    let v = (
        radial.0 * radial_gain + tangent.0 * 0.9,
        radial.1 * radial_gain + tangent.1 * 0.9,
    );
    let n = (v.0 * v.0 + v.1 * v.1).sqrt().max(1e-9);
    (v.0 / n.max(1.0), v.1 / n.max(1.0))
}

/// Failure scripts used by the reward-discrimination studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedFailureMode {
    /// Undershoot the handle by 0.05 (grab air just inside the door edge),
    /// close on nothing and replay the opening arc at the short radius; the
    /// swept path stays at least 0.05 from the handle, so the object never
    /// moves.
    MissHandle,
    /// Approach, then freeze in place for the rest of the episode.
    Stall,
}

/// Radial undershoot of the miss-handle script.
pub const MISS_OFFSET: f64 = 0.05;

/// Expert-like action for a failure script. `phase_angle` tracks the arc
/// replay progress for `MissHandle` (caller-owned).
pub fn scripted_failure_action(
    params: &EnvParams,
    state: &EnvState,
    mode: ScriptedFailureMode,
    phase_angle: &mut f64,
    sigma_a: f64,
    rng: &mut ChaCha12Rng,
) -> Action {
    let cap = params.step_cap();
    let short_radius = super::DOOR_LENGTH - MISS_OFFSET;
    match (mode, state.object) {
        (ScriptedFailureMode::MissHandle, ObjectState::Door { .. }) => {
            let target = (
                super::DOOR_PIVOT.0 + short_radius * phase_angle.cos(),
                super::DOOR_PIVOT.1 + short_radius * phase_angle.sin(),
            );
            let d = dist(state.gripper, target);
            if !state.grip_closed && d > 0.7 * GRAB_RADIUS && *phase_angle == 0.0 {
                let (x, y) = approach(state.gripper, target, cap);
                let mut a = Action {
                    dx: x + sigma_a * gaussian(rng),
                    dy: y + sigma_a * gaussian(rng),
                    grip: -1.0,
                };
                if d <= GRAB_RADIUS {
                    a.grip = 1.0;
                }
                a.clipped()
            } else {
                // Replay the opening arc at the short radius.
                let tangent = (-phase_angle.sin() * 0.8, phase_angle.cos() * 0.8);
                *phase_angle = (*phase_angle + 0.8 * cap / short_radius)
                    .min(std::f64::consts::FRAC_PI_2);
                Action {
                    dx: tangent.0 + sigma_a * gaussian(rng),
                    dy: tangent.1 + sigma_a * gaussian(rng),
                    grip: 1.0,
                }
                .clipped()
            }
        }
        (ScriptedFailureMode::Stall, _) => Action {
            dx: 0.0,
            dy: 0.0,
            grip: if state.grip_closed { 1.0 } else { -1.0 },
        },
        (ScriptedFailureMode::MissHandle, ObjectState::Fold { corner, .. }) => {
            // Aim beside the corner and go through the fold motion.
            let target = (corner.0, corner.1 - 0.05);
            let d = dist(state.gripper, target);
            if d > 0.7 * GRAB_RADIUS && !state.grip_closed {
                let (x, y) = approach(state.gripper, target, cap);
                Action {
                    dx: x,
                    dy: y,
                    grip: -1.0,
                }
                .clipped()
            } else {
                let (x, y) = approach(state.gripper, FOLD_FIXED_CORNER, cap);
                Action {
                    dx: x,
                    dy: y,
                    grip: 1.0,
                }
                .clipped()
            }
        }
    }
}

/// Does this env's expert script exist for the failure mode?
pub fn failure_mode_supported(kind: EnvKind, _mode: ScriptedFailureMode) -> bool {
    matches!(kind, EnvKind::HingedDoor | EnvKind::CornerFold)
}
