//! Planar two-link arm with per-joint torque, linear damping and
//! semi-implicit Euler integration.
//!
//! State layout: `[cos θ0, cos θ1, sin θ0, sin θ1, target_x, target_y,
//! ω0, ω1, Δx, Δy, Δz]` with `(Δx, Δy) = fingertip − target` and `Δz = 0`.

use rand::Rng;

use super::{Action, EnvConfig, EnvKind, EnvState, FaultSpec};
use crate::rng::uniform;
use crate::scalar::{clamp, Scalar};

pub const STATE_DIM: usize = 11;

pub const COS0: usize = 0;
pub const COS1: usize = 1;
pub const SIN0: usize = 2;
pub const SIN1: usize = 3;
pub const TARGET_X: usize = 4;
pub const TARGET_Y: usize = 5;
pub const OMEGA0: usize = 6;
pub const OMEGA1: usize = 7;
pub const DELTA_X: usize = 8;
pub const DELTA_Y: usize = 9;
pub const DELTA_Z: usize = 10;

pub fn forward_kinematics<T: Scalar>(theta0: T, theta1: T, l0: T, l1: T) -> [T; 2] {
    let (s0, c0) = theta0.sin_cos();
    let (s01, c01) = (theta0 + theta1).sin_cos();
    [l0 * c0 + l1 * c01, l0 * s0 + l1 * s01]
}

/// Negative fingertip-to-target distance minus `alpha · ‖a‖²`.
pub fn reward<T: Scalar>(fingertip: [T; 2], target: [T; 2], action: &Action<T>, alpha: T) -> T {
    let dx = fingertip[0] - target[0];
    let dy = fingertip[1] - target[1];
    -dx.hypot(dy) - alpha * action.norm_sq()
}

/// Joint angles recovered from the cos/sin entries.
pub fn angles<T: Scalar>(state: &EnvState<T>) -> (T, T) {
    let v = &state.values;
    (v[SIN0].atan2(v[COS0]), v[SIN1].atan2(v[COS1]))
}

pub fn target<T: Scalar>(state: &EnvState<T>) -> [T; 2] {
    [state.values[TARGET_X], state.values[TARGET_Y]]
}

pub fn fingertip<T: Scalar>(state: &EnvState<T>) -> [T; 2] {
    [
        state.values[DELTA_X] + state.values[TARGET_X],
        state.values[DELTA_Y] + state.values[TARGET_Y],
    ]
}

/// Builds a consistent observation from joint angles, velocities and target.
pub fn compose<T: Scalar>(theta: (T, T), omega: (T, T), target: [T; 2], config: &EnvConfig<T>) -> EnvState<T> {
    let (l0, l1) = config.link_lengths;
    let tip = forward_kinematics(theta.0, theta.1, l0, l1);
    let (s0, c0) = theta.0.sin_cos();
    let (s1, c1) = theta.1.sin_cos();
    EnvState {
        kind: EnvKind::Reacher2,
        values: vec![
            c0,
            c1,
            s0,
            s1,
            target[0],
            target[1],
            omega.0,
            omega.1,
            tip[0] - target[0],
            tip[1] - target[1],
            T::zero(),
        ],
    }
}

pub(super) fn reset<T: Scalar, R: Rng + ?Sized>(config: &EnvConfig<T>, rng: &mut R) -> EnvState<T> {
    let lim = T::of(0.1);
    let theta = (uniform(rng, -lim, lim), uniform(rng, -lim, lim));
    let reach = config.link_lengths.0 + config.link_lengths.1;
    let target = loop {
        let x = uniform(rng, -reach, reach);
        let y = uniform(rng, -reach, reach);
        let r = x.hypot(y);
        if r <= reach && r >= config.target_min_radius {
            break [x, y];
        }
    };
    compose(theta, (T::zero(), T::zero()), target, config)
}

/// Angular acceleration command per joint after the fault's torque scaling.
pub fn effective_torque<T: Scalar>(action: &Action<T>, config: &EnvConfig<T>, fault: &FaultSpec<T>) -> [T; 2] {
    action.clamped().0.map(|a| a * config.torque_gain * fault.torque_scale)
}

pub(super) fn step<T: Scalar>(
    state: &EnvState<T>,
    action: Action<T>,
    config: &EnvConfig<T>,
    fault: &FaultSpec<T>,
) -> (EnvState<T>, T) {
    let torque = effective_torque(&action, config, fault);
    step_with_torque(state, &action, torque, config, fault)
}

/// Integrates one step under an explicit torque; `action` only enters the reward.
pub fn step_with_torque<T: Scalar>(
    state: &EnvState<T>,
    action: &Action<T>,
    torque: [T; 2],
    config: &EnvConfig<T>,
    fault: &FaultSpec<T>,
) -> (EnvState<T>, T) {
    let v = &state.values;
    let (theta0, theta1) = angles(state);
    let dt = config.dt;
    let wmax = config.omega_max;
    let w0 = clamp(v[OMEGA0] + (torque[0] - config.damping * v[OMEGA0]) * dt, -wmax, wmax);
    let mut w1 = clamp(v[OMEGA1] + (torque[1] - config.damping * v[OMEGA1]) * dt, -wmax, wmax);
    let theta0 = theta0 + w0 * dt;
    let raw1 = theta1 + w1 * dt;
    let (lo, hi) = fault.joint1_limits;
    let theta1 = clamp(raw1, lo, hi);
    if theta1 != raw1 {
        w1 = T::zero();
    }
    let target = target(state);
    let next = compose((theta0, theta1), (w0, w1), target, config);
    let tip = fingertip(&next);
    let r = reward(tip, target, action, config.alpha);
    (next, r)
}
