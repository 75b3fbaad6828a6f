//! Point robot on the plane with a terminal, distance-gated reward.
//!
//! State layout: `[x, y, goal_x, goal_y]`.

use rand::Rng;

use super::{Action, EnvConfig, EnvKind, EnvState, FaultSpec};
use crate::scalar::Scalar;

pub const STATE_DIM: usize = 4;

pub(super) fn reset<T: Scalar, R: Rng + ?Sized>(config: &EnvConfig<T>, rng: &mut R) -> EnvState<T> {
    let angle = crate::rng::uniform(rng, T::zero(), T::PI());
    let (s, c) = angle.sin_cos();
    EnvState {
        kind: EnvKind::PointSparse,
        values: vec![T::zero(), T::zero(), config.goal_radius * c, config.goal_radius * s],
    }
}

/// Reward for ending an episode at `pos`: `1 − d / goal_radius` when the
/// distance `d` to the goal is within `success_radius`, else 0.
pub fn terminal_reward<T: Scalar>(pos: [T; 2], goal: [T; 2], config: &EnvConfig<T>) -> T {
    let d = (pos[0] - goal[0]).hypot(pos[1] - goal[1]);
    if d <= config.success_radius {
        (T::one() - d / config.goal_radius).max(T::zero())
    } else {
        T::zero()
    }
}

pub(super) fn step<T: Scalar>(
    state: &EnvState<T>,
    t: usize,
    action: Action<T>,
    config: &EnvConfig<T>,
    fault: &FaultSpec<T>,
) -> (EnvState<T>, T) {
    let v = &state.values;
    let gain = config.dt_point * fault.torque_scale;
    let x = v[0] + action.0[0] * gain;
    let y = v[1] + action.0[1] * gain;
    let goal = [v[2], v[3]];
    let reward = if t + 1 >= config.horizon {
        terminal_reward([x, y], goal, config)
    } else {
        T::zero()
    };
    (
        EnvState {
            kind: EnvKind::PointSparse,
            values: vec![x, y, goal[0], goal[1]],
        },
        reward,
    )
}
