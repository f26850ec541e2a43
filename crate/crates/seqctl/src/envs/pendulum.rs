//! Torque-limited simple pendulum, gym-style: theta = 0 is upright,
//! semi-implicit Euler integration, dense quadratic cost.

use super::{wrap_angle, EnvError, EnvSpec, EnvState, StepResult, Variant};
use crate::kernel::StreamRng;
use std::f64::consts::PI;

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;

pub fn reset(spec: &EnvSpec, rng: &mut StreamRng) -> EnvState {
    let (theta, thdot) = match spec.variant {
        Variant::Stabilize => (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
        Variant::SwingUp => (PI + rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
    };
    EnvState {
        q: vec![theta],
        qdot: vec![thdot],
        t: 0,
    }
}

pub fn observe(state: &EnvState) -> Vec<f64> {
    vec![state.q[0].cos(), state.q[0].sin(), state.qdot[0]]
}

pub fn angular_accel(theta: f64, torque: f64) -> f64 {
    3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin()
        + 3.0 / (MASS * LENGTH * LENGTH) * torque
}

/// Total mechanical energy of the unactuated rod (used by the swing-up
/// controller and the conservation tests).
pub fn energy(theta: f64, thdot: f64) -> f64 {
    let inertia = MASS * LENGTH * LENGTH / 3.0;
    0.5 * inertia * thdot * thdot + MASS * GRAVITY * LENGTH / 2.0 * theta.cos()
}

pub fn upright_energy() -> f64 {
    MASS * GRAVITY * LENGTH / 2.0
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: f64) -> Result<StepResult, EnvError> {
    let u = action.clamp(-spec.action_bound, spec.action_bound);
    let theta = state.q[0];
    let thdot = state.qdot[0];

    let wrapped = wrap_angle(theta);
    let reward = -(wrapped * wrapped + 0.1 * thdot * thdot + 0.001 * u * u);

    let new_thdot = (thdot + angular_accel(theta, u) * spec.dt).clamp(-MAX_SPEED, MAX_SPEED);
    let new_theta = theta + new_thdot * spec.dt;

    let next_state = EnvState {
        q: vec![new_theta],
        qdot: vec![new_thdot],
        t: state.t + 1,
    };
    let observation = observe(&next_state);
    let done = next_state.t >= spec.max_steps;
    Ok(StepResult {
        next_state,
        observation,
        reward,
        done,
    })
}
