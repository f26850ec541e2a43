//! Frictionless cart-pole in the Barto-Sutton form, RK4 integrated,
//! +1 reward per surviving step.

use super::{rk4, EnvError, EnvSpec, EnvState, StepResult, Variant};
use crate::kernel::StreamRng;

pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const GRAVITY: f64 = 9.8;
pub const THETA_LIMIT: f64 = 0.2;
pub const X_LIMIT: f64 = 1.0;
const VEL_LIMIT: f64 = 20.0;

pub fn reset(_spec: &EnvSpec, rng: &mut StreamRng) -> EnvState {
    // The cart-pole task is stabilization-only: start near upright.
    let x = rng.uniform(-0.05, 0.05);
    let theta = rng.uniform(-0.05, 0.05);
    let xdot = rng.uniform(-0.05, 0.05);
    let thdot = rng.uniform(-0.05, 0.05);
    EnvState {
        q: vec![x, theta],
        qdot: vec![xdot, thdot],
        t: 0,
    }
}

pub fn observe(state: &EnvState) -> Vec<f64> {
    vec![state.q[0], state.q[1], state.qdot[0], state.qdot[1]]
}

// y = [x, theta, xdot, thdot]
fn derivatives(y: &[f64; 4], force: f64) -> [f64; 4] {
    let theta = y[1];
    let thdot = y[3];
    let total = CART_MASS + POLE_MASS;
    let sin = theta.sin();
    let cos = theta.cos();
    let temp = (force + POLE_MASS * POLE_HALF_LENGTH * thdot * thdot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - POLE_MASS * POLE_HALF_LENGTH * theta_acc * cos / total;
    [y[2], y[3], x_acc, theta_acc]
}

fn out_of_bounds(state: &EnvState) -> bool {
    state.q[0].abs() > X_LIMIT || state.q[1].abs() > THETA_LIMIT
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: f64) -> Result<StepResult, EnvError> {
    let _ = Variant::Stabilize;
    if out_of_bounds(state) {
        // Already terminal: no reward is collected.
        let next_state = EnvState {
            q: state.q.clone(),
            qdot: state.qdot.clone(),
            t: state.t,
        };
        let observation = observe(&next_state);
        return Ok(StepResult {
            next_state,
            observation,
            reward: 0.0,
            done: true,
        });
    }
    let force = action.clamp(-spec.action_bound, spec.action_bound);
    let y = [state.q[0], state.q[1], state.qdot[0], state.qdot[1]];
    let ynext = rk4(y, spec.dt, |y| derivatives(y, force));
    let next_state = EnvState {
        q: vec![ynext[0], ynext[1]],
        qdot: vec![
            ynext[2].clamp(-VEL_LIMIT, VEL_LIMIT),
            ynext[3].clamp(-VEL_LIMIT, VEL_LIMIT),
        ],
        t: state.t + 1,
    };
    let done = out_of_bounds(&next_state) || next_state.t >= spec.max_steps;
    let observation = observe(&next_state);
    Ok(StepResult {
        next_state,
        observation,
        reward: 1.0,
        done,
    })
}
