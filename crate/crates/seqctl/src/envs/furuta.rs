//! Furuta (rotary inverted) pendulum with Qube-Servo-2-class defaults.
//! Two-DOF rigid-body equations with viscous damping and a DC-motor
//! torque model, RK4 integrated at 250 Hz. The pendulum angle alpha is
//! measured from upright (alpha = 0 upright, alpha = pi hanging).

use super::{rk4, wrap_angle, EnvError, EnvSpec, EnvState, StepResult, Variant};
use crate::kernel::StreamRng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const VEL_LIMIT: f64 = 60.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FurutaParams {
    /// Arm mass (kg).
    pub arm_mass: f64,
    /// Arm length pivot-to-pendulum (m).
    pub arm_length: f64,
    /// Pendulum mass (kg).
    pub pend_mass: f64,
    /// Pendulum full length (m).
    pub pend_length: f64,
    /// Motor winding resistance (ohm).
    pub motor_resistance: f64,
    /// Motor torque/back-EMF constant.
    pub motor_constant: f64,
    /// Viscous damping on the arm joint.
    pub arm_damping: f64,
    /// Viscous damping on the pendulum joint.
    pub pend_damping: f64,
    pub gravity: f64,
}

impl Default for FurutaParams {
    fn default() -> Self {
        Self {
            arm_mass: 0.095,
            arm_length: 0.085,
            pend_mass: 0.024,
            pend_length: 0.129,
            motor_resistance: 8.4,
            motor_constant: 0.042,
            arm_damping: 5e-4,
            pend_damping: 5e-5,
            gravity: 9.81,
        }
    }
}

impl FurutaParams {
    /// Arm inertia about its axis plus the pendulum mass at the arm tip.
    pub fn j_arm(&self) -> f64 {
        self.arm_mass * self.arm_length * self.arm_length / 3.0
            + self.pend_mass * self.arm_length * self.arm_length
    }

    /// Pendulum rod inertia about its pivot.
    pub fn j_pend(&self) -> f64 {
        self.pend_mass * self.pend_length * self.pend_length / 3.0
    }

    /// Distance from pivot to pendulum center of mass.
    pub fn com(&self) -> f64 {
        self.pend_length / 2.0
    }

    pub fn motor_torque(&self, voltage: f64, arm_vel: f64) -> f64 {
        self.motor_constant * (voltage - self.motor_constant * arm_vel) / self.motor_resistance
    }

    /// Total mechanical energy (zero damping, zero torque invariant).
    pub fn energy(&self, y: &[f64; 4]) -> f64 {
        let (alpha, thdot, aldot) = (y[1], y[2], y[3]);
        let (j0, j2, l) = (self.j_arm(), self.j_pend(), self.com());
        let cross = self.pend_mass * self.arm_length * l;
        let s = alpha.sin();
        let c = alpha.cos();
        let kinetic = 0.5 * (j0 + j2 * s * s) * thdot * thdot
            + 0.5 * j2 * aldot * aldot
            + cross * c * thdot * aldot;
        let potential = self.pend_mass * self.gravity * l * c;
        kinetic + potential
    }

    /// Pendulum-only energy used by the swing-up controller.
    pub fn pend_energy(&self, alpha: f64, aldot: f64) -> f64 {
        0.5 * self.j_pend() * aldot * aldot
            + self.pend_mass * self.gravity * self.com() * alpha.cos()
    }

    pub fn upright_energy(&self) -> f64 {
        self.pend_mass * self.gravity * self.com()
    }

    // y = [theta, alpha, thdot, aldot]
    pub fn derivatives(&self, y: &[f64; 4], torque: f64) -> [f64; 4] {
        let (alpha, thdot, aldot) = (y[1], y[2], y[3]);
        let (j0, j2, l) = (self.j_arm(), self.j_pend(), self.com());
        let cross = self.pend_mass * self.arm_length * l;
        let s = alpha.sin();
        let c = alpha.cos();

        let m11 = j0 + j2 * s * s;
        let m12 = cross * c;
        let m22 = j2;

        let rhs1 = torque - self.arm_damping * thdot - 2.0 * j2 * s * c * thdot * aldot
            + cross * s * aldot * aldot;
        let rhs2 = -self.pend_damping * aldot + j2 * s * c * thdot * thdot
            + self.pend_mass * self.gravity * l * s;

        let det = m11 * m22 - m12 * m12;
        let thacc = (m22 * rhs1 - m12 * rhs2) / det;
        let alacc = (m11 * rhs2 - m12 * rhs1) / det;
        [thdot, aldot, thacc, alacc]
    }
}

pub fn reset(spec: &EnvSpec, rng: &mut StreamRng) -> EnvState {
    let (alpha, aldot) = match spec.variant {
        Variant::Stabilize => (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
        Variant::SwingUp => (PI + rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
    };
    EnvState {
        q: vec![0.0, alpha],
        qdot: vec![0.0, aldot],
        t: 0,
    }
}

pub fn observe(state: &EnvState) -> Vec<f64> {
    let (theta, alpha) = (state.q[0], state.q[1]);
    vec![
        theta.cos(),
        theta.sin(),
        alpha.cos(),
        alpha.sin(),
        state.qdot[0],
        state.qdot[1],
    ]
}

fn stab_out_of_bounds(state: &EnvState) -> bool {
    wrap_angle(state.q[1]).abs() > 0.35
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: f64) -> Result<StepResult, EnvError> {
    if spec.variant == Variant::Stabilize && stab_out_of_bounds(state) {
        let next_state = state.clone();
        let observation = observe(&next_state);
        return Ok(StepResult {
            next_state,
            observation,
            reward: 0.0,
            done: true,
        });
    }
    let v = action.clamp(-spec.action_bound, spec.action_bound);
    let p = &spec.furuta;
    let y = [state.q[0], state.q[1], state.qdot[0], state.qdot[1]];
    let ynext = rk4(y, spec.dt, |y| {
        p.derivatives(y, p.motor_torque(v, y[2]))
    });
    let next_state = EnvState {
        q: vec![ynext[0], ynext[1]],
        qdot: vec![
            ynext[2].clamp(-VEL_LIMIT, VEL_LIMIT),
            ynext[3].clamp(-VEL_LIMIT, VEL_LIMIT),
        ],
        t: state.t + 1,
    };
    let alpha = wrap_angle(next_state.q[1]);
    let thdot = next_state.qdot[0];
    let aldot = next_state.qdot[1];
    let shaped = 1.0 - (alpha / PI) * (alpha / PI)
        - 0.01 * (thdot * thdot + aldot * aldot)
        - 0.001 * v * v;
    let reward = (spec.dt * shaped).max(0.0);
    let terminated = spec.variant == Variant::Stabilize && stab_out_of_bounds(&next_state);
    let done = terminated || next_state.t >= spec.max_steps;
    let observation = observe(&next_state);
    Ok(StepResult {
        next_state,
        observation,
        reward,
        done,
    })
}
