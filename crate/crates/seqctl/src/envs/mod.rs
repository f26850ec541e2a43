//! Analytic simulators: torque-limited pendulum swing-up, cart-pole
//! stabilization and the Furuta pendulum (both variants). Stepping is a
//! pure function of (state, action, spec).

mod cartpole;
mod furuta;
pub mod pendulum;

pub use furuta::FurutaParams;

use crate::kernel::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("simulation diverged: non-finite state in {0}")]
    Diverged(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Pendulum,
    CartPole,
    Furuta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Stabilize,
    SwingUp,
}

/// Generalized positions/velocities plus the step counter. Angles are
/// stored unwrapped; the observation map emits (sin, cos) features.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub next_state: EnvState,
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub variant: Variant,
    pub dt: f64,
    pub max_steps: usize,
    pub action_bound: f64,
    pub rtg_scale: f64,
    #[serde(default)]
    pub furuta: FurutaParams,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, variant: Variant) -> Self {
        let (dt, max_steps, action_bound, rtg_scale) = match kind {
            EnvKind::Pendulum => (0.05, 200, 2.0, 1000.0),
            EnvKind::CartPole => (0.02, 1000, 10.0, 1000.0),
            EnvKind::Furuta => (0.004, 1500, 5.0, 10.0),
        };
        let name = format!(
            "{}-{}",
            match kind {
                EnvKind::Pendulum => "pendulum",
                EnvKind::CartPole => "cartpole",
                EnvKind::Furuta => "furuta",
            },
            match variant {
                Variant::Stabilize => "stabilize",
                Variant::SwingUp => "swingup",
            }
        );
        Self {
            name,
            kind,
            variant,
            dt,
            max_steps,
            action_bound,
            rtg_scale,
            furuta: FurutaParams::default(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pendulum => 3,
            EnvKind::CartPole => 4,
            EnvKind::Furuta => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    /// Upper bound on a stabilization-variant return.
    pub fn max_return_bound(&self) -> f64 {
        match self.kind {
            EnvKind::Pendulum => 0.0,
            EnvKind::CartPole => self.max_steps as f64,
            EnvKind::Furuta => self.max_steps as f64 * self.dt,
        }
    }

    pub fn reset(&self, rng: &mut StreamRng) -> EnvState {
        match self.kind {
            EnvKind::Pendulum => pendulum::reset(self, rng),
            EnvKind::CartPole => cartpole::reset(self, rng),
            EnvKind::Furuta => furuta::reset(self, rng),
        }
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => pendulum::observe(state),
            EnvKind::CartPole => cartpole::observe(state),
            EnvKind::Furuta => furuta::observe(state),
        }
    }

    pub fn step(&self, state: &EnvState, action: f64) -> Result<StepResult, EnvError> {
        let res = match self.kind {
            EnvKind::Pendulum => pendulum::step(self, state, action),
            EnvKind::CartPole => cartpole::step(self, state, action),
            EnvKind::Furuta => furuta::step(self, state, action),
        }?;
        if !res.next_state.q.iter().chain(&res.next_state.qdot).all(|x| x.is_finite())
            || !res.reward.is_finite()
        {
            return Err(EnvError::Diverged(self.kind_name()));
        }
        Ok(res)
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            EnvKind::Pendulum => "pendulum",
            EnvKind::CartPole => "cartpole",
            EnvKind::Furuta => "furuta",
        }
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Wrap an angle to [0, 2*pi).
pub fn wrap_angle_positive(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a < 0.0 {
        a += two_pi;
    }
    a
}

/// Classic fourth-order Runge-Kutta step for a first-order ODE system.
pub(crate) fn rk4<const N: usize>(
    y: [f64; N],
    dt: f64,
    deriv: impl Fn(&[f64; N]) -> [f64; N],
) -> [f64; N] {
    let k1 = deriv(&y);
    let mut y2 = y;
    for i in 0..N {
        y2[i] = y[i] + 0.5 * dt * k1[i];
    }
    let k2 = deriv(&y2);
    let mut y3 = y;
    for i in 0..N {
        y3[i] = y[i] + 0.5 * dt * k2[i];
    }
    let k3 = deriv(&y3);
    let mut y4 = y;
    for i in 0..N {
        y4[i] = y[i] + dt * k3[i];
    }
    let k4 = deriv(&y4);
    let mut out = y;
    for i in 0..N {
        out[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}
