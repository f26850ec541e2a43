//! Scripted behavior policies standing in for an online-RL behavior
//! agent: PD stabilizers, energy-shaping swing-up with PD handover,
//! degraded variants for replay-style datasets, and the TQ
//! dataset-quality metric.

use crate::data::{
    fit_normalizer, DatasetMeta, DataError, Trajectory, TrajectoryDataset, FORMAT_VERSION,
};
use crate::envs::{pendulum, wrap_angle, EnvKind, EnvSpec, EnvState, Variant};
use crate::kernel::StreamRng;

#[derive(Clone, Debug)]
pub struct ControllerParams {
    /// PD gain vector; layout is per environment (see `pd_action_raw`).
    pub pd_gains: Vec<f64>,
    pub energy_gain: f64,
    /// Energy-pumping reference as a multiple of the upright energy.
    /// Values above 1 overdrive the pump so the pendulum still reaches
    /// the top after coupling/damping losses on the way up.
    pub energy_ref_mult: f64,
    /// Angle from upright at which the PD controller takes over (rad).
    pub switch_threshold: f64,
    /// Angular-velocity gate for the PD handover (rad/s).
    pub vel_gate: f64,
    /// Action-noise std for degraded policies.
    pub noise_sigma: f64,
    /// Action used to break the hanging-rest deadlock.
    pub kick: f64,
}

impl ControllerParams {
    pub fn defaults(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pendulum => Self {
                // u = -(g0*wrap(theta) + g1*thetadot)
                pd_gains: vec![12.0, 4.0],
                energy_gain: 1.2,
                energy_ref_mult: 1.0,
                switch_threshold: 0.6,
                vel_gate: 2.5,
                noise_sigma: 0.6,
                kick: 1.0,
            },
            EnvKind::CartPole => Self {
                // f = g0*theta + g1*thetadot + g2*x + g3*xdot
                pd_gains: vec![30.0, 4.0, 1.0, 2.5],
                energy_gain: 0.0,
                energy_ref_mult: 1.0,
                switch_threshold: 0.2,
                vel_gate: 0.0,
                noise_sigma: 2.0,
                kick: 0.0,
            },
            EnvKind::Furuta => Self {
                // V = g0*wrap(alpha) + g1*alphadot + g2*wrap(theta) + g3*thetadot
                pd_gains: vec![80.0, 4.0, 0.5, 1.0],
                energy_gain: 1000.0,
                energy_ref_mult: 1.5,
                switch_threshold: 0.5,
                vel_gate: 12.0,
                noise_sigma: 1.0,
                kick: 3.0,
            },
        }
    }
}

/// Linear PD feedback before clipping.
pub fn pd_action_raw(spec: &EnvSpec, state: &EnvState, gains: &[f64]) -> f64 {
    match spec.kind {
        EnvKind::Pendulum => {
            -(gains[0] * wrap_angle(state.q[0]) + gains[1] * state.qdot[0])
        }
        EnvKind::CartPole => {
            gains[0] * state.q[1]
                + gains[1] * state.qdot[1]
                + gains[2] * state.q[0]
                + gains[3] * state.qdot[0]
        }
        EnvKind::Furuta => {
            gains[0] * wrap_angle(state.q[1])
                + gains[1] * state.qdot[1]
                + gains[2] * wrap_angle(state.q[0])
                + gains[3] * state.qdot[0]
        }
    }
}

pub fn pd_action(spec: &EnvSpec, state: &EnvState, gains: &[f64]) -> f64 {
    pd_action_raw(spec, state, gains).clamp(-spec.action_bound, spec.action_bound)
}

/// Energy-shaping swing-up action (clipped). A configured kick breaks
/// the hanging-rest deadlock where the sign term vanishes.
pub fn energy_swingup_action(spec: &EnvSpec, state: &EnvState, params: &ControllerParams) -> f64 {
    let u = match spec.kind {
        EnvKind::Pendulum => {
            let theta = state.q[0];
            let thdot = state.qdot[0];
            let err = params.energy_ref_mult * pendulum::upright_energy()
                - pendulum::energy(theta, thdot);
            let s = sign(thdot);
            if s == 0.0 {
                params.kick
            } else {
                params.energy_gain * err * s
            }
        }
        EnvKind::Furuta => {
            let alpha = state.q[1];
            let aldot = state.qdot[1];
            let p = &spec.furuta;
            let err = p.pend_energy(alpha, aldot) - params.energy_ref_mult * p.upright_energy();
            let s = sign(aldot * alpha.cos());
            if s == 0.0 {
                params.kick
            } else {
                params.energy_gain * err * s
            }
        }
        EnvKind::CartPole => 0.0,
    };
    u.clamp(-spec.action_bound, spec.action_bound)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn near_upright(spec: &EnvSpec, state: &EnvState, params: &ControllerParams) -> bool {
    let (angle, angvel) = match spec.kind {
        EnvKind::Pendulum => (state.q[0], state.qdot[0]),
        EnvKind::CartPole => return true,
        EnvKind::Furuta => (state.q[1], state.qdot[1]),
    };
    wrap_angle(angle).abs() < params.switch_threshold && angvel.abs() < params.vel_gate
}

/// Expert hybrid: energy pumping until the PD handover region, then PD.
pub fn expert_action(spec: &EnvSpec, state: &EnvState, params: &ControllerParams) -> f64 {
    if spec.variant == Variant::Stabilize || near_upright(spec, state, params) {
        pd_action(spec, state, &params.pd_gains)
    } else {
        energy_swingup_action(spec, state, params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl Quality {
    pub fn parse(s: &str) -> Option<Quality> {
        match s {
            "expert" => Some(Quality::Expert),
            "medium" => Some(Quality::Medium),
            "random" => Some(Quality::Random),
            _ => None,
        }
    }
}

/// A behavior policy bound to one environment. Medium policies carry
/// gains perturbed once at construction plus per-step Gaussian action
/// noise; random policies act uniformly within bounds.
pub struct BehaviorPolicy {
    quality: Quality,
    params: ControllerParams,
}

pub fn make_behavior_policy(
    quality: Quality,
    mut params: ControllerParams,
    rng: &mut StreamRng,
) -> BehaviorPolicy {
    if quality == Quality::Medium {
        for g in &mut params.pd_gains {
            *g *= 1.0 + rng.uniform(-0.3, 0.3);
        }
        params.energy_gain *= 1.0 + rng.uniform(-0.3, 0.3);
    }
    BehaviorPolicy { quality, params }
}

impl BehaviorPolicy {
    pub fn act(&self, spec: &EnvSpec, state: &EnvState, rng: &mut StreamRng) -> f64 {
        let u = match self.quality {
            Quality::Expert => expert_action(spec, state, &self.params),
            Quality::Medium => {
                let base = expert_action(spec, state, &self.params);
                base + rng.normal(0.0, self.params.noise_sigma)
            }
            Quality::Random => rng.uniform(-spec.action_bound, spec.action_bound),
        };
        u.clamp(-spec.action_bound, spec.action_bound)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetQuality {
    Expert,
    Medium,
    Random,
    /// 25% expert, 25% medium and 50% random episodes, approximating
    /// the early+late epoch mix of an online learner's replay buffer.
    Replay,
}

impl DatasetQuality {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetQuality::Expert => "expert",
            DatasetQuality::Medium => "medium",
            DatasetQuality::Random => "random",
            DatasetQuality::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "expert" => Some(Self::Expert),
            "medium" => Some(Self::Medium),
            "random" => Some(Self::Random),
            "replay" => Some(Self::Replay),
            _ => None,
        }
    }

    fn episode_quality(&self, episode: usize) -> Quality {
        match self {
            DatasetQuality::Expert => Quality::Expert,
            DatasetQuality::Medium => Quality::Medium,
            DatasetQuality::Random => Quality::Random,
            DatasetQuality::Replay => {
                if episode % 4 == 0 {
                    Quality::Expert
                } else if episode % 4 == 1 {
                    Quality::Medium
                } else {
                    Quality::Random
                }
            }
        }
    }
}

/// TQ = mean(returns) / max(returns); when max <= 0 the shifted formula
/// (mean - min)/(max - min) is used and flagged.
pub fn compute_tq(returns: &[f64]) -> Result<(f64, bool), DataError> {
    if returns.is_empty() {
        return Err(DataError::Empty);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        Ok((mean / max, false))
    } else if (max - min).abs() < 1e-15 {
        Ok((1.0, true))
    } else {
        Ok(((mean - min) / (max - min), true))
    }
}

/// Rolls out one complete episode under the policy; observations record
/// the pre-action state, actions are stored clipped.
pub fn rollout_episode(
    spec: &EnvSpec,
    policy: &BehaviorPolicy,
    reset_rng: &mut StreamRng,
    noise_rng: &mut StreamRng,
) -> Result<Trajectory, crate::envs::EnvError> {
    let mut state = spec.reset(reset_rng);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    loop {
        let obs = spec.observe(&state);
        let a = policy.act(spec, &state, noise_rng);
        let res = spec.step(&state, a)?;
        observations.push(obs);
        actions.push(vec![a]);
        rewards.push(res.reward);
        state = res.next_state;
        if res.done {
            break;
        }
    }
    Ok(Trajectory::new(observations, actions, rewards))
}

/// Rolls out `num_traj` complete episodes and assembles a dataset.
/// Episode generation uses per-episode RNG streams so the result is
/// bit-reproducible for a fixed seed; diverged episodes are logged and
/// skipped.
pub fn generate_dataset(
    name: &str,
    spec: &EnvSpec,
    quality: DatasetQuality,
    num_traj: usize,
    seed: u64,
) -> Result<TrajectoryDataset, DataError> {
    if num_traj == 0 {
        return Err(DataError::Empty);
    }
    let mut trajectories = Vec::with_capacity(num_traj);
    for ep in 0..num_traj {
        let mut policy_rng = StreamRng::new(seed, 3 * ep as u64);
        let mut reset_rng = StreamRng::new(seed, 3 * ep as u64 + 1);
        let mut noise_rng = StreamRng::new(seed, 3 * ep as u64 + 2);
        let policy = make_behavior_policy(
            quality.episode_quality(ep),
            ControllerParams::defaults(spec.kind),
            &mut policy_rng,
        );
        match rollout_episode(spec, &policy, &mut reset_rng, &mut noise_rng) {
            Ok(tr) => trajectories.push(tr),
            Err(e) => eprintln!("episode {ep} diverged and was skipped: {e}"),
        }
    }
    assemble_dataset(name, spec, quality.tag(), trajectories)
}

/// Computes metadata (TQ, return statistics) and the observation
/// normalizer for an already-collected trajectory set.
pub fn assemble_dataset(
    name: &str,
    spec: &EnvSpec,
    policy_tag: &str,
    trajectories: Vec<Trajectory>,
) -> Result<TrajectoryDataset, DataError> {
    if trajectories.is_empty() {
        return Err(DataError::Empty);
    }
    let returns: Vec<f64> = trajectories.iter().map(|t| t.episode_return()).collect();
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (tq, tq_shifted) = compute_tq(&returns)?;
    let (state_mean, state_std) = fit_normalizer(&trajectories);
    Ok(TrajectoryDataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            name: name.to_string(),
            env: spec.name.clone(),
            variant: match spec.variant {
                Variant::Stabilize => "stabilize".into(),
                Variant::SwingUp => "swing-up".into(),
            },
            num_traj: trajectories.len(),
            policy: policy_tag.to_string(),
            tq,
            tq_shifted,
            mean_return: mean,
            max_return: max,
            checksum: String::new(),
        },
        trajectories,
        state_mean,
        state_std,
    })
}
