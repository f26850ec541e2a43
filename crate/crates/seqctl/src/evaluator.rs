//! Online evaluation of policies: seeded rollouts with RTG-conditioned
//! contexts, 30-episode suites, RTG-conditioning sweeps, PD-takeover
//! hybrid rollouts, phase-portrait export and the single-threaded
//! inference-latency benchmark.

use crate::envs::{wrap_angle, wrap_angle_positive, EnvKind, EnvSpec, EnvState, Variant};
use crate::experts::{pd_action, BehaviorPolicy, ControllerParams};
use crate::kernel::StreamRng;
use crate::models::{ModelError, Policy, PolicyContext};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("RTG decrement identity violated at step {step}: context {context} vs expected {expected}")]
    RtgDrift {
        step: usize,
        context: f64,
        expected: f64,
    },
    #[error("report holds no trajectories; rerun with trajectory storage enabled")]
    NoTrajectories,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Either a learned policy or a scripted behavior controller behind the
/// same rollout plumbing.
pub enum Agent<'a> {
    Learned(&'a Policy),
    Scripted(&'a BehaviorPolicy),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Per-step generalized coordinates (q, qdot), pre-action.
    pub states: Vec<(Vec<f64>, Vec<f64>)>,
    pub episode_return: f64,
}

pub struct RolloutOutcome {
    pub episode_return: f64,
    pub steps: usize,
    pub latencies: Vec<f64>,
    pub trace: EpisodeTrace,
    /// True if the episode ended early because the simulation diverged.
    pub diverged: bool,
}

/// Rolls out one episode. Learned agents act through a rolling
/// K-window context whose target RTG starts at `target_rtg` and is
/// decremented by each observed reward; scripted agents ignore it.
/// Episode randomness is derived from (`seed`, `stream`) exactly as in
/// dataset generation, so a scripted rollout reproduces its
/// `generate_dataset` twin bit for bit.
pub fn rollout(
    agent: &Agent,
    spec: &EnvSpec,
    target_rtg: f64,
    seed: u64,
    stream: u64,
) -> Result<RolloutOutcome, EvalError> {
    rollout_delayed(agent, spec, target_rtg, seed, stream, 0)
}

/// Like [`rollout`] but applies each computed action `delay` control
/// steps late (zero action until the first one arrives), emulating an
/// inference overrun of `delay` control intervals. `delay = 0` is
/// bit-identical to the plain rollout.
pub fn rollout_delayed(
    agent: &Agent,
    spec: &EnvSpec,
    target_rtg: f64,
    seed: u64,
    stream: u64,
    delay: usize,
) -> Result<RolloutOutcome, EvalError> {
    let mut reset_rng = StreamRng::new(seed, 3 * stream + 1);
    let mut noise_rng = StreamRng::new(seed, 3 * stream + 2);
    let mut state = spec.reset(&mut reset_rng);
    let mut ctx = match agent {
        Agent::Learned(p) => PolicyContext::new(
            p.model.cfg.context_len,
            p.model.cfg.action_dim,
            target_rtg,
        ),
        Agent::Scripted(_) => PolicyContext::new(1, spec.action_dim(), target_rtg),
    };
    let mut ret = 0.0;
    let mut latencies = Vec::new();
    let mut states = Vec::new();
    let mut diverged = false;
    let mut pending: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut t = 0;
    loop {
        let obs = spec.observe(&state);
        states.push((state.q.clone(), state.qdot.clone()));
        let chosen = match agent {
            Agent::Learned(p) => {
                ctx.begin_step(obs, t);
                let start = Instant::now();
                let a = p.predict_next_action(&ctx)?;
                latencies.push(start.elapsed().as_secs_f64());
                ctx.commit_action(&a);
                a[0]
            }
            Agent::Scripted(b) => {
                let start = Instant::now();
                let a = b.act(spec, &state, &mut noise_rng);
                latencies.push(start.elapsed().as_secs_f64());
                a
            }
        };
        let action = if delay == 0 {
            chosen
        } else {
            pending.push_back(chosen);
            if pending.len() > delay {
                pending.pop_front().unwrap()
            } else {
                0.0
            }
        };
        match spec.step(&state, action) {
            Ok(res) => {
                ret += res.reward;
                ctx.observe_reward(res.reward);
                let expected = target_rtg - ret;
                if (ctx.current_rtg() - expected).abs() > 1e-12 {
                    return Err(EvalError::RtgDrift {
                        step: t,
                        context: ctx.current_rtg(),
                        expected,
                    });
                }
                state = res.next_state;
                t += 1;
                if res.done {
                    break;
                }
            }
            Err(_) => {
                diverged = true;
                break;
            }
        }
    }
    Ok(RolloutOutcome {
        episode_return: ret,
        steps: t,
        latencies,
        trace: EpisodeTrace {
            states,
            episode_return: ret,
        },
        diverged,
    })
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
    /// Budget of the 250 Hz control loop.
    pub budget_s: f64,
    /// Smallest non-zero interval the clock resolved during the run.
    pub resolution_s: f64,
}

pub const LATENCY_BUDGET_S: f64 = 0.004;

fn latency_stats(mut samples: Vec<f64>) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats {
            budget_s: LATENCY_BUDGET_S,
            ..Default::default()
        };
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let p95 = samples[((n as f64 * 0.95) as usize).min(n - 1)];
    let resolution = samples
        .iter()
        .cloned()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    LatencyStats {
        mean_s: mean,
        p95_s: p95,
        max_s: samples[n - 1],
        budget_s: LATENCY_BUDGET_S,
        resolution_s: if resolution.is_finite() { resolution } else { 0.0 },
    }
}

#[derive(Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub variant: Variant,
    pub model_tag: String,
    pub target_rtg: f64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub latency: LatencyStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<EpisodeTrace>>,
    /// Number of episodes that ended in simulator divergence.
    pub diverged_episodes: usize,
    /// PD-takeover bookkeeping: episodes where the handover never fired.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub handover_missed: Option<usize>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `n` seeded rollouts (streams 0..n) and aggregates statistics.
/// Episodes run in parallel; per-episode RNG streams keep the result
/// independent of scheduling.
pub fn eval_suite(
    agent: &Agent,
    spec: &EnvSpec,
    n: usize,
    target_rtg: f64,
    seed: u64,
    model_tag: &str,
    keep_traces: bool,
) -> Result<EvalReport, EvalError> {
    let outcomes: Result<Vec<RolloutOutcome>, EvalError> = match agent {
        Agent::Learned(p) => (0..n as u64)
            .into_par_iter()
            .map(|stream| rollout(&Agent::Learned(p), spec, target_rtg, seed, stream))
            .collect(),
        Agent::Scripted(b) => (0..n as u64)
            .map(|stream| rollout(&Agent::Scripted(b), spec, target_rtg, seed, stream))
            .collect(),
    };
    let outcomes = outcomes?;
    let returns: Vec<f64> = outcomes.iter().map(|o| o.episode_return).collect();
    let (mean, std) = mean_std(&returns);
    let latencies: Vec<f64> = outcomes.iter().flat_map(|o| o.latencies.clone()).collect();
    let diverged = outcomes.iter().filter(|o| o.diverged).count();
    Ok(EvalReport {
        env: spec.name.clone(),
        variant: spec.variant,
        model_tag: model_tag.to_string(),
        target_rtg,
        returns,
        mean,
        std,
        latency: latency_stats(latencies),
        traces: keep_traces.then(|| outcomes.into_iter().map(|o| o.trace).collect()),
        diverged_episodes: diverged,
        handover_missed: None,
    })
}

#[derive(Serialize, Deserialize)]
pub struct SweepRow {
    pub rtg: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Spearman rank correlation between query RTG and episode return,
    /// pooled over all (rtg, return) pairs. Reported, never asserted:
    /// a near-zero value replicates the published null finding.
    pub spearman_rho: f64,
}

/// Average-rank transform (ties share the mean rank).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = ranks(x);
    let ry = ranks(y);
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov = rx
        .iter()
        .zip(&ry)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / rx.len() as f64;
    cov / (sx * sy)
}

/// Evaluates the agent at each query RTG (ascending) with shared seeds
/// and reports the pooled rank correlation.
pub fn rtg_sweep(
    agent: &Agent,
    spec: &EnvSpec,
    rtg_list: &[f64],
    n: usize,
    seed: u64,
    model_tag: &str,
) -> Result<SweepTable, EvalError> {
    let mut values = rtg_list.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(values.len());
    let mut pooled_rtg = Vec::new();
    let mut pooled_ret = Vec::new();
    for &rtg in &values {
        let rep = eval_suite(agent, spec, n, rtg, seed, model_tag, false)?;
        for &r in &rep.returns {
            pooled_rtg.push(rtg);
            pooled_ret.push(r);
        }
        rows.push(SweepRow {
            rtg,
            mean: rep.mean,
            std: rep.std,
        });
    }
    Ok(SweepTable {
        rows,
        spearman_rho: spearman(&pooled_rtg, &pooled_ret),
    })
}

/// Hybrid rollout: the learned model swings up until the pendulum
/// enters (|angle| < threshold, |angvel| < vel_gate), then a PD
/// stabilizer controls to episode end. A zero threshold never fires
/// and reduces to the plain rollout.
pub fn pd_takeover_rollout(
    policy: &Policy,
    spec: &EnvSpec,
    pd: &ControllerParams,
    handover_threshold: f64,
    vel_gate: f64,
    target_rtg: f64,
    seed: u64,
    stream: u64,
) -> Result<(RolloutOutcome, bool), EvalError> {
    let mut reset_rng = StreamRng::new(seed, 3 * stream + 1);
    let mut state = spec.reset(&mut reset_rng);
    let mut ctx = PolicyContext::new(
        policy.model.cfg.context_len,
        policy.model.cfg.action_dim,
        target_rtg,
    );
    let mut ret = 0.0;
    let mut latencies = Vec::new();
    let mut states = Vec::new();
    let mut handed_over = false;
    let mut diverged = false;
    let mut t = 0;
    loop {
        let obs = spec.observe(&state);
        states.push((state.q.clone(), state.qdot.clone()));
        let pend = pendulum_coords(spec, &state);
        if !handed_over && handover_threshold > 0.0 {
            if let Some((ang, vel)) = pend {
                if wrap_angle(ang).abs() < handover_threshold && vel.abs() < vel_gate {
                    handed_over = true;
                }
            }
        }
        let action = if handed_over {
            let start = Instant::now();
            let a = pd_action(spec, &state, &pd.pd_gains);
            latencies.push(start.elapsed().as_secs_f64());
            a
        } else {
            ctx.begin_step(obs, t);
            let start = Instant::now();
            let a = policy.predict_next_action(&ctx)?;
            latencies.push(start.elapsed().as_secs_f64());
            ctx.commit_action(&a);
            a[0]
        };
        match spec.step(&state, action) {
            Ok(res) => {
                ret += res.reward;
                if !handed_over {
                    ctx.observe_reward(res.reward);
                }
                state = res.next_state;
                t += 1;
                if res.done {
                    break;
                }
            }
            Err(_) => {
                diverged = true;
                break;
            }
        }
    }
    Ok((
        RolloutOutcome {
            episode_return: ret,
            steps: t,
            latencies,
            trace: EpisodeTrace {
                states,
                episode_return: ret,
            },
            diverged,
        },
        handed_over,
    ))
}

/// The pendulum angle/velocity pair used for handover decisions and
/// phase portraits.
pub fn pendulum_coords(spec: &EnvSpec, state: &EnvState) -> Option<(f64, f64)> {
    match spec.kind {
        EnvKind::Pendulum => Some((state.q[0], state.qdot[0])),
        EnvKind::CartPole => Some((state.q[1], state.qdot[1])),
        EnvKind::Furuta => Some((state.q[1], state.qdot[1])),
    }
}

/// CSV of (episode, t, alpha, alpha_dot, episode_return) with angles
/// wrapped to [0, 2*pi); rows are ordered, so re-export is
/// byte-identical.
pub fn export_phase_portrait(
    report: &EvalReport,
    spec: &EnvSpec,
    path: &Path,
) -> Result<(), EvalError> {
    let traces = report.traces.as_ref().ok_or(EvalError::NoTrajectories)?;
    let mut out = String::from("episode,t,alpha,alpha_dot,episode_return\n");
    for (ep, trace) in traces.iter().enumerate() {
        for (t, (q, qdot)) in trace.states.iter().enumerate() {
            let state = EnvState {
                q: q.clone(),
                qdot: qdot.clone(),
                t,
            };
            let (ang, vel) = pendulum_coords(spec, &state).unwrap();
            out.push_str(&format!(
                "{ep},{t},{:.12},{:.12},{:.12}\n",
                wrap_angle_positive(ang),
                vel,
                trace.episode_return
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Times `predict_next_action` on a full K-length synthetic context,
/// single-threaded, excluding `warmup` iterations. `synthetic_delay`
/// injects a per-call sleep for testing measurement monotonicity.
pub fn bench_inference(
    policy: &Policy,
    spec: &EnvSpec,
    n: usize,
    warmup: usize,
    synthetic_delay: Option<Duration>,
) -> Result<LatencyStats, EvalError> {
    let cfg = &policy.model.cfg;
    let mut rng = StreamRng::new(2024, 0);
    let mut ctx = PolicyContext::new(cfg.context_len, cfg.action_dim, spec.max_return_bound());
    for t in 0..cfg.context_len {
        let obs: Vec<f64> = (0..cfg.state_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ctx.begin_step(obs, t);
        let a: Vec<f64> = (0..cfg.action_dim)
            .map(|_| rng.uniform(-cfg.action_bound, cfg.action_bound))
            .collect();
        ctx.commit_action(&a);
        ctx.observe_reward(rng.uniform(-1.0, 1.0));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..warmup + n {
        let start = Instant::now();
        let _ = policy.predict_next_action(&ctx)?;
        if let Some(d) = synthetic_delay {
            std::thread::sleep(d);
        }
        let elapsed = start.elapsed().as_secs_f64();
        if i >= warmup {
            samples.push(elapsed);
        }
    }
    Ok(latency_stats(samples))
}

/// Writes latency stats as a one-row CSV with header.
pub fn latency_csv_row(tag: &str, k: usize, stats: &LatencyStats) -> String {
    format!(
        "{tag},{k},{:.9},{:.9},{:.9},{:.9}\n",
        stats.mean_s, stats.p95_s, stats.max_s, stats.budget_s
    )
}
