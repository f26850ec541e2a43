//! Offline training loop: masked action regression with Adam, gradient
//! clipping, per-epoch online probes, best-probe checkpointing, early
//! stopping and NaN abort.

use crate::data::{sample_batch, TrainingBatch, TrajectoryDataset};
use crate::envs::EnvSpec;
use crate::evaluator::{eval_suite, Agent, EvalError};
use crate::kernel::{checkpoint, Array, Graph, KernelError, NodeId, StreamRng};
use crate::kernel::params::AdamState;
use crate::models::{forward_for_training, Manifest, Model, ModelError, ModelVariant, Policy};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("loss mask selects no entries")]
    AllMasked,
    #[error("prediction shape {pred:?} does not match target shape {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub probe_episodes: usize,
    /// Stop after this many epochs without probe improvement.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(variant: ModelVariant) -> Self {
        Self {
            steps_per_epoch: 3000,
            epochs: 10,
            batch_size: if variant == ModelVariant::Bc { 128 } else { 64 },
            lr: 3e-5,
            grad_clip: 0.25,
            probe_episodes: 5,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub probe_mean: f64,
    pub probe_std: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_probe_mean: f64,
    /// Set when training ended on a non-finite loss; the best
    /// checkpoint up to that point is retained.
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,probe_mean,probe_std,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.12},{:.3}\n",
                r.epoch, r.loss, r.probe_mean, r.probe_std, r.seconds
            ));
        }
        out
    }
}

/// Masked mean-squared action error:
/// sum(mask * (pred - target)^2) / sum(mask).
pub fn action_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &Array,
    mask: &Array,
) -> Result<NodeId, TrainError> {
    if g.value(pred).shape() != target.shape() {
        return Err(TrainError::ShapeMismatch {
            pred: g.value(pred).shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let denom = mask.sum();
    if denom <= 0.0 {
        return Err(TrainError::AllMasked);
    }
    let t = g.leaf(target.clone());
    let m = g.leaf(mask.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let masked = g.mul(sq, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / denom))
}

/// One optimization step: forward, masked loss, backward, clip, Adam.
/// Returns the scalar loss (possibly non-finite; the caller decides).
pub fn train_step(
    model: &mut Model,
    batch: &TrainingBatch,
    adam: &mut AdamState,
    grad_clip: f64,
    dropout_rng: &mut StreamRng,
) -> Result<f64, TrainError> {
    let mut g = Graph::new(true);
    let (pred, target, mask) = forward_for_training(&mut g, model, batch, dropout_rng)?;
    let loss = action_loss(&mut g, pred, &target, &mask)?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    model.store.zero_grads();
    g.backward(loss, &mut model.store)?;
    model.store.clip_grad_norm(grad_clip);
    adam.step(&mut model.store)?;
    Ok(loss_value)
}

fn probe_policy(model: &Model, dataset: &TrajectoryDataset) -> Policy {
    Policy {
        model: model.clone(),
        state_mean: dataset.state_mean.clone(),
        state_std: dataset.state_std.clone(),
    }
}

/// Trains `model` in place. Each epoch runs `steps_per_epoch` gradient
/// steps, then a `probe_episodes`-episode online probe conditioned on
/// the dataset's best return. The parameters of the best-probe epoch
/// are restored into `model` on return. When `run_dir` is given,
/// per-epoch and best checkpoints, the manifest and the CSV log are
/// written there.
pub fn train(
    model: &mut Model,
    dataset: &TrajectoryDataset,
    spec: &EnvSpec,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    let mut data_rng = StreamRng::new(cfg.seed, 0);
    let mut dropout_rng = StreamRng::new(cfg.seed, 1);
    let probe_seed = cfg.seed.wrapping_add(0x9e3779b9);
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let target_rtg = dataset.meta.max_return;

    let mut log = TrainLog {
        best_probe_mean: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best: Vec<(String, Array)> = model.store.snapshot();

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            config: model.cfg.clone(),
            env: spec.clone(),
            dataset: dataset.meta.name.clone(),
            dataset_mean_return: dataset.meta.mean_return,
            dataset_max_return: dataset.meta.max_return,
            state_mean: dataset.state_mean.clone(),
            state_std: dataset.state_std.clone(),
            seed: cfg.seed,
            param_count: model.param_count(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
    }

    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(
                dataset,
                model.cfg.context_len,
                cfg.batch_size,
                model.cfg.rtg_scale,
                &mut data_rng,
            );
            let loss = train_step(model, &batch, &mut adam, cfg.grad_clip, &mut dropout_rng)?;
            if !loss.is_finite() {
                model.store.load_values(&best)?;
                log.aborted = Some(format!(
                    "non-finite loss at epoch {epoch} step {step}; best checkpoint restored"
                ));
                break 'epochs;
            }
            loss_sum += loss;
        }

        let policy = probe_policy(model, dataset);
        let probe = eval_suite(
            &Agent::Learned(&policy),
            spec,
            cfg.probe_episodes,
            target_rtg,
            probe_seed,
            "probe",
            false,
        )?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / cfg.steps_per_epoch.max(1) as f64,
            probe_mean: probe.mean,
            probe_std: probe.std,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = run_dir {
            checkpoint::save(&model.store, &dir.join(format!("epoch{epoch}.ckpt")))?;
        }
        if probe.mean > log.best_probe_mean {
            log.best_probe_mean = probe.mean;
            log.best_epoch = epoch;
            best = model.store.snapshot();
            if let Some(dir) = run_dir {
                checkpoint::save(&model.store, &dir.join("best.ckpt"))?;
            }
        }
        log.records.push(record);
        if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }

    model.store.load_values(&best)?;
    if let Some(dir) = run_dir {
        std::fs::write(dir.join("log.csv"), log.to_csv())?;
    }
    Ok(log)
}

/// Diagnostic: overfit a small model on a single short trajectory.
/// Runs up to `max_steps` gradient steps at an aggressive learning
/// rate and returns the last loss (early-exits once below `target`).
pub fn overfit_sanity(
    variant: ModelVariant,
    dataset: &TrajectoryDataset,
    spec: &EnvSpec,
    max_steps: usize,
    target: f64,
) -> Result<f64, TrainError> {
    let mut mcfg = crate::models::ModelConfig::defaults(variant, spec);
    mcfg.hidden = if variant == ModelVariant::Bc { 64 } else { 32 };
    mcfg.n_layers = 2;
    mcfg.dropout = 0.0;
    let mut model = crate::models::init_parameters(&mcfg, 7)?;
    let mut adam = AdamState::new(&model.store, 1e-3);
    let mut data_rng = StreamRng::new(7, 0);
    let mut dropout_rng = StreamRng::new(7, 1);
    let mut loss = f64::INFINITY;
    for _ in 0..max_steps {
        let batch = sample_batch(dataset, mcfg.context_len, 16, mcfg.rtg_scale, &mut data_rng);
        loss = train_step(&mut model, &batch, &mut adam, 0.25, &mut dropout_rng)?;
        if loss < target {
            break;
        }
    }
    Ok(loss)
}
