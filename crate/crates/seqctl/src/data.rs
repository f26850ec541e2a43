//! Trajectory storage, return-to-go computation, normalization
//! statistics and context-window batch sampling.
//!
//! Dataset files are JSONL: line 1 is the [`DatasetMeta`] header
//! (format version + whole-file checksum), then one line per trajectory
//! with observation/action/reward arrays. RTGs are not stored; they are
//! recomputed and verified on load.

use crate::kernel::{Array, StreamRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const STD_FLOOR: f64 = 1e-6;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset is empty")]
    Empty,
    #[error("unsupported dataset format version {0}")]
    Version(u32),
    #[error("checksum mismatch: file is corrupt or was edited")]
    Checksum,
    #[error("dataset verification failed: {0}")]
    Verify(String),
}

/// One episode's aligned sequences. All four share length T.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    #[serde(skip)]
    pub rtgs: Vec<f64>,
}

impl Trajectory {
    pub fn new(observations: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Self {
        let rtgs = rtg_from_rewards(&rewards).expect("non-empty episode");
        Self {
            observations,
            actions,
            rewards,
            rtgs,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtgs[0]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub name: String,
    pub env: String,
    pub variant: String,
    pub num_traj: usize,
    pub policy: String,
    pub tq: f64,
    /// True when the shifted (mean-min)/(max-min) TQ formula was used
    /// because the dataset's max return is not positive.
    pub tq_shifted: bool,
    pub mean_return: f64,
    pub max_return: f64,
    pub checksum: String,
}

#[derive(Debug)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.episode_return()).collect()
    }

    pub fn obs_dim(&self) -> usize {
        self.trajectories[0].observations[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].actions[0].len()
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }
}

/// Suffix sums of the reward sequence; rtgs[0] is the episode return.
pub fn rtg_from_rewards(rewards: &[f64]) -> Result<Vec<f64>, DataError> {
    if rewards.is_empty() {
        return Err(DataError::Empty);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[i] = acc;
    }
    Ok(out)
}

/// Per-dimension mean and population std over all observations, std
/// floored at [`STD_FLOOR`].
pub fn fit_normalizer(trajectories: &[Trajectory]) -> (Vec<f64>, Vec<f64>) {
    let dim = trajectories[0].observations[0].len();
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for tr in trajectories {
        for obs in &tr.observations {
            for (m, &x) in mean.iter_mut().zip(obs) {
                *m += x;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for tr in trajectories {
        for obs in &tr.observations {
            for (v, (&x, &m)) in var.iter_mut().zip(obs.iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// A batch of K-step context windows, left-padded, with normalized
/// observations and the RTG channel divided by the env's rtg scale.
#[derive(Clone)]
pub struct TrainingBatch {
    pub rtg: Array,
    pub obs: Array,
    pub act: Array,
    pub timesteps: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub k: usize,
}

impl TrainingBatch {
    /// [B,K,A] mask array, 1.0 at real positions.
    pub fn loss_mask(&self, action_dim: usize) -> Array {
        let mut data = Vec::with_capacity(self.pad_mask.len() * action_dim);
        for &pad in &self.pad_mask {
            let v = if pad { 0.0 } else { 1.0 };
            data.extend(std::iter::repeat(v).take(action_dim));
        }
        Array::new(vec![self.batch, self.k, action_dim], data)
    }
}

/// Samples trajectories with probability proportional to length, then a
/// uniform window end-index; windows shorter than K are left-padded.
pub fn sample_batch(
    dataset: &TrajectoryDataset,
    k: usize,
    batch_size: usize,
    rtg_scale: f64,
    rng: &mut StreamRng,
) -> TrainingBatch {
    let s = dataset.obs_dim();
    let a = dataset.action_dim();
    let lengths: Vec<usize> = dataset.trajectories.iter().map(|t| t.len()).collect();
    let total: usize = lengths.iter().sum();

    let mut rtg = vec![0.0; batch_size * k];
    let mut obs = vec![0.0; batch_size * k * s];
    let mut act = vec![0.0; batch_size * k * a];
    let mut timesteps = vec![0usize; batch_size * k];
    let mut pad_mask = vec![true; batch_size * k];

    for b in 0..batch_size {
        let mut pick = rng.gen_index(total);
        let mut ti = 0;
        while pick >= lengths[ti] {
            pick -= lengths[ti];
            ti += 1;
        }
        let tr = &dataset.trajectories[ti];
        let end = rng.gen_index(tr.len());
        let start = (end + 1).saturating_sub(k);
        let window = end + 1 - start;
        let pad = k - window;
        for (w, t) in (start..=end).enumerate() {
            let slot = b * k + pad + w;
            pad_mask[slot] = false;
            timesteps[slot] = t;
            rtg[slot] = tr.rtgs[t] / rtg_scale;
            let norm = dataset.normalize_obs(&tr.observations[t]);
            obs[slot * s..(slot + 1) * s].copy_from_slice(&norm);
            act[slot * a..(slot + 1) * a].copy_from_slice(&tr.actions[t]);
        }
    }

    TrainingBatch {
        rtg: Array::new(vec![batch_size, k, 1], rtg),
        obs: Array::new(vec![batch_size, k, s], obs),
        act: Array::new(vec![batch_size, k, a], act),
        timesteps,
        pad_mask,
        batch: batch_size,
        k,
    }
}

fn trajectory_lines(trajectories: &[Trajectory]) -> Result<Vec<String>, DataError> {
    trajectories
        .iter()
        .map(|t| serde_json::to_string(t).map_err(DataError::from))
        .collect()
}

fn lines_checksum(lines: &[String]) -> String {
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

pub fn save_dataset(dataset: &TrajectoryDataset, path: &Path) -> Result<(), DataError> {
    let lines = trajectory_lines(&dataset.trajectories)?;
    let mut meta = dataset.meta.clone();
    meta.checksum = lines_checksum(&lines);
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &meta)?;
    w.write_all(b"\n")?;
    for line in &lines {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, DataError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    if header.trim().is_empty() {
        return Err(DataError::Empty);
    }
    let meta: DatasetMeta = serde_json::from_str(header.trim_end())?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DataError::Version(meta.format_version));
    }
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.is_empty() {
            lines.push(line);
        }
    }
    if lines_checksum(&lines) != meta.checksum {
        return Err(DataError::Checksum);
    }
    let mut trajectories = Vec::with_capacity(lines.len());
    for line in &lines {
        let mut tr: Trajectory = serde_json::from_str(line)?;
        if tr.is_empty()
            || tr.observations.len() != tr.len()
            || tr.actions.len() != tr.len()
        {
            return Err(DataError::Verify("misaligned trajectory arrays".into()));
        }
        tr.rtgs = rtg_from_rewards(&tr.rewards)?;
        // Telescoping invariant of the recomputed RTGs.
        for t in 0..tr.len() - 1 {
            if (tr.rtgs[t] - (tr.rewards[t] + tr.rtgs[t + 1])).abs() > 1e-9 {
                return Err(DataError::Verify("rtg telescoping violated".into()));
            }
        }
        trajectories.push(tr);
    }
    if trajectories.len() != meta.num_traj {
        return Err(DataError::Verify(format!(
            "trajectory count {} does not match header {}",
            trajectories.len(),
            meta.num_traj
        )));
    }
    let returns: Vec<f64> = trajectories.iter().map(|t| t.episode_return()).collect();
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (mean - meta.mean_return).abs() > 1e-9 || (max - meta.max_return).abs() > 1e-9 {
        return Err(DataError::Verify(
            "stored return statistics do not match rewards".into(),
        ));
    }
    let (state_mean, state_std) = fit_normalizer(&trajectories);
    Ok(TrajectoryDataset {
        meta,
        trajectories,
        state_mean,
        state_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_traj(rewards: Vec<f64>, obs0: f64) -> Trajectory {
        let t = rewards.len();
        Trajectory::new(
            (0..t).map(|i| vec![obs0 + i as f64, 1.0]).collect(),
            (0..t).map(|i| vec![i as f64 * 0.1]).collect(),
            rewards,
        )
    }

    fn toy_dataset(trajs: Vec<Trajectory>) -> TrajectoryDataset {
        let (state_mean, state_std) = fit_normalizer(&trajs);
        let returns: Vec<f64> = trajs.iter().map(|t| t.episode_return()).collect();
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        TrajectoryDataset {
            meta: DatasetMeta {
                format_version: FORMAT_VERSION,
                name: "toy".into(),
                env: "pendulum".into(),
                variant: "swing-up".into(),
                num_traj: trajs.len(),
                policy: "test".into(),
                tq: 0.0,
                tq_shifted: false,
                mean_return: mean,
                max_return: max,
                checksum: String::new(),
            },
            trajectories: trajs,
            state_mean,
            state_std,
        }
    }

    #[test]
    fn rtg_hand_sums() {
        assert_eq!(rtg_from_rewards(&[1.0, 1.0, 1.0]).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(rtg_from_rewards(&[4.5]).unwrap(), vec![4.5]);
        assert!(rtg_from_rewards(&[]).is_err());
    }

    #[test]
    fn rtg_matches_naive_oracle() {
        let mut rng = StreamRng::new(42, 0);
        let rewards: Vec<f64> = (0..1000).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let fast = rtg_from_rewards(&rewards).unwrap();
        // Naive O(T^2) suffix-sum oracle.
        for t in 0..rewards.len() {
            let naive: f64 = rewards[t..].iter().sum();
            assert!((fast[t] - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn normalizer_definition_and_floor() {
        // Constant dim 1 hits the floor; dim 0 has mean 1, population std 1.
        let trajs = vec![toy_traj(vec![1.0], 0.0), toy_traj(vec![1.0], 2.0)];
        let (mean, std) = fit_normalizer(&trajs);
        assert!((mean[0] - 1.0).abs() < 1e-12);
        assert!((std[0] - 1.0).abs() < 1e-12);
        assert!((mean[1] - 1.0).abs() < 1e-12);
        assert_eq!(std[1], STD_FLOOR);
    }

    #[test]
    fn normalized_pool_is_standardized() {
        let mut rng = StreamRng::new(9, 0);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|_| {
                let t = 30;
                Trajectory::new(
                    (0..t).map(|_| vec![rng.normal(3.0, 2.0), rng.uniform(-1.0, 4.0)]).collect(),
                    (0..t).map(|_| vec![0.0]).collect(),
                    vec![1.0; t],
                )
            })
            .collect();
        let ds = toy_dataset(trajs);
        let mut sum = vec![0.0; 2];
        let mut sumsq = vec![0.0; 2];
        let mut n = 0;
        for tr in &ds.trajectories {
            for obs in &tr.observations {
                let z = ds.normalize_obs(obs);
                for d in 0..2 {
                    sum[d] += z[d];
                    sumsq[d] += z[d] * z[d];
                }
                n += 1;
            }
        }
        for d in 0..2 {
            let m = sum[d] / n as f64;
            let v = sumsq[d] / n as f64 - m * m;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn short_window_left_padded() {
        let ds = toy_dataset(vec![toy_traj(vec![1.0; 5], 0.0)]);
        let mut rng = StreamRng::new(1, 0);
        let batch = sample_batch(&ds, 20, 4, 1.0, &mut rng);
        for b in 0..4 {
            let pads = batch.pad_mask[b * 20..(b + 1) * 20]
                .iter()
                .filter(|&&p| p)
                .count();
            assert!(pads >= 15, "at most 5 real steps per window");
            // Padding is a prefix.
            let first_real = batch.pad_mask[b * 20..(b + 1) * 20]
                .iter()
                .position(|&p| !p)
                .unwrap();
            assert!(batch.pad_mask[b * 20..b * 20 + first_real].iter().all(|&p| p));
            // Padded positions are zeros.
            for slot in 0..first_real {
                assert_eq!(batch.rtg.data()[b * 20 + slot], 0.0);
            }
        }
    }

    #[test]
    fn k1_degenerates_to_single_step_pairs() {
        let ds = toy_dataset(vec![toy_traj(vec![1.0; 7], 0.0)]);
        let mut rng = StreamRng::new(2, 0);
        let batch = sample_batch(&ds, 1, 8, 1.0, &mut rng);
        assert!(batch.pad_mask.iter().all(|&p| !p));
        assert_eq!(batch.obs.shape(), &[8, 1, 2]);
    }

    #[test]
    fn length_proportional_sampling_frequencies() {
        let ds = toy_dataset(vec![toy_traj(vec![1.0; 100], 0.0), toy_traj(vec![1.0; 300], 1000.0)]);
        let mut rng = StreamRng::new(3, 0);
        let n = 100_000;
        let mut long_hits = 0usize;
        for _ in 0..n / 16 {
            let batch = sample_batch(&ds, 4, 16, 1.0, &mut rng);
            // Trajectory 2's dim-0 observations live in [1000, 1300); the
            // short trajectory's in [0, 100). Denormalize to tell them apart.
            for b in 0..16 {
                let slot = b * 4 + 3; // last position is always real
                let z = batch.obs.data()[slot * 2];
                let x = z * ds.state_std[0] + ds.state_mean[0];
                if x >= 500.0 {
                    long_hits += 1;
                }
            }
        }
        let p = long_hits as f64 / n as f64;
        // 3 sigma binomial bound around 0.75.
        let sigma = (0.75 * 0.25 / n as f64).sqrt();
        assert!(
            (p - 0.75).abs() < 3.0 * sigma + 0.005,
            "long-trajectory frequency {p}"
        );
    }

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        let ds = toy_dataset(vec![toy_traj(vec![1.0, 2.0, 3.0], 0.0), toy_traj(vec![0.5], 9.0)]);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.trajectories.len(), 2);
        assert_eq!(loaded.trajectories[0].rtgs, vec![6.0, 5.0, 3.0]);
        assert_eq!(loaded.state_mean, ds.state_mean);

        // Tamper with a reward entry.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("2.0,3.0]", "2.5,3.0]");
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
