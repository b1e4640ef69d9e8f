//! Synthetic task-stream generators.
//!
//! Class `c` is an isotropic Gaussian with standard deviation
//! `cluster_std` around a mean drawn uniformly on the sphere of radius
//! `class_sep`. Each task is split 80/20 into train and test after a
//! seeded shuffle.

use hybridfit_core::compound::{Dataset, StreamKind, Task, TaskStream};
use hybridfit_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, InModule, Result};

/// Parameters the generators read, split out of the full config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamParams {
    pub kind: StreamKind,
    pub d_in: usize,
    pub k: usize,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub class_sep: f64,
    pub cluster_std: f64,
    pub drift: f64,
    pub seed: u64,
}

impl StreamParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            kind: cfg.stream_kind,
            d_in: cfg.d_in,
            k: cfg.k,
            tasks: cfg.tasks,
            samples_per_task: cfg.samples_per_task,
            class_sep: cfg.class_sep,
            cluster_std: cfg.cluster_std,
            drift: cfg.drift,
            seed: cfg.stream_seed(),
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, n);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Contiguous class blocks: task `t` gets classes `t·k/T .. (t+1)·k/T`.
pub fn split_class_sets(k: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks > k {
        return Err(HarnessError::config(
            "tasks",
            format!("split_classes needs tasks <= k, got {tasks} > {k}"),
        ));
    }
    Ok((0..tasks).map(|t| (t * k / tasks..(t + 1) * k / tasks).collect()).collect())
}

/// Column `j` of the result is column `perm[j]` of `x`.
pub fn permute_columns(x: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        out.extend(perm.iter().map(|&p| row[p]));
    }
    Matrix::from_vec(x.rows(), x.cols(), out).expect("same shape")
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

fn shift_rows(x: &Matrix, shift: &[f64]) -> Matrix {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        out.extend(x.row(i).iter().zip(shift).map(|(a, b)| a + b));
    }
    Matrix::from_vec(x.rows(), x.cols(), out).expect("same shape")
}

fn split_80_20(data: &Dataset, rng: &mut ChaCha8Rng) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let n_test = n / 5;
    if n_test == 0 || n_test == n {
        return Err(HarnessError::config(
            "samples_per_task",
            format!("{n} rows cannot be split 80/20 into non-empty parts"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (test, train) = idx.split_at(n_test);
    Ok((data.select(train), data.select(test)))
}

struct Blobs {
    means: Vec<Vec<f64>>,
    std: f64,
}

impl Blobs {
    fn new(rng: &mut ChaCha8Rng, k: usize, d_in: usize, sep: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|_| unit_vec(rng, d_in).into_iter().map(|v| v * sep).collect())
            .collect();
        Self { means, std }
    }

    /// `n` rows cycling through `classes`, every mean moved by `offset`.
    fn sample(&self, rng: &mut ChaCha8Rng, classes: &[usize], n: usize, offset: &[f64]) -> Dataset {
        let d = offset.len();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = classes[i % classes.len()];
            let noise = gaussian_vec(rng, d);
            x.extend((0..d).map(|j| self.means[c][j] + offset[j] + self.std * noise[j]));
            y.push(c);
        }
        Dataset::new(Matrix::from_vec(n, d, x).expect("finite samples"), y).expect("matching rows")
    }
}

/// Builds a stream of Gaussian-cluster tasks.
pub fn gen_task_stream(params: &StreamParams) -> Result<TaskStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let blobs = Blobs::new(&mut rng, params.k, params.d_in, params.class_sep, params.cluster_std);
    let zero = vec![0.0; params.d_in];
    let all: Vec<usize> = (0..params.k).collect();
    let tasks = match params.kind {
        StreamKind::SplitClasses => {
            let sets = split_class_sets(params.k, params.tasks)?;
            sets.iter()
                .map(|set| {
                    let data = blobs.sample(&mut rng, set, params.samples_per_task, &zero);
                    plain_task(&data, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
        StreamKind::PermutedFeatures => {
            let base = blobs.sample(&mut rng, &all, params.samples_per_task, &zero);
            permuted_tasks(&base, params.tasks, &mut rng)?
        }
        StreamKind::DriftingBlobs => {
            let dir = unit_vec(&mut rng, params.d_in);
            (0..params.tasks)
                .map(|t| {
                    let offset: Vec<f64> = dir.iter().map(|v| v * params.drift * t as f64).collect();
                    let data = blobs.sample(&mut rng, &all, params.samples_per_task, &offset);
                    plain_task(&data, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    TaskStream::new(tasks, params.kind, params.seed, params.k).in_module("compound")
}

/// Builds a stream from a fixed dataset with `k` classes. Every task uses
/// all rows (`split_classes` uses the rows of its class block), so
/// `samples_per_task`, `class_sep` and `cluster_std` are ignored.
pub fn stream_from_dataset(base: &Dataset, k: usize, params: &StreamParams) -> Result<TaskStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tasks = match params.kind {
        StreamKind::SplitClasses => split_class_sets(k, params.tasks)?
            .iter()
            .map(|set| {
                let idx: Vec<usize> = (0..base.len()).filter(|&i| set.contains(&base.y[i])).collect();
                plain_task(&base.select(&idx), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?,
        StreamKind::PermutedFeatures => permuted_tasks(base, params.tasks, &mut rng)?,
        StreamKind::DriftingBlobs => {
            let dir = unit_vec(&mut rng, base.d_in());
            (0..params.tasks)
                .map(|t| {
                    let offset: Vec<f64> = dir.iter().map(|v| v * params.drift * t as f64).collect();
                    let shifted = Dataset::new(shift_rows(&base.x, &offset), base.y.clone()).in_module("compound")?;
                    plain_task(&shifted, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    TaskStream::new(tasks, params.kind, params.seed, k).in_module("compound")
}

fn plain_task(data: &Dataset, rng: &mut ChaCha8Rng) -> Result<Task> {
    let (train, test) = split_80_20(data, rng)?;
    Ok(Task {
        train,
        test,
        permutation: None,
    })
}

fn permuted_tasks(base: &Dataset, tasks: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Task>> {
    (0..tasks)
        .map(|_| {
            let mut perm: Vec<usize> = (0..base.d_in()).collect();
            perm.shuffle(rng);
            let data = Dataset::new(permute_columns(&base.x, &perm), base.y.clone()).in_module("compound")?;
            let (train, test) = split_80_20(&data, rng)?;
            Ok(Task {
                train,
                test,
                permutation: Some(perm),
            })
        })
        .collect()
}
