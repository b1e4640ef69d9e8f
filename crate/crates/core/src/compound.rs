//! Two-tier composition and the continual-learning protocol.
//!
//! The lower tier (feature map plus optional closed-form ridge readout) is fit
//! once on a pretraining split and then frozen. Only the head and its EWC
//! state change afterwards. Features are handed upward as they are, with no
//! distillation step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::lower_tier::{
    accumulate_streaming, one_hot, solve_ridge, FeatureMap, Nonlinearity, RidgeSolution, DEFAULT_LAMBDA_RIDGE,
};
use crate::upper_tier::{estimate_fisher, train_head, EwcState, Head, HeadShape, SgdConfig, TaskBatch};

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape("Dataset", x.dim_str(), format!("{} labels", y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    SplitClasses,
    PermutedFeatures,
    #[default]
    DriftingBlobs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Feature permutation applied to this task, for permuted streams.
    pub permutation: Option<Vec<usize>>,
}

/// Ordered tasks sharing `d_in` and a global class count.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    kind: StreamKind,
    seed: u64,
    num_classes: usize,
}

impl TaskStream {
    /// Validates the stream invariants: shared `d_in`, labels below
    /// `num_classes`, disjoint class sets for split streams, bijective
    /// permutations for permuted streams.
    pub fn new(tasks: Vec<Task>, kind: StreamKind, seed: u64, num_classes: usize) -> Result<Self> {
        let d_in = tasks.first().map(|t| t.train.d_in());
        let mut seen: Vec<Option<usize>> = vec![None; num_classes];
        for (t, task) in tasks.iter().enumerate() {
            for ds in [&task.train, &task.test] {
                if Some(ds.d_in()) != d_in {
                    return Err(Error::shape(
                        "TaskStream",
                        format!("task 0 with d_in={}", d_in.unwrap_or(0)),
                        format!("task {t} with d_in={}", ds.d_in()),
                    ));
                }
                for &l in &ds.y {
                    if l >= num_classes {
                        return Err(Error::param("labels", format!("task {t} has label {l} >= k={num_classes}")));
                    }
                    if kind == StreamKind::SplitClasses {
                        match seen[l] {
                            Some(owner) if owner != t => {
                                return Err(Error::param(
                                    "labels",
                                    format!("class {l} appears in tasks {owner} and {t}"),
                                ))
                            }
                            _ => seen[l] = Some(t),
                        }
                    }
                }
            }
            if let Some(p) = &task.permutation {
                if !is_permutation(p, d_in.unwrap_or(0)) {
                    return Err(Error::param("permutation", format!("task {t} permutation is not a bijection")));
                }
            }
        }
        Ok(Self {
            tasks,
            kind,
            seed,
            num_classes,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn d_in(&self) -> Option<usize> {
        self.tasks.first().map(|t| t.train.d_in())
    }

    /// Sorted distinct labels present in task `t`.
    pub fn classes_of(&self, t: usize) -> Vec<usize> {
        let task = &self.tasks[t];
        let mut c: Vec<usize> = task.train.y.iter().chain(&task.test.y).copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut hit = vec![false; n];
    for &i in p {
        if i >= n || hit[i] {
            return false;
        }
        hit[i] = true;
    }
    true
}

/// What the lower tier hands to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMode {
    /// Head sees the ridge readout `Φ·W` (k columns).
    #[default]
    Ridge,
    /// Head sees the features `Φ` (h columns); the ridge solve is skipped.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LowerTier {
    Ridge(RidgeSolution),
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerConfig {
    pub h: usize,
    pub nonlinearity: Nonlinearity,
    pub lambda_ridge: f64,
    pub chunk_rows: usize,
    pub mode: LowerMode,
    pub head_shape: HeadShape,
    pub feature_seed: u64,
    /// Only used for hidden-layer heads; linear heads start at zero.
    pub head_seed: u64,
}

impl Default for LowerConfig {
    fn default() -> Self {
        Self {
            h: 64,
            nonlinearity: Nonlinearity::Tanh,
            lambda_ridge: DEFAULT_LAMBDA_RIDGE,
            chunk_rows: 256,
            mode: LowerMode::Ridge,
            head_shape: HeadShape::Linear,
            feature_seed: 0,
            head_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompoundModel {
    feature_map: FeatureMap,
    lower: LowerTier,
    head: Head,
    ewc: EwcState,
}

impl CompoundModel {
    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn lower(&self) -> &LowerTier {
        &self.lower
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn ewc(&self) -> &EwcState {
        &self.ewc
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Lower-tier output for raw inputs; this is the head's input.
    pub fn represent(&self, x: &Matrix) -> Result<Matrix> {
        let phi = self.feature_map.apply(x)?;
        match &self.lower {
            LowerTier::Ridge(sol) => matmul(&phi, sol.weights()),
            LowerTier::PassThrough => Ok(phi),
        }
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.head.accuracy(&self.represent(&data.x)?, &data.y)
    }

    /// Byte image of everything frozen after the fit phase.
    pub fn lower_tier_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.feature_map.write_bytes(&mut out);
        match &self.lower {
            LowerTier::Ridge(sol) => {
                out.push(1);
                sol.write_bytes(&mut out);
            }
            LowerTier::PassThrough => out.push(0),
        }
        out
    }
}

/// Fits the lower tier on task 0's training split.
pub fn build_and_fit_lower(stream: &TaskStream, cfg: &LowerConfig) -> Result<CompoundModel> {
    let first = stream
        .tasks()
        .first()
        .ok_or_else(|| Error::param("stream", "needs at least one task"))?;
    let targets = one_hot(&first.train.y, stream.num_classes())?;
    build_and_fit_lower_on(stream, cfg, &first.train.x, &targets)
}

/// Fits the lower tier on an explicit pretraining split with arbitrary
/// `N×k` targets.
pub fn build_and_fit_lower_on(
    stream: &TaskStream,
    cfg: &LowerConfig,
    pretrain_x: &Matrix,
    pretrain_targets: &Matrix,
) -> Result<CompoundModel> {
    let d_in = stream.d_in().ok_or_else(|| Error::param("stream", "needs at least one task"))?;
    let k = stream.num_classes();
    if pretrain_targets.cols() != k {
        return Err(Error::shape("build_and_fit_lower", pretrain_targets.dim_str(), format!("k={k}")));
    }
    let feature_map = FeatureMap::init(d_in, cfg.h, cfg.nonlinearity, cfg.feature_seed)?;
    let (lower, head_input) = match cfg.mode {
        LowerMode::Ridge => {
            let acc = accumulate_streaming(&feature_map, pretrain_x, pretrain_targets, cfg.chunk_rows)?;
            (LowerTier::Ridge(solve_ridge(&acc, cfg.lambda_ridge)?), k)
        }
        LowerMode::PassThrough => (LowerTier::PassThrough, cfg.h),
    };
    let head = match cfg.head_shape {
        HeadShape::Linear => Head::zeros(cfg.head_shape, head_input, k)?,
        HeadShape::Hidden { .. } => Head::random(cfg.head_shape, head_input, k, cfg.head_seed)?,
    };
    let ewc = EwcState::new(head.num_params(), 0.0)?;
    Ok(CompoundModel {
        feature_map,
        lower,
        head,
        ewc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lambda_ewc: f64,
    pub seed: u64,
    /// Fisher uses at most this many leading training rows per task.
    pub fisher_sample_cap: Option<usize>,
}

/// Minibatch-shuffle seed for task `t`.
pub fn task_sgd_seed(seed: u64, t: usize) -> u64 {
    splitmix64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `a[t][τ]`: accuracy on task τ's test set after finishing task t. Cells
/// with τ > t stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    size: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            cells: vec![None; size * size],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let size = rows.len();
        let mut m = Self::new(size);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != size {
                return Err(Error::shape("AccuracyMatrix", format!("{size}x{size}"), format!("row {t} of length {}", row.len())));
            }
            for (tau, v) in row.into_iter().enumerate() {
                if let Some(v) = v {
                    m.set(t, tau, v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, t: usize, tau: usize) -> Option<f64> {
        self.cells[t * self.size + tau]
    }

    pub fn set(&mut self, t: usize, tau: usize, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::param("accuracy", format!("{v} outside [0, 1]")));
        }
        if t >= self.size || tau >= self.size {
            return Err(Error::shape("AccuracyMatrix::set", format!("{0}x{0}", self.size), format!("({t}, {tau})")));
        }
        self.cells[t * self.size + tau] = Some(v);
        Ok(())
    }

    pub fn lower_triangle_complete(&self) -> bool {
        (0..self.size).all(|t| (0..=t).all(|tau| self.get(t, tau).is_some()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub ewc_penalty: f64,
    /// Accuracy on the current task's test set.
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutcome {
    pub accuracy: AccuracyMatrix,
    pub epochs: Vec<EpochRecord>,
}

/// Trains the head through every task in order.
///
/// Per task: `epochs_per_task` epochs of SGD on `L_EWC`, then Fisher
/// estimation and consolidation, then test evaluation on tasks `0..=t`.
pub fn train_sequence(model: &mut CompoundModel, stream: &TaskStream, cfg: &TrainConfig) -> Result<SequenceOutcome> {
    if stream.is_empty() {
        return Err(Error::param("stream", "needs at least one task"));
    }
    if stream.d_in() != Some(model.feature_map.d_in()) {
        return Err(Error::shape(
            "train_sequence",
            format!("model d_in={}", model.feature_map.d_in()),
            format!("stream d_in={}", stream.d_in().unwrap_or(0)),
        ));
    }
    if stream.num_classes() != model.num_classes() {
        return Err(Error::shape(
            "train_sequence",
            format!("model k={}", model.num_classes()),
            format!("stream k={}", stream.num_classes()),
        ));
    }
    model.ewc.set_lambda_ewc(cfg.lambda_ewc)?;
    let k = stream.num_classes();

    let mut tests = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        tests.push(TaskBatch::new(model.represent(&task.test.x)?, task.test.y.clone(), k)?);
    }

    let mut accuracy = AccuracyMatrix::new(stream.len());
    let mut epochs = Vec::new();
    for (t, task) in stream.tasks().iter().enumerate() {
        let train = TaskBatch::new(model.represent(&task.train.x)?, task.train.y.clone(), k)?;
        let sgd = SgdConfig {
            eta: cfg.eta,
            epochs: cfg.epochs_per_task,
            batch_size: cfg.batch_size,
            seed: task_sgd_seed(cfg.seed, t),
        };
        let test = &tests[t];
        train_head(&mut model.head, &train, &model.ewc, &sgd, |s, head| {
            epochs.push(EpochRecord {
                task: t,
                epoch: s.epoch,
                train_loss: s.train_loss,
                ewc_penalty: s.ewc_penalty,
                test_acc: head.accuracy(test.features(), test.labels())?,
            });
            Ok(())
        })?;

        let fisher_data = match cfg.fisher_sample_cap {
            Some(cap) if cap < train.len() => train.select(&(0..cap).collect::<Vec<_>>()),
            _ => train,
        };
        let f_task = estimate_fisher(&model.head, &fisher_data)?;
        model.ewc.consolidate(&model.head, &f_task)?;

        for (tau, test) in tests.iter().enumerate().take(t + 1) {
            accuracy.set(t, tau, model.head.accuracy(test.features(), test.labels())?)?;
        }
    }
    Ok(SequenceOutcome { accuracy, epochs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingMetrics {
    pub avg_final_accuracy: f64,
    pub forgetting: Vec<f64>,
    pub backward_transfer: f64,
}

/// Average final accuracy, per-task forgetting, and backward transfer.
pub fn forgetting_metrics(a: &AccuracyMatrix) -> Result<ForgettingMetrics> {
    let n = a.size();
    if n == 0 || !a.lower_triangle_complete() {
        return Err(Error::State("accuracy matrix lower triangle is incomplete".into()));
    }
    let last = n - 1;
    let cell = |t, tau| a.get(t, tau).expect("checked complete");
    let avg_final_accuracy = (0..n).map(|tau| cell(last, tau)).sum::<f64>() / n as f64;
    let forgetting = (0..n)
        .map(|tau| {
            if tau == last {
                return 0.0;
            }
            let best = (tau..n).map(|t| cell(t, tau)).fold(f64::NEG_INFINITY, f64::max);
            best - cell(last, tau)
        })
        .collect();
    let backward_transfer = if n == 1 {
        0.0
    } else {
        (0..last).map(|tau| cell(last, tau) - cell(tau, tau)).sum::<f64>() / last as f64
    };
    Ok(ForgettingMetrics {
        avg_final_accuracy,
        forgetting,
        backward_transfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_stream(kind: StreamKind) -> TaskStream {
        let x0 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]]).unwrap();
        let t0 = Task {
            train: Dataset::new(x0.clone(), vec![0, 1, 1, 0]).unwrap(),
            test: Dataset::new(x0, vec![0, 1, 1, 0]).unwrap(),
            permutation: None,
        };
        TaskStream::new(vec![t0], kind, 1, 2).unwrap()
    }

    #[test]
    fn forgetting_examples() {
        let perfect = AccuracyMatrix::from_rows(vec![vec![Some(1.0), None], vec![Some(1.0), Some(1.0)]]).unwrap();
        let m = forgetting_metrics(&perfect).unwrap();
        assert_eq!(m.forgetting, vec![0.0, 0.0]);
        assert_eq!(m.avg_final_accuracy, 1.0);

        let a = AccuracyMatrix::from_rows(vec![vec![Some(0.9), None], vec![Some(0.6), Some(0.8)]]).unwrap();
        let m = forgetting_metrics(&a).unwrap();
        assert!((m.forgetting[0] - 0.3).abs() < 1e-12);
        assert_eq!(m.forgetting[1], 0.0);
        assert!((m.backward_transfer + 0.3).abs() < 1e-12);
        assert!((m.avg_final_accuracy - 0.7).abs() < 1e-12);

        let one = AccuracyMatrix::from_rows(vec![vec![Some(0.4)]]).unwrap();
        let m = forgetting_metrics(&one).unwrap();
        assert_eq!(m.forgetting, vec![0.0]);
        assert_eq!(m.backward_transfer, 0.0);
    }

    #[test]
    fn forgetting_takes_max_over_later_rows() {
        let a = AccuracyMatrix::from_rows(vec![
            vec![Some(0.5), None, None],
            vec![Some(0.9), Some(0.7), None],
            vec![Some(0.6), Some(0.7), Some(1.0)],
        ])
        .unwrap();
        let m = forgetting_metrics(&a).unwrap();
        assert!((m.forgetting[0] - 0.3).abs() < 1e-12);
        assert_eq!(m.forgetting[1], 0.0);
    }

    #[test]
    fn incomplete_matrix_is_a_state_error() {
        let a = AccuracyMatrix::from_rows(vec![vec![Some(0.5), None], vec![None, Some(0.5)]]).unwrap();
        assert!(matches!(forgetting_metrics(&a), Err(Error::State(_))));
        assert!(AccuracyMatrix::new(1).set(0, 0, 1.5).is_err());
    }

    #[test]
    fn stream_invariants_are_checked() {
        let ds = |labels: Vec<usize>| Dataset::new(Matrix::zeros(labels.len(), 2), labels).unwrap();
        let task = |a: Vec<usize>, b: Vec<usize>| Task {
            train: ds(a),
            test: ds(b),
            permutation: None,
        };
        assert!(TaskStream::new(
            vec![task(vec![0, 1], vec![0]), task(vec![2, 3], vec![3])],
            StreamKind::SplitClasses,
            0,
            4
        )
        .is_ok());
        assert!(TaskStream::new(
            vec![task(vec![0, 1], vec![0]), task(vec![1, 3], vec![3])],
            StreamKind::SplitClasses,
            0,
            4
        )
        .is_err());
        assert!(TaskStream::new(vec![task(vec![0, 5], vec![0])], StreamKind::DriftingBlobs, 0, 4).is_err());
        let mut bad = task(vec![0], vec![0]);
        bad.permutation = Some(vec![0, 0]);
        assert!(TaskStream::new(vec![bad], StreamKind::PermutedFeatures, 0, 2).is_err());
    }

    #[test]
    fn build_rejects_empty_stream() {
        let empty = TaskStream::new(vec![], StreamKind::DriftingBlobs, 0, 2).unwrap();
        assert!(matches!(
            build_and_fit_lower(&empty, &LowerConfig::default()),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn head_input_follows_lower_mode() {
        let stream = tiny_stream(StreamKind::DriftingBlobs);
        let cfg = LowerConfig {
            h: 5,
            ..LowerConfig::default()
        };
        let ridge = build_and_fit_lower(&stream, &cfg).unwrap();
        assert_eq!(ridge.head().input_dim(), 2);
        let pass = build_and_fit_lower(
            &stream,
            &LowerConfig {
                mode: LowerMode::PassThrough,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(pass.head().input_dim(), 5);
        assert!(pass.head().params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_targets_give_zero_ridge_weights() {
        let stream = tiny_stream(StreamKind::DriftingBlobs);
        let x = &stream.tasks()[0].train.x;
        let model =
            build_and_fit_lower_on(&stream, &LowerConfig { h: 4, ..Default::default() }, x, &Matrix::zeros(4, 2))
                .unwrap();
        match model.lower() {
            LowerTier::Ridge(sol) => assert_eq!(sol.weights(), &Matrix::zeros(4, 2)),
            LowerTier::PassThrough => panic!("expected ridge tier"),
        }
    }

    #[test]
    fn train_sequence_checks_dims() {
        let stream = tiny_stream(StreamKind::DriftingBlobs);
        let mut model = build_and_fit_lower(&stream, &LowerConfig { h: 3, ..Default::default() }).unwrap();
        let x3 = Matrix::zeros(2, 3);
        let other = TaskStream::new(
            vec![Task {
                train: Dataset::new(x3.clone(), vec![0, 1]).unwrap(),
                test: Dataset::new(x3, vec![0, 1]).unwrap(),
                permutation: None,
            }],
            StreamKind::DriftingBlobs,
            0,
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            eta: 0.1,
            epochs_per_task: 1,
            batch_size: 2,
            lambda_ewc: 0.0,
            seed: 0,
            fisher_sample_cap: None,
        };
        assert!(matches!(train_sequence(&mut model, &other, &cfg), Err(Error::Shape { .. })));
    }
}
