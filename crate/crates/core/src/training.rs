//! Full-batch transductive training with Adam, per-epoch evaluation and the
//! repeated-seed protocol.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_splits, Dataset, Splits};
use crate::error::{Error, Result};
use crate::graph::propagation_operator;
use crate::model::{forward, init_params, ModelSpec, Mode, Parameters};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Random per-class split drawn from each run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy {
            train_per_class: 20,
            val_per_class: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `None` trains on the dataset's own splits.
    pub split: Option<SplitPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 100,
            seeds: (0..10).collect(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split: Some(SplitPolicy::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params
            .into_iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. `decay[i]` selects which tensors get the
/// L2 term `weight_decay · θ` added to their gradient; `names` label errors.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    names: &[String],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", names.get(i).map_or("?", String::as_str)),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (theta, &g)) in param.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g + wd * *theta;
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Adam over a model's parameters; biases are excluded from weight decay.
pub fn adam_step(
    params: &mut Parameters,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let slots = params.slots();
    let decay: Vec<bool> = slots.iter().map(|s| !s.is_bias).collect();
    let names: Vec<String> = slots.iter().map(|s| s.to_string()).collect();
    adam_update(&mut params.tensors_mut(), grads, &decay, &names, state, cfg)
}

/// Fraction of `mask` rows whose argmax (lowest index on ties) equals the label.
pub fn evaluate(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty mask".into()));
    }
    let mut correct = 0usize;
    for &i in mask {
        if i >= logits.rows() || i >= labels.len() {
            return Err(Error::InvalidArgument(format!("mask row {i} out of range")));
        }
        if logits.argmax_row(i) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Everything one training run reports.
///
/// Epoch 0 is the evaluation of the initial parameters; its `train_loss` is
/// the evaluation-mode loss. Later records carry the training-mode loss of
/// that epoch's step and accuracies measured after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub final_test_acc: f64,
    pub best_val_acc: f64,
    pub best_val_epoch: usize,
    /// Test accuracy at the first epoch reaching `best_val_acc`.
    pub test_acc_at_best_val: f64,
    /// First epoch whose validation accuracy reaches 95% of `best_val_acc`.
    pub epochs_to_95pct_val: usize,
}

fn resolve_splits(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Splits> {
    let splits = match cfg.split {
        Some(policy) => make_splits(dataset, policy.train_per_class, policy.val_per_class, seed)?,
        None => dataset
            .splits
            .clone()
            .ok_or_else(|| Error::InvalidArgument("dataset has no splits and none were requested".into()))?,
    };
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::InvalidArgument("train, val and test masks must be non-empty".into()));
    }
    let mut seen = vec![false; dataset.num_nodes()];
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "node {i} is out of range or appears in more than one mask"
            )));
        }
    }
    Ok(splits)
}

/// Trains one model from `seed` and evaluates it after every epoch.
pub fn train_run(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<RunMetrics> {
    cfg.validate()?;
    spec.validate()?;
    if spec.in_dim != dataset.num_features() || spec.classes != dataset.num_classes {
        return Err(Error::InvalidSpec(format!(
            "spec is {}→{} classes, dataset has {} features and {} classes",
            spec.in_dim,
            spec.classes,
            dataset.num_features(),
            dataset.num_classes
        )));
    }
    let splits = resolve_splits(dataset, cfg, seed)?;
    let operator = propagation_operator(&dataset.graph)?;
    let mut params = init_params(spec, seed)?;
    let mut adam = AdamState::new(params.tensors());
    let mut dropout_rng = rng::stream(seed, Stream::Dropout);

    let eval = |params: &Parameters| -> Result<(f64, f64, f64, f64)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant_ref(&dataset.features);
        let logp = forward(&mut tape, spec, &bound, &operator, x, Mode::Eval)?;
        let loss = tape.masked_nll(logp, &dataset.labels, &splits.train)?;
        let out = tape.value(logp);
        Ok((
            tape.value(loss).get(0, 0),
            evaluate(out, &dataset.labels, &splits.train)?,
            evaluate(out, &dataset.labels, &splits.val)?,
            evaluate(out, &dataset.labels, &splits.test)?,
        ))
    };

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let (loss, train_acc, val_acc, test_acc) = eval(&params).map_err(|e| Error::Epoch {
        epoch: 0,
        source: Box::new(e),
    })?;
    records.push(EpochRecord {
        epoch: 0,
        train_loss: loss,
        train_acc,
        val_acc,
        test_acc,
    });

    for epoch in 1..=cfg.epochs {
        let mut step = || -> Result<EpochRecord> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant_ref(&dataset.features);
            let logp = forward(&mut tape, spec, &bound, &operator, x, Mode::Train(&mut dropout_rng))?;
            let loss = tape.masked_nll(logp, &dataset.labels, &splits.train)?;
            let train_loss = tape.value(loss).get(0, 0);
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.ids().iter().map(|&id| grads.get_or_zeros(id)).collect();
            drop(tape);
            adam_step(&mut params, &grads, &mut adam, cfg)?;
            let (_, train_acc, val_acc, test_acc) = eval(&params)?;
            Ok(EpochRecord {
                epoch,
                train_loss,
                train_acc,
                val_acc,
                test_acc,
            })
        };
        let record = step().map_err(|e| Error::Epoch {
            epoch,
            source: Box::new(e),
        })?;
        records.push(record);
    }
    Ok(summarize(seed, records))
}

fn summarize(seed: u64, records: Vec<EpochRecord>) -> RunMetrics {
    let mut best = &records[0];
    for r in &records[1..] {
        if r.val_acc > best.val_acc {
            best = r;
        }
    }
    let threshold = 0.95 * best.val_acc;
    let epochs_to_95pct_val = records
        .iter()
        .find(|r| r.val_acc >= threshold)
        .map_or(best.epoch, |r| r.epoch);
    RunMetrics {
        seed,
        final_test_acc: records.last().expect("epoch 0 always recorded").test_acc,
        best_val_acc: best.val_acc,
        best_val_epoch: best.epoch,
        test_acc_at_best_val: best.test_acc,
        epochs_to_95pct_val,
        records,
    }
}

/// Mean and sample standard deviation (n − 1 denominator). The deviation is
/// `None` for fewer than two values.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Aggregate over the seeds of a [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub mean_test_acc: f64,
    pub std_test_acc: Option<f64>,
    pub mean_epochs_to_95: f64,
    pub runs: Vec<RunMetrics>,
}

impl RepeatSummary {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.final_test_acc).collect();
        let (mean_test_acc, std_test_acc) = mean_and_sample_std(&accs);
        let epochs: Vec<f64> = runs.iter().map(|r| r.epochs_to_95pct_val as f64).collect();
        let (mean_epochs_to_95, _) = mean_and_sample_std(&epochs);
        RepeatSummary {
            mean_test_acc,
            std_test_acc,
            mean_epochs_to_95,
            runs,
        }
    }

    /// Median of `epochs_to_95pct_val` across seeds.
    pub fn median_epochs_to_95(&self) -> f64 {
        let mut e: Vec<usize> = self.runs.iter().map(|r| r.epochs_to_95pct_val).collect();
        e.sort_unstable();
        let n = e.len();
        if n % 2 == 1 {
            e[n / 2] as f64
        } else {
            (e[n / 2 - 1] + e[n / 2]) as f64 / 2.0
        }
    }
}

/// Runs every seed of `cfg` independently, in seed order.
pub fn repeat_runs(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<RepeatSummary> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| train_run(spec, dataset, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepeatSummary::from_runs(runs))
}
