use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Mode, Network, Tensor};
use crate::error::{Error, Result};

/// Minibatch SGD settings for evaluator networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a strictly better validation accuracy.
    pub patience: usize,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            dropout_rate: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("train.learning_rate must be positive");
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be positive");
        }
        if self.patience == 0 {
            problems.push("train.patience must be positive");
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            problems.push("train.dropout_rate must lie in (0, 1)");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Patience counter: an epoch improves only if it strictly beats the best
/// accuracy seen so far. The first observation always counts as the best.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's accuracy; returns `true` if it is a new best.
    pub fn observe(&mut self, acc: f64) -> bool {
        match self.best {
            Some(b) if acc <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some(acc);
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Fraction of rows whose arg-max probability matches the label.
pub fn accuracy(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let probs = net.forward(inputs, Mode::Inference)?;
    let k = net.spec().n_classes;
    let hits = probs
        .values
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub network: Network,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Trains with shuffled minibatches until validation accuracy stalls for
/// `cfg.patience` epochs or `cfg.max_epochs` is reached.
pub fn train_with_early_stop<R: Rng + ?Sized>(
    mut net: Network,
    train: (&Tensor, &[usize]),
    val: (&Tensor, &[usize]),
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let (train_x, train_y) = train;
    let (val_x, val_y) = val;
    if train_y.is_empty() || val_y.is_empty() {
        return Err(Error::Dataset("training and validation splits must be non-empty".into()));
    }
    let mut best = TrainOutcome {
        best_val_accuracy: accuracy(&net, val_x, val_y)?,
        best_val_loss: net.loss(val_x, val_y, Mode::Inference)?,
        network: net.clone(),
        epochs_run: 0,
    };
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut epochs_run = 0;
    for _ in 0..cfg.max_epochs {
        order.shuffle(rng);
        for idx in batches(&order, cfg.batch_size) {
            let xb = train_x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let seed = rng.random();
            net.sgd_step(&xb, &yb, cfg.learning_rate, seed)?;
        }
        epochs_run += 1;
        let acc = accuracy(&net, val_x, val_y)?;
        if stopper.observe(acc) {
            best.best_val_accuracy = acc;
            best.best_val_loss = net.loss(val_x, val_y, Mode::Inference)?;
            best.network = net.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    best.epochs_run = epochs_run;
    Ok(best)
}

/// Splits `order` into batches of `size`, folding a trailing single-row
/// batch into its predecessor so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst weight.
    pub worst: usize,
    pub weights_checked: usize,
    /// Weights whose `±eps` probes changed the network's branch pattern;
    /// central differences are meaningless there, so they are left out of
    /// `max_rel_error`.
    pub kinks_skipped: usize,
}

/// Compares analytic gradients with central differences over every weight.
///
/// The per-weight error is `|a - n| / max(|a|, |n|, 1e-5)`. Below `1e-5` the
/// central difference's own truncation error (order `eps²`) is no longer
/// negligible, so such gradients are judged on absolute error. Weights whose probes
/// cross a rectifier or max-pool break are counted in `kinks_skipped`.
pub fn grad_check(net: &Network, inputs: &Tensor, labels: &[usize], mode: Mode, eps: f64) -> Result<GradCheckReport> {
    grad_check_with(net, inputs, labels, mode, eps, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison.
pub fn grad_check_with(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
    mode: Mode,
    eps: f64,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradCheckReport> {
    let (_, mut grads) = net.loss_and_gradients(inputs, labels, mode)?;
    tamper(&mut grads);
    let analytic: Vec<f64> = grads.flat().collect();
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        weights_checked: analytic.len(),
        kinks_skipped: 0,
    };
    let base_pattern = net.branch_pattern(inputs, mode)?;
    let mut flat = 0;
    let tensors = probe.params().len();
    for t in 0..tensors {
        let len = probe.params()[t].len();
        for i in 0..len {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + eps;
            let plus = probe.loss(inputs, labels, mode)?;
            let crossed = probe.branch_pattern(inputs, mode)? != base_pattern;
            probe.params_mut()[t][i] = orig - eps;
            let minus = probe.loss(inputs, labels, mode)?;
            let crossed = crossed || probe.branch_pattern(inputs, mode)? != base_pattern;
            probe.params_mut()[t][i] = orig;
            if crossed {
                report.kinks_skipped += 1;
                flat += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[flat];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = flat;
            }
            flat += 1;
        }
    }
    Ok(report)
}
