//! Reverse-mode gradients for the full model, cross-entropy loss, the
//! rectified-Adam optimizer, early stopping and the evaluation suite.

pub mod metrics;
pub mod radam;

pub use metrics::{auc_rank, metrics_from_predictions, Averaging, MetricsReport};
pub use radam::{radam_step, OptimizerState, RadamHyper};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureBag;
use crate::error::{Error, Result};
use crate::model::{
    forward_tokens, init_params, softmax_vec, ForwardTrace, ModelConfig, ModelParams,
};
use crate::numerics::Matrix;

/// Gradient tensors in the canonical parameter order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
    pub names: Vec<String>,
}

impl Gradients {
    /// Global L2 norm across all tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales in place so the global norm is at most `max_norm`; returns
    /// the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

/// `-log softmax(logits)[label]` in log-sum-exp-stable form.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradients of the cross-entropy loss at `label` for every parameter
/// tensor, through the whole recorded forward pass. Segment IDs are
/// constants.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    config: &ModelConfig,
    label: usize,
) -> Result<Gradients> {
    if trace.config != *config {
        return Err(Error::ConfigMismatch(
            "trace was produced under a different config".into(),
        ));
    }
    params.validate(config)?;
    if label >= config.n_classes {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: config.n_classes,
        });
    }
    // softmax-cross-entropy identity: dL/dlogits = softmax(logits) - onehot
    let probs = softmax_vec(&trace.logits);
    let seed = Matrix::from_fn(1, probs.len(), |_, j| {
        probs[j] - if j == label { 1.0 } else { 0.0 }
    });
    let node_grads = trace.tape.backward(trace.logits_var, seed)?;
    let names = ModelParams::tensor_names(config);
    let mut tensors = Vec::with_capacity(trace.param_vars.ordered.len());
    for (i, var) in trace.param_vars.ordered.iter().enumerate() {
        let shape = trace.tape.value(*var);
        let g = node_grads[var_index(*var)]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.rows(), shape.cols()));
        debug_assert_eq!((g.rows(), g.cols()), (shape.rows(), shape.cols()), "{}", names[i]);
        tensors.push(g);
    }
    Ok(Gradients { tensors, names })
}

// Var is an opaque index; the tape hands gradients back as a dense vec.
fn var_index(v: crate::autodiff::Var) -> usize {
    // Vars are created densely from 0, so the debug formatting carries the
    // index; cheaper to expose it properly.
    v.index()
}

/// Max relative error between analytic gradients and central finite
/// differences over every parameter, on a seeded synthetic bag.
pub fn grad_check(config: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tokens = 6;
    let tokens = Matrix::from_fn(n_tokens, config.d_f, |_, _| rng.random_range(-1.0..1.0));
    let label = 1usize;
    let mut params = init_params(config, seed)?;
    let total: usize = params.tensor_list().iter().map(|t| t.data().len()).sum();
    if total > 10_000 {
        return Err(Error::InvalidArg(format!(
            "grad_check is for desk-scale configs; this one has {total} parameters"
        )));
    }

    // Pin the segment assignment so every perturbed forward sees the same
    // segment IDs.
    let base = forward_tokens(&tokens, &params, config, None)?;
    let pinned = base.assignments.first().cloned();
    let analytic = backward(&base, &params, config, label)?;

    let mut max_rel = 0.0_f64;
    let names = analytic.names.clone();
    for ti in 0..analytic.tensors.len() {
        let (rows, cols) = {
            let t = &params.tensor_list()[ti];
            (t.rows(), t.cols())
        };
        for i in 0..rows {
            for j in 0..cols {
                let orig = params.tensor_list()[ti].get(i, j);
                params.tensor_list_mut()[ti].set(i, j, orig + eps);
                let plus = forward_tokens(&tokens, &params, config, pinned.as_ref())?;
                let loss_plus = cross_entropy(&plus.logits, label)?;
                params.tensor_list_mut()[ti].set(i, j, orig - eps);
                let minus = forward_tokens(&tokens, &params, config, pinned.as_ref())?;
                let loss_minus = cross_entropy(&minus.logits, label)?;
                params.tensor_list_mut()[ti].set(i, j, orig);
                let fd = (loss_plus - loss_minus) / (2.0 * eps);
                let an = analytic.tensors[ti].get(i, j);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                if rel > max_rel {
                    max_rel = rel;
                }
                debug_assert!(
                    rel.is_finite(),
                    "non-finite rel error at {} ({i},{j})",
                    names[ti]
                );
            }
        }
    }
    Ok(max_rel)
}

/// Early-stopping bookkeeping: strict improvement on validation loss,
/// fixed patience window.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub best: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            patience,
        }
    }

    /// Feeds one epoch's validation loss; returns true when it improved.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            true
        } else {
            self.epochs_since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables it.
    pub clip: Option<f64>,
    pub weight_decay: f64,
    pub averaging: Averaging,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-4,
            epochs: 20,
            patience: 10,
            seed: 0,
            clip: Some(5.0),
            weight_decay: 0.0,
            averaging: Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
}

impl EpochRecord {
    pub fn to_log_line(&self) -> String {
        let m = &self.val_metrics;
        format!(
            "epoch={} train_loss={:.6} val_loss={:.6} val_acc={:.2} val_f1={:.4} val_auc={} val_recall={:.4} val_precision={:.4}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            m.acc,
            m.f1,
            match m.auc {
                Some(a) => format!("{a:.4}"),
                None => "undefined".into(),
            },
            m.recall,
            m.precision,
        )
    }
}

/// Line-delimited history log, one record per epoch.
pub fn history_log(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&rec.to_log_line());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Optimizer state as of the best epoch.
    pub opt_state: OptimizerState,
}

/// Per-bag evaluation record.
#[derive(Debug, Clone)]
pub struct BagScore {
    pub label: usize,
    pub pred: usize,
    /// Probability of class 1.
    pub score: f64,
    pub loss: f64,
}

fn score_one(bag: &FeatureBag, params: &ModelParams, config: &ModelConfig) -> Result<BagScore> {
    let trace = forward_tokens(&bag.tokens, params, config, None)?;
    let probs = softmax_vec(&trace.logits);
    let mut pred = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[pred] {
            pred = i;
        }
    }
    Ok(BagScore {
        label: bag.label,
        pred,
        score: probs.get(1).copied().unwrap_or(0.0),
        loss: cross_entropy(&trace.logits, bag.label)?,
    })
}

/// Scores every bag; with `threads > 1` the bags are sharded across scoped
/// threads and results are merged back in index order, so the output is
/// independent of the thread count.
pub fn score_bags(
    bags: &[FeatureBag],
    params: &ModelParams,
    config: &ModelConfig,
    threads: usize,
) -> Result<Vec<BagScore>> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("no bags to score"));
    }
    let threads = threads.max(1).min(bags.len());
    if threads == 1 {
        return bags.iter().map(|b| score_one(b, params, config)).collect();
    }
    let chunk = bags.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<BagScore>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for shard in bags.chunks(chunk) {
            handles.push(scope.spawn(move || {
                shard
                    .iter()
                    .map(|b| score_one(b, params, config))
                    .collect::<Result<Vec<BagScore>>>()
            }));
        }
        for h in handles {
            results.push(h.join().expect("scoring thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(bags.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Five-metric evaluation of a bag set.
pub fn evaluate(
    bags: &[FeatureBag],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<MetricsReport> {
    evaluate_threaded(bags, params, config, 1, Averaging::Macro)
}

pub fn evaluate_threaded(
    bags: &[FeatureBag],
    params: &ModelParams,
    config: &ModelConfig,
    threads: usize,
    averaging: Averaging,
) -> Result<MetricsReport> {
    let scores = score_bags(bags, params, config, threads)?;
    let labels: Vec<usize> = scores.iter().map(|s| s.label).collect();
    let preds: Vec<usize> = scores.iter().map(|s| s.pred).collect();
    let probs: Vec<f64> = scores.iter().map(|s| s.score).collect();
    metrics_from_predictions(&labels, &preds, &probs, config.n_classes, averaging)
}

/// Full training loop: one bag per optimization step, seeded epoch shuffles,
/// early stopping on validation loss, best-epoch checkpointing.
pub fn train(
    train_bags: &[FeatureBag],
    val_bags: &[FeatureBag],
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::EmptyInput("training and validation splits must be non-empty"));
    }
    config.validate()?;
    if let crate::attention::Pinv::Oracle = config.pinv {
        return Err(Error::NotDifferentiable(
            "training requires the iterative pseudoinverse",
        ));
    }
    for bag in train_bags.iter().chain(val_bags) {
        if bag.label >= config.n_classes {
            return Err(Error::LabelOutOfRange {
                label: bag.label,
                n_classes: config.n_classes,
            });
        }
    }
    let mut params = init_params(config, opts.seed)?;
    let hyper = RadamHyper {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        ..RadamHyper::default()
    };
    let mut state = OptimizerState::new(&params, hyper);
    let mut stopper = EarlyStopper::new(opts.patience);
    let mut best_params = params.clone();
    let mut best_state = state.clone();
    let mut history = Vec::new();

    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut train_loss = 0.0;
        for &idx in &order {
            let bag = &train_bags[idx];
            let trace = forward_tokens(&bag.tokens, &params, config, None)?;
            train_loss += cross_entropy(&trace.logits, bag.label)?;
            let mut grads = backward(&trace, &params, config, bag.label)?;
            if let Some(max_norm) = opts.clip {
                grads.clip_global_norm(max_norm);
            }
            radam_step(&mut params, &grads, &mut state)?;
        }
        train_loss /= train_bags.len() as f64;

        let val_scores = score_bags(val_bags, &params, config, 1)?;
        let val_loss =
            val_scores.iter().map(|s| s.loss).sum::<f64>() / val_scores.len() as f64;
        let labels: Vec<usize> = val_scores.iter().map(|s| s.label).collect();
        let preds: Vec<usize> = val_scores.iter().map(|s| s.pred).collect();
        let probs: Vec<f64> = val_scores.iter().map(|s| s.score).collect();
        let val_metrics =
            metrics_from_predictions(&labels, &preds, &probs, config.n_classes, opts.averaging)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });
        if stopper.update(epoch, val_loss) {
            best_params = params.clone();
            best_state = state.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch: stopper.best_epoch,
        opt_state: best_state,
    })
}
