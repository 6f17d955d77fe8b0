//! Mini-batch Adam training with early stopping on validation Recall@20, the
//! retrain-on-train-plus-validation protocol, multi-seed ensembles and a σ grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, MetricsReport};
use crate::ingest::{Example, ItemVocab};
use crate::model::{forward, ModelConfig, Parameters, PARAM_NAMES};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

/// σ values searched by [`select_sigma`].
pub const SIGMA_GRID: [f64; 4] = [4.0, 9.0, 16.0, 25.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate after every epoch. 1.0 disables decay.
    pub lr_decay: f64,
    /// Run phase 2 (fresh model on train ∪ val for the best epoch count).
    pub retrain: bool,
    pub precision: Precision,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 100,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            lr_decay: 1.0,
            retrain: true,
            precision: Precision::F64,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be ≥ 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        Ok(())
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. The dummy item row is
/// zeroed afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for ((name, p), g) in PARAM_NAMES.iter().zip(params.tensors()).zip(grads.tensors()) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::lit(lr), T::lit(cfg.epsilon), T::lit(cfg.weight_decay));
    let one = T::one();
    for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj + wd * *w;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_dummy();
    Ok(())
}

/// Patience-based stopping on a score where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_score: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best_score: f64::NEG_INFINITY,
        }
    }

    /// Records the score of `epoch` (1-based). Returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
        }
        epoch - self.best_epoch >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall: f64,
    pub val_mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mean training loss of each phase-2 epoch (empty when retraining is off).
    pub retrain_losses: Vec<f64>,
}

fn param_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One pass over `examples` in a fresh random order. Returns the mean example loss.
pub fn train_epoch<T: Scalar>(
    params: &mut Parameters<T>,
    state: &mut AdamState<T>,
    examples: &[Example],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(tcfg.batch_size) {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let f = forward(&batch, params, mcfg, true, rng)?;
        let loss = f.loss_value().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let per_example = match mcfg.reduction {
            crate::model::Reduction::Mean => loss * batch.len() as f64,
            crate::model::Reduction::Sum => loss,
        };
        total += per_example;
        let mut grads = f.graph.backward(f.loss)?;
        let g = f.params.gradients(&mut grads);
        adam_step(params, &g, state, tcfg, lr)?;
    }
    Ok(total / examples.len() as f64)
}

fn initial_params<T: Scalar>(
    init: Option<&Parameters<T>>,
    mcfg: &ModelConfig,
    n_items: usize,
    seed: u64,
) -> Result<Parameters<T>> {
    let mut rng = param_rng(seed);
    match init {
        None => Ok(Parameters::init(mcfg, n_items, &mut rng)),
        Some(p) if p.n_items() > n_items || p.d() != mcfg.d => Err(Error::invalid(format!(
            "warm start has {} items and d={}, need at most {n_items} items and d={}",
            p.n_items(),
            p.d(),
            mcfg.d
        ))),
        Some(p) => {
            let mut p = p.clone();
            p.grow_items(n_items, &mut rng);
            Ok(p)
        }
    }
}

/// Fits a model for exactly `epochs` epochs, starting from `init` (grown to
/// `n_items`) or from the seed's initialization.
pub fn fit_epochs<T: Scalar>(
    examples: &[Example],
    n_items: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    epochs: usize,
    init: Option<&Parameters<T>>,
) -> Result<(Parameters<T>, Vec<f64>)> {
    let mut params = initial_params(init, mcfg, n_items, tcfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = data_rng(tcfg.seed);
    let mut lr = tcfg.lr;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        losses.push(train_epoch(&mut params, &mut state, examples, mcfg, tcfg, lr, &mut rng)?);
        lr *= tcfg.lr_decay;
    }
    Ok((params, losses))
}

/// Full protocol with a caller-supplied validation scorer returning
/// `(recall, mrr)` for a parameter snapshot. Both phases start from `init` when
/// given, otherwise from the seed's initialization.
pub fn train_model_with<T: Scalar>(
    train: &[Example],
    val: &[Example],
    n_items: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<&Parameters<T>>,
    mut validate: impl FnMut(&Parameters<T>) -> Result<(f64, f64)>,
) -> Result<(Parameters<T>, TrainTrace)> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation splits must be nonempty"));
    }
    let mut params = initial_params(init, mcfg, n_items, tcfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = data_rng(tcfg.seed);
    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut lr = tcfg.lr;
    for epoch in 1..=tcfg.max_epochs {
        let train_loss = train_epoch(&mut params, &mut state, train, mcfg, tcfg, lr, &mut rng)?;
        lr *= tcfg.lr_decay;
        let (val_recall, val_mrr) = validate(&params)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_recall,
            val_mrr,
        });
        let stop = stopper.observe(epoch, val_recall);
        if stopper.improved_at(epoch) && !tcfg.retrain {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    let best_epoch = stopper.best_epoch.max(1);
    let mut trace = TrainTrace {
        epochs,
        best_epoch,
        retrain_losses: Vec::new(),
    };
    if !tcfg.retrain {
        return Ok((best, trace));
    }
    let combined: Vec<Example> = train.iter().chain(val).cloned().collect();
    let (params, losses) = fit_epochs(&combined, n_items, mcfg, tcfg, best_epoch, init)?;
    trace.retrain_losses = losses;
    Ok((params, trace))
}

/// [`train_model_with`] scoring validation Recall@20 / MRR@20 with the model itself.
pub fn train_model<T: Scalar>(
    train: &[Example],
    val: &[Example],
    n_items: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Parameters<T>, TrainTrace)> {
    train_model_from(train, val, n_items, mcfg, tcfg, None)
}

/// [`train_model`] starting from existing parameters.
pub fn train_model_from<T: Scalar>(
    train: &[Example],
    val: &[Example],
    n_items: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<&Parameters<T>>,
) -> Result<(Parameters<T>, TrainTrace)> {
    let opts = EvalOptions {
        workers: tcfg.workers,
        ..EvalOptions::default()
    };
    train_model_with(train, val, n_items, mcfg, tcfg, init, |p| {
        let lists = eval::rank_examples(p, mcfg, val, &opts)?;
        let ranks: Vec<usize> = lists.iter().map(|l| l.rank).collect();
        Ok((eval::recall_at_k(&ranks, opts.k), eval::mrr_at_k(&ranks, opts.k)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone)]
pub struct EnsembleMember<T> {
    pub seed: u64,
    pub params: Parameters<T>,
    pub trace: TrainTrace,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub seeds: Vec<u64>,
    pub recall_at_k: MeanStd,
    pub mrr_at_k: MeanStd,
    pub arp: MeanStd,
}

impl EnsembleSummary {
    pub fn from_reports(seeds: Vec<u64>, reports: &[&MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            seeds,
            recall_at_k: col(|r| r.recall_at_k),
            mrr_at_k: col(|r| r.mrr_at_k),
            arp: col(|r| r.arp),
        }
    }
}

/// Trains `n_seeds` models with seeds `tcfg.seed + 0..n` and evaluates each on `test`.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble<T: Scalar>(
    n_seeds: usize,
    train: &[Example],
    val: &[Example],
    test: &[Example],
    vocab: &ItemVocab,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<(Vec<EnsembleMember<T>>, EnsembleSummary)> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be ≥ 1"));
    }
    let mut members = Vec::with_capacity(n_seeds);
    for k in 0..n_seeds as u64 {
        let cfg = TrainConfig {
            seed: tcfg.seed + k,
            ..tcfg.clone()
        };
        let (params, trace) = train_model::<T>(train, val, vocab.len(), mcfg, &cfg)?;
        let (report, _) = eval::evaluate(&params, mcfg, test, vocab, opts)?;
        members.push(EnsembleMember {
            seed: cfg.seed,
            params,
            trace,
            report,
        });
    }
    let summary = EnsembleSummary::from_reports(
        members.iter().map(|m| m.seed).collect(),
        &members.iter().map(|m| &m.report).collect::<Vec<_>>(),
    );
    Ok((members, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearch {
    pub best_sigma: f64,
    /// `(σ, best validation Recall@20)` per grid point.
    pub scores: Vec<(f64, f64)>,
}

/// Picks σ by best phase-1 validation Recall@20; the first grid value wins ties.
pub fn select_sigma<T: Scalar>(
    grid: &[f64],
    train: &[Example],
    val: &[Example],
    n_items: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<SigmaSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("empty σ grid"));
    }
    let phase1 = TrainConfig {
        retrain: false,
        ..tcfg.clone()
    };
    let mut scores = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let cfg = ModelConfig { sigma, ..mcfg.clone() };
        let (_, trace) = train_model::<T>(train, val, n_items, &cfg, &phase1)?;
        let best = trace.epochs.iter().map(|e| e.val_recall).fold(f64::NEG_INFINITY, f64::max);
        scores.push((sigma, best));
    }
    let best_sigma = scores
        .iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, &(s, r)| if r > acc.1 { (s, r) } else { acc })
        .0;
    Ok(SigmaSearch { best_sigma, scores })
}
