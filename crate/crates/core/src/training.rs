//! Parameter initialization, Adam, mini-batch training with early stopping
//! and best-checkpoint restore, and the fast (exploratory) protocol.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{self, DataError, Dataset, Item};
use crate::engine::{loss_and_grad, EngineError, Gradients, LayerKind, LayerParams, LossKind, Network, KERNEL};
use crate::modelspec::{infer_shapes, CanonicalModel, Shape};
use crate::rng;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("parameter/gradient layout mismatch: {0}")]
    Layout(String),
    #[error("{0}")]
    Invalid(String),
}

/// Glorot-uniform weights, zero biases, one derived stream per layer.
pub fn initialize(
    model: &CanonicalModel,
    input: (usize, usize, usize),
    seed: u64,
) -> Result<Network, TrainError> {
    let trace = infer_shapes(model, input);
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        // Trace entry i is the shape feeding layer i (entry 0 is the image).
        let incoming = trace.entries[i].shape;
        let outgoing = trace.entries[i + 1].shape;
        let mut r = rng::seeded(rng::derive(seed, "init", i as u64));
        let mut uniform = |dims: Vec<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(|_| r.gen_range(-limit..limit)).collect())
        };
        let params = match (layer.kind, incoming, outgoing) {
            (LayerKind::Conv, Shape::Spatial([_, _, cin]), Shape::Spatial([_, _, cout])) => {
                let area = KERNEL * KERNEL;
                LayerParams::Conv {
                    weights: uniform(vec![KERNEL, KERNEL, cin, cout], area * cin, area * cout)?,
                    biases: Tensor::zeros(vec![cout])?,
                }
            }
            (LayerKind::Pool, ..) => LayerParams::Pool,
            (LayerKind::Flatten, ..) => LayerParams::Flatten,
            (LayerKind::Dense, Shape::Flat([n_in]), Shape::Flat([n_out])) => LayerParams::Dense {
                weights: uniform(vec![n_in, n_out], n_in, n_out)?,
                biases: Tensor::zeros(vec![n_out])?,
            },
            (LayerKind::Classifier, Shape::Flat([n_in]), Shape::Flat([n_out])) => LayerParams::Classifier {
                weights: uniform(vec![n_in, n_out], n_in, n_out)?,
                biases: Tensor::zeros(vec![n_out])?,
            },
            (kind, inc, _) => {
                return Err(TrainError::Invalid(format!(
                    "layer {} ({kind:?}) cannot take input shape {:?}",
                    layer.id,
                    inc.dims()
                )))
            }
        };
        layers.push(params);
    }
    Ok(Network::new(layers))
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        let sizes: Vec<usize> = net.layers().iter().flat_map(|l| l.tensors()).map(|t| t.len()).collect();
        Self {
            learning_rate,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<(), TrainError> {
    let grad_tensors = grads.tensors();
    let mut params = net.tensors_mut();
    if params.len() != grad_tensors.len() || params.len() != state.first.len() {
        return Err(TrainError::Layout(format!(
            "{} parameter tensors, {} gradient tensors, {} moment slots",
            params.len(),
            grad_tensors.len(),
            state.first.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = state.learning_rate;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if p.len() != g.len() || m.len() != p.len() {
            return Err(TrainError::Layout(format!(
                "tensor of {} values paired with gradient of {}",
                p.len(),
                g.len()
            )));
        }
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Where a training run sits inside a protocol; `None` outside
/// cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunContext {
    pub repeat: Option<usize>,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Progress {
    Epoch { context: RunContext, record: EpochRecord },
    Evaluating,
}

/// Observer for training progress; called from the training thread.
pub type ProgressFn<'a> = &'a (dyn Fn(Progress) + Sync);

pub fn no_progress(_: Progress) {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: CanonicalModel,
    pub input_shape: (usize, usize, usize),
    pub class_names: Vec<String>,
    /// Parameters at the epoch with the lowest validation loss.
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainedModel {
    pub fn predict(&self, image: &Tensor) -> Result<Tensor, EngineError> {
        Ok(self.network.forward(image)?.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub min_delta: f64,
}

impl FitOptions {
    pub fn fast(cfg: &RunConfig) -> Self {
        Self::with(cfg, cfg.training.max_epochs_fast, cfg.training.patience_fast)
    }

    pub fn production(cfg: &RunConfig) -> Self {
        Self::with(cfg, cfg.training.max_epochs_production, cfg.training.patience_production)
    }

    fn with(cfg: &RunConfig, max_epochs: usize, patience: usize) -> Self {
        Self {
            max_epochs,
            patience,
            batch_size: cfg.training.batch_size,
            loss: cfg.training.loss,
            learning_rate: cfg.training.learning_rate,
            min_delta: cfg.training.min_delta,
        }
    }
}

fn onehot(label: usize, k: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Tensor::from_parts(vec![k], v)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `net` over `items`.
fn score(net: &Network, items: &[Item], k: usize, loss: LossKind, epoch: usize) -> Result<(f64, f64), TrainError> {
    let mut total = 0.0;
    let mut correct = 0usize;
    for item in items {
        let pass = net.forward(&item.image).map_err(|e| non_finite(e, "validation output", epoch))?;
        let (l, _) = loss_and_grad(&pass.probs, &onehot(item.label, k), loss)?;
        total += l;
        correct += usize::from(argmax(pass.probs.data()) == item.label);
    }
    let n = items.len().max(1) as f64;
    Ok((total / n, correct as f64 / n))
}

fn non_finite(e: EngineError, what: &'static str, epoch: usize) -> TrainError {
    match e {
        EngineError::NonFinite(_) => TrainError::NonFinite { what, epoch },
        other => TrainError::Engine(other),
    }
}

/// Mini-batch Adam on `train`, early-stopped on `validation` loss.
///
/// Stops once `patience` consecutive epochs fail to improve the best
/// validation loss by more than `min_delta`, or at `max_epochs`. The returned
/// network is the one from the epoch with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &CanonicalModel,
    input_shape: (usize, usize, usize),
    train: &Dataset,
    validation: &Dataset,
    opts: &FitOptions,
    seed: u64,
    context: RunContext,
    progress: ProgressFn<'_>,
) -> Result<TrainedModel, TrainError> {
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    if opts.batch_size == 0 || opts.max_epochs == 0 || opts.patience == 0 {
        return Err(TrainError::Invalid("batch size, epochs and patience must be positive".into()));
    }
    let started = Instant::now();
    let k = model.num_classes();
    let mut net = initialize(model, input_shape, seed)?;
    let mut adam = AdamState::new(&net, opts.learning_rate);
    let mut grads = net.zero_gradients();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut reference = f64::INFINITY;
    let mut waited = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=opts.max_epochs {
        let mut r = rng::seeded(rng::derive(seed, "epoch", epoch as u64));
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            grads.scale(0.0);
            for &i in batch {
                let item = &train.items()[i];
                let pass = net.forward(&item.image).map_err(|e| non_finite(e, "training output", epoch))?;
                let (l, dlogits) = loss_and_grad(&pass.probs, &onehot(item.label, k), opts.loss)?;
                if !l.is_finite() {
                    return Err(TrainError::NonFinite { what: "loss", epoch });
                }
                epoch_loss += l;
                net.backward(pass.tape, &dlogits, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::NonFinite { what: "gradient", epoch });
            }
            adam_step(&mut net, &grads, &mut adam)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_acc) = score(&net, validation.items(), k, opts.loss, epoch)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        };
        history.push(record);
        progress(Progress::Epoch { context, record });

        if val_loss < best.0 {
            best = (val_loss, net.clone(), epoch);
        }
        if val_loss < reference - opts.min_delta {
            reference = val_loss;
            waited = 0;
        } else {
            waited += 1;
            if waited >= opts.patience {
                break;
            }
        }
    }
    let stopped_epoch = history.len();
    Ok(TrainedModel {
        model: model.clone(),
        input_shape,
        class_names: train.class_names().to_vec(),
        network: best.1,
        history,
        seed,
        best_epoch: best.2,
        stopped_epoch,
        wall_time: started.elapsed(),
    })
}

/// Argmax accuracy over `items`.
pub fn evaluate_accuracy(model: &TrainedModel, items: &[Item]) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let mut predictions = Vec::with_capacity(items.len());
    for item in items {
        predictions.push(argmax(model.predict(&item.image)?.data()));
    }
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    Ok(accuracy(&predictions, &labels))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastReport {
    pub mode: String,
    pub model: String,
    pub seed: u64,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct FastOutcome {
    pub trained: TrainedModel,
    pub report: FastReport,
}

/// Balanced subset, stratified 60/20/20 split, early-stopped training, and
/// test-set accuracy.
pub fn train_fast(
    model: &CanonicalModel,
    data: &Dataset,
    config: &RunConfig,
    seed: u64,
    progress: ProgressFn<'_>,
) -> Result<FastOutcome, TrainError> {
    check_classes(model, data)?;
    let input_shape = data.image_shape().ok_or(DataError::Empty)?;
    let subset = dataset::balanced_subset(data, config.dataset.fast_subset, rng::derive(seed, "fast-subset", 0))?;
    let plan = dataset::split_60_20_20(&subset, rng::derive(seed, "fast-split", 0))?;
    let train = subset.subset(&plan.train);
    let validation = subset.subset(&plan.validation);
    let test = subset.subset(&plan.test);
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let trained = fit(
        model,
        input_shape,
        &train,
        &validation,
        &FitOptions::fast(config),
        rng::derive(seed, "fast-fit", 0),
        RunContext::default(),
        progress,
    )?;
    progress(Progress::Evaluating);
    let acc = evaluate_accuracy(&trained, test.items())?;
    let report = FastReport {
        mode: "fast".into(),
        model: model.describe(),
        seed,
        accuracy: acc,
        best_epoch: trained.best_epoch,
        stopped_epoch: trained.stopped_epoch,
        train_size: train.len(),
        validation_size: validation.len(),
        test_size: test.len(),
        history: trained.history.clone(),
    };
    Ok(FastOutcome {
        trained: TrainedModel { seed, ..trained },
        report,
    })
}

pub(crate) fn check_classes(model: &CanonicalModel, data: &Dataset) -> Result<(), TrainError> {
    if model.num_classes() != data.num_classes() {
        return Err(TrainError::Invalid(format!(
            "model has {} outputs but the dataset has {} classes",
            model.num_classes(),
            data.num_classes()
        )));
    }
    Ok(())
}
