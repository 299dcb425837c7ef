//! A small evidential multilayer perceptron and its SGD trainer.
//!
//! Hidden layers use ReLU; the output layer produces logits `z` and the
//! Dirichlet parameters are `α = exp(clamp(z, −30, 30))`. Backpropagation is
//! written out by hand: `∂L/∂z_c = α_c · ∂L/∂α_c` inside the clamp range and
//! zero outside it.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::evidence::DirichletPrediction;
use crate::loss::{edl_gradient, edl_loss, ug_gradient, ug_loss, LossConfig, OneHotLabel, Reduction};
use crate::pool::{Provenance, SamplePool};

pub const LOGIT_CLAMP: f64 = 30.0;

/// Dirichlet parameters from raw logits.
pub fn alpha_from_logits(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

fn layout(sizes: &[usize]) -> (Vec<LayerSpan>, usize) {
    let mut spans = Vec::with_capacity(sizes.len().saturating_sub(1));
    let mut offset = 0;
    for w in sizes.windows(2) {
        let (inputs, outputs) = (w[0], w[1]);
        spans.push(LayerSpan {
            inputs,
            outputs,
            weights: offset,
            bias: offset + inputs * outputs,
        });
        offset += inputs * outputs + outputs;
    }
    (spans, offset)
}

#[derive(Debug, Deserialize)]
struct RawMlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Fully connected network `input → hidden… → classes`. Parameters are kept
/// in one flat vector, layer by layer, each as a row-major weight matrix
/// (`outputs × inputs`) followed by the bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct EvidentialMlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    #[serde(skip)]
    spans: Vec<LayerSpan>,
}

impl PartialEq for EvidentialMlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes && self.params == other.params
    }
}

impl TryFrom<RawMlp> for EvidentialMlp {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        Self::from_parameters(raw.layer_sizes, raw.params)
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(vec![format!(
            "layer sizes {sizes:?} must have at least an input and an output layer, all non-zero"
        )]));
    }
    if *sizes.last().unwrap() < 2 {
        return Err(Error::Config(vec!["the output layer needs at least 2 classes".into()]));
    }
    Ok(())
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input followed by each hidden layer's post-ReLU output.
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
    alpha: Vec<f64>,
}

impl ForwardTrace {
    pub fn prediction(&self) -> DirichletPrediction {
        DirichletPrediction::new(self.alpha.clone()).expect("exp of a clamped logit is positive")
    }
}

impl EvidentialMlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes)?;
        for span in model.spans.clone() {
            let limit = (6.0 / (span.inputs + span.outputs) as f64).sqrt();
            for w in &mut model.params[span.weights..span.bias] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let (spans, n) = layout(layer_sizes);
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; n],
            spans,
        })
    }

    pub fn from_parameters(layer_sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let (spans, n) = layout(&layer_sizes);
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        Ok(Self {
            layer_sizes,
            params,
            spans,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut activations = vec![input.to_vec()];
        let last = self.spans.len() - 1;
        let mut logits = Vec::new();
        for (l, span) in self.spans.iter().enumerate() {
            let x = activations.last().unwrap();
            let mut out = self.params[span.bias..span.bias + span.outputs].to_vec();
            for (o, v) in out.iter_mut().enumerate() {
                let row = &self.params[span.weights + o * span.inputs..][..span.inputs];
                *v += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            }
            if l == last {
                logits = out;
            } else {
                for v in &mut out {
                    *v = v.max(0.0);
                }
                activations.push(out);
            }
        }
        let alpha = alpha_from_logits(&logits);
        Ok(ForwardTrace {
            activations,
            logits,
            alpha,
        })
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.logits)
    }

    pub fn forward(&self, input: &[f64]) -> Result<DirichletPrediction> {
        Ok(self.forward_trace(input)?.prediction())
    }

    /// Forward passes over many inputs, in parallel, results in input order.
    pub fn forward_many<'a, I>(&self, inputs: I) -> Result<Vec<DirichletPrediction>>
    where
        I: IntoParallelIterator<Item = &'a [f64]>,
        I::Iter: IndexedParallelIterator,
    {
        inputs.into_par_iter().map(|x| self.forward(x)).collect()
    }

    /// Adds `scale · ∂L/∂θ` into `grad`, given `∂L/∂α` for the traced input.
    pub fn backprop(&self, trace: &ForwardTrace, dl_dalpha: &[f64], scale: f64, grad: &mut [f64]) {
        let mut delta: Vec<f64> = trace
            .logits
            .iter()
            .zip(&trace.alpha)
            .zip(dl_dalpha)
            .map(|((z, a), g)| if z.abs() < LOGIT_CLAMP { scale * a * g } else { 0.0 })
            .collect();
        for l in (0..self.spans.len()).rev() {
            let span = self.spans[l];
            let x = &trace.activations[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[span.weights + o * span.inputs..][..span.inputs];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[span.bias + o] += d;
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; span.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &self.params[span.weights + o * span.inputs..][..span.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU mask from the layer's own output
            for (p, a) in prev.iter_mut().zip(x) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], learning_rate: f64) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.velocity.len() {
            return Err(Error::DimensionMismatch {
                expected: self.velocity.len(),
                actual: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "parameter {i} has gradient {}",
                grad[i]
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= learning_rate * *v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr₀ · (1 + γ·p)^(−β)` for training progress `p ∈ [0, 1]`.
    InverseDecay { gamma: f64, beta: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, progress: f64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::InverseDecay { gamma, beta } => {
                base * (1.0 + gamma * progress.clamp(0.0, 1.0)).powf(-beta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_schedule: LrSchedule::InverseDecay {
                gamma: 10.0,
                beta: 0.75,
            },
            seed: 0,
            hidden_layers: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("train.epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bad.push("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push("train.momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push("train.weight_decay must be >= 0".into());
        }
        if let LrSchedule::InverseDecay { gamma, beta } = self.lr_schedule {
            if !(gamma.is_finite() && gamma >= 0.0 && beta.is_finite() && beta >= 0.0) {
                bad.push("train.lr_schedule gamma and beta must be >= 0".into());
            }
        }
        if self.hidden_layers.contains(&0) {
            bad.push("train.hidden_layers entries must be positive".into());
        }
        bad
    }

    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden_layers);
        sizes.push(num_classes);
        sizes
    }
}

/// A labeled input with its weight in the supervised term.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedExample<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub supervised_loss: f64,
    pub ug_loss: f64,
    pub gradient: Vec<f64>,
}

impl BatchGradient {
    pub fn total_loss(&self) -> f64 {
        self.supervised_loss + self.ug_loss
    }
}

/// Loss of one minibatch and its gradient w.r.t. every model parameter.
pub fn batch_gradient(
    model: &EvidentialMlp,
    supervised: &[SupervisedExample<'_>],
    unlabeled: &[&[f64]],
    loss_cfg: &LossConfig,
) -> Result<BatchGradient> {
    let c = model.num_classes();
    let mut gradient = vec![0.0; model.parameters().len()];
    let (sup_scale, unl_scale) = match loss_cfg.reduction {
        Reduction::Sum => (1.0, 1.0),
        Reduction::Mean => (
            1.0 / supervised.len().max(1) as f64,
            1.0 / unlabeled.len().max(1) as f64,
        ),
    };
    let mut supervised_loss = 0.0;
    for ex in supervised {
        let trace = model.forward_trace(ex.features)?;
        let pred = trace.prediction();
        let label = OneHotLabel::new(ex.label, c)?;
        supervised_loss += ex.weight * edl_loss(&pred, &label, loss_cfg)?;
        let g = edl_gradient(&pred, &label, loss_cfg)?;
        model.backprop(&trace, &g, sup_scale * ex.weight, &mut gradient);
    }
    let mut guidance = 0.0;
    if loss_cfg.guidance_enabled() {
        for x in unlabeled {
            let trace = model.forward_trace(x)?;
            let pred = trace.prediction();
            guidance += ug_loss(&pred, loss_cfg);
            let g = ug_gradient(&pred, loss_cfg);
            model.backprop(&trace, &g, unl_scale, &mut gradient);
        }
    }
    Ok(BatchGradient {
        supervised_loss: sup_scale * supervised_loss,
        ug_loss: unl_scale * guidance,
        gradient,
    })
}

/// Computes the batch gradient and applies one optimizer step.
pub fn backward_and_step(
    model: &mut EvidentialMlp,
    optimizer: &mut Sgd,
    supervised: &[SupervisedExample<'_>],
    unlabeled: &[&[f64]],
    loss_cfg: &LossConfig,
    learning_rate: f64,
) -> Result<BatchGradient> {
    let batch = batch_gradient(model, supervised, unlabeled, loss_cfg)?;
    optimizer.step(model.parameters_mut(), &batch.gradient, learning_rate)?;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean over steps of the supervised minibatch loss.
    pub supervised_loss: f64,
    /// Mean over steps of the guidance minibatch loss.
    pub ug_loss: f64,
}

pub fn write_loss_curve<W: Write>(writer: W, losses: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "supervised_loss", "ug_loss"])?;
    for l in losses {
        w.serialize((l.epoch, l.supervised_loss, l.ug_loss))?;
    }
    w.flush()?;
    Ok(())
}

/// Stateful epoch-by-epoch trainer. Supervised batches come from the source
/// set plus the labeled target set; each step also draws one batch from the
/// unlabeled target set when guidance is enabled. Shuffling uses separate
/// random streams for the two kinds of batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: EvidentialMlp,
    optimizer: Sgd,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    supervised_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: EvidentialMlp, cfg: TrainConfig, loss_cfg: LossConfig) -> Result<Self> {
        let mut bad = cfg.invalid_fields();
        bad.extend(loss_cfg.invalid_fields());
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut supervised_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        supervised_rng.set_stream(10);
        let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        unlabeled_rng.set_stream(11);
        Ok(Self {
            optimizer: Sgd::new(model.parameters().len(), cfg.momentum, cfg.weight_decay),
            model,
            cfg,
            loss_cfg,
            supervised_rng,
            unlabeled_rng,
            epochs_done: 0,
        })
    }

    /// Model with Glorot initialisation drawn from the config seed.
    pub fn init_model(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<EvidentialMlp> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(12);
        EvidentialMlp::new(&cfg.layer_sizes(input_dim, num_classes), &mut rng)
    }

    pub fn model(&self) -> &EvidentialMlp {
        &self.model
    }

    pub fn into_model(self) -> EvidentialMlp {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }

    pub fn run_epoch(&mut self, pool: &SamplePool) -> Result<EpochLoss> {
        let pseudo_weight = self.loss_cfg.pseudo_label_weight;
        let mut supervised: Vec<SupervisedExample<'_>> = pool
            .source()
            .iter()
            .map(|s| SupervisedExample {
                features: &s.features,
                label: s.label,
                weight: 1.0,
            })
            .collect();
        supervised.extend(pool.target_labeled().iter().map(|s| SupervisedExample {
            features: &s.features,
            label: s.label,
            weight: match s.provenance {
                Provenance::Oracle => 1.0,
                Provenance::Pseudo => pseudo_weight,
            },
        }));
        if supervised.is_empty() {
            return Err(Error::Empty("supervised training set"));
        }
        supervised.shuffle(&mut self.supervised_rng);

        let use_guidance = self.loss_cfg.guidance_enabled() && !pool.target_unlabeled().is_empty();
        let mut unlabeled: Vec<&[f64]> = Vec::new();
        if use_guidance {
            unlabeled = pool.target_unlabeled().iter().map(|s| s.features.as_slice()).collect();
            unlabeled.shuffle(&mut self.unlabeled_rng);
        }

        let bs = self.cfg.batch_size;
        let steps = supervised.len().div_ceil(bs);
        let mut sup_total = 0.0;
        let mut ug_total = 0.0;
        let mut cursor = 0;
        let mut unl_batch: Vec<&[f64]> = Vec::with_capacity(bs);
        for (step, sup_batch) in supervised.chunks(bs).enumerate() {
            unl_batch.clear();
            if use_guidance {
                for _ in 0..bs.min(unlabeled.len()) {
                    unl_batch.push(unlabeled[cursor]);
                    cursor = (cursor + 1) % unlabeled.len();
                }
            }
            let progress =
                (self.epochs_done as f64 + step as f64 / steps as f64) / self.cfg.epochs as f64;
            let lr = self.cfg.lr_schedule.rate(self.cfg.learning_rate, progress);
            let batch = backward_and_step(
                &mut self.model,
                &mut self.optimizer,
                sup_batch,
                &unl_batch,
                &self.loss_cfg,
                lr,
            )?;
            sup_total += batch.supervised_loss;
            ug_total += batch.ug_loss;
        }
        let loss = EpochLoss {
            epoch: self.epochs_done,
            supervised_loss: sup_total / steps as f64,
            ug_loss: ug_total / steps as f64,
        };
        self.epochs_done += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EvidentialMlp,
    pub losses: Vec<EpochLoss>,
}

/// Runs `cfg.epochs` epochs on the pool.
pub fn train(
    model: EvidentialMlp,
    pool: &SamplePool,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    if pool.source().is_empty() && pool.target_labeled().is_empty() {
        return Err(Error::Empty("supervised training set"));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            losses: Vec::new(),
        });
    }
    let mut trainer = Trainer::new(model, cfg.clone(), loss_cfg.clone())?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(trainer.run_epoch(pool)?);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        losses,
    })
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &EvidentialMlp, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let preds = model.forward_many(dataset.samples.par_iter().map(|s| s.features.as_slice()))?;
    let correct = preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| p.predict_class() == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
