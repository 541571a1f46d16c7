//! Classifier and neural generator built on the autodiff tape.

mod checkpoint;
mod generator;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use generator::{
    distill_generator, fidelity_mse, AnalyticGenerator, ConditionalGenerator, DistillConfig, DistillReport,
    GeneratorKind, NeuralGenerator, ProbeSet,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, matmul_raw, sigmoid, AdError, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::encoding::Diagnosis;
use crate::error::{Error, Result};
use crate::metrics::{group_metrics, AgeBins, MetricsReport};
use crate::synthworld::SynthSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    fn apply_var<'t>(self, x: Var<'t>) -> Result<Var<'t>, AdError> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => Ok(x),
        }
    }

    /// Mirrors the tape composition so values agree bit for bit.
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => sigmoid(x * 2.0) * 2.0 - 1.0,
            Activation::Identity => x,
        }
    }
}

/// Fully connected network. Weights are `(in, out)`, biases `(1, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// He-normal weights, zero biases. With `zero_last` the final layer starts
    /// at zero.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, zero_last: bool, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data = if zero_last && l == layers - 1 {
                vec![0.0; fan_in * fan_out]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect()
            };
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            hidden,
            output,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                what: "parameters",
                got: values.len(),
                expected: self.param_count(),
            });
        }
        let mut at = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Records the parameters as leaves.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Forward pass of an `(n, in)` batch using parameter leaves from
    /// [`Mlp::leaves`].
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(AdError::ShapeMismatch {
                op: "mlp input",
                lhs: shape,
                rhs: vec![0, self.input_dim()],
            }
            .into());
        }
        let ones = x.tape().leaf(Tensor::full(&[shape[0], 1], 1.0));
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            let z = h.matmul(params[2 * l])?.add(ones.matmul(params[2 * l + 1])?)?;
            let act = if l + 1 == layers { self.output } else { self.hidden };
            h = act.apply_var(z)?;
        }
        Ok(h)
    }

    /// Value-only forward pass; agrees with [`Mlp::forward`] exactly.
    pub fn forward_values(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "mlp input",
                got: x.len(),
                expected: rows * self.input_dim(),
            });
        }
        let layers = self.weights.len();
        let mut h = x.to_vec();
        for l in 0..layers {
            let (k, n) = (self.widths[l], self.widths[l + 1]);
            let mut z = matmul_raw(&h, self.weights[l].data(), rows, k, n);
            let b = self.biases[l].data();
            let act = if l + 1 == layers { self.output } else { self.hidden };
            for r in 0..rows {
                for (zi, &bi) in z[r * n..(r + 1) * n].iter_mut().zip(b) {
                    *zi = act.apply(*zi + bi);
                }
            }
            h = z;
        }
        Ok(h)
    }
}

/// Optimizer and schedule settings shared by every training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            decay: 1e-4,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "train config needs lr > 0, decay >= 0, epochs >= 1, batch >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay: self.decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub zero_last: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            zero_last: false,
        }
    }
}

/// Binary AD classifier: relu hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub net: Mlp,
}

/// One labelled image.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a [f64],
    pub label: f64,
}

impl<'a> From<&'a SynthSample> for Example<'a> {
    fn from(s: &'a SynthSample) -> Self {
        Self {
            image: &s.image,
            label: s.label(),
        }
    }
}

impl ClassifierModel {
    pub fn new(pixels: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let mut widths = vec![pixels];
        widths.extend(&cfg.hidden);
        widths.push(1);
        Ok(Self {
            net: Mlp::new(&widths, Activation::Relu, Activation::Sigmoid, cfg.zero_last, seed)?,
        })
    }

    pub fn pixels(&self) -> usize {
        self.net.input_dim()
    }

    /// Probabilities `(n, 1)` for an `(n, pixels)` batch on the tape.
    pub fn forward<'t>(&self, params: &[Var<'t>], images: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(params, images)
    }

    /// AD probability for each image.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(images.len() * self.pixels());
        for img in images {
            if img.len() != self.pixels() {
                return Err(Error::LengthMismatch {
                    what: "image",
                    got: img.len(),
                    expected: self.pixels(),
                });
            }
            flat.extend_from_slice(img);
        }
        self.net.forward_values(&flat, images.len())
    }

    pub fn predict_samples(&self, samples: &[SynthSample]) -> Result<Vec<f64>> {
        let imgs: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
        self.predict(&imgs)
    }

    /// Per-sample binary cross-entropy.
    pub fn losses(&self, examples: &[Example]) -> Result<Vec<f64>> {
        let imgs: Vec<&[f64]> = examples.iter().map(|e| e.image).collect();
        let probs = self.predict(&imgs)?;
        Ok(probs.iter().zip(examples).map(|(&p, e)| bce_term(p, e.label)).collect())
    }

    /// Mean loss and gradients for one batch.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let params = self.net.leaves(&tape);
        let mut flat = Vec::with_capacity(batch.len() * self.pixels());
        for e in batch {
            flat.extend_from_slice(e.image);
        }
        let x = tape.leaf(Tensor::matrix(batch.len(), self.pixels(), flat)?);
        let labels = Tensor::vector(batch.iter().map(|e| e.label).collect());
        let loss = self.forward(&params, x)?.bce_loss(&labels)?;
        let grads = tape.backward(loss)?;
        let g = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>, _>>()?;
        Ok((loss.item(), g))
    }
}

pub(crate) fn diverged(phase: &'static str, step: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(AdError::NonFinite { op }) => Error::Diverged {
            phase,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One shuffled pass over `examples`; returns the sample-weighted mean loss.
pub fn train_epoch(
    model: &mut ClassifierModel,
    adam: &mut AdamState,
    examples: &[Example],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<Example> = chunk.iter().map(|&i| examples[i]).collect();
        let step = adam.steps() as usize;
        let (loss, grads) = model
            .loss_and_grads(&batch)
            .map_err(|e| diverged("classifier", step, e))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "classifier",
                step,
                detail: format!("loss {loss}"),
            });
        }
        adam.step(&mut model.net.params_mut(), &grads)
            .map_err(|e| diverged("classifier", step, e.into()))?;
        total += loss * batch.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
}

/// Minimizes mean bce over `train` with a fresh Adam state.
pub fn pretrain_classifier(
    model: &mut ClassifierModel,
    train: &[SynthSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let examples: Vec<Example> = train.iter().map(Example::from).collect();
    let mut adam = AdamState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(model, &mut adam, &examples, cfg.batch_size, &mut rng)?;
        log::debug!("pretrain epoch {epoch}: loss {loss:.5}");
        epoch_losses.push(loss);
    }
    Ok(TrainHistory { epoch_losses })
}

pub fn predict_diagnoses(model: &ClassifierModel, samples: &[SynthSample]) -> Result<Vec<Diagnosis>> {
    Ok(model
        .predict_samples(samples)?
        .into_iter()
        .map(|p| if p >= 0.5 { Diagnosis::Ad } else { Diagnosis::Cn })
        .collect())
}

/// Thresholds at 0.5 and scores by group.
pub fn evaluate(model: &ClassifierModel, samples: &[SynthSample], bins: &AgeBins) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    group_metrics(&predict_diagnoses(model, samples)?, samples, bins)
}
