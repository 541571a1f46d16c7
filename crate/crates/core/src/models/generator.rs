use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{diverged, Activation, Mlp, TrainConfig};
use crate::autodiff::{AdamState, Tape, Tensor, Var};
use crate::encoding::{normalize_age, normalize_age_var, Diagnosis, EncoderParams, FourierEncoder, AGE_MAX, AGE_MIN};
use crate::error::{Error, Result};
use crate::synthworld::{
    analytic_generate, render, LatentRanges, MorphLatent, RenderConfig, SynthSample, LATENT_FEATURES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Analytic,
    Neural,
}

/// `G(x, a)`: a counterfactual of `sample` at a differentiable target age,
/// keeping the diagnosis.
pub trait ConditionalGenerator {
    fn kind(&self) -> GeneratorKind;

    fn pixels(&self) -> usize;

    /// A `(1, H*W)` row.
    fn generate<'t>(&self, sample: &SynthSample, age: Var<'t>) -> Result<Var<'t>>;

    /// An `(n, H*W)` batch, one row per `(sample, age)` pair.
    fn generate_batch<'t>(&self, tape: &'t Tape, samples: &[&SynthSample], ages: &[Var<'t>]) -> Result<Var<'t>> {
        check_batch(samples, ages)?;
        let rows = samples
            .iter()
            .zip(ages)
            .map(|(s, &a)| self.generate(s, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&rows, 0)?)
    }

    fn generate_value(&self, sample: &SynthSample, age: f64) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let row = self.generate(sample, tape.scalar(age))?;
        let out = row.value().data().to_vec();
        Ok(out)
    }

    /// Every number that determines the generator's output.
    fn fingerprint(&self) -> Vec<f64>;
}

fn check_batch(samples: &[&SynthSample], ages: &[Var<'_>]) -> Result<()> {
    if samples.len() != ages.len() {
        return Err(Error::LengthMismatch {
            what: "target ages",
            got: ages.len(),
            expected: samples.len(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty("generator batch"));
    }
    Ok(())
}

/// The renderer used directly as a generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticGenerator {
    pub render: RenderConfig,
}

impl ConditionalGenerator for AnalyticGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Analytic
    }

    fn pixels(&self) -> usize {
        self.render.pixels()
    }

    fn generate<'t>(&self, sample: &SynthSample, age: Var<'t>) -> Result<Var<'t>> {
        analytic_generate(&self.render, sample, age)
    }

    fn fingerprint(&self) -> Vec<f64> {
        let r = &self.render;
        vec![
            r.size as f64,
            r.edge_softness,
            r.ventricle_growth,
            r.cortex_thinning,
            r.cortex_thickness,
            r.ad_acceleration,
            r.noise,
        ]
    }
}

/// MLP mapping `concat(gamma(v), latent features)` to an image with a tanh
/// output.
#[derive(Debug, Clone)]
pub struct NeuralGenerator {
    pub encoder: FourierEncoder,
    pub net: Mlp,
    pub size: usize,
}

impl NeuralGenerator {
    pub fn new(encoder: FourierEncoder, hidden: &[usize], size: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![encoder.output_dim() + LATENT_FEATURES];
        widths.extend(hidden);
        widths.push(size * size);
        Ok(Self {
            net: Mlp::new(&widths, Activation::Relu, Activation::Tanh, false, seed)?,
            encoder,
            size,
        })
    }

    pub fn encoder_params(&self) -> EncoderParams {
        self.encoder.params()
    }

    /// Forward pass with explicit weight leaves so the weights can be trained.
    /// `v` is `(n, 2)` normalized conditions.
    pub fn forward_with<'t>(&self, params: &[Var<'t>], v: Var<'t>, latents: &[MorphLatent]) -> Result<Var<'t>> {
        let tape = v.tape();
        let code = self.encoder.encode(v)?;
        let feats: Vec<[f64; LATENT_FEATURES]> = latents.iter().map(MorphLatent::features).collect();
        let feats = tape.leaf(Tensor::from_rows(&feats)?);
        let x = tape.concat(&[code, feats], 1)?;
        self.net.forward(params, x)
    }

    /// Normalized conditions for `(age, diagnosis)` pairs as an `(n, 2)` leaf.
    pub fn conditions<'t>(tape: &'t Tape, ages: &[f64], diagnoses: &[Diagnosis]) -> Result<Var<'t>> {
        let rows: Vec<[f64; 2]> = ages
            .iter()
            .zip(diagnoses)
            .map(|(&a, d)| [normalize_age(a), d.coordinate()])
            .collect();
        Ok(tape.leaf(Tensor::from_rows(&rows)?))
    }

    /// Differentiable conditions built from age variables.
    pub fn condition_vars<'t>(tape: &'t Tape, ages: &[Var<'t>], diagnoses: &[Diagnosis]) -> Result<Var<'t>> {
        let rows = ages
            .iter()
            .zip(diagnoses)
            .map(|(&a, d)| {
                let v0 = normalize_age_var(a)?.reshape(vec![1, 1])?;
                let v1 = tape.leaf(Tensor::matrix(1, 1, vec![d.coordinate()])?);
                Ok(tape.concat(&[v0, v1], 1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&rows, 0)?)
    }

    /// Value-only output for plain `(latent, age, diagnosis)` triples.
    pub fn generate_values(&self, latents: &[MorphLatent], ages: &[f64], diagnoses: &[Diagnosis]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.net.leaves(&tape);
        let v = Self::conditions(&tape, ages, diagnoses)?;
        let out = self.forward_with(&params, v, latents)?;
        let data = out.value().data().to_vec();
        Ok(data)
    }
}

impl ConditionalGenerator for NeuralGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Neural
    }

    fn pixels(&self) -> usize {
        self.size * self.size
    }

    fn generate<'t>(&self, sample: &SynthSample, age: Var<'t>) -> Result<Var<'t>> {
        self.generate_batch(age.tape(), &[sample], &[age])
    }

    fn generate_batch<'t>(&self, tape: &'t Tape, samples: &[&SynthSample], ages: &[Var<'t>]) -> Result<Var<'t>> {
        check_batch(samples, ages)?;
        let diagnoses: Vec<Diagnosis> = samples.iter().map(|s| s.diagnosis).collect();
        let latents: Vec<MorphLatent> = samples.iter().map(|s| s.latent).collect();
        let v = Self::condition_vars(tape, ages, &diagnoses)?;
        let params: Vec<Var> = self.net.leaves(tape);
        self.forward_with(&params, v, &latents)
    }

    fn fingerprint(&self) -> Vec<f64> {
        let mut out = self.net.flat();
        out.extend(self.encoder.basis().data());
        out.extend(self.encoder.coeffs());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub train: TrainConfig,
    pub latents: LatentRanges,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            train_samples: 4000,
            val_samples: 400,
            train: TrainConfig {
                lr: 1e-3,
                decay: 1e-4,
                epochs: 10,
                batch_size: 32,
                seed: 0,
            },
            latents: LatentRanges::default(),
        }
    }
}

/// A fixed set of `(latent, age, diagnosis)` draws with their analytic
/// renders, used as regression targets and as the fidelity oracle.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub latents: Vec<MorphLatent>,
    pub ages: Vec<f64>,
    pub diagnoses: Vec<Diagnosis>,
    pub targets: Vec<f64>,
}

impl ProbeSet {
    pub fn draw(render_cfg: &RenderConfig, ranges: &LatentRanges, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ProbeSet {
            latents: Vec::with_capacity(n),
            ages: Vec::with_capacity(n),
            diagnoses: Vec::with_capacity(n),
            targets: Vec::with_capacity(n * render_cfg.pixels()),
        };
        for _ in 0..n {
            let latent = ranges.sample(&mut rng);
            let age = rng.gen_range(AGE_MIN..=AGE_MAX);
            let diagnosis = if rng.gen_bool(0.5) {
                Diagnosis::Ad
            } else {
                Diagnosis::Cn
            };
            set.targets.extend(render(render_cfg, &latent, age, diagnosis)?.data());
            set.latents.push(latent);
            set.ages.push(age);
            set.diagnoses.push(diagnosis);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }
}

/// Mean squared error between the neural generator and the analytic render.
pub fn fidelity_mse(gen: &NeuralGenerator, probes: &ProbeSet) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let mut sse = 0.0;
    let p = gen.pixels();
    for start in (0..probes.len()).step_by(256) {
        let end = (start + 256).min(probes.len());
        let out = gen.generate_values(
            &probes.latents[start..end],
            &probes.ages[start..end],
            &probes.diagnoses[start..end],
        )?;
        sse += out
            .iter()
            .zip(&probes.targets[start * p..end * p])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(sse / (probes.len() * p) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    pub epoch_losses: Vec<f64>,
}

/// Regresses `gen` onto the analytic renderer by mean squared error.
pub fn distill_generator(
    gen: &mut NeuralGenerator,
    render_cfg: &RenderConfig,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    TrainConfig {
        epochs: cfg.train.epochs.max(1),
        ..cfg.train
    }
    .validate()?;
    if cfg.train_samples == 0 || cfg.val_samples == 0 {
        return Err(Error::Empty("distillation set"));
    }
    if render_cfg.size != gen.size {
        return Err(Error::LengthMismatch {
            what: "generator size",
            got: gen.size,
            expected: render_cfg.size,
        });
    }
    let seed = cfg.train.seed;
    let train = ProbeSet::draw(render_cfg, &cfg.latents, cfg.train_samples, seed)?;
    let val = ProbeSet::draw(render_cfg, &cfg.latents, cfg.val_samples, seed ^ 0x5eed_0f_7a1)?;
    let initial_val_mse = fidelity_mse(gen, &val)?;
    let mut adam = AdamState::new(cfg.train.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let p = gen.pixels();
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.train.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let step = adam.steps() as usize;
            let tape = Tape::new();
            let params = gen.net.leaves(&tape);
            let latents: Vec<MorphLatent> = chunk.iter().map(|&i| train.latents[i]).collect();
            let ages: Vec<f64> = chunk.iter().map(|&i| train.ages[i]).collect();
            let diags: Vec<Diagnosis> = chunk.iter().map(|&i| train.diagnoses[i]).collect();
            let target: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| train.targets[i * p..(i + 1) * p].iter().copied())
                .collect();
            let v = NeuralGenerator::conditions(&tape, &ages, &diags)?;
            let loss = (|| -> Result<Var> {
                let out = gen.forward_with(&params, v, &latents)?;
                let diff = out.sub(tape.leaf(Tensor::matrix(chunk.len(), p, target)?))?;
                Ok(diff.mul(diff)?.mean()?)
            })()
            .map_err(|e| diverged("distillation", step, e))?;
            let grads = tape.backward(loss)?;
            let g = params.iter().map(|&q| grads.wrt(q)).collect::<Result<Vec<_>, _>>()?;
            adam.step(&mut gen.net.params_mut(), &g)?;
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / train.len() as f64;
        log::debug!("distill epoch loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(DistillReport {
        initial_val_mse,
        final_val_mse: fidelity_mse(gen, &val)?,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::SynthSample;

    fn small_gen(seed: u64) -> NeuralGenerator {
        let enc = FourierEncoder::new(16, 2, 10.0, 3).unwrap();
        NeuralGenerator::new(enc, &[12], 6, seed).unwrap()
    }

    fn sample(render: &RenderConfig, age: f64) -> SynthSample {
        let latent = LatentRanges::default().sample(&mut ChaCha8Rng::seed_from_u64(4));
        SynthSample::new(0, render, latent, age, Diagnosis::Cn).unwrap()
    }

    #[test]
    fn output_is_bounded_and_batch_matches_single() {
        let render = RenderConfig {
            size: 6,
            ..Default::default()
        };
        let g = small_gen(1);
        let s = sample(&render, 70.0);
        let tape = Tape::new();
        let ages = [tape.scalar(65.0), tape.scalar(80.0)];
        let batch = g.generate_batch(&tape, &[&s, &s], &ages).unwrap();
        let batch = batch.value().clone();
        assert_eq!(batch.shape(), &[2, 36]);
        assert!(batch.data().iter().all(|v| v.abs() < 1.0));
        let single = g.generate_value(&s, 80.0).unwrap();
        assert_eq!(batch.row(1), single.as_slice());
    }

    #[test]
    fn age_gradient_flows_through_encoding() {
        let render = RenderConfig {
            size: 6,
            ..Default::default()
        };
        let g = small_gen(2);
        let s = sample(&render, 70.0);
        let f = |a: f64| -> f64 { g.generate_value(&s, a).unwrap().iter().map(|v| v * v).sum() };
        let tape = Tape::new();
        let a = tape.scalar(71.3);
        let out = g.generate(&s, a).unwrap();
        let loss = out.mul(out).unwrap().sum().unwrap();
        let grad = tape.backward(loss).unwrap().wrt(a).unwrap().item();
        let h = 1e-5;
        let numeric = (f(71.3 + h) - f(71.3 - h)) / (2.0 * h);
        assert!(grad != 0.0);
        assert!(
            (grad - numeric).abs() / grad.abs().max(numeric.abs()) < 1e-4,
            "{grad} vs {numeric}"
        );
    }

    #[test]
    fn zero_epochs_is_the_untrained_baseline() {
        let render = RenderConfig {
            size: 6,
            ..Default::default()
        };
        let mut g = small_gen(3);
        let cfg = DistillConfig {
            train_samples: 20,
            val_samples: 20,
            ..Default::default()
        };
        let mut zero = cfg.clone();
        zero.train.epochs = 0;
        let untouched = distill_generator(&mut g, &render, &zero).unwrap();
        assert_eq!(untouched.final_val_mse, untouched.initial_val_mse);
        assert!(
            untouched.initial_val_mse > 0.05,
            "untrained mse {}",
            untouched.initial_val_mse
        );
        let r = distill_generator(&mut g, &render, &cfg).unwrap();
        assert_eq!(r.initial_val_mse, untouched.initial_val_mse);
        assert!(r.final_val_mse < r.initial_val_mse);
    }
}
