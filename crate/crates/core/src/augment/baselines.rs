use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adversarial_core, select_hard, select_random, synthesize_at, AdvConfig, SourceSelection, SynSet};
use crate::autodiff::AdamState;
use crate::error::{Error, Result};
use crate::harness::seeds;
use crate::models::{diverged, train_epoch, ClassifierModel, ConditionalGenerator, Example};
use crate::synthworld::{conventional_augment, AugOp, SynthSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Naive,
    Rsrs,
    Hsrs,
    Rsat,
    Jtt,
    ConvAug,
    MaxUp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::Naive,
        BaselineKind::Rsrs,
        BaselineKind::Hsrs,
        BaselineKind::Rsat,
        BaselineKind::Jtt,
        BaselineKind::ConvAug,
        BaselineKind::MaxUp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Naive => "Naive",
            BaselineKind::Rsrs => "RSRS",
            BaselineKind::Hsrs => "HSRS",
            BaselineKind::Rsat => "RSAT",
            BaselineKind::Jtt => "JTT",
            BaselineKind::ConvAug => "ConvAug",
            BaselineKind::MaxUp => "MaxUp",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "baseline",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineParams {
    /// Random target ages per source sample for RSRS/HSRS.
    pub n_synthesis: usize,
    /// Copies of each misclassified sample in the JTT upsampled set.
    pub lambda_up: usize,
    pub jtt_lr: f64,
    pub maxup_batch: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            n_synthesis: 5,
            lambda_up: 2,
            jtt_lr: 1e-5,
            maxup_batch: 4,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_synthesis == 0 || self.lambda_up == 0 || self.maxup_batch == 0 || !(self.jtt_lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "baseline parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kind: BaselineKind,
    pub synthesized: usize,
    pub epoch_losses: Vec<f64>,
    /// JTT only: size of the misclassified set.
    pub error_set: Option<usize>,
}

/// Trains `model` with baseline `kind` on `pool`, using the epoch count `k`,
/// `N`, bounds, optimizer and seed of `adv`.
pub fn run_baseline(
    kind: BaselineKind,
    model: &mut ClassifierModel,
    gen: &dyn ConditionalGenerator,
    pool: &[SynthSample],
    adv: &AdvConfig,
    params: &BaselineParams,
) -> Result<BaselineReport> {
    adv.validate()?;
    params.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let n = adv.n_hard.min(pool.len());
    let mut base_rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(adv.seed, seeds::BASELINE));
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds::derive_seed(adv.seed, seeds::SHUFFLE));
    let mut report = BaselineReport {
        kind,
        synthesized: 0,
        epoch_losses: Vec::with_capacity(adv.k),
        error_set: None,
    };
    let real: Vec<Example> = pool.iter().map(Example::from).collect();
    let mut adam = AdamState::new(adv.train.adam());
    let batch = adv.train.batch_size;
    match kind {
        // The pretrained classifier as is.
        BaselineKind::Naive => {}
        BaselineKind::Rsrs | BaselineKind::Hsrs => {
            let sources = if kind == BaselineKind::Hsrs && adv.per_class {
                super::select_hard_per_class(model, pool, n)?
            } else if kind == BaselineKind::Hsrs {
                select_hard(model, pool, n)?
            } else {
                select_random(pool.len(), n, &mut base_rng)?
            };
            let syn = random_synthesis(pool, &sources, params.n_synthesis, adv.age_bounds, gen, &mut base_rng)?;
            report.synthesized = syn.len();
            let examples: Vec<Example> = real.iter().copied().chain(syn.examples()).collect();
            for _ in 0..adv.k {
                report
                    .epoch_losses
                    .push(train_epoch(model, &mut adam, &examples, batch, &mut shuffle)?);
            }
        }
        BaselineKind::Rsat => {
            let h = adversarial_core(model, gen, pool, None, adv, SourceSelection::Random)?;
            report.synthesized = h.synthesized_total;
            report.epoch_losses = h.iterations.iter().map(|r| r.train_loss).collect();
        }
        BaselineKind::Jtt => {
            let probs = model.predict_samples(pool)?;
            let errors: Vec<usize> = probs
                .iter()
                .zip(pool)
                .enumerate()
                .filter(|(_, (&p, s))| (p >= 0.5) != (s.label() == 1.0))
                .map(|(i, _)| i)
                .collect();
            report.error_set = Some(errors.len());
            let mut upsampled = real.clone();
            for _ in 1..params.lambda_up {
                upsampled.extend(errors.iter().map(|&i| real[i]));
            }
            let mut adam = AdamState::new(crate::autodiff::AdamConfig {
                lr: params.jtt_lr,
                ..adv.train.adam()
            });
            for _ in 0..adv.k {
                report
                    .epoch_losses
                    .push(train_epoch(model, &mut adam, &upsampled, batch, &mut shuffle)?);
            }
        }
        BaselineKind::ConvAug => {
            let size = image_size(pool)?;
            for _ in 0..adv.k {
                let augmented = pool
                    .iter()
                    .map(|s| random_conventional(&s.image, size, &mut base_rng))
                    .collect::<Result<Vec<_>>>()?;
                let examples: Vec<Example> = augmented
                    .iter()
                    .zip(pool)
                    .map(|(img, s)| Example {
                        image: img,
                        label: s.label(),
                    })
                    .collect();
                report
                    .epoch_losses
                    .push(train_epoch(model, &mut adam, &examples, batch, &mut shuffle)?);
            }
        }
        BaselineKind::MaxUp => {
            let size = image_size(pool)?;
            for _ in 0..adv.k {
                report.epoch_losses.push(maxup_epoch(
                    model,
                    &mut adam,
                    pool,
                    size,
                    params.maxup_batch,
                    batch,
                    &mut base_rng,
                    &mut shuffle,
                )?);
            }
        }
    }
    Ok(report)
}

fn image_size(pool: &[SynthSample]) -> Result<usize> {
    let p = pool[0].image.len();
    let size = (p as f64).sqrt().round() as usize;
    if size * size != p {
        return Err(Error::InvalidConfig(format!("image of {p} pixels is not square")));
    }
    Ok(size)
}

/// Each source rendered at `per_source` target ages drawn uniformly within
/// `bounds`.
pub fn random_synthesis(
    pool: &[SynthSample],
    sources: &[usize],
    per_source: usize,
    bounds: [f64; 2],
    gen: &dyn ConditionalGenerator,
    rng: &mut ChaCha8Rng,
) -> Result<SynSet> {
    let mut indices = Vec::with_capacity(sources.len() * per_source);
    let mut ages = Vec::with_capacity(sources.len() * per_source);
    for &i in sources {
        for _ in 0..per_source {
            indices.push(i);
            ages.push(rng.gen_range(bounds[0]..=bounds[1]));
        }
    }
    synthesize_at(pool, &indices, &ages, gen)
}

/// One conventional augmentation with a random op at the full magnitude
/// (flip with probability one half).
pub fn random_conventional(image: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let op = *AugOp::ALL.choose(rng).expect("non-empty");
    let magnitude = match op {
        AugOp::Flip => 0.5,
        other => other.max_magnitude(),
    };
    conventional_augment(image, size, op, magnitude, rng.gen())
}

/// Per sample, keeps the augmentation with the highest current loss, then
/// takes an ordinary step on the kept batch.
#[allow(clippy::too_many_arguments)]
fn maxup_epoch(
    model: &mut ClassifierModel,
    adam: &mut AdamState,
    pool: &[SynthSample],
    size: usize,
    m: usize,
    batch: usize,
    aug_rng: &mut ChaCha8Rng,
    shuffle: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(shuffle);
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        let mut kept = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &pool[i];
            let candidates = (0..m)
                .map(|_| random_conventional(&s.image, size, aug_rng))
                .collect::<Result<Vec<_>>>()?;
            kept.push(worst_candidate(model, candidates, s.label())?);
        }
        let examples: Vec<Example> = kept
            .iter()
            .zip(chunk)
            .map(|(img, &i)| Example {
                image: img,
                label: pool[i].label(),
            })
            .collect();
        let step = adam.steps() as usize;
        let (loss, grads) = model
            .loss_and_grads(&examples)
            .map_err(|e| diverged("maxup", step, e))?;
        adam.step(&mut model.net.params_mut(), &grads)?;
        total += loss * examples.len() as f64;
    }
    Ok(total / pool.len() as f64)
}

/// The candidate with the largest loss; the first one on ties.
pub fn worst_candidate(model: &ClassifierModel, candidates: Vec<Vec<f64>>, label: f64) -> Result<Vec<f64>> {
    let examples: Vec<Example> = candidates.iter().map(|c| Example { image: c, label }).collect();
    let losses = model.losses(&examples)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l > losses[best] {
            best = i;
        }
    }
    Ok(candidates.into_iter().nth(best).expect("non-empty candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{pretrain_classifier, AnalyticGenerator, ClassifierConfig, TrainConfig};
    use crate::synthworld::{sample_dataset, DatasetSpec, RenderConfig};

    fn setup() -> (AnalyticGenerator, Vec<SynthSample>, ClassifierModel, AdvConfig) {
        let render = RenderConfig {
            size: 8,
            ad_acceleration: 30.0,
            ..Default::default()
        };
        let train = sample_dataset(&DatasetSpec::balanced(15, 0, 0, 3), &render)
            .unwrap()
            .train;
        let mut m = ClassifierModel::new(64, &ClassifierConfig::default(), 1).unwrap();
        let tc = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            ..Default::default()
        };
        pretrain_classifier(&mut m, &train, &tc).unwrap();
        let adv = AdvConfig {
            n_hard: 20,
            k: 2,
            train: tc,
            ..Default::default()
        };
        (AnalyticGenerator { render }, train, m, adv)
    }

    #[test]
    fn every_kind_runs_and_budgets_match() {
        let (gen, train, m, adv) = setup();
        for kind in BaselineKind::ALL {
            let mut c = m.clone();
            let r = run_baseline(kind, &mut c, &gen, &train, &adv, &BaselineParams::default()).unwrap();
            let expected = match kind {
                BaselineKind::Rsrs | BaselineKind::Hsrs => 20 * 5,
                BaselineKind::Rsat => 2 * 20,
                _ => 0,
            };
            assert_eq!(r.synthesized, expected, "{kind:?}");
            if kind == BaselineKind::Naive {
                assert_eq!(c, m);
                continue;
            }
            assert_eq!(r.epoch_losses.len(), 2);
            assert_ne!(c, m, "{kind:?} did not train");
        }
    }

    #[test]
    fn names_parse() {
        for kind in BaselineKind::ALL {
            assert_eq!(kind.name().parse::<BaselineKind>().unwrap(), kind);
        }
        assert!(matches!("mixup".parse::<BaselineKind>(), Err(Error::Unknown { .. })));
    }

    #[test]
    fn jtt_without_errors_is_plain_training() {
        let (gen, train, m, adv) = setup();
        // Keep only samples the classifier already gets right.
        let probs = m.predict_samples(&train).unwrap();
        let right: Vec<SynthSample> = train
            .iter()
            .zip(&probs)
            .filter(|(s, &p)| (p >= 0.5) == (s.label() == 1.0))
            .map(|(s, _)| s.clone())
            .collect();
        let params = BaselineParams::default();
        let mut a = m.clone();
        let r = run_baseline(BaselineKind::Jtt, &mut a, &gen, &right, &adv, &params).unwrap();
        assert_eq!(r.error_set, Some(0));
        let mut b = m.clone();
        let mut adam = AdamState::new(crate::autodiff::AdamConfig {
            lr: params.jtt_lr,
            ..adv.train.adam()
        });
        let mut shuffle = ChaCha8Rng::seed_from_u64(seeds::derive_seed(adv.seed, seeds::SHUFFLE));
        let ex: Vec<Example> = right.iter().map(Example::from).collect();
        for _ in 0..adv.k {
            train_epoch(&mut b, &mut adam, &ex, adv.train.batch_size, &mut shuffle).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn maxup_with_identical_candidates_picks_the_first() {
        let (_, train, m, _) = setup();
        let img = train[0].image.clone();
        let picked = worst_candidate(&m, vec![img.clone(); 4], train[0].label()).unwrap();
        assert_eq!(picked, img);
    }
}
