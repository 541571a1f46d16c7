//! Training the generator itself against the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_target_ages, select_hard, update_classifier, AdvConfig, SynSet};
use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::harness::seeds;
use crate::models::{fidelity_mse, ClassifierModel, NeuralGenerator, ProbeSet, TrainConfig};
use crate::synthworld::{MorphLatent, SynthSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GvcConfig {
    /// Generator ascent steps between classifier epochs.
    pub gen_steps: usize,
    pub gen_lr: f64,
}

impl Default for GvcConfig {
    fn default() -> Self {
        Self {
            gen_steps: 5,
            gen_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvcReport {
    /// Generator-to-renderer MSE; entry 0 is before any update.
    pub fidelity: Vec<f64>,
    pub generator_losses: Vec<f64>,
    /// Set when an update produced non-finite values and the phase stopped.
    pub diverged: Option<String>,
}

/// Alternates `k = adv.k` rounds of (generator weights ascend the classifier
/// loss on the hard set, classifier trains one epoch on train plus the
/// generator's output). Target ages stay at their initial values.
pub fn train_generator_adversarial(
    gen: &mut NeuralGenerator,
    model: &mut ClassifierModel,
    train: &[SynthSample],
    probes: &ProbeSet,
    adv: &AdvConfig,
    cfg: &GvcConfig,
) -> Result<GvcReport> {
    adv.validate()?;
    TrainConfig {
        lr: cfg.gen_lr,
        ..adv.train
    }
    .validate()?;
    let n = adv.n_hard.min(train.len());
    let indices = select_hard(model, train, n)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(adv.seed, seeds::INIT));
    let state = init_target_ages(train, &indices, adv.init_policy, adv.age_bounds, &mut init_rng);
    let latents: Vec<MorphLatent> = indices.iter().map(|&i| train[i].latent).collect();
    let labels = Tensor::vector(state.labels.iter().map(|d| d.label()).collect());

    let mut gen_adam = AdamState::new(
        TrainConfig {
            lr: cfg.gen_lr,
            ..adv.train
        }
        .adam(),
    );
    let mut cls_adam = AdamState::new(adv.train.adam());
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds::derive_seed(adv.seed, seeds::SHUFFLE));
    let mut report = GvcReport {
        fidelity: vec![fidelity_mse(gen, probes)?],
        generator_losses: Vec::new(),
        diverged: None,
    };
    'outer: for _ in 0..adv.k {
        for _ in 0..cfg.gen_steps {
            let tape = crate::autodiff::Tape::new();
            let params = gen.net.leaves(&tape);
            let step = (|| -> Result<(f64, Vec<Tensor>)> {
                let v = NeuralGenerator::conditions(&tape, &state.ages, &state.labels)?;
                let images = gen.forward_with(&params, v, &latents)?;
                let cls = model.net.leaves(&tape);
                let loss = model.forward(&cls, images)?.bce_loss(&labels)?;
                // Ascent: descend on the negated loss.
                let grads = tape.backward(loss.affine(-1.0, 0.0)?)?;
                let g = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>, _>>()?;
                Ok((loss.item(), g))
            })();
            match step {
                Ok((loss, g)) => {
                    report.generator_losses.push(loss);
                    if let Err(e) = gen_adam.step(&mut gen.net.params_mut(), &g) {
                        report.diverged = Some(e.to_string());
                        break 'outer;
                    }
                }
                Err(Error::Autodiff(e)) => {
                    report.diverged = Some(e.to_string());
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let images = gen.generate_values(&latents, &state.ages, &state.labels)?;
        let p = gen.size * gen.size;
        let syn = SynSet {
            images: images.chunks(p).map(<[f64]>::to_vec).collect(),
            labels: state.labels.clone(),
            source_ids: state.ids.clone(),
            target_ages: state.ages.clone(),
        };
        update_classifier(model, &mut cls_adam, train, &syn, adv.train.batch_size, &mut shuffle)?;
        report.fidelity.push(fidelity_mse(gen, probes)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::FourierEncoder;
    use crate::models::{pretrain_classifier, ClassifierConfig, DistillConfig};
    use crate::synthworld::{sample_dataset, DatasetSpec, LatentRanges, RenderConfig};

    #[test]
    fn zero_rounds_keep_fidelity_and_rounds_degrade_it() {
        let render = RenderConfig {
            size: 8,
            ..Default::default()
        };
        let train = sample_dataset(&DatasetSpec::balanced(10, 0, 0, 2), &render)
            .unwrap()
            .train;
        let tc = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            ..Default::default()
        };
        let mut cls = ClassifierModel::new(64, &ClassifierConfig::default(), 1).unwrap();
        pretrain_classifier(&mut cls, &train, &tc).unwrap();
        let enc = FourierEncoder::new(16, 2, 10.0, 0).unwrap();
        let mut gen = NeuralGenerator::new(enc, &[32], 8, 3).unwrap();
        let dc = DistillConfig {
            train_samples: 300,
            val_samples: 50,
            ..Default::default()
        };
        crate::models::distill_generator(&mut gen, &render, &dc).unwrap();
        let probes = ProbeSet::draw(&render, &LatentRanges::default(), 50, 9).unwrap();
        let start = fidelity_mse(&gen, &probes).unwrap();

        let adv = AdvConfig {
            n_hard: 10,
            k: 0,
            train: tc,
            ..Default::default()
        };
        let mut g0 = gen.clone();
        let mut c0 = cls.clone();
        let r = train_generator_adversarial(&mut g0, &mut c0, &train, &probes, &adv, &GvcConfig::default()).unwrap();
        assert_eq!(r.fidelity, vec![start]);

        let adv = AdvConfig { k: 3, ..adv };
        let r = train_generator_adversarial(&mut gen, &mut cls, &train, &probes, &adv, &GvcConfig::default()).unwrap();
        assert_eq!(r.fidelity.len(), 4);
        assert!(r.fidelity[3] > start, "{:?}", r.fidelity);
    }
}
