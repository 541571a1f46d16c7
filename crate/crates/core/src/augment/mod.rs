//! Adversarial counterfactual augmentation.
//!
//! Target ages play the max player: they ascend the classifier loss of their
//! counterfactuals. The classifier is the min player and trains on the
//! original data plus the counterfactuals.

mod baselines;
mod gvc;

pub use baselines::{run_baseline, BaselineKind, BaselineParams, BaselineReport};
pub use gvc::{train_generator_adversarial, GvcConfig, GvcReport};

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::encoding::{Diagnosis, AGE_MAX, AGE_MIN};
use crate::error::{Error, Result};
use crate::harness::seeds;
use crate::metrics::AgeBins;
use crate::models::{
    diverged, evaluate, train_epoch, ClassifierModel, ConditionalGenerator, Example, GeneratorKind, TrainConfig,
};
use crate::synthworld::SynthSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `a ~ Uniform[chron_age, max]`.
    UniformToMax,
    RealAge,
}

/// How source samples for synthesis are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSelection {
    Hard,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    /// Adversarial iterations; zero leaves the classifier untouched.
    pub k: usize,
    pub n_hard: usize,
    /// Ascent step in normalized age units.
    pub step_size: f64,
    pub age_bounds: [f64; 2],
    pub init_policy: InitPolicy,
    pub train: TrainConfig,
    pub generator: GeneratorKind,
    pub seed: u64,
    /// Cross-check every hard selection against a full sort.
    pub verify_selection: bool,
    /// Take the `N/2` hardest samples of each diagnosis instead of the `N`
    /// hardest overall.
    pub per_class: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_hard: 100,
            step_size: 0.01,
            age_bounds: [AGE_MIN, AGE_MAX],
            init_policy: InitPolicy::UniformToMax,
            train: TrainConfig::default(),
            generator: GeneratorKind::Analytic,
            seed: 0,
            verify_selection: false,
            per_class: false,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.age_bounds;
        if self.n_hard == 0 || !(self.step_size > 0.0) || !(lo < hi) || lo < AGE_MIN || hi > AGE_MAX {
            return Err(Error::InvalidConfig(format!(
                "adversarial config needs N >= 1, step > 0 and bounds within [60, 90]: N={}, step={}, bounds={:?}",
                self.n_hard, self.step_size, self.age_bounds
            )));
        }
        self.train.validate()
    }

    /// Years moved per unit of `dL/da` (in years) by one ascent step.
    pub fn years_per_gradient(&self) -> f64 {
        let span = AGE_MAX - AGE_MIN;
        self.step_size * span * span
    }
}

/// Indices of the `n` samples with the largest bce under `model`, ordered by
/// loss descending then id ascending.
pub fn select_hard(model: &ClassifierModel, pool: &[SynthSample], n: usize) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Empty("selection pool"));
    }
    if n > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot select {n} hard samples from {}",
            pool.len()
        )));
    }
    let examples: Vec<Example> = pool.iter().map(Example::from).collect();
    let losses = model.losses(&examples)?;
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Diverged {
            phase: "hard selection",
            step: 0,
            detail: format!("loss of sample {} is {}", pool[i].id, losses[i]),
        });
    }
    Ok(top_by_loss(&losses, pool, n))
}

fn top_by_loss(losses: &[f64], pool: &[SynthSample], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let cmp = |a: &usize, b: &usize| losses[*b].total_cmp(&losses[*a]).then(pool[*a].id.cmp(&pool[*b].id));
    if n < order.len() {
        order.select_nth_unstable_by(n, cmp);
        order.truncate(n);
    }
    order.sort_by(cmp);
    order
}

/// The `n / 2` hardest of each diagnosis (CN gets the odd one), CN first.
pub fn select_hard_per_class(model: &ClassifierModel, pool: &[SynthSample], n: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    for (d, quota) in [(Diagnosis::Cn, n - n / 2), (Diagnosis::Ad, n / 2)] {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].diagnosis == d).collect();
        let sub: Vec<SynthSample> = members.iter().map(|&i| pool[i].clone()).collect();
        let quota = quota.min(sub.len());
        if quota == 0 {
            continue;
        }
        out.extend(select_hard(model, &sub, quota)?.into_iter().map(|j| members[j]));
    }
    if out.is_empty() {
        return Err(Error::Empty("selection pool"));
    }
    Ok(out)
}

/// Brute-force reference for [`select_hard`]: a full stable sort.
pub fn select_hard_oracle(losses: &[f64], ids: &[usize], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .expect("finite losses")
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(n);
    order
}

pub fn select_random(pool_len: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if pool_len == 0 {
        return Err(Error::Empty("selection pool"));
    }
    if n > pool_len {
        return Err(Error::InvalidConfig(format!(
            "cannot select {n} samples from {pool_len}"
        )));
    }
    let mut idx = sample_indices(rng, pool_len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// The max player's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvState {
    /// Indices into the pool the hard set was drawn from.
    pub indices: Vec<usize>,
    pub ids: Vec<usize>,
    pub labels: Vec<Diagnosis>,
    pub ages: Vec<f64>,
    pub iteration: usize,
}

pub fn init_target_ages(
    pool: &[SynthSample],
    indices: &[usize],
    policy: InitPolicy,
    bounds: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> AdvState {
    let ages = indices
        .iter()
        .map(|&i| {
            let chron = pool[i].chron_age;
            match policy {
                InitPolicy::RealAge => chron,
                InitPolicy::UniformToMax => {
                    let lo = chron.clamp(bounds[0], bounds[1]);
                    if lo < bounds[1] {
                        rng.gen_range(lo..=bounds[1])
                    } else {
                        lo
                    }
                }
            }
        })
        .collect();
    AdvState {
        indices: indices.to_vec(),
        ids: indices.iter().map(|&i| pool[i].id).collect(),
        labels: indices.iter().map(|&i| pool[i].diagnosis).collect(),
        ages,
        iteration: 0,
    }
}

/// `a + step * g`, clipped to `bounds`. Plain arithmetic in whatever units
/// `a` and `g` share.
pub fn ascend_value(a: f64, gradient: f64, step: f64, bounds: [f64; 2]) -> f64 {
    (a + step * gradient).clamp(bounds[0], bounds[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentRecord {
    /// `dL/dv` per sample, `v` the normalized age.
    pub gradients: Vec<f64>,
    /// Pre-clip step in normalized units.
    pub steps: Vec<f64>,
    /// Samples with `gradient * step >= 0`.
    pub ascent_ok: usize,
    pub clipped: usize,
    pub in_bounds: bool,
}

/// Per-sample loss of each hard counterfactual at its current target age and
/// the gradient of that loss with respect to the age in years.
pub fn counterfactual_losses(
    state: &AdvState,
    pool: &[SynthSample],
    gen: &dyn ConditionalGenerator,
    model: &ClassifierModel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let ages: Vec<_> = state.ages.iter().map(|&a| tape.scalar(a)).collect();
    let sources: Vec<&SynthSample> = state.indices.iter().map(|&i| &pool[i]).collect();
    let images = gen.generate_batch(&tape, &sources, &ages)?;
    let params = model.net.leaves(&tape);
    let probs = model.forward(&params, images)?;
    let labels = Tensor::vector(state.labels.iter().map(|d| d.label()).collect());
    // Sum, not mean: each age receives the gradient of its own sample's loss.
    let n = state.ages.len() as f64;
    let total = probs.bce_loss(&labels)?.affine(n, 0.0)?;
    let grads = tape.backward(total)?;
    let per_sample: Vec<f64> = probs
        .value()
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| crate::autodiff::bce_term(p, y))
        .collect();
    let g = ages
        .iter()
        .map(|&a| grads.wrt(a).map(|t| t.item()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((per_sample, g))
}

/// One ascent step of every target age on its counterfactual's loss.
pub fn ascend_target_ages(
    state: &mut AdvState,
    pool: &[SynthSample],
    gen: &dyn ConditionalGenerator,
    model: &ClassifierModel,
    step_size: f64,
    bounds: [f64; 2],
) -> Result<AscentRecord> {
    let (_, grad_years) =
        counterfactual_losses(state, pool, gen, model).map_err(|e| diverged("age ascent", state.iteration, e))?;
    let span = AGE_MAX - AGE_MIN;
    let mut rec = AscentRecord {
        gradients: Vec::with_capacity(grad_years.len()),
        steps: Vec::with_capacity(grad_years.len()),
        ascent_ok: 0,
        clipped: 0,
        in_bounds: true,
    };
    for (a, &g_years) in state.ages.iter_mut().zip(&grad_years) {
        let g = g_years * span;
        if !g.is_finite() {
            return Err(Error::Diverged {
                phase: "age ascent",
                step: state.iteration,
                detail: format!("age gradient {g}"),
            });
        }
        let dv = step_size * g;
        if g * dv >= 0.0 {
            rec.ascent_ok += 1;
        }
        let v = (*a - AGE_MIN) / span;
        let next = ascend_value(
            v,
            g,
            step_size,
            [(bounds[0] - AGE_MIN) / span, (bounds[1] - AGE_MIN) / span],
        );
        let unclipped = v + dv;
        if next != unclipped {
            rec.clipped += 1;
        }
        *a = (AGE_MIN + span * next).clamp(bounds[0], bounds[1]);
        rec.in_bounds &= (bounds[0]..=bounds[1]).contains(a);
        rec.gradients.push(g);
        rec.steps.push(dv);
    }
    state.iteration += 1;
    Ok(rec)
}

/// Counterfactuals with labels copied from their sources.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynSet {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Diagnosis>,
    pub source_ids: Vec<usize>,
    pub target_ages: Vec<f64>,
}

impl SynSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> {
        self.images.iter().zip(&self.labels).map(|(img, d)| Example {
            image: img,
            label: d.label(),
        })
    }

    pub fn extend(&mut self, other: SynSet) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.source_ids.extend(other.source_ids);
        self.target_ages.extend(other.target_ages);
    }
}

/// Renders `sources[i]` at `ages[i]` for every `i`.
pub fn synthesize_at(
    pool: &[SynthSample],
    indices: &[usize],
    ages: &[f64],
    gen: &dyn ConditionalGenerator,
) -> Result<SynSet> {
    if indices.len() != ages.len() {
        return Err(Error::LengthMismatch {
            what: "target ages",
            got: ages.len(),
            expected: indices.len(),
        });
    }
    let mut out = SynSet::default();
    let p = gen.pixels();
    for (chunk_idx, chunk_ages) in indices.chunks(256).zip(ages.chunks(256)) {
        let tape = Tape::new();
        let vars: Vec<_> = chunk_ages.iter().map(|&a| tape.scalar(a)).collect();
        let sources: Vec<&SynthSample> = chunk_idx.iter().map(|&i| &pool[i]).collect();
        let batch = gen.generate_batch(&tape, &sources, &vars)?;
        let value = batch.value();
        for (r, &i) in chunk_idx.iter().enumerate() {
            out.images.push(value.data()[r * p..(r + 1) * p].to_vec());
            out.labels.push(pool[i].diagnosis);
            out.source_ids.push(pool[i].id);
        }
        out.target_ages.extend_from_slice(chunk_ages);
    }
    Ok(out)
}

pub fn synthesize(state: &AdvState, pool: &[SynthSample], gen: &dyn ConditionalGenerator) -> Result<SynSet> {
    synthesize_at(pool, &state.indices, &state.ages, gen)
}

/// One epoch over `train` plus `syn`.
pub fn update_classifier(
    model: &mut ClassifierModel,
    adam: &mut AdamState,
    train: &[SynthSample],
    syn: &SynSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let examples: Vec<Example> = train.iter().map(Example::from).chain(syn.examples()).collect();
    train_epoch(model, adam, &examples, batch_size, rng)
}

/// One line of the history stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ages: Vec<f64>,
    /// Mean classifier loss on the counterfactuals before the update.
    pub mean_loss: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub ascent_ok: usize,
    pub clipped: usize,
    pub in_bounds: bool,
    pub synthesized_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvHistory {
    pub source_ids: Vec<usize>,
    pub labels: Vec<Diagnosis>,
    pub initial_ages: Vec<f64>,
    pub chron_ages: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub n_effective: usize,
    pub synthesized_total: usize,
    pub ascent_steps: usize,
    pub ascent_ok: usize,
}

impl AdvHistory {
    pub fn final_ages(&self) -> &[f64] {
        self.iterations.last().map_or(&self.initial_ages, |r| &r.ages)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_all(self.to_jsonl()?.as_bytes())?;
        crate::harness::write_atomic(path, &buf)
    }
}

/// Shared body of the adversarial runs: selection over `pool`, then `k`
/// rounds of ascent, synthesis and one epoch on `pool` plus the
/// counterfactuals.
pub fn adversarial_core(
    model: &mut ClassifierModel,
    gen: &dyn ConditionalGenerator,
    pool: &[SynthSample],
    val: Option<&[SynthSample]>,
    cfg: &AdvConfig,
    source: SourceSelection,
) -> Result<AdvHistory> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let mut n = cfg.n_hard;
    if n > pool.len() {
        log::warn!("N={} exceeds the pool of {}; using N={}", n, pool.len(), pool.len());
        n = pool.len();
    }
    log::debug!(
        "age step {} normalized = {} years per unit dL/da",
        cfg.step_size,
        cfg.years_per_gradient()
    );
    let indices = match source {
        SourceSelection::Hard if cfg.per_class => select_hard_per_class(model, pool, n)?,
        SourceSelection::Hard => {
            let idx = select_hard(model, pool, n)?;
            if cfg.verify_selection {
                let examples: Vec<Example> = pool.iter().map(Example::from).collect();
                let losses = model.losses(&examples)?;
                let ids: Vec<usize> = pool.iter().map(|s| s.id).collect();
                if select_hard_oracle(&losses, &ids, n) != idx {
                    return Err(Error::InvalidConfig(
                        "hard selection disagrees with the sort oracle".into(),
                    ));
                }
            }
            idx
        }
        SourceSelection::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(cfg.seed, seeds::BASELINE));
            select_random(pool.len(), n, &mut rng)?
        }
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(cfg.seed, seeds::INIT));
    let mut state = init_target_ages(pool, &indices, cfg.init_policy, cfg.age_bounds, &mut init_rng);
    let mut history = AdvHistory {
        source_ids: state.ids.clone(),
        labels: state.labels.clone(),
        initial_ages: state.ages.clone(),
        chron_ages: indices.iter().map(|&i| pool[i].chron_age).collect(),
        iterations: Vec::with_capacity(cfg.k),
        n_effective: indices.len(),
        synthesized_total: 0,
        ascent_steps: 0,
        ascent_ok: 0,
    };
    let mut adam = AdamState::new(cfg.train.adam());
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds::derive_seed(cfg.seed, seeds::SHUFFLE));
    let bins = AgeBins::default();
    for it in 0..cfg.k {
        let rec = ascend_target_ages(&mut state, pool, gen, model, cfg.step_size, cfg.age_bounds)?;
        let syn = synthesize(&state, pool, gen)?;
        let syn_losses = model.losses(&syn.examples().collect::<Vec<_>>())?;
        let mean_loss = syn_losses.iter().sum::<f64>() / syn_losses.len() as f64;
        let train_loss = update_classifier(model, &mut adam, pool, &syn, cfg.train.batch_size, &mut shuffle)?;
        history.synthesized_total += syn.len();
        history.ascent_steps += rec.steps.len();
        history.ascent_ok += rec.ascent_ok;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, &bins)?.overall_accuracy),
            _ => None,
        };
        history.iterations.push(IterationRecord {
            iteration: it,
            ages: state.ages.clone(),
            mean_loss,
            train_loss,
            val_accuracy,
            ascent_ok: rec.ascent_ok,
            clipped: rec.clipped,
            in_bounds: rec.in_bounds,
            synthesized_total: history.synthesized_total,
        });
    }
    Ok(history)
}

/// The adversarial game: hard selection, target-age initialization, then `k`
/// rounds of ascent, synthesis and one classifier epoch on the train split
/// plus the counterfactuals. The generator is only read.
pub fn adversarial_train(
    model: &mut ClassifierModel,
    gen: &dyn ConditionalGenerator,
    train: &[SynthSample],
    val: Option<&[SynthSample]>,
    cfg: &AdvConfig,
) -> Result<AdvHistory> {
    adversarial_core(model, gen, train, val, cfg, SourceSelection::Hard)
}

/// Retains `m_percent` of `train`, seeded from the store stream, in original
/// order.
pub fn make_store(train: &[SynthSample], m_percent: f64, seed: u64) -> Result<Vec<SynthSample>> {
    if !(m_percent > 0.0 && m_percent <= 100.0) {
        return Err(Error::InvalidConfig(format!("M={m_percent} outside (0, 100]")));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let keep = ((train.len() as f64 * m_percent / 100.0).round() as usize).clamp(1, train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, seeds::STORE));
    let idx = select_random(train.len(), keep, &mut rng)?;
    Ok(idx.into_iter().map(|i| train[i].clone()).collect())
}

/// The game played on a retained `M%` subset of the train split.
pub fn adversarial_train_with_store(
    model: &mut ClassifierModel,
    gen: &dyn ConditionalGenerator,
    train: &[SynthSample],
    m_percent: f64,
    val: Option<&[SynthSample]>,
    cfg: &AdvConfig,
) -> Result<AdvHistory> {
    let store = make_store(train, m_percent, cfg.seed)?;
    adversarial_core(model, gen, &store, val, cfg, SourceSelection::Hard)
}
