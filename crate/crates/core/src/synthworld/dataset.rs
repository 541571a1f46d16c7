use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LatentRanges, RenderConfig, SynthSample};
use crate::encoding::{Diagnosis, AGE_MAX, AGE_MIN};
use crate::error::{Error, Result};

/// Number of subjects per age bin for each diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub cn: Vec<usize>,
    pub ad: Vec<usize>,
}

impl SplitCounts {
    pub fn uniform(bins: usize, per_group: usize) -> Self {
        Self {
            cn: vec![per_group; bins],
            ad: vec![per_group; bins],
        }
    }

    pub fn total(&self) -> usize {
        self.cn.iter().chain(&self.ad).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Age bin edges; ages are uniform within each bin.
    pub age_bins: Vec<f64>,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
    #[serde(default)]
    pub latents: LatentRanges,
    pub seed: u64,
}

impl DatasetSpec {
    /// Balanced spec over the standard three decades.
    pub fn balanced(train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            age_bins: vec![60.0, 70.0, 80.0, 90.0],
            train: SplitCounts::uniform(3, train),
            val: SplitCounts::uniform(3, val),
            test: SplitCounts::uniform(3, test),
            latents: LatentRanges::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bins = self.age_bins.len().saturating_sub(1);
        if bins == 0 {
            return Err(Error::InvalidConfig("need at least two age bin edges".into()));
        }
        if self.age_bins.windows(2).any(|w| w[0] >= w[1]) || self.age_bins[0] < AGE_MIN || self.age_bins[bins] > AGE_MAX
        {
            return Err(Error::InvalidConfig(format!(
                "age bins {:?} must increase within [60, 90]",
                self.age_bins
            )));
        }
        for (name, c) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if c.cn.len() != bins || c.ad.len() != bins {
                return Err(Error::InvalidConfig(format!("{name} counts must have {bins} bins")));
            }
        }
        if self.train.total() + self.val.total() + self.test.total() == 0 {
            return Err(Error::Empty("dataset spec"));
        }
        Ok(())
    }
}

/// Spurious world: AD only young, CN only old in train/val; test uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousSpec {
    pub train_ad: usize,
    pub train_cn: usize,
    pub val_per_class: usize,
    /// Test subjects per (diagnosis, side of the split age).
    pub test_per_group: usize,
    pub split_age: f64,
    #[serde(default)]
    pub latents: LatentRanges,
    pub seed: u64,
}

impl Default for SpuriousSpec {
    fn default() -> Self {
        Self {
            train_ad: 1000,
            train_cn: 1000,
            val_per_class: 50,
            test_per_group: 150,
            split_age: 75.0,
            latents: LatentRanges::default(),
            seed: 0,
        }
    }
}

pub type Dataset = Vec<SynthSample>;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    render: &'a RenderConfig,
    latents: LatentRanges,
    next_id: usize,
}

impl Builder<'_> {
    fn draw(&mut self, n: usize, lo: f64, hi: f64, diagnosis: Diagnosis, out: &mut Dataset) -> Result<()> {
        for _ in 0..n {
            let latent = self.latents.sample(&mut self.rng);
            let age = if hi > lo { self.rng.gen_range(lo..hi) } else { lo };
            out.push(SynthSample::new(self.next_id, self.render, latent, age, diagnosis)?);
            self.next_id += 1;
        }
        Ok(())
    }

    fn split(&mut self, bins: &[f64], counts: &SplitCounts) -> Result<Dataset> {
        let mut out = Vec::with_capacity(counts.total());
        for (b, w) in bins.windows(2).enumerate() {
            self.draw(counts.cn[b], w[0], w[1], Diagnosis::Cn, &mut out)?;
            self.draw(counts.ad[b], w[0], w[1], Diagnosis::Ad, &mut out)?;
        }
        Ok(out)
    }
}

/// Draws train/val/test splits. Every sample is a distinct subject, so the
/// splits are subject-disjoint by construction.
pub fn sample_dataset(spec: &DatasetSpec, render: &RenderConfig) -> Result<Splits> {
    spec.validate()?;
    render.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        render,
        latents: spec.latents,
        next_id: 0,
    };
    Ok(Splits {
        train: b.split(&spec.age_bins, &spec.train)?,
        val: b.split(&spec.age_bins, &spec.val)?,
        test: b.split(&spec.age_bins, &spec.test)?,
    })
}

pub fn make_spurious(spec: &SpuriousSpec, render: &RenderConfig) -> Result<Splits> {
    render.validate()?;
    let s = spec.split_age;
    if !(AGE_MIN < s && s < AGE_MAX) {
        return Err(Error::InvalidConfig(format!("split age {s} outside (60, 90)")));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        render,
        latents: spec.latents,
        next_id: 0,
    };
    let mut train = Vec::new();
    b.draw(spec.train_ad, AGE_MIN, s, Diagnosis::Ad, &mut train)?;
    b.draw(spec.train_cn, s, AGE_MAX, Diagnosis::Cn, &mut train)?;
    let mut val = Vec::new();
    b.draw(spec.val_per_class, AGE_MIN, s, Diagnosis::Ad, &mut val)?;
    b.draw(spec.val_per_class, s, AGE_MAX, Diagnosis::Cn, &mut val)?;
    let mut test = Vec::new();
    for d in [Diagnosis::Cn, Diagnosis::Ad] {
        b.draw(spec.test_per_group, AGE_MIN, s, d, &mut test)?;
        b.draw(spec.test_per_group, s, AGE_MAX, d, &mut test)?;
    }
    Ok(Splits { train, val, test })
}
