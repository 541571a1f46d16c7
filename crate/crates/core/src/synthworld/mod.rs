//! The synthetic ageing world.
//!
//! A subject is a [`MorphLatent`]; its image at a given age is a soft disk
//! (ventricle) inside a soft annulus (cortex). Both structures depend only on
//! the effective age `e = age + delta * [AD]`, so an AD subject looks exactly
//! like a CN subject `delta` years older. Edges are logistic ramps, which makes
//! every pixel differentiable in age.

mod conventional;
mod dataset;
mod io;

pub use conventional::{apply_transform, conventional_augment, AugOp, Transform};
pub use dataset::{make_spurious, sample_dataset, Dataset, DatasetSpec, SplitCounts, Splits, SpuriousSpec};
pub use io::{export_dataset, import_dataset, DATASET_FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoding::Diagnosis;
use crate::error::{Error, Result};

/// Ages accepted by the renderer; wider than the clipping range of the game.
pub const RENDER_AGE_MIN: f64 = 55.0;
pub const RENDER_AGE_MAX: f64 = 100.0;

const BACKGROUND: f64 = -0.9;
const TISSUE: f64 = 1.2;
const CORTEX: f64 = 0.4;
const VENTRICLE: f64 = -1.2;

/// Identity of a synthetic subject; preserved by every counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphLatent {
    /// Ventricle radius at effective age 60, as a fraction of image width.
    pub ventricle_base_radius: f64,
    pub cortex_outer_radius: f64,
    pub center_offset: [f64; 2],
    pub texture_seed: u64,
}

impl MorphLatent {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.ventricle_base_radius
            && self.ventricle_base_radius < self.cortex_outer_radius
            && self.cortex_outer_radius < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid latent {self:?}")))
        }
    }

    /// Real-valued features handed to the neural generator.
    pub fn features(&self) -> [f64; 4] {
        [
            (self.ventricle_base_radius - 0.1) * 20.0,
            (self.cortex_outer_radius - 0.38) * 20.0,
            self.center_offset[0] * 20.0,
            self.center_offset[1] * 20.0,
        ]
    }
}

pub const LATENT_FEATURES: usize = 4;

/// Uniform ranges for drawing latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentRanges {
    pub ventricle_base_radius: [f64; 2],
    pub cortex_outer_radius: [f64; 2],
    pub center_offset: f64,
}

impl Default for LatentRanges {
    fn default() -> Self {
        Self {
            ventricle_base_radius: [0.095, 0.105],
            cortex_outer_radius: [0.36, 0.40],
            center_offset: 0.04,
        }
    }
}

impl LatentRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> MorphLatent {
        let draw = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        let off = self.center_offset;
        MorphLatent {
            ventricle_base_radius: draw(rng, self.ventricle_base_radius),
            cortex_outer_radius: draw(rng, self.cortex_outer_radius),
            center_offset: [draw(rng, [-off, off]), draw(rng, [-off, off])],
            texture_seed: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub size: usize,
    /// Logistic edge width, fraction of image width.
    pub edge_softness: f64,
    /// Relative ventricle growth over 30 years of effective age.
    pub ventricle_growth: f64,
    /// Relative cortex thinning over 30 years of effective age.
    pub cortex_thinning: f64,
    /// Cortex thickness at effective age 60.
    pub cortex_thickness: f64,
    /// Years added to the age of AD subjects.
    pub ad_acceleration: f64,
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            size: 16,
            edge_softness: 0.03,
            ventricle_growth: 0.6,
            cortex_thinning: 0.3,
            cortex_thickness: 0.12,
            ad_acceleration: 10.0,
            noise: 0.02,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::InvalidConfig("image size must be at least 4".into()));
        }
        if !(self.edge_softness > 0.0) {
            return Err(Error::InvalidConfig("edge softness must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise < 0.1) {
            return Err(Error::InvalidConfig("noise must be in [0, 0.1)".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn effective_age(&self, age: f64, diagnosis: Diagnosis) -> f64 {
        age + self.ad_shift(diagnosis)
    }

    fn ad_shift(&self, diagnosis: Diagnosis) -> f64 {
        match diagnosis {
            Diagnosis::Ad => self.ad_acceleration,
            Diagnosis::Cn => 0.0,
        }
    }

    /// Distance of each pixel centre from the subject's centre.
    pub fn radii(&self, latent: &MorphLatent) -> Vec<f64> {
        let n = self.size;
        let cx = 0.5 + latent.center_offset[0];
        let cy = 0.5 + latent.center_offset[1];
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                out.push(((x - cx).powi(2) + (y - cy).powi(2)).sqrt());
            }
        }
        out
    }

    /// Texture noise keyed by the subject; constant with respect to age.
    pub fn texture(&self, latent: &MorphLatent) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(latent.texture_seed);
        (0..self.pixels())
            .map(|_| {
                let u: f64 = rng.gen_range(-1.0..1.0);
                u * self.noise
            })
            .collect()
    }
}

/// Renders on the tape as a `(1, H*W)` row, differentiable in `age`.
pub fn render_row<'t>(cfg: &RenderConfig, latent: &MorphLatent, age: Var<'t>, diagnosis: Diagnosis) -> Result<Var<'t>> {
    let a = age.item();
    if !(RENDER_AGE_MIN..=RENDER_AGE_MAX).contains(&a) {
        return Err(Error::AgeOutOfRange {
            age: a,
            lo: RENDER_AGE_MIN,
            hi: RENDER_AGE_MAX,
        });
    }
    let tape = age.tape();
    let inv_tau = 1.0 / cfg.edge_softness;
    let radii = cfg.radii(latent);
    let brain: Vec<f64> = radii
        .iter()
        .map(|r| crate::autodiff::sigmoid((latent.cortex_outer_radius - r) * inv_tau))
        .collect();
    let base: Vec<f64> = brain
        .iter()
        .zip(cfg.texture(latent))
        .map(|(b, n)| BACKGROUND + TISSUE * b + n)
        .collect();

    let r = tape.leaf(Tensor::vector(radii));
    let brain = tape.leaf(Tensor::vector(brain));
    let base = tape.leaf(Tensor::vector(base));

    let effective = age.affine(1.0, cfg.ad_shift(diagnosis))?;
    let t = effective.affine(1.0 / 30.0, -2.0)?;
    let base_v = latent.ventricle_base_radius;
    let ventricle_radius = t.affine(base_v * cfg.ventricle_growth, base_v)?;
    let thick = cfg.cortex_thickness;
    let inner_radius = t.affine(thick * cfg.cortex_thinning, latent.cortex_outer_radius - thick)?;

    let ventricle = r
        .affine(-inv_tau, 0.0)?
        .add(ventricle_radius.affine(inv_tau, 0.0)?)?
        .sigmoid()?;
    let ring = r
        .affine(inv_tau, 0.0)?
        .add(inner_radius.affine(-inv_tau, 0.0)?)?
        .sigmoid()?
        .mul(brain)?;
    let image = ring
        .affine(CORTEX, 0.0)?
        .add(ventricle.affine(VENTRICLE, 0.0)?)?
        .add(base)?;
    Ok(image.reshape(vec![1, cfg.pixels()])?)
}

/// Renders an `H x W` image.
pub fn render(cfg: &RenderConfig, latent: &MorphLatent, age: f64, diagnosis: Diagnosis) -> Result<Tensor> {
    let tape = Tape::new();
    let row = render_row(cfg, latent, tape.scalar(age), diagnosis)?;
    let img = row.value().clone();
    Ok(img.reshaped(vec![cfg.size, cfg.size])?)
}

/// Counterfactual of `sample` at `target_age`; the diagnosis is kept.
pub fn analytic_generate<'t>(cfg: &RenderConfig, sample: &SynthSample, target_age: Var<'t>) -> Result<Var<'t>> {
    render_row(cfg, &sample.latent, target_age, sample.diagnosis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    /// Subject id, unique across all splits of a dataset.
    pub id: usize,
    pub latent: MorphLatent,
    pub chron_age: f64,
    pub diagnosis: Diagnosis,
    /// Row-major `H x W` intensities.
    #[serde(skip)]
    pub image: Vec<f64>,
}

impl SynthSample {
    pub fn new(
        id: usize,
        cfg: &RenderConfig,
        latent: MorphLatent,
        chron_age: f64,
        diagnosis: Diagnosis,
    ) -> Result<Self> {
        let image = render(cfg, &latent, chron_age, diagnosis)?.into_data();
        Ok(Self {
            id,
            latent,
            chron_age,
            diagnosis,
            image,
        })
    }

    pub fn label(&self) -> f64 {
        self.diagnosis.label()
    }
}

/// Ventricle area in pixels.
///
/// Counts pixels below the half-way intensity between tissue and ventricle
/// within radius `inner` of the subject's centre.
pub fn ventricle_area(cfg: &RenderConfig, latent: &MorphLatent, image: &[f64]) -> usize {
    let half = BACKGROUND + TISSUE + VENTRICLE / 2.0;
    let inner = latent.cortex_outer_radius - cfg.cortex_thickness;
    cfg.radii(latent)
        .iter()
        .zip(image)
        .filter(|(r, v)| **r < inner && **v < half)
        .count()
}
