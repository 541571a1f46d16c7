use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AdvConfig, BaselineKind, BaselineParams, GvcConfig};
use crate::encoding::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::AgeBins;
use crate::models::{ClassifierConfig, DistillConfig, TrainConfig};
use crate::synthworld::{DatasetSpec, RenderConfig, SpuriousSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Main,
    Continual,
    NSweep,
    Spurious,
    GVsC,
    Baselines,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Main => "main",
            ExperimentKind::Continual => "continual",
            ExperimentKind::NSweep => "n_sweep",
            ExperimentKind::Spurious => "spurious",
            ExperimentKind::GVsC => "g_vs_c",
            ExperimentKind::Baselines => "baselines",
        }
    }
}

/// One experiment. Every field except `kind` has a default; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub spurious: SpuriousSpec,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub encoder: EncoderParams,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub adversarial: AdvConfig,
    /// Comparison methods; each kind has its own default list.
    #[serde(default)]
    pub baselines: Option<Vec<BaselineKind>>,
    #[serde(default)]
    pub baseline_params: BaselineParams,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub gvc: GvcConfig,
    /// Retained percentages for the continual sweep.
    #[serde(default = "default_m_values")]
    pub m_values: Vec<f64>,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
    /// Retained percentage used by the N sweep.
    #[serde(default = "default_n_sweep_m")]
    pub n_sweep_m: f64,
    /// Metric age bins; the spurious experiment splits at its split age when
    /// this is left at the default.
    #[serde(default)]
    pub age_bins: Option<Vec<f64>>,
    #[serde(default = "default_hist_width")]
    pub histogram_width: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec::balanced(300, 0, 200, 0)
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 30,
        ..TrainConfig::default()
    }
}

fn default_m_values() -> Vec<f64> {
    vec![1.0, 10.0, 20.0, 50.0, 100.0]
}

fn default_n_values() -> Vec<usize> {
    vec![1, 10, 50, 100]
}

fn default_n_sweep_m() -> f64 {
    1.0
}

fn default_hist_width() -> f64 {
    2.5
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.pretrain.validate()?;
        self.adversarial.validate()?;
        self.baseline_params.validate()?;
        self.bins()?;
        match self.kind {
            ExperimentKind::Spurious => {}
            _ => self.dataset.validate()?,
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.m_values.iter().any(|&m| !(m > 0.0 && m <= 100.0)) {
            return Err(Error::InvalidConfig(format!(
                "M values {:?} must lie in (0, 100]",
                self.m_values
            )));
        }
        if self.n_values.contains(&0) {
            return Err(Error::InvalidConfig("N values must be positive".into()));
        }
        if !(self.histogram_width > 0.0) {
            return Err(Error::InvalidConfig("histogram width must be positive".into()));
        }
        if self.kind == ExperimentKind::GVsC && self.encoder.d != 2 {
            return Err(Error::InvalidConfig(
                "the generator conditions on (age, diagnosis); d must be 2".into(),
            ));
        }
        let per_kind_needs = match self.kind {
            ExperimentKind::Continual => !self.m_values.is_empty(),
            ExperimentKind::NSweep => !self.n_values.is_empty(),
            _ => true,
        };
        if !per_kind_needs {
            return Err(Error::InvalidConfig(format!(
                "{} needs a non-empty sweep",
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<BaselineKind> {
        use BaselineKind::*;
        if let Some(b) = &self.baselines {
            return b.clone();
        }
        match self.kind {
            ExperimentKind::Main => vec![Naive, Rsrs, Hsrs, Rsat, Jtt],
            ExperimentKind::Baselines => BaselineKind::ALL.to_vec(),
            ExperimentKind::Continual => vec![Naive, Hsrs, Rsat, Jtt],
            ExperimentKind::NSweep => vec![Hsrs, Rsat],
            ExperimentKind::Spurious => vec![Naive, Hsrs, Jtt],
            ExperimentKind::GVsC => vec![Naive],
        }
    }

    pub fn bins(&self) -> Result<AgeBins> {
        match (&self.age_bins, self.kind) {
            (Some(edges), _) => AgeBins::new(edges.clone()),
            (None, ExperimentKind::Spurious) => AgeBins::new(vec![60.0, self.spurious.split_age, 90.0]),
            (None, _) => Ok(AgeBins::default()),
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "main"}"#).unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.adversarial.k, 5);
        assert_eq!(cfg.adversarial.n_hard, 100);
        assert_eq!(cfg.name(), "main");
        assert_eq!(cfg.bins().unwrap(), AgeBins::default());
        assert_eq!(cfg.methods().len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"kind": "main", "epochs": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "main", "adversarial": {"kk": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "sideways"}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"kind": "main", "seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "continual", "m_values": [0]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "main", "adversarial": {"n_hard": 0}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(r#"{"kind": "main"}"#).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seeds = vec![9];
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn spurious_bins_follow_split_age() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "spurious"}"#).unwrap();
        assert_eq!(cfg.bins().unwrap().edges(), &[60.0, 75.0, 90.0]);
    }
}
