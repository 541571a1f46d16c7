//! Group-wise accuracy, precision/recall and age histograms.
//!
//! Groups are the cross product of age bins and diagnoses. AD is the
//! positive class.

use serde::{Deserialize, Serialize};

use crate::encoding::{Diagnosis, AGE_MAX, AGE_MIN};
use crate::error::{Error, Result};
use crate::synthworld::SynthSample;

/// Age bin edges. A boundary age belongs to the higher bin, except the last
/// edge which belongs to the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBins {
    edges: Vec<f64>,
}

impl Default for AgeBins {
    fn default() -> Self {
        Self {
            edges: vec![60.0, 70.0, 80.0, 90.0],
        }
    }
}

impl AgeBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!("bad age bin edges {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn bin_of(&self, age: f64) -> usize {
        let last = self.count() - 1;
        self.edges[1..]
            .iter()
            .position(|&hi| age < hi)
            .unwrap_or(last)
            .min(last)
    }

    pub fn label(&self, bin: usize) -> String {
        format!("{}-{}yrs", self.edges[bin], self.edges[bin + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub age_bin: usize,
    pub diagnosis: Diagnosis,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    fn record(&mut self, truth: Diagnosis, pred: Diagnosis) {
        match (truth, pred) {
            (Diagnosis::Ad, Diagnosis::Ad) => self.tp += 1,
            (Diagnosis::Cn, Diagnosis::Ad) => self.fp += 1,
            (Diagnosis::Cn, Diagnosis::Cn) => self.tn += 1,
            (Diagnosis::Ad, Diagnosis::Cn) => self.fn_ += 1,
        }
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub key: GroupKey,
    pub label: String,
    pub correct: usize,
    pub total: usize,
    /// `None` for an empty group.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bins: AgeBins,
    /// Ordered diagnosis-major: all CN bins, then all AD bins.
    pub groups: Vec<GroupResult>,
    pub overall_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub per_bin_precision: Vec<Option<f64>>,
    pub per_bin_recall: Vec<Option<f64>>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub confusion: Confusion,
    pub per_bin_confusion: Vec<Confusion>,
}

impl MetricsReport {
    pub fn group(&self, age_bin: usize, diagnosis: Diagnosis) -> &GroupResult {
        self.groups
            .iter()
            .find(|g| g.key == GroupKey { age_bin, diagnosis })
            .expect("every group is present")
    }
}

/// Scores predicted diagnoses against `samples` (true label, chronological age).
pub fn group_metrics(predictions: &[Diagnosis], samples: &[SynthSample], bins: &AgeBins) -> Result<MetricsReport> {
    if predictions.len() != samples.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            got: predictions.len(),
            expected: samples.len(),
        });
    }
    let truth: Vec<(f64, Diagnosis)> = samples.iter().map(|s| (s.chron_age, s.diagnosis)).collect();
    score(predictions, &truth, bins)
}

pub fn score(predictions: &[Diagnosis], truth: &[(f64, Diagnosis)], bins: &AgeBins) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            got: predictions.len(),
            expected: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let nb = bins.count();
    let mut per_bin = vec![Confusion::default(); nb];
    let mut overall = Confusion::default();
    for (&pred, &(age, d)) in predictions.iter().zip(truth) {
        per_bin[bins.bin_of(age)].record(d, pred);
        overall.record(d, pred);
    }
    let mut groups = Vec::with_capacity(2 * nb);
    for diagnosis in [Diagnosis::Cn, Diagnosis::Ad] {
        for (b, c) in per_bin.iter().enumerate() {
            let (correct, total) = match diagnosis {
                Diagnosis::Cn => (c.tn, c.tn + c.fp),
                Diagnosis::Ad => (c.tp, c.tp + c.fn_),
            };
            groups.push(GroupResult {
                key: GroupKey { age_bin: b, diagnosis },
                label: format!("{} {}", diagnosis.name(), bins.label(b)),
                correct,
                total,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            });
        }
    }
    let worst = groups.iter().filter_map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(MetricsReport {
        bins: bins.clone(),
        overall_accuracy: overall.correct() as f64 / overall.total() as f64,
        worst_group_accuracy: worst,
        per_bin_precision: per_bin.iter().map(Confusion::precision).collect(),
        per_bin_recall: per_bin.iter().map(Confusion::recall).collect(),
        precision: overall.precision(),
        recall: overall.recall(),
        confusion: overall,
        per_bin_confusion: per_bin,
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = self.lo + i as f64 * self.width;
        (lo, (lo + self.width).min(AGE_MAX))
    }
}

/// Histogram of ages over `[60, 90]` with bins of `width` years; the last
/// bin is closed and may be narrower.
pub fn age_histogram(ages: &[f64], width: f64) -> Histogram {
    let span = AGE_MAX - AGE_MIN;
    let n = (span / width).ceil().max(1.0) as usize;
    let mut counts = vec![0; n];
    for &a in ages {
        let idx = ((a - AGE_MIN) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(n - 1) };
        counts[idx] += 1;
    }
    Histogram {
        lo: AGE_MIN,
        width,
        counts,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn truth_grid() -> Vec<(f64, Diagnosis)> {
        let mut t = Vec::new();
        for age in [61.0, 65.0, 72.0, 79.9, 80.0, 90.0] {
            for d in [Diagnosis::Cn, Diagnosis::Ad] {
                t.push((age, d));
            }
        }
        t
    }

    #[test]
    fn all_correct() {
        let t = truth_grid();
        let preds: Vec<Diagnosis> = t.iter().map(|x| x.1).collect();
        let r = score(&preds, &t, &AgeBins::default()).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.worst_group_accuracy, 1.0);
        assert_eq!(r.groups.len(), 6);
        assert!(r.groups.iter().all(|g| g.accuracy == Some(1.0)));
    }

    #[test]
    fn precision_recall_formula() {
        let c = Confusion {
            tp: 3,
            fp: 1,
            tn: 5,
            fn_: 1,
        };
        assert_eq!(c.precision(), Some(0.75));
        assert_eq!(c.recall(), Some(0.75));
        assert_eq!(Confusion::default().precision(), None);
    }

    #[test]
    fn boundary_ages() {
        let b = AgeBins::default();
        assert_eq!(b.bin_of(60.0), 0);
        assert_eq!(b.bin_of(69.999), 0);
        assert_eq!(b.bin_of(70.0), 1);
        assert_eq!(b.bin_of(80.0), 2);
        assert_eq!(b.bin_of(90.0), 2);
    }

    #[test]
    fn length_mismatch() {
        let t = truth_grid();
        assert!(matches!(
            score(&[Diagnosis::Cn], &t, &AgeBins::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn coin_flip_accuracy_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let t: Vec<(f64, Diagnosis)> = (0..n)
            .map(|i| {
                (
                    rng.gen_range(60.0..90.0),
                    if i % 2 == 0 { Diagnosis::Cn } else { Diagnosis::Ad },
                )
            })
            .collect();
        let preds: Vec<Diagnosis> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() >= 0.5 {
                    Diagnosis::Ad
                } else {
                    Diagnosis::Cn
                }
            })
            .collect();
        let r = score(&preds, &t, &AgeBins::default()).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((r.overall_accuracy - 0.5).abs() < 3.0 * sigma, "{}", r.overall_accuracy);
    }

    #[test]
    fn histogram_examples() {
        let h = age_histogram(&[75.0], 5.0);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts[3], 1);
        let h = age_histogram(&[60.0, 90.0], 5.0);
        assert_eq!(h.counts, vec![1, 0, 0, 0, 0, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ages: Vec<f64> = (0..10_000).map(|_| rng.gen_range(60.0..=90.0)).collect();
        let h = age_histogram(&ages, 5.0);
        let max = *h.counts.iter().max().unwrap() as f64;
        let min = *h.counts.iter().min().unwrap() as f64;
        assert!(max / min < 1.3);
    }

    proptest! {
        #[test]
        fn counts_decompose(seed in 0u64..500, n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<(f64, Diagnosis)> = (0..n)
                .map(|_| (rng.gen_range(60.0..=90.0), if rng.gen() { Diagnosis::Ad } else { Diagnosis::Cn }))
                .collect();
            let preds: Vec<Diagnosis> = (0..n).map(|_| if rng.gen() { Diagnosis::Ad } else { Diagnosis::Cn }).collect();
            let r = score(&preds, &t, &AgeBins::default()).unwrap();

            // Direct counting oracle.
            let correct = preds.iter().zip(&t).filter(|(p, x)| **p == x.1).count();
            let tp = preds.iter().zip(&t).filter(|(p, x)| **p == Diagnosis::Ad && x.1 == Diagnosis::Ad).count();
            let pp = preds.iter().filter(|p| **p == Diagnosis::Ad).count();
            let pos = t.iter().filter(|x| x.1 == Diagnosis::Ad).count();
            prop_assert_eq!(r.groups.iter().map(|g| g.correct).sum::<usize>(), correct);
            prop_assert!((r.overall_accuracy - correct as f64 / n as f64).abs() < 1e-15);
            prop_assert_eq!(r.precision, (pp > 0).then(|| tp as f64 / pp as f64));
            prop_assert_eq!(r.recall, (pos > 0).then(|| tp as f64 / pos as f64));
            let worst = r.groups.iter().filter_map(|g| g.accuracy).fold(1.0f64, f64::min);
            prop_assert_eq!(r.worst_group_accuracy, worst);
        }

        #[test]
        fn histogram_conserves_mass(ages in proptest::collection::vec(60.0f64..=90.0, 0..300), width in 0.5f64..15.0) {
            prop_assert_eq!(age_histogram(&ages, width).total(), ages.len());
        }
    }
}
