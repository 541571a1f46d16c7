//! Fourier encoding of the conditioning vector `(age, diagnosis)`.
//!
//! `gamma(v) = [p_j cos(2 pi b_j.v), p_j sin(2 pi b_j.v)]_{j=1..m}` with a
//! frozen Gaussian frequency matrix. The encoding is recorded on the tape so
//! the generator output can be differentiated with respect to the target age.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const AGE_MIN: f64 = 60.0;
pub const AGE_MAX: f64 = 90.0;
/// Upper clamp of the normalized age so that `v` stays in `[0, 1)`.
pub const V_MAX: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
}

impl Diagnosis {
    pub fn label(self) -> f64 {
        match self {
            Diagnosis::Cn => 0.0,
            Diagnosis::Ad => 1.0,
        }
    }

    pub fn from_label(y: f64) -> Self {
        if y >= 0.5 {
            Diagnosis::Ad
        } else {
            Diagnosis::Cn
        }
    }

    /// Diagnosis coordinate of the normalized conditioning vector.
    pub fn coordinate(self) -> f64 {
        match self {
            Diagnosis::Cn => 0.0,
            Diagnosis::Ad => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Ad => "AD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub age_years: f64,
    pub diagnosis: Diagnosis,
}

impl ConditioningVector {
    /// Maps to `v in [0, 1)^2`.
    pub fn normalize(&self) -> Result<[f64; 2]> {
        if !(AGE_MIN..=AGE_MAX).contains(&self.age_years) {
            return Err(Error::AgeOutOfRange {
                age: self.age_years,
                lo: AGE_MIN,
                hi: AGE_MAX,
            });
        }
        Ok([normalize_age(self.age_years), self.diagnosis.coordinate()])
    }
}

pub fn normalize_age(age: f64) -> f64 {
    ((age - AGE_MIN) / (AGE_MAX - AGE_MIN)).clamp(0.0, V_MAX)
}

/// Tape version of [`normalize_age`]. At the clamp bounds the result is a
/// constant, matching the zero derivative of a clamp.
pub fn normalize_age_var<'t>(age: Var<'t>) -> Result<Var<'t>> {
    let span = AGE_MAX - AGE_MIN;
    let raw = (age.item() - AGE_MIN) / span;
    if raw >= V_MAX || raw <= 0.0 {
        return Ok(age.tape().scalar(normalize_age(age.item())));
    }
    Ok(age.affine(1.0 / span, -AGE_MIN / span)?)
}

/// Persistable encoder parameters; the basis is regenerated from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderParams {
    pub m: usize,
    pub d: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            m: 100,
            d: 2,
            scale: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FourierEncoder {
    params: EncoderParams,
    /// `m x d`, rows are the frequencies `b_j`.
    basis: Tensor,
    coeffs: Vec<f64>,
    /// `d x 2m`, each frequency repeated for its cos/sin pair, transposed.
    paired_basis_t: Tensor,
    /// `pi/2` on cosine slots so that `sin(x + pi/2) = cos(x)`.
    phase: Tensor,
}

impl FourierEncoder {
    /// Draws `b_j ~ N(0, scale^2 I)` and sets `p_j = 1`.
    pub fn new(m: usize, d: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::from_params(EncoderParams { m, d, scale, seed })
    }

    pub fn from_params(params: EncoderParams) -> Result<Self> {
        let EncoderParams { m, d, scale, seed } = params;
        if m == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs m >= 1 and d >= 1, got m={m}, d={d}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("encoder scale {scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive std");
        let data: Vec<f64> = (0..m * d).map(|_| normal.sample(&mut rng)).collect();
        let basis = Tensor::matrix(m, d, data)?;
        Self::with_basis(params, basis, vec![1.0; m])
    }

    /// Builds an encoder from an explicit basis (`m x d`) and coefficients.
    pub fn with_basis(params: EncoderParams, basis: Tensor, coeffs: Vec<f64>) -> Result<Self> {
        let (m, d) = (basis.rows(), basis.cols());
        if coeffs.len() != m {
            return Err(Error::LengthMismatch {
                what: "fourier coefficients",
                got: coeffs.len(),
                expected: m,
            });
        }
        let mut paired = vec![0.0; d * 2 * m];
        for j in 0..m {
            for k in 0..d {
                let b = basis.data()[j * d + k];
                paired[k * 2 * m + 2 * j] = b;
                paired[k * 2 * m + 2 * j + 1] = b;
            }
        }
        let phase = (0..2 * m).map(|i| if i % 2 == 0 { PI / 2.0 } else { 0.0 }).collect();
        Ok(Self {
            params: EncoderParams { m, d, ..params },
            basis,
            coeffs,
            paired_basis_t: Tensor::matrix(d, 2 * m, paired)?,
            phase: Tensor::matrix(1, 2 * m, phase)?,
        })
    }

    pub fn params(&self) -> EncoderParams {
        self.params
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn output_dim(&self) -> usize {
        2 * self.params.m
    }

    /// Encodes `v` of shape `(d,)` to `(2m,)`, or a batch `(n, d)` to `(n, 2m)`.
    pub fn encode<'t>(&self, v: Var<'t>) -> Result<Var<'t>> {
        let tape = v.tape();
        let shape = v.shape();
        let d = self.params.d;
        let (rows, flat) = match shape.as_slice() {
            [k] if *k == d => (1, true),
            [n, k] if *k == d => (*n, false),
            _ => {
                return Err(Error::LengthMismatch {
                    what: "encoder input",
                    got: *shape.last().unwrap_or(&0),
                    expected: d,
                })
            }
        };
        let v2 = if flat { v.reshape(vec![1, d])? } else { v };
        let projected = v2
            .matmul(tape.leaf(self.paired_basis_t.clone()))?
            .affine(2.0 * PI, 0.0)?;
        let phase = if rows == 1 {
            tape.leaf(self.phase.clone())
        } else {
            tape.leaf(Tensor::full(&[rows, 1], 1.0))
                .matmul(tape.leaf(self.phase.clone()))?
        };
        let mut out = projected.add(phase)?.sin()?;
        if self.coeffs.iter().any(|&p| p != 1.0) {
            let p_row: Vec<f64> = self.coeffs.iter().flat_map(|&p| [p, p]).collect();
            let p = tape.leaf(Tensor::matrix(1, 2 * self.params.m, p_row)?);
            let p = if rows == 1 {
                p
            } else {
                tape.leaf(Tensor::full(&[rows, 1], 1.0)).matmul(p)?
            };
            out = out.mul(p)?;
        }
        if flat {
            out = out.reshape(vec![2 * self.params.m])?;
        }
        Ok(out)
    }

    /// Value-only encoding of one normalized vector.
    pub fn encode_value(&self, v: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let out = self.encode(tape.leaf(Tensor::vector(v.to_vec())))?;
        let data = out.value().data().to_vec();
        Ok(data)
    }

    /// Encodes `(age, diagnosis)` on the tape with the age as a differentiable
    /// scalar. Returns a `(1, 2m)` row.
    pub fn encode_condition<'t>(&self, age: Var<'t>, diagnosis: Diagnosis) -> Result<Var<'t>> {
        let tape = age.tape();
        let v0 = normalize_age_var(age)?.reshape(vec![1])?;
        let v1 = tape.leaf(Tensor::vector(vec![diagnosis.coordinate()]));
        let v = tape.concat(&[v0, v1], 0)?.reshape(vec![1, 2])?;
        self.encode(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_encoder_has_200_outputs() {
        let enc = FourierEncoder::new(100, 2, 10.0, 7).unwrap();
        assert_eq!(enc.output_dim(), 200);
        assert_eq!(enc.encode_value(&[0.3, 0.5]).unwrap().len(), 200);
    }

    #[test]
    fn same_seed_same_basis() {
        let a = FourierEncoder::new(100, 2, 10.0, 42).unwrap();
        let b = FourierEncoder::new(100, 2, 10.0, 42).unwrap();
        let bits = |e: &FourierEncoder| e.basis().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = FourierEncoder::new(100, 2, 10.0, 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn basis_standard_deviation() {
        let enc = FourierEncoder::new(50_000, 2, 10.0, 1).unwrap();
        let x = enc.basis().data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((9.9..=10.1).contains(&std), "std {std}");
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(FourierEncoder::new(0, 2, 10.0, 0).is_err());
        assert!(FourierEncoder::new(3, 0, 10.0, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let cv = |a, d| ConditioningVector {
            age_years: a,
            diagnosis: d,
        };
        assert_eq!(cv(60.0, Diagnosis::Cn).normalize().unwrap(), [0.0, 0.0]);
        assert_eq!(cv(75.0, Diagnosis::Ad).normalize().unwrap(), [0.5, 0.5]);
        assert_eq!(cv(90.0, Diagnosis::Cn).normalize().unwrap(), [1.0 - 1e-9, 0.0]);
        assert!(matches!(
            cv(59.0, Diagnosis::Cn).normalize(),
            Err(Error::AgeOutOfRange { .. })
        ));
        assert!(cv(90.5, Diagnosis::Ad).normalize().is_err());
    }

    #[test]
    fn encode_at_origin() {
        let enc = FourierEncoder::new(5, 2, 10.0, 3).unwrap();
        let out = enc.encode_value(&[0.0, 0.0]).unwrap();
        for pair in out.chunks(2) {
            assert_eq!(pair, &[1.0, 0.0]);
        }
    }

    #[test]
    fn encode_quarter_turn() {
        let params = EncoderParams {
            m: 1,
            d: 2,
            scale: 1.0,
            seed: 0,
        };
        let basis = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let enc = FourierEncoder::with_basis(params, basis, vec![1.0]).unwrap();
        let out = enc.encode_value(&[0.25, 0.0]).unwrap();
        assert!(out[0].abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15, "{out:?}");
    }

    #[test]
    fn dimension_mismatch() {
        let enc = FourierEncoder::new(4, 2, 10.0, 3).unwrap();
        assert!(matches!(
            enc.encode_value(&[0.1, 0.2, 0.3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn coefficients_scale_pairs() {
        let params = EncoderParams {
            m: 2,
            d: 1,
            scale: 1.0,
            seed: 0,
        };
        let basis = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let enc = FourierEncoder::with_basis(params, basis, vec![2.0, 3.0]).unwrap();
        assert_eq!(enc.encode_value(&[0.4]).unwrap(), vec![2.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn age_gradient_matches_closed_form_and_finite_differences() {
        let enc = FourierEncoder::new(100, 2, 10.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = enc.params().m;
        for _ in 0..10 {
            let v = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let w: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // d/dv0 of w . gamma(v), via autodiff.
            let tape = Tape::new();
            let vv = tape.leaf(Tensor::vector(v.to_vec()));
            let root = enc
                .encode(vv)
                .unwrap()
                .mul(tape.leaf(Tensor::vector(w.clone())))
                .unwrap()
                .sum()
                .unwrap();
            let g = tape.backward(root).unwrap().wrt(vv).unwrap().data()[0];

            let closed: f64 = (0..m)
                .map(|j| {
                    let b = enc.basis().row(j);
                    let arg = 2.0 * PI * (b[0] * v[0] + b[1] * v[1]);
                    2.0 * PI * b[0] * (-w[2 * j] * arg.sin() + w[2 * j + 1] * arg.cos())
                })
                .sum();
            assert!((g - closed).abs() <= 1e-10 * closed.abs().max(1.0), "{g} vs {closed}");

            let h = 1e-7;
            let f = |x: f64| -> f64 {
                let out = enc.encode_value(&[x, v[1]]).unwrap();
                out.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let fd = (f(v[0] + h) - f(v[0] - h)) / (2.0 * h);
            assert!((g - fd).abs() / g.abs().max(1.0) < 1e-6, "{g} vs fd {fd}");
        }
    }

    #[test]
    fn batch_encoding_matches_rows() {
        let enc = FourierEncoder::new(8, 2, 10.0, 9).unwrap();
        let rows = [[0.1, 0.0], [0.7, 0.5], [0.33, 0.5]];
        let tape = Tape::new();
        let batch = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let out = enc.encode(batch).unwrap();
        let out = out.value();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(out.row(i), enc.encode_value(r).unwrap().as_slice());
        }
    }

    #[test]
    fn condition_encoding_clamps_at_upper_age() {
        let enc = FourierEncoder::new(4, 2, 10.0, 9).unwrap();
        let tape = Tape::new();
        let age = tape.scalar(90.0);
        let row = enc.encode_condition(age, Diagnosis::Ad).unwrap();
        let expected = enc.encode_value(&[V_MAX, 0.5]).unwrap();
        assert_eq!(row.value().data(), expected.as_slice());
        let g = tape.backward(row.sum().unwrap()).unwrap().wrt(age).unwrap();
        assert_eq!(g.item(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn squared_norm_is_m(v0 in 0.0f64..1.0, v1 in 0.0f64..1.0, seed in 0u64..50) {
                let enc = FourierEncoder::new(100, 2, 10.0, seed).unwrap();
                let out = enc.encode_value(&[v0, v1]).unwrap();
                let norm: f64 = out.iter().map(|x| x * x).sum();
                prop_assert!((norm - 100.0).abs() < 1e-9);
            }

            #[test]
            fn encoding_is_frozen(v0 in 0.0f64..1.0, v1 in 0.0f64..1.0) {
                let enc = FourierEncoder::new(16, 2, 10.0, 1).unwrap();
                let a = enc.encode_value(&[v0, v1]).unwrap();
                let b = enc.encode_value(&[v0, v1]).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
