//! Conventional geometric augmentations with bilinear resampling and zero
//! padding.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugOp {
    Rotate,
    Shift,
    Scale,
    Flip,
}

impl AugOp {
    pub const ALL: [AugOp; 4] = [AugOp::Rotate, AugOp::Shift, AugOp::Scale, AugOp::Flip];

    /// Largest accepted magnitude: degrees, fraction of size, relative
    /// zoom, flip probability.
    pub fn max_magnitude(self) -> f64 {
        match self {
            AugOp::Rotate => 10.0,
            AugOp::Shift => 0.2,
            AugOp::Scale => 0.2,
            AugOp::Flip => 1.0,
        }
    }
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(AugOp::Rotate),
            "shift" => Ok(AugOp::Shift),
            "scale" => Ok(AugOp::Scale),
            "flip" => Ok(AugOp::Flip),
            other => Err(Error::Unknown {
                kind: "augmentation",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Rotate {
        degrees: f64,
    },
    /// Translation as a fraction of the image size.
    Shift {
        dx: f64,
        dy: f64,
    },
    Scale {
        factor: f64,
    },
    FlipHorizontal,
    Identity,
}

fn bilinear(image: &[f64], n: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (n - 1) as f64 || xx > (n - 1) as f64 {
            0.0
        } else {
            image[yy as usize * n + xx as usize]
        }
    };
    let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
    if fx != 0.0 {
        v += at(y0, x0 + 1.0) * (1.0 - fy) * fx;
    }
    if fy != 0.0 {
        v += at(y0 + 1.0, x0) * fy * (1.0 - fx);
        if fx != 0.0 {
            v += at(y0 + 1.0, x0 + 1.0) * fy * fx;
        }
    }
    v
}

/// Applies `t` to a square row-major image.
pub fn apply_transform(image: &[f64], size: usize, t: Transform) -> Result<Vec<f64>> {
    if image.len() != size * size {
        return Err(Error::LengthMismatch {
            what: "image",
            got: image.len(),
            expected: size * size,
        });
    }
    let n = size;
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; n * n];
    match t {
        Transform::Identity => out.copy_from_slice(image),
        Transform::FlipHorizontal => {
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = image[i * n + (n - 1 - j)];
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64, j as f64);
                    let (sy, sx) = match t {
                        Transform::Rotate { degrees } => {
                            let (s, co) = (-degrees.to_radians()).sin_cos();
                            let (dy, dx) = (y - c, x - c);
                            (co * dy + s * dx + c, -s * dy + co * dx + c)
                        }
                        Transform::Shift { dx, dy } => (y - dy * n as f64, x - dx * n as f64),
                        Transform::Scale { factor } => ((y - c) / factor + c, (x - c) / factor + c),
                        _ => unreachable!(),
                    };
                    out[i * n + j] = bilinear(image, n, sy, sx);
                }
            }
        }
    }
    Ok(out)
}

/// Draws a random transform of kind `op` within `magnitude` and applies it.
pub fn conventional_augment(image: &[f64], size: usize, op: AugOp, magnitude: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=op.max_magnitude()).contains(&magnitude) {
        return Err(Error::InvalidConfig(format!(
            "{op:?} magnitude {magnitude} outside [0, {}]",
            op.max_magnitude()
        )));
    }
    if magnitude == 0.0 {
        return apply_transform(image, size, Transform::Identity);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = match op {
        AugOp::Rotate => Transform::Rotate {
            degrees: rng.gen_range(-magnitude..=magnitude),
        },
        AugOp::Shift => Transform::Shift {
            dx: rng.gen_range(-magnitude..=magnitude),
            dy: rng.gen_range(-magnitude..=magnitude),
        },
        AugOp::Scale => Transform::Scale {
            factor: 1.0 + rng.gen_range(-magnitude..=magnitude),
        },
        AugOp::Flip => {
            if rng.gen_bool(magnitude) {
                Transform::FlipHorizontal
            } else {
                Transform::Identity
            }
        }
    };
    apply_transform(image, size, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize) -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let mut v = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c + 1.0).powi(2);
                v.push((-r2 / 18.0).exp());
            }
        }
        v
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| (k as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let img = ramp(16);
        for op in AugOp::ALL {
            assert_eq!(conventional_augment(&img, 16, op, 0.0, 5).unwrap(), img);
        }
        for t in [
            Transform::Rotate { degrees: 0.0 },
            Transform::Shift { dx: 0.0, dy: 0.0 },
            Transform::Scale { factor: 1.0 },
        ] {
            assert_eq!(apply_transform(&img, 16, t).unwrap(), img);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(16);
        let once = conventional_augment(&img, 16, AugOp::Flip, 1.0, 3).unwrap();
        assert_ne!(once, img);
        let twice = conventional_augment(&once, 16, AugOp::Flip, 1.0, 3).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn rotation_round_trip_on_smooth_image() {
        let img = blob(16);
        let fwd = apply_transform(&img, 16, Transform::Rotate { degrees: 10.0 }).unwrap();
        let back = apply_transform(&fwd, 16, Transform::Rotate { degrees: -10.0 }).unwrap();
        let err = img.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "round-trip error {err}");
    }

    #[test]
    fn whole_pixel_shift_moves_content() {
        let img = ramp(8);
        let out = apply_transform(&img, 8, Transform::Shift { dx: 0.125, dy: 0.0 }).unwrap();
        for i in 0..8 {
            assert_eq!(out[i * 8], 0.0);
            for j in 1..8 {
                assert_eq!(out[i * 8 + j], img[i * 8 + j - 1]);
            }
        }
    }

    #[test]
    fn unknown_op_and_bad_magnitude() {
        assert!(matches!("shear".parse::<AugOp>(), Err(Error::Unknown { .. })));
        assert_eq!("rotate".parse::<AugOp>().unwrap(), AugOp::Rotate);
        assert!(conventional_augment(&ramp(4), 4, AugOp::Rotate, 11.0, 0).is_err());
        assert!(conventional_augment(&ramp(4), 4, AugOp::Shift, 0.3, 0).is_err());
    }

    #[test]
    fn random_augment_is_seeded() {
        let img = blob(16);
        let a = conventional_augment(&img, 16, AugOp::Rotate, 10.0, 9).unwrap();
        let b = conventional_augment(&img, 16, AugOp::Rotate, 10.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), img.len());
    }
}
