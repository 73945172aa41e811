use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::standard_normal;
use crate::error::{Error, Result};
use crate::rng;

/// Finite Gaussian mixture of scalar errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Mixture {
    fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Validation(
                "mixture needs equally long, non-empty means/stds/weights".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Validation(format!(
                "mixture weights must be positive and sum to 1: {:?}",
                self.weights
            )));
        }
        if self.stds.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Validation("mixture stds must be >= 0".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| m * w)
            .sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k] + self.stds[k] * standard_normal(rng)
    }
}

/// Measurement error model. Magnitude parameters are percent of reading,
/// angle parameters radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Gaussian {
        mag_std_pct: f64,
        ang_std: f64,
    },
    Gmm {
        mag: Mixture,
        ang: Mixture,
    },
    Laplace {
        mag_loc_pct: f64,
        mag_scale_pct: f64,
        ang_loc: f64,
        ang_scale: f64,
    },
}

fn laplace<R: Rng>(rng: &mut R, loc: f64, scale: f64) -> f64 {
    // Inverse CDF on u in (-1/2, 1/2).
    let u: f64 = rng.random::<f64>() - 0.5;
    loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

impl NoiseModel {
    pub fn gaussian() -> Self {
        NoiseModel::Gaussian {
            mag_std_pct: 0.0033,
            ang_std: 0.0029,
        }
    }

    pub fn gmm() -> Self {
        NoiseModel::Gmm {
            mag: Mixture {
                means: vec![0.0, 0.005],
                stds: vec![0.0015, 0.0015],
                weights: vec![0.3, 0.7],
            },
            ang: Mixture {
                means: vec![0.0, 0.0043],
                stds: vec![0.0014, 0.0014],
                weights: vec![0.3, 0.7],
            },
        }
    }

    pub fn laplace() -> Self {
        NoiseModel::Laplace {
            mag_loc_pct: 0.001,
            mag_scale_pct: 0.0015,
            ang_loc: 0.0009,
            ang_scale: 0.0013,
        }
    }

    /// Preset by family name: `none`, `gaussian`, `gmm` or `laplace`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "none" => Ok(NoiseModel::None),
            "gaussian" => Ok(Self::gaussian()),
            "gmm" => Ok(Self::gmm()),
            "laplace" | "laplacian" => Ok(Self::laplace()),
            other => Err(Error::Validation(format!("unknown noise family '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::None => "none",
            NoiseModel::Gaussian { .. } => "gaussian",
            NoiseModel::Gmm { .. } => "gmm",
            NoiseModel::Laplace { .. } => "laplace",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian {
                mag_std_pct,
                ang_std,
            } if *mag_std_pct >= 0.0 && *ang_std >= 0.0 => Ok(()),
            NoiseModel::Gmm { mag, ang } => {
                mag.validate()?;
                ang.validate()
            }
            NoiseModel::Laplace {
                mag_scale_pct,
                ang_scale,
                mag_loc_pct,
                ang_loc,
            } if *mag_scale_pct >= 0.0
                && *ang_scale >= 0.0
                && mag_loc_pct.is_finite()
                && ang_loc.is_finite() =>
            {
                Ok(())
            }
            other => Err(Error::Validation(format!(
                "invalid noise parameters {other:?}"
            ))),
        }
    }

    /// One error draw: percent of reading for magnitudes, radians for angles.
    pub fn draw<R: Rng>(&self, rng: &mut R, angle: bool) -> f64 {
        match (self, angle) {
            (NoiseModel::None, _) => 0.0,
            (NoiseModel::Gaussian { mag_std_pct, .. }, false) => mag_std_pct * standard_normal(rng),
            (NoiseModel::Gaussian { ang_std, .. }, true) => ang_std * standard_normal(rng),
            (NoiseModel::Gmm { mag, .. }, false) => mag.sample(rng),
            (NoiseModel::Gmm { ang, .. }, true) => ang.sample(rng),
            (
                NoiseModel::Laplace {
                    mag_loc_pct,
                    mag_scale_pct,
                    ..
                },
                false,
            ) => laplace(rng, *mag_loc_pct, *mag_scale_pct),
            (
                NoiseModel::Laplace {
                    ang_loc, ang_scale, ..
                },
                true,
            ) => laplace(rng, *ang_loc, *ang_scale),
        }
    }

    /// Perturbs one feature value.
    pub fn perturb<R: Rng>(&self, rng: &mut R, value: f64, angle: bool) -> f64 {
        let e = self.draw(rng, angle);
        if angle {
            value + e
        } else {
            value * (1.0 + e / 100.0)
        }
    }
}

/// Adds noise to every row of `z`. Row `r` draws from its own stream of
/// `seed`, so rows can be noised in any order.
pub fn apply_noise(
    z: &Array2<f64>,
    is_angle: &[bool],
    model: &NoiseModel,
    seed: u64,
) -> Result<Array2<f64>> {
    model.validate()?;
    if is_angle.len() != z.ncols() {
        return Err(Error::Dimension(format!(
            "{} angle flags for {} features",
            is_angle.len(),
            z.ncols()
        )));
    }
    if let Some(v) = z
        .iter()
        .zip(is_angle.iter().cycle())
        .find(|(v, &a)| !a && !(**v >= 0.0))
    {
        return Err(Error::Validation(format!(
            "magnitude feature must be non-negative, got {}",
            v.0
        )));
    }
    if matches!(model, NoiseModel::None) {
        return Ok(z.clone());
    }
    let base = rng::sub_seed(seed, "noise");
    let mut out = z.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut g = rng::row_stream(base, r as u64);
        for (v, &a) in row.iter_mut().zip(is_angle) {
            *v = model.perturb(&mut g, *v, a);
        }
    }
    Ok(out)
}
