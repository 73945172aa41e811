//! PMU-only weighted least-squares state estimator in rectangular
//! coordinates. With voltages and currents written as real and imaginary
//! parts, every PMU phasor is a linear function of the bus voltages.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::netmodel::{FeatureKind, NetworkCase, PmuPlacement};

/// Relative singular-value threshold for the numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// `z = H x` with `x = [Re V; Im V]` and two rows (real, imaginary) per
/// measured phasor.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMeasurementModel {
    pub h: DMatrix<f64>,
    /// One weight per row.
    pub weights: Vec<f64>,
    pub phasor_names: Vec<String>,
    /// Positions of each phasor's magnitude and angle in the placement's
    /// feature vector.
    pub phasor_features: Vec<(usize, usize)>,
    pub n_buses: usize,
    pub slack: usize,
}

/// Writes `a · V_bus` into rows `r` (real) and `r + 1` (imaginary).
fn put(h: &mut DMatrix<f64>, r: usize, n: usize, bus: usize, a: Complex64) {
    h[(r, bus)] += a.re;
    h[(r, n + bus)] -= a.im;
    h[(r + 1, bus)] += a.im;
    h[(r + 1, n + bus)] += a.re;
}

pub fn build_h(case: &NetworkCase, placement: &PmuPlacement) -> Result<LinearMeasurementModel> {
    let n = case.n_buses();
    let schema = &placement.feature_schema;
    let mut phasors = Vec::new();
    let mut k = 0;
    while k < schema.len() {
        let (m, a) = (&schema[k], schema.get(k + 1));
        let pair_ok = match (m.kind, a.map(|f| f.kind)) {
            (FeatureKind::VMag, Some(FeatureKind::VAng))
            | (FeatureKind::IMag, Some(FeatureKind::IAng)) => {
                a.is_some_and(|a| a.bus == m.bus && a.branch == m.branch)
            }
            _ => false,
        };
        if !pair_ok {
            return Err(Error::Schema(format!(
                "feature {} is not followed by its angle",
                m.name
            )));
        }
        phasors.push((k, k + 1));
        k += 2;
    }

    let mut h = DMatrix::zeros(2 * phasors.len(), 2 * n);
    let mut names = Vec::with_capacity(phasors.len());
    for (p, &(mi, _)) in phasors.iter().enumerate() {
        let f = &schema[mi];
        let r = 2 * p;
        let i = case.bus_index(f.bus)?;
        match f.kind {
            FeatureKind::VMag => {
                put(&mut h, r, n, i, Complex64::new(1.0, 0.0));
                names.push(phasor_name("V", &f.name));
            }
            _ => {
                let id = f
                    .branch
                    .ok_or_else(|| Error::Schema(format!("{} has no branch", f.name)))?;
                let br = case.branch(id)?;
                if !br.in_service {
                    return Err(Error::BranchOutOfService(id.0));
                }
                let far_id = br
                    .other_end(f.bus)
                    .ok_or_else(|| Error::Schema(format!("{} is not at bus {}", f.name, f.bus)))?;
                let far = case.bus_index(far_id)?;
                let ys = br.series_admittance();
                put(
                    &mut h,
                    r,
                    n,
                    i,
                    ys + Complex64::new(0.0, 0.5 * br.shunt_susceptance_total),
                );
                put(&mut h, r, n, far, -ys);
                names.push(phasor_name("I", &f.name));
            }
        }
    }
    let rows = h.nrows();
    Ok(LinearMeasurementModel {
        h,
        weights: vec![1.0; rows],
        phasor_names: names,
        phasor_features: phasors,
        n_buses: n,
        slack: case.slack_index(),
    })
}

fn phasor_name(prefix: &str, feature: &str) -> String {
    feature
        .split_once('@')
        .map_or_else(|| feature.to_string(), |(_, at)| format!("{prefix}@{at}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observability {
    pub observable: bool,
    pub rank: usize,
    pub required: usize,
}

impl Observability {
    pub fn deficiency(&self) -> usize {
        self.required - self.rank
    }
}

impl LinearMeasurementModel {
    /// Sets one weight per phasor; both rows of a phasor share it.
    pub fn set_phasor_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.phasor_names.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} phasors",
                w.len(),
                self.phasor_names.len()
            )));
        }
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Validation(
                "weights must be positive and finite".into(),
            ));
        }
        self.weights = w.iter().flat_map(|&v| [v, v]).collect();
        Ok(())
    }

    fn weighted_h(&self) -> DMatrix<f64> {
        let mut wh = self.h.clone();
        for (r, &w) in self.weights.iter().enumerate() {
            wh.row_mut(r).scale_mut(w.sqrt());
        }
        wh
    }

    /// Real and imaginary parts of each measured phasor.
    pub fn features_to_rect(&self, z: &[f64]) -> Result<Vec<f64>> {
        let need = self.phasor_features.last().map_or(0, |&(_, a)| a + 1);
        if z.len() < need {
            return Err(Error::Dimension(format!(
                "{} features, schema needs {need}",
                z.len()
            )));
        }
        Ok(self
            .phasor_features
            .iter()
            .flat_map(|&(m, a)| [z[m] * z[a].cos(), z[m] * z[a].sin()])
            .collect())
    }
}

/// Numerical rank of `H` from its singular values.
pub fn check_observable(model: &LinearMeasurementModel) -> Observability {
    let required = 2 * model.n_buses;
    if model.h.nrows() == 0 {
        return Observability {
            observable: false,
            rank: 0,
            required,
        };
    }
    let sv = model.h.clone().singular_values();
    let max = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count();
    Observability {
        observable: rank == required,
        rank,
        required,
    }
}

/// Precomputed weighted pseudo-inverse of an observable model.
#[derive(Clone, Debug)]
pub struct LseSolver {
    model: LinearMeasurementModel,
    /// `(Hᵀ W H)⁻¹ Hᵀ W`.
    gain: DMatrix<f64>,
    /// `(Hᵀ W H)⁻¹`, the error covariance for unit-variance weighted noise.
    covariance: DMatrix<f64>,
}

impl LseSolver {
    pub fn new(model: &LinearMeasurementModel) -> Result<Self> {
        let obs = check_observable(model);
        if !obs.observable {
            return Err(Error::Unobservable {
                rank: obs.rank,
                required: obs.required,
            });
        }
        let wh = model.weighted_h();
        let svd = wh.clone().svd(true, true);
        let pinv = svd
            .pseudo_inverse(0.0)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let mut gain = pinv;
        for (r, &w) in model.weights.iter().enumerate() {
            gain.column_mut(r).scale_mut(w.sqrt());
        }
        let info = wh.transpose() * &wh;
        let covariance = info
            .try_inverse()
            .ok_or_else(|| Error::Singular("gain matrix".into()))?;
        Ok(LseSolver {
            model: model.clone(),
            gain,
            covariance,
        })
    }

    pub fn model(&self) -> &LinearMeasurementModel {
        &self.model
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Rectangular state `[Re V; Im V]`.
    pub fn solve_rect(&self, z_rect: &[f64]) -> Result<Vec<f64>> {
        if z_rect.len() != self.model.h.nrows() {
            return Err(Error::Dimension(format!(
                "{} measurements, model has {}",
                z_rect.len(),
                self.model.h.nrows()
            )));
        }
        Ok((&self.gain * DVector::from_column_slice(z_rect))
            .as_slice()
            .to_vec())
    }

    /// Polar state (all magnitudes, then angles relative to the slack bus).
    pub fn solve(&self, z_rect: &[f64]) -> Result<Vec<f64>> {
        let x = self.solve_rect(z_rect)?;
        let n = self.model.n_buses;
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[i], x[n + i])).collect();
        let reference = v[self.model.slack].arg();
        let mut out: Vec<f64> = v.iter().map(|c| c.norm()).collect();
        out.extend(v.iter().map(|c| wrap(c.arg() - reference)));
        Ok(out)
    }

    /// Estimates states for each row of a PMU feature matrix.
    pub fn estimate_features(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.model.n_buses;
        let mut out = Array2::zeros((z.nrows(), 2 * n));
        for (r, row) in z.rows().into_iter().enumerate() {
            let rect = self
                .model
                .features_to_rect(row.as_slice().map_or(&row.to_vec(), |s| s))?;
            let x = self.solve(&rect)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&x));
        }
        Ok(out)
    }
}

fn wrap(a: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut w = a % (2.0 * pi);
    if w > pi {
        w -= 2.0 * pi;
    } else if w <= -pi {
        w += 2.0 * pi;
    }
    w
}

/// One-shot weighted least-squares estimate in polar form.
pub fn solve_lse(model: &LinearMeasurementModel, z_rect: &[f64]) -> Result<Vec<f64>> {
    LseSolver::new(model)?.solve(z_rect)
}
