use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::bddc::WaldStats;
use crate::error::{Error, Result};
use crate::netmodel::{BusId, NetworkCase};
use crate::powerflow::{solve_pf, solve_pf_from, PfOptions};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BadDataMask {
    pub mask: Array2<bool>,
    pub eta: f64,
    pub severity: f64,
}

impl BadDataMask {
    pub fn corrupted_fraction(&self) -> f64 {
        let n = self.mask.len().max(1);
        self.mask.iter().filter(|&&b| b).count() as f64 / n as f64
    }
}

/// Replaces each entry independently with probability `eta` by
/// `μ₀ ± severity·σ₀` (random sign).
pub fn inject_bad_data(
    z: ArrayView2<'_, f64>,
    eta: f64,
    severity: f64,
    stats: &WaldStats,
    seed: u64,
) -> Result<(Array2<f64>, BadDataMask)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Validation(format!(
            "bad-data probability must be in [0, 1], got {eta}"
        )));
    }
    if !(severity > 0.0) {
        return Err(Error::Validation(format!(
            "severity must be positive, got {severity}"
        )));
    }
    if stats.len() != z.ncols() {
        return Err(Error::Dimension(format!(
            "{} Wald statistics for {} features",
            stats.len(),
            z.ncols()
        )));
    }
    let base = rng::sub_seed(seed, "bad-data");
    let mut out = z.to_owned();
    let mut mask = Array2::from_elem(z.dim(), false);
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut g = rng::row_stream(base, r as u64);
        for (j, v) in row.iter_mut().enumerate() {
            // Always draw both numbers so the pattern at one eta is a subset
            // of the pattern at a larger eta.
            let u: f64 = g.random();
            let sign = if g.random::<bool>() { 1.0 } else { -1.0 };
            if u < eta {
                let bad = stats.mean[j] + sign * severity * stats.std[j];
                if bad != *v {
                    *v = bad;
                    mask[(r, j)] = true;
                }
            }
        }
    }
    Ok((
        out,
        BadDataMask {
            mask,
            eta,
            severity,
        },
    ))
}

/// Injection sets for stressed-load scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremeScenarios {
    /// `count × n_buses` net injections.
    pub p: Array2<f64>,
    pub q: Array2<f64>,
    /// Load multiplier finally used per scenario.
    pub scales: Vec<f64>,
    /// Scenarios whose scale had to be reduced to reach convergence.
    pub reduced: usize,
}

impl ExtremeScenarios {
    pub fn case(&self, base: &NetworkCase, k: usize) -> Result<NetworkCase> {
        let p: Vec<f64> = self.p.row(k).to_vec();
        let q: Vec<f64> = self.q.row(k).to_vec();
        base.with_injections(&p, &q, None)
            .map(|c| c.renamed(format!("{}-extreme{k}", base.name())))
    }
}

/// Multiplies the load at `stressed` buses by a factor drawn uniformly from
/// `scale_range`. A bus without load is stressed by the same multiple of the
/// system's mean bus load. The extra demand is subtracted from the net
/// injection and picked up by the slack. Scenarios that fail to converge are
/// retried with the excess shrunk by 20%.
pub fn make_extreme_scenarios(
    case: &NetworkCase,
    stressed: &[BusId],
    scale_range: (f64, f64),
    count: usize,
    seed: u64,
) -> Result<ExtremeScenarios> {
    let (lo, hi) = scale_range;
    if !(lo >= 1.0 && hi >= lo) {
        return Err(Error::Validation(format!(
            "load scale range must satisfy 1 <= lo <= hi, got {scale_range:?}"
        )));
    }
    let idx: Vec<usize> = stressed
        .iter()
        .map(|&b| case.bus_index(b))
        .collect::<Result<_>>()?;
    let loaded: Vec<_> = case.buses().iter().filter(|b| b.p_load > 0.0).collect();
    let (mean_p, mean_q) = if loaded.is_empty() {
        (0.0, 0.0)
    } else {
        let k = loaded.len() as f64;
        (
            loaded.iter().map(|b| b.p_load).sum::<f64>() / k,
            loaded.iter().map(|b| b.q_load).sum::<f64>() / k,
        )
    };
    let nominal: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| {
            let b = &case.buses()[i];
            if b.p_load > 0.0 {
                (b.p_load, b.q_load)
            } else {
                (mean_p, mean_q)
            }
        })
        .collect();

    let n = case.n_buses();
    let base_p: Vec<f64> = case.buses().iter().map(|b| b.p_inj).collect();
    let base_q: Vec<f64> = case.buses().iter().map(|b| b.q_inj).collect();
    let start = solve_pf(case, &PfOptions::default())?;
    let warm = PfOptions {
        flat_start: false,
        ..PfOptions::default()
    };
    let stream = rng::sub_seed(seed, "extreme");

    let mut p = Array2::zeros((count, n));
    let mut q = Array2::zeros((count, n));
    let mut scales = Vec::with_capacity(count);
    let mut reduced = 0;
    for k in 0..count {
        let mut g = rng::row_stream(stream, k as u64);
        let mut scale = if hi > lo { g.random_range(lo..=hi) } else { lo };
        let mut tries = 0;
        loop {
            let (mut pk, mut qk) = (base_p.clone(), base_q.clone());
            for (&i, &(pn, qn)) in idx.iter().zip(&nominal) {
                pk[i] -= (scale - 1.0) * pn;
                qk[i] -= (scale - 1.0) * qn;
            }
            let scenario = case.with_injections(&pk, &qk, None)?;
            match solve_pf_from(&scenario, &warm, &start) {
                Ok(_) => {
                    p.row_mut(k).assign(&ndarray::ArrayView1::from(&pk));
                    q.row_mut(k).assign(&ndarray::ArrayView1::from(&qk));
                    break;
                }
                Err(Error::Divergence { .. }) if tries < 30 => {
                    tries += 1;
                    scale = 1.0 + 0.8 * (scale - 1.0);
                }
                Err(e) => return Err(e),
            }
        }
        if tries > 0 {
            reduced += 1;
            log::info!("extreme scenario {k}: load scale reduced to {scale:.3}");
        }
        scales.push(scale);
    }
    Ok(ExtremeScenarios {
        p,
        q,
        scales,
        reduced,
    })
}
