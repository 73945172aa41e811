use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{metrics, MetricsReport};
use crate::bddc::{Bddc, BddcConfig, Correction, WaldStats};
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::netmodel::{BusId, NetworkCase, PmuPlacement};
use crate::powerflow::{features_from_state, solve_pf, solve_pf_from, PfOptions};
use crate::sampler::{apply_noise, inject_bad_data, ExtremeScenarios, NoiseModel};
use crate::{par_map, rng};

/// Estimation error with and without bad-data correction at one bad-data
/// probability and severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    /// Multiple of the training standard deviation.
    pub severity: f64,
    pub corrupted_fraction: f64,
    pub none: (f64, f64),
    pub mean: (f64, f64),
    pub noc: (f64, f64),
}

/// Detection and correction inputs shared by the studies.
pub struct BddcSetup<'a> {
    pub stats: &'a WaldStats,
    /// Operating-condition database for nearest-condition correction.
    pub database: ArrayView2<'a, f64>,
    pub placement: &'a PmuPlacement,
    pub case: &'a NetworkCase,
    pub config: BddcConfig,
}

impl BddcSetup<'_> {
    fn build(&self, correction: Correction, esf: bool) -> Result<Bddc> {
        let config = BddcConfig {
            correction,
            esf_enabled: esf,
            ..self.config.clone()
        };
        Bddc::new(
            self.stats.clone(),
            self.database.to_owned(),
            self.placement,
            self.case,
            config,
        )
    }
}

fn corrected(bddc: &Bddc, z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, usize)> {
    let rows = par_map(z.nrows(), |r| bddc.process(z.row(r)));
    let mut out = Array2::zeros(z.dim());
    let mut suppressed = 0;
    for (r, res) in rows.into_iter().enumerate() {
        let res = res?;
        suppressed += usize::from(res.suppressed);
        out.row_mut(r)
            .assign(&ndarray::ArrayView1::from(&res.corrected));
    }
    Ok((out, suppressed))
}

fn score(
    model: &MlpModel,
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<MetricsReport> {
    metrics(model.predict_batch(z)?.view(), x)
}

/// Corrupts `z` at each `(eta, severity)` point and scores the model with
/// no correction, training-mean replacement and nearest-condition
/// replacement. The extreme-scenario filter follows `setup.config`.
pub fn correction_sweep(
    model: &MlpModel,
    setup: &BddcSetup<'_>,
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    points: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let esf = setup.config.esf_enabled;
    let mean = setup.build(Correction::Mean, esf)?;
    let noc = setup.build(Correction::Noc, esf)?;
    let mut rows = Vec::with_capacity(points.len());
    for &(eta, severity) in points {
        let (bad, mask) = inject_bad_data(z, eta, severity, setup.stats, seed)?;
        let none = score(model, bad.view(), x)?;
        let m = score(model, corrected(&mean, bad.view())?.0.view(), x)?;
        let n = score(model, corrected(&noc, bad.view())?.0.view(), x)?;
        rows.push(SweepRow {
            eta,
            severity,
            corrupted_fraction: mask.corrupted_fraction(),
            none: (none.mag_mape, none.ang_mae),
            mean: (m.mag_mape, m.ang_mae),
            noc: (n.mag_mape, n.ang_mae),
        });
    }
    Ok(rows)
}

/// Mean and standard deviation over scenarios of the per-scenario errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeRow {
    pub method: String,
    pub mape_mean: f64,
    pub mape_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeReport {
    pub scenarios: usize,
    /// Scenarios in which the filter suppressed at least one flag.
    pub suppressed: usize,
    pub rows: Vec<ExtremeRow>,
}

/// Noisy features and true states of each stressed scenario.
pub fn scenario_features(
    case: &NetworkCase,
    placement: &PmuPlacement,
    scenarios: &ExtremeScenarios,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = case.n_buses();
    let count = scenarios.scales.len();
    let start = solve_pf(case, &PfOptions::default())?;
    let warm = PfOptions {
        flat_start: false,
        ..PfOptions::default()
    };
    let solved = par_map(count, |k| -> Result<(Vec<f64>, Vec<f64>)> {
        let sc = scenarios.case(case, k)?;
        let sol = solve_pf_from(&sc, &warm, &start)?;
        let z = features_from_state(&sc, placement, &sol.v_mag, &sol.v_ang)?;
        let mut x = sol.v_mag;
        x.extend(sol.v_ang);
        Ok((z, x))
    });
    let m = placement.n_features();
    let mut z = Array2::zeros((count, m));
    let mut x = Array2::zeros((count, 2 * n));
    for (k, r) in solved.into_iter().enumerate() {
        let (zk, xk) = r?;
        z.row_mut(k).assign(&ndarray::ArrayView1::from(&zk));
        x.row_mut(k).assign(&ndarray::ArrayView1::from(&xk));
    }
    let is_angle: Vec<bool> = placement
        .feature_schema
        .iter()
        .map(|f| f.kind.is_angle())
        .collect();
    Ok((apply_noise(&z, &is_angle, noise, seed)?, x))
}

/// Sets every feature of the PMUs at `buses` to `μ₀ ± severity·σ₀` with a
/// random sign per feature.
pub fn corrupt_pmus(
    z: &mut Array2<f64>,
    placement: &PmuPlacement,
    buses: &[BusId],
    stats: &WaldStats,
    severity: f64,
    seed: u64,
) -> Result<()> {
    if stats.len() != z.ncols() {
        return Err(Error::Dimension(format!(
            "{} statistics for {} features",
            stats.len(),
            z.ncols()
        )));
    }
    let mut cols = Vec::new();
    for &b in buses {
        let f = placement.features_of(b);
        if f.is_empty() {
            return Err(Error::Validation(format!("no PMU at bus {b}")));
        }
        cols.extend(f);
    }
    let base = rng::sub_seed(seed, "bad-data");
    for (r, mut row) in z.rows_mut().into_iter().enumerate() {
        let mut g = rng::row_stream(base, r as u64);
        for &j in &cols {
            let sign = if g.random::<bool>() { 1.0 } else { -1.0 };
            row[j] = stats.mean[j] + sign * severity * stats.std[j];
        }
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn per_scenario(
    model: &MlpModel,
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    method: &str,
) -> Result<ExtremeRow> {
    let est = model.predict_batch(z)?;
    let mut mape = Vec::with_capacity(z.nrows());
    let mut mae = Vec::with_capacity(z.nrows());
    for k in 0..z.nrows() {
        let r = metrics(
            est.slice(ndarray::s![k..k + 1, ..]),
            x.slice(ndarray::s![k..k + 1, ..]),
        )?;
        mape.push(r.mag_mape);
        mae.push(r.ang_mae);
    }
    let (mape_mean, mape_std) = mean_std(&mape);
    let (mae_mean, mae_std) = mean_std(&mae);
    Ok(ExtremeRow {
        method: method.into(),
        mape_mean,
        mape_std,
        mae_mean,
        mae_std,
    })
}

/// Scores the model on stressed scenarios whose features at `bad_pmus`
/// are corrupted, without correction, with correction and with correction
/// behind the extreme-scenario filter.
pub fn extreme_study(
    model: &MlpModel,
    setup: &BddcSetup<'_>,
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    bad_pmus: &[BusId],
    severity: f64,
    seed: u64,
) -> Result<ExtremeReport> {
    if z.nrows() == 0 {
        return Err(Error::Validation("no scenarios".into()));
    }
    let mut bad = z.to_owned();
    corrupt_pmus(
        &mut bad,
        setup.placement,
        bad_pmus,
        setup.stats,
        severity,
        seed,
    )?;
    let plain = setup.build(Correction::Noc, false)?;
    let filtered = setup.build(Correction::Noc, true)?;
    let (without, _) = corrected(&plain, bad.view())?;
    let (with, suppressed) = corrected(&filtered, bad.view())?;
    Ok(ExtremeReport {
        scenarios: z.nrows(),
        suppressed,
        rows: vec![
            per_scenario(model, bad.view(), x, "no correction")?,
            per_scenario(model, without.view(), x, "correction without filter")?,
            per_scenario(model, with.view(), x, "correction with filter")?,
        ],
    })
}
