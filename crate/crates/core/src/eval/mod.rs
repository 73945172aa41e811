//! Accuracy metrics, error-versus-hop profiles, total vector error,
//! streaming replay timing and the training-database size study.

mod sweep;

use std::time::Instant;

use ndarray::{s, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bddc::Bddc;
use crate::error::{Error, Result};
use crate::mlp::{train_arrays, MlpConfig, MlpModel, TrainData};
use crate::netmodel::{HopTable, NetworkCase, PmuPlacement};
use crate::sampler::{build_dataset, DatasetSpec, InjectionModel, NoiseModel, Part, Splits};

pub use sweep::{
    correction_sweep, corrupt_pmus, extreme_study, scenario_features, BddcSetup, ExtremeReport,
    ExtremeRow, SweepRow,
};

/// Quantiles of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 50.0),
            p95: percentile(&v, 95.0),
            max: v[v.len() - 1],
        })
    }
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute percentage error of bus voltage magnitudes, in percent.
    pub mag_mape: f64,
    /// Mean absolute error of bus voltage angles, in radians.
    pub ang_mae: f64,
    pub rmse: f64,
    pub per_bus_mape: Vec<f64>,
    pub per_bus_mae: Vec<f64>,
    /// Achieved total vector error of the noisy inputs, when known.
    pub input_tve: Option<Summary>,
}

/// Compares `F × 2n` state estimates (magnitudes then angles) with the truth.
pub fn metrics(est: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<MetricsReport> {
    if est.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "estimates {:?} vs truth {:?}",
            est.dim(),
            truth.dim()
        )));
    }
    let (f, cols) = est.dim();
    if f == 0 || cols == 0 || cols % 2 != 0 {
        return Err(Error::Dimension(format!(
            "expected a non-empty F × 2n matrix, got {f} × {cols}"
        )));
    }
    let n = cols / 2;
    if truth.slice(s![.., ..n]).iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Validation("true magnitudes must be positive".into()));
    }
    let mut per_bus_mape = vec![0.0; n];
    let mut per_bus_mae = vec![0.0; n];
    let mut sq = 0.0;
    for (e, t) in est.rows().into_iter().zip(truth.rows()) {
        for i in 0..n {
            per_bus_mape[i] += ((e[i] - t[i]) / t[i]).abs();
            per_bus_mae[i] += (e[n + i] - t[n + i]).abs();
        }
        sq += e
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    for i in 0..n {
        per_bus_mape[i] *= 100.0 / f as f64;
        per_bus_mae[i] /= f as f64;
    }
    Ok(MetricsReport {
        mag_mape: per_bus_mape.iter().sum::<f64>() / n as f64,
        ang_mae: per_bus_mae.iter().sum::<f64>() / n as f64,
        rmse: (sq / (f * cols) as f64).sqrt(),
        per_bus_mape,
        per_bus_mae,
        input_tve: None,
    })
}

/// `|measured − truth| / |truth|`.
pub fn tve(measured: Complex64, truth: Complex64) -> Result<f64> {
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::Validation("true phasor is zero".into()));
    }
    Ok((measured - truth).norm() / norm)
}

/// TVE of every (magnitude, angle) phasor pair in every row. Phasors whose
/// true value is zero are skipped.
pub fn input_tve(
    noisy: ArrayView2<'_, f64>,
    clean: ArrayView2<'_, f64>,
    is_angle: &[bool],
) -> Result<Vec<f64>> {
    if noisy.dim() != clean.dim() || is_angle.len() != noisy.ncols() {
        return Err(Error::Dimension(
            "noisy, clean and schema shapes differ".into(),
        ));
    }
    let pairs: Vec<usize> = (0..is_angle.len().saturating_sub(1))
        .filter(|&j| !is_angle[j] && is_angle[j + 1])
        .collect();
    let mut out = Vec::with_capacity(pairs.len() * noisy.nrows());
    for (zn, zc) in noisy.rows().into_iter().zip(clean.rows()) {
        for &j in &pairs {
            if zc[j] == 0.0 {
                continue;
            }
            out.push(tve(
                Complex64::from_polar(zn[j], zn[j + 1]),
                Complex64::from_polar(zc[j], zc[j + 1]),
            )?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopRow {
    pub hops: u32,
    pub buses: usize,
    pub mag_mape: f64,
    pub ang_mae: f64,
}

/// Errors grouped by the bus distance to the nearest PMU.
pub fn hop_profile(
    est: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    placement: &PmuPlacement,
    case: &NetworkCase,
) -> Result<Vec<HopRow>> {
    let report = metrics(est, truth)?;
    let n = case.n_buses();
    if report.per_bus_mape.len() != n {
        return Err(Error::Dimension(format!(
            "{} buses in estimates, {n} in case",
            report.per_bus_mape.len()
        )));
    }
    let table = HopTable::new(case, &placement.pmu_buses)?;
    let mut rows: Vec<HopRow> = Vec::new();
    for i in 0..n {
        let h = table.min_to_sources(i)?.ok_or_else(|| {
            Error::Validation(format!("bus {} cannot reach a PMU", case.buses()[i].id))
        })?;
        let row = match rows.iter_mut().find(|r| r.hops == h) {
            Some(r) => r,
            None => {
                rows.push(HopRow {
                    hops: h,
                    buses: 0,
                    mag_mape: 0.0,
                    ang_mae: 0.0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.buses += 1;
        row.mag_mape += report.per_bus_mape[i];
        row.ang_mae += report.per_bus_mae[i];
    }
    for r in &mut rows {
        r.mag_mape /= r.buses as f64;
        r.ang_mae /= r.buses as f64;
    }
    rows.sort_by_key(|r| r.hops);
    Ok(rows)
}

/// Per-frame wall-clock of detection, correction and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub frames: usize,
    pub budget_ms: f64,
    pub latency_ms: Summary,
    pub over_budget: usize,
    /// Frames in which bad data was flagged after filtering.
    pub flagged_frames: usize,
    pub estimates: Vec<Vec<f64>>,
}

/// Processing interval of a 30 frame/s PMU stream.
pub const FRAME_INTERVAL_MS: f64 = 33.0;

/// Replays the rows of `z` one frame at a time.
pub fn stream_replay(
    z: ArrayView2<'_, f64>,
    model: &MlpModel,
    bddc: Option<&Bddc>,
    budget_ms: f64,
) -> Result<StreamReport> {
    if z.nrows() == 0 {
        return Err(Error::Validation("no frames to replay".into()));
    }
    let mut latency = Vec::with_capacity(z.nrows());
    let mut estimates = Vec::with_capacity(z.nrows());
    let mut flagged_frames = 0;
    for row in z.rows() {
        let t = Instant::now();
        let frame = match bddc {
            Some(b) => {
                let r = b.process(row)?;
                flagged_frames += usize::from(!r.ibfs_esf.is_empty());
                r.corrected
            }
            None => row.to_vec(),
        };
        let x = model.predict(&frame)?;
        latency.push(t.elapsed().as_secs_f64() * 1e3);
        estimates.push(x);
    }
    let over_budget = latency.iter().filter(|&&l| l > budget_ms).count();
    Ok(StreamReport {
        frames: z.nrows(),
        budget_ms,
        latency_ms: Summary::of(&latency).expect("non-empty"),
        over_budget,
        flagged_frames,
        estimates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbStudyConfig {
    pub sizes: Vec<usize>,
    /// Held-out rows shared by every size.
    pub test_rows: usize,
    /// Share of each database used for validation.
    pub val_fraction: f64,
    pub mlp: MlpConfig,
    pub noise: NoiseModel,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbRow {
    pub size: usize,
    pub mag_mape: f64,
    pub ang_mae: f64,
    pub train_seconds: f64,
}

/// Trains one model per database size on nested prefixes of a single
/// scenario pool and scores each on the same test rows.
pub fn database_size_study(
    case: &NetworkCase,
    placement: &PmuPlacement,
    injections: &InjectionModel,
    cfg: &DbStudyConfig,
) -> Result<Vec<DbRow>> {
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() || sizes[0] < 2 {
        return Err(Error::Validation(
            "database sizes must be at least 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.test_rows == 0 {
        return Err(Error::Validation(
            "need val_fraction in [0, 1) and at least one test row".into(),
        ));
    }
    let pool = *sizes.last().expect("non-empty");
    let spec = DatasetSpec {
        samples: pool + cfg.test_rows,
        splits: Splits::new(pool, 0, cfg.test_rows),
        noise: cfg.noise.clone(),
        seed: cfg.seed,
    };
    let ds = build_dataset(case, placement, injections, &spec)?;
    let (z_test, x_test) = (ds.z(Part::Test), ds.x(Part::Test));
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let n_val = (size as f64 * cfg.val_fraction).round() as usize;
        let n_train = size - n_val;
        let data = TrainData {
            z_train: ds.z_noisy.slice(s![..n_train, ..]),
            x_train: ds.x_true.slice(s![..n_train, ..]),
            z_val: ds.z_noisy.slice(s![n_train..size, ..]),
            x_val: ds.x_true.slice(s![n_train..size, ..]),
        };
        let (model, report) = train_arrays(data, &cfg.mlp)?;
        let m = metrics(model.predict_batch(z_test)?.view(), x_test)?;
        rows.push(DbRow {
            size,
            mag_mape: m.mag_mape,
            ang_mae: m.ang_mae,
            train_seconds: report.wall_seconds,
        });
    }
    Ok(rows)
}
