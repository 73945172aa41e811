//! Bad-data detection (per-feature Wald test), correction from the nearest
//! training operating condition, and the extreme-scenario filter.

mod esf;
mod quantile;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{NetworkCase, PmuPlacement};

pub use esf::{esf_filter, EsfFilter};
pub use quantile::{normal_quantile, q_inv};

/// Smallest standard deviation used in the Wald statistic.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose sample deviation fell below [`STD_FLOOR`].
    pub floored: Vec<bool>,
}

impl WaldStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Per-column mean and unbiased standard deviation.
pub fn learn_stats(z: ArrayView2<'_, f64>) -> Result<WaldStats> {
    let f = z.nrows();
    if f < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 rows to learn statistics, got {f}"
        )));
    }
    let mut mean = Vec::with_capacity(z.ncols());
    let mut std = Vec::with_capacity(z.ncols());
    let mut floored = Vec::with_capacity(z.ncols());
    for col in z.columns() {
        let m = col.sum() / f as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (f - 1) as f64).sqrt();
        mean.push(m);
        floored.push(!(s >= STD_FLOOR));
        std.push(s.max(STD_FLOOR));
    }
    Ok(WaldStats { mean, std, floored })
}

/// Two-sided Wald threshold `Q⁻¹(α/2)`.
pub fn wald_threshold(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    Ok(q_inv(alpha / 2.0))
}

fn flag_with_threshold(z: ArrayView1<'_, f64>, stats: &WaldStats, threshold: f64) -> Vec<usize> {
    z.iter()
        .enumerate()
        .filter(|&(i, v)| !v.is_finite() || (v - stats.mean[i]).abs() / stats.std[i] >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Indices of features failing the Wald test. Non-finite values are always
/// flagged.
pub fn wald_flag(z: ArrayView1<'_, f64>, stats: &WaldStats, alpha: f64) -> Result<Vec<usize>> {
    if z.len() != stats.len() {
        return Err(Error::Dimension(format!(
            "sample has {} features, statistics {}",
            z.len(),
            stats.len()
        )));
    }
    Ok(flag_with_threshold(z, stats, wald_threshold(alpha)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NocOutcome {
    pub corrected: Vec<f64>,
    pub index: usize,
    /// Every feature was flagged, so the full vector was matched instead.
    pub fallback: bool,
}

/// Nearest training row over the unflagged features (ties to the lowest
/// index); flagged features are copied from that row. `scale`, when given,
/// divides each coordinate difference.
pub fn noc_correct(
    z: ArrayView1<'_, f64>,
    ibfs: &[usize],
    y_train: ArrayView2<'_, f64>,
    scale: Option<&[f64]>,
) -> Result<NocOutcome> {
    let m = z.len();
    if y_train.nrows() == 0 {
        return Err(Error::Validation("NOC database is empty".into()));
    }
    if y_train.ncols() != m || scale.is_some_and(|s| s.len() != m) {
        return Err(Error::Dimension(format!(
            "sample has {m} features, database {}",
            y_train.ncols()
        )));
    }
    let mut flagged = vec![false; m];
    for &i in ibfs {
        *flagged
            .get_mut(i)
            .ok_or_else(|| Error::Dimension(format!("flag index {i} out of range")))? = true;
    }
    let mut good: Vec<usize> = (0..m).filter(|&i| !flagged[i]).collect();
    let fallback = good.is_empty();
    if fallback {
        good = (0..m).filter(|&i| z[i].is_finite()).collect();
    }
    let zv: Vec<f64> = good.iter().map(|&i| z[i]).collect();
    let w: Vec<f64> = match scale {
        Some(s) => good.iter().map(|&i| 1.0 / s[i]).collect(),
        None => vec![1.0; good.len()],
    };
    let mut best = (f64::INFINITY, 0);
    for (k, row) in y_train.rows().into_iter().enumerate() {
        let mut d = 0.0;
        for ((&i, &zi), &wi) in good.iter().zip(&zv).zip(&w) {
            let e = (row[i] - zi) * wi;
            d += e * e;
            if d >= best.0 {
                break;
            }
        }
        if d < best.0 {
            best = (d, k);
        }
    }
    let k = best.1;
    let mut corrected = z.to_vec();
    for &i in ibfs {
        corrected[i] = y_train[(k, i)];
    }
    Ok(NocOutcome {
        corrected,
        index: k,
        fallback,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    /// Flags are reported but values pass through.
    None,
    /// Flagged values are replaced by the training mean.
    Mean,
    /// Flagged values are replaced from the nearest operating condition.
    Noc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BddcConfig {
    pub alpha: f64,
    pub esf_enabled: bool,
    /// Smallest PMU group the extreme-scenario filter considers.
    pub min_group: usize,
    pub correction: Correction,
    /// Scale NOC distances by the per-feature training deviation.
    pub standardized_distance: bool,
}

impl Default for BddcConfig {
    fn default() -> Self {
        BddcConfig {
            alpha: 0.05,
            esf_enabled: true,
            min_group: 2,
            correction: Correction::Noc,
            standardized_distance: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BddcResult {
    pub ibfs: Vec<usize>,
    pub ibfs_esf: Vec<usize>,
    pub corrected: Vec<f64>,
    pub noc_index: Option<usize>,
    pub suppressed: bool,
    pub fallback: bool,
}

/// Detection and correction state prepared once for a stream of samples.
#[derive(Clone, Debug)]
pub struct Bddc {
    stats: WaldStats,
    y_train: ndarray::Array2<f64>,
    filter: Option<EsfFilter>,
    config: BddcConfig,
    threshold: f64,
}

impl Bddc {
    pub fn new(
        stats: WaldStats,
        y_train: ndarray::Array2<f64>,
        placement: &PmuPlacement,
        case: &NetworkCase,
        config: BddcConfig,
    ) -> Result<Self> {
        let threshold = wald_threshold(config.alpha)?;
        if y_train.ncols() != stats.len() {
            return Err(Error::Dimension(format!(
                "database has {} features, statistics {}",
                y_train.ncols(),
                stats.len()
            )));
        }
        let filter = if config.esf_enabled {
            let f = EsfFilter::new(placement, case, config.min_group)?;
            if f.n_features() != stats.len() {
                return Err(Error::Schema(format!(
                    "placement has {} features, statistics {}",
                    f.n_features(),
                    stats.len()
                )));
            }
            Some(f)
        } else {
            None
        };
        Ok(Bddc {
            stats,
            y_train,
            filter,
            config,
            threshold,
        })
    }

    pub fn stats(&self) -> &WaldStats {
        &self.stats
    }

    pub fn config(&self) -> &BddcConfig {
        &self.config
    }

    pub fn process(&self, z: ArrayView1<'_, f64>) -> Result<BddcResult> {
        if z.len() != self.stats.len() {
            return Err(Error::Dimension(format!(
                "sample has {} features, statistics {}",
                z.len(),
                self.stats.len()
            )));
        }
        let ibfs = flag_with_threshold(z, &self.stats, self.threshold);
        let ibfs_esf = match &self.filter {
            Some(f) => f.filter(&ibfs),
            None => ibfs.clone(),
        };
        let suppressed = ibfs_esf.len() < ibfs.len();
        let mut result = BddcResult {
            corrected: z.to_vec(),
            ibfs,
            ibfs_esf,
            noc_index: None,
            suppressed,
            fallback: false,
        };
        if result.ibfs_esf.is_empty() {
            return Ok(result);
        }
        match self.config.correction {
            Correction::None => {}
            Correction::Mean => {
                for &i in &result.ibfs_esf {
                    result.corrected[i] = self.stats.mean[i];
                }
            }
            Correction::Noc => {
                let scale = self
                    .config
                    .standardized_distance
                    .then_some(self.stats.std.as_slice());
                let noc = noc_correct(z, &result.ibfs_esf, self.y_train.view(), scale)?;
                result.corrected = noc.corrected;
                result.noc_index = Some(noc.index);
                result.fallback = noc.fallback;
            }
        }
        Ok(result)
    }
}

/// One-shot form of [`Bddc::process`].
pub fn process(
    z: ArrayView1<'_, f64>,
    stats: &WaldStats,
    y_train: ArrayView2<'_, f64>,
    placement: &PmuPlacement,
    case: &NetworkCase,
    config: &BddcConfig,
) -> Result<BddcResult> {
    Bddc::new(
        stats.clone(),
        y_train.to_owned(),
        placement,
        case,
        config.clone(),
    )?
    .process(z)
}
