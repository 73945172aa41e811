//! Operating-point sampling, measurement noise and dataset assembly.

mod baddata;
mod dataset;
mod noise;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{BusId, BusKind, NetworkCase};
use crate::rng;

pub use baddata::{inject_bad_data, make_extreme_scenarios, BadDataMask, ExtremeScenarios};
pub use dataset::{build_dataset, Dataset, DatasetSpec, Part, Splits};
pub use noise::{apply_noise, Mixture, NoiseModel};

/// Quantity a sampled channel feeds into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "bus")]
pub enum Target {
    P(BusId),
    Q(BusId),
    SlackV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ChannelDist {
    Normal { mean: f64, std: f64 },
    Kde { points: Vec<f64>, bandwidth: f64 },
}

impl ChannelDist {
    fn validate(&self) -> Result<()> {
        match self {
            ChannelDist::Normal { mean, std }
                if mean.is_finite() && *std >= 0.0 && std.is_finite() =>
            {
                Ok(())
            }
            ChannelDist::Kde { points, bandwidth } if !points.is_empty() && *bandwidth > 0.0 => {
                Ok(())
            }
            other => Err(Error::Validation(format!(
                "invalid channel distribution {other:?}"
            ))),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let z = standard_normal(rng);
        match self {
            ChannelDist::Normal { mean, std } => mean + std * z,
            ChannelDist::Kde { points, bandwidth } => {
                points[rng.random_range(0..points.len())] + bandwidth * z
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ChannelDist::Normal { mean, .. } => *mean,
            ChannelDist::Kde { points, .. } => points.iter().sum::<f64>() / points.len() as f64,
        }
    }
}

/// One random input. Several channels may feed the same target; their
/// contributions, scaled by `coef`, are summed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub target: Target,
    pub coef: f64,
    pub dist: ChannelDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionModel {
    pub channels: Vec<Channel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Silverman,
    Fixed(f64),
}

/// Silverman's rule of thumb, `0.9 min(σ, IQR/1.34) n^(-1/5)`, floored so
/// that constant histories still get a positive bandwidth.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let floor = 1e-9 * mean.abs().max(1.0);
    (0.9 * spread * n.powf(-0.2)).max(floor)
}

/// Fits a Gaussian-kernel KDE per channel from historical samples.
pub fn fit_kde(
    targets: &[(String, Target)],
    history: &[Vec<f64>],
    rule: BandwidthRule,
) -> Result<InjectionModel> {
    if targets.len() != history.len() {
        return Err(Error::Dimension(format!(
            "{} channel targets but {} history vectors",
            targets.len(),
            history.len()
        )));
    }
    let mut channels = Vec::with_capacity(targets.len());
    for ((name, target), h) in targets.iter().zip(history) {
        if h.is_empty() {
            return Err(Error::Validation(format!("channel {name} has no history")));
        }
        if h.len() < 30 {
            return Err(Error::Validation(format!(
                "channel {name} has {} samples, need at least 30",
                h.len()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "channel {name} has non-finite history"
            )));
        }
        let bandwidth = match rule {
            BandwidthRule::Silverman => silverman_bandwidth(h),
            BandwidthRule::Fixed(b) => b,
        };
        let dist = ChannelDist::Kde {
            points: h.clone(),
            bandwidth,
        };
        dist.validate()?;
        channels.push(Channel {
            name: name.clone(),
            target: *target,
            coef: 1.0,
            dist,
        });
    }
    Ok(InjectionModel { channels })
}

impl InjectionModel {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        for c in &channels {
            c.dist.validate()?;
            if !c.coef.is_finite() {
                return Err(Error::Validation(format!(
                    "channel {} has non-finite coefficient",
                    c.name
                )));
            }
        }
        Ok(InjectionModel { channels })
    }

    /// Independent normals around the case's base injections with standard
    /// deviation `pct_std` percent of each nonzero value. P varies at every
    /// non-slack bus, Q at PQ buses.
    pub fn parametric_around(case: &NetworkCase, pct_std: f64) -> Result<Self> {
        if !(pct_std >= 0.0) {
            return Err(Error::Validation(format!(
                "percent std must be >= 0, got {pct_std}"
            )));
        }
        let mut channels = Vec::new();
        for b in case.buses() {
            if b.kind == BusKind::Slack {
                continue;
            }
            let mut add = |name: String, target, v: f64| {
                if v != 0.0 {
                    channels.push(Channel {
                        name,
                        target,
                        coef: 1.0,
                        dist: ChannelDist::Normal {
                            mean: v,
                            std: pct_std / 100.0 * v.abs(),
                        },
                    });
                }
            };
            add(format!("P@bus{}", b.id), Target::P(b.id), b.p_inj);
            if b.kind == BusKind::Pq {
                add(format!("Q@bus{}", b.id), Target::Q(b.id), b.q_inj);
            }
        }
        Self::new(channels)
    }

    /// Random inputs of the three-bus example: generation and load terms
    /// with N(0, 0.04) perturbations and the slack magnitude 1 + N(0, 0.0001).
    /// Bus 2 nets `P2g − P2l`; bus 3 is load only.
    pub fn three_bus() -> Self {
        let ch = |name: &str, target, coef, mean, std| Channel {
            name: name.into(),
            target,
            coef,
            dist: ChannelDist::Normal { mean, std },
        };
        let (b2, b3) = (BusId(2), BusId(3));
        InjectionModel {
            channels: vec![
                ch("P2g", Target::P(b2), 1.0, 2.0, 0.04),
                ch("P2l", Target::P(b2), -1.0, 0.5, 0.04),
                ch("Q2g", Target::Q(b2), 1.0, 0.1, 0.04),
                ch("P3l", Target::P(b3), -1.0, 2.0, 0.04),
                ch("Q3l", Target::Q(b3), -1.0, 0.5, 0.04),
                ch("V1", Target::SlackV, 1.0, 1.0, 0.0001),
            ],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    fn sample_row<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.channels.iter().map(|c| c.dist.sample(rng)).collect()
    }

    /// Applies one sampled row to `case`. Targets fed by at least one channel
    /// are replaced by the channel sum; all other injections keep their base
    /// values.
    pub fn apply(&self, case: &NetworkCase, row: &[f64]) -> Result<NetworkCase> {
        if row.len() != self.channels.len() {
            return Err(Error::Dimension(format!(
                "scenario row has {} values for {} channels",
                row.len(),
                self.channels.len()
            )));
        }
        let mut p: Vec<f64> = case.buses().iter().map(|b| b.p_inj).collect();
        let mut q: Vec<f64> = case.buses().iter().map(|b| b.q_inj).collect();
        let mut slack_v: Option<f64> = None;
        for c in &self.channels {
            match c.target {
                Target::P(b) => p[case.bus_index(b)?] = 0.0,
                Target::Q(b) => q[case.bus_index(b)?] = 0.0,
                Target::SlackV => slack_v = Some(0.0),
            }
        }
        for (c, &v) in self.channels.iter().zip(row) {
            match c.target {
                Target::P(b) => p[case.bus_index(b)?] += c.coef * v,
                Target::Q(b) => q[case.bus_index(b)?] += c.coef * v,
                Target::SlackV => *slack_v.get_or_insert(0.0) += c.coef * v,
            }
        }
        case.with_injections(&p, &q, slack_v)
    }

    /// Case with every channel at its mean.
    pub fn nominal_case(&self, case: &NetworkCase) -> Result<NetworkCase> {
        let means: Vec<f64> = self.channels.iter().map(|c| c.dist.mean()).collect();
        self.apply(case, &means)
    }
}

/// Draws `f` independent scenario rows; row `r` uses its own RNG stream so
/// the result does not depend on evaluation order.
pub fn sample_scenarios(model: &InjectionModel, f: usize, seed: u64) -> ndarray::Array2<f64> {
    let base = rng::sub_seed(seed, "data");
    let mut out = ndarray::Array2::zeros((f, model.n_channels()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut g = rng::row_stream(base, r as u64);
        for (dst, v) in row.iter_mut().zip(model.sample_row(&mut g)) {
            *dst = v;
        }
    }
    out
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
