use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{apply_noise, InjectionModel, NoiseModel};
use crate::error::{Error, Result};
use crate::netmodel::{NetworkCase, PmuPlacement};
use crate::powerflow::{features_from_state, solve_pf, solve_pf_from, PfOptions};
use crate::{par_map, rng};

/// Attempts per row before generation gives up on that row.
const MAX_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Splits { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Number of scenarios; rows beyond `splits.train + splits.val` are test rows.
    pub samples: usize,
    pub splits: Splits,
    pub noise: NoiseModel,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    feature_names: Vec<String>,
    feature_is_angle: Vec<bool>,
    state_names: Vec<String>,
    topology: String,
    seed: u64,
    splits: Splits,
    noise: NoiseModel,
    resampled: usize,
}

/// Aligned clean features, noisy features and true states. Rows are ordered
/// train, validation, test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub z_clean: Array2<f64>,
    pub z_noisy: Array2<f64>,
    /// All bus magnitudes then all bus angles.
    pub x_true: Array2<f64>,
    pub feature_names: Vec<String>,
    pub feature_is_angle: Vec<bool>,
    pub state_names: Vec<String>,
    pub topology: String,
    pub seed: u64,
    pub splits: Splits,
    pub noise: NoiseModel,
    /// Non-convergent scenarios that were redrawn.
    pub resampled: usize,
}

pub fn state_names(case: &NetworkCase) -> Vec<String> {
    let mags = case.buses().iter().map(|b| format!("Vmag@bus{}", b.id));
    let angs = case.buses().iter().map(|b| format!("Vang@bus{}", b.id));
    mags.chain(angs).collect()
}

/// Samples operating points, solves each with the power flow, evaluates the
/// PMU features and adds measurement noise.
pub fn build_dataset(
    case: &NetworkCase,
    placement: &PmuPlacement,
    model: &InjectionModel,
    spec: &DatasetSpec,
) -> Result<Dataset> {
    let f = spec.samples;
    if f == 0 || f < spec.splits.train + spec.splits.val {
        return Err(Error::Validation(format!(
            "{f} samples cannot hold {} train + {} validation rows",
            spec.splits.train, spec.splits.val
        )));
    }
    if f < spec.splits.total() {
        return Err(Error::Validation(format!(
            "{f} samples fewer than split total {}",
            spec.splits.total()
        )));
    }
    spec.noise.validate()?;
    let placement = crate::netmodel::feature_map(case, placement)?;
    let n = case.n_buses();
    let m = placement.n_features();

    let nominal = model.nominal_case(case)?;
    // Warm start from the nominal point when it solves; flat start otherwise.
    let start = solve_pf(&nominal, &PfOptions::default()).ok();
    let warm = PfOptions {
        flat_start: false,
        ..PfOptions::default()
    };
    let base = rng::sub_seed(spec.seed, "data");

    let rows = par_map(f, |r| -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut g = rng::row_stream(base, r as u64);
        for attempt in 0..MAX_ATTEMPTS {
            let draw = model.sample_row(&mut g);
            let scenario = model.apply(case, &draw)?;
            let solved = match &start {
                Some(s) => solve_pf_from(&scenario, &warm, s),
                None => solve_pf(&scenario, &PfOptions::default()),
            };
            let sol = match solved {
                Ok(s) => s,
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            };
            let z = features_from_state(case, &placement, &sol.v_mag, &sol.v_ang)?;
            let mut x = sol.v_mag;
            x.extend(sol.v_ang);
            return Ok((z, x, attempt));
        }
        Err(Error::Generation(format!(
            "row {r}: no convergent scenario in {MAX_ATTEMPTS} draws"
        )))
    });

    let mut z_clean = Array2::zeros((f, m));
    let mut x_true = Array2::zeros((f, 2 * n));
    let mut resampled = 0;
    for (r, row) in rows.into_iter().enumerate() {
        let (z, x, retries) = row?;
        resampled += retries;
        z_clean.row_mut(r).assign(&ndarray::ArrayView1::from(&z));
        x_true.row_mut(r).assign(&ndarray::ArrayView1::from(&x));
    }
    let rate = resampled as f64 / (f + resampled) as f64;
    if rate > 0.1 {
        return Err(Error::Generation(format!(
            "{resampled} of {} power flows failed ({:.1}%); the injection model produces infeasible operating points",
            f + resampled,
            100.0 * rate
        )));
    }
    if resampled > 0 {
        log::info!("resampled {resampled} non-convergent scenarios");
    }

    let feature_is_angle: Vec<bool> = placement
        .feature_schema
        .iter()
        .map(|f| f.kind.is_angle())
        .collect();
    let z_noisy = apply_noise(&z_clean, &feature_is_angle, &spec.noise, spec.seed)?;
    Ok(Dataset {
        z_clean,
        z_noisy,
        x_true,
        feature_names: placement.feature_names(),
        feature_is_angle,
        state_names: state_names(case),
        topology: case.name().to_string(),
        seed: spec.seed,
        splits: Splits {
            test: f - spec.splits.train - spec.splits.val,
            ..spec.splits
        },
        noise: spec.noise.clone(),
        resampled,
    })
}

fn write_matrix(path: &Path, header: &[String], a: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let mut buf = Vec::with_capacity(a.ncols());
    for row in a.rows() {
        buf.clear();
        // `Display` for f64 prints the shortest string that round-trips.
        buf.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, header: &[String]) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Schema(format!(
            "{} header does not match meta.json",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for v in rec.iter() {
            data.push(
                v.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, header.len()), data).map_err(|e| Error::Dimension(e.to_string()))
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.z_clean.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.z_clean.ncols()
    }

    pub fn range(&self, part: Part) -> Range<usize> {
        let Splits { train, val, .. } = self.splits;
        match part {
            Part::Train => 0..train,
            Part::Val => train..train + val,
            Part::Test => train + val..self.n_rows(),
            Part::All => 0..self.n_rows(),
        }
    }

    pub fn z(&self, part: Part) -> ArrayView2<'_, f64> {
        let r = self.range(part);
        self.z_noisy.slice(s![r, ..])
    }

    pub fn z_clean_part(&self, part: Part) -> ArrayView2<'_, f64> {
        let r = self.range(part);
        self.z_clean.slice(s![r, ..])
    }

    pub fn x(&self, part: Part) -> ArrayView2<'_, f64> {
        let r = self.range(part);
        self.x_true.slice(s![r, ..])
    }

    /// Same operating points with a different noise draw.
    pub fn renoised(&self, noise: &NoiseModel, seed: u64) -> Result<Dataset> {
        Ok(Dataset {
            z_noisy: apply_noise(&self.z_clean, &self.feature_is_angle, noise, seed)?,
            noise: noise.clone(),
            seed,
            ..self.clone()
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = Meta {
            feature_names: self.feature_names.clone(),
            feature_is_angle: self.feature_is_angle.clone(),
            state_names: self.state_names.clone(),
            topology: self.topology.clone(),
            seed: self.seed,
            splits: self.splits,
            noise: self.noise.clone(),
            resampled: self.resampled,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        write_matrix(&dir.join("z_clean.csv"), &self.feature_names, &self.z_clean)?;
        write_matrix(&dir.join("z_noisy.csv"), &self.feature_names, &self.z_noisy)?;
        write_matrix(&dir.join("x_true.csv"), &self.state_names, &self.x_true)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let z_clean = read_matrix(&dir.join("z_clean.csv"), &meta.feature_names)?;
        let z_noisy = read_matrix(&dir.join("z_noisy.csv"), &meta.feature_names)?;
        let x_true = read_matrix(&dir.join("x_true.csv"), &meta.state_names)?;
        let rows = z_clean.nrows();
        if z_noisy.nrows() != rows || x_true.nrows() != rows || meta.splits.total() != rows {
            return Err(Error::Dimension(format!(
                "dataset in {} has inconsistent row counts",
                dir.display()
            )));
        }
        if meta.feature_is_angle.len() != meta.feature_names.len() {
            return Err(Error::Schema(
                "feature_is_angle length differs from feature_names".into(),
            ));
        }
        Ok(Dataset {
            z_clean,
            z_noisy,
            x_true,
            feature_names: meta.feature_names,
            feature_is_angle: meta.feature_is_angle,
            state_names: meta.state_names,
            topology: meta.topology,
            seed: meta.seed,
            splits: meta.splits,
            noise: meta.noise,
            resampled: meta.resampled,
        })
    }
}
