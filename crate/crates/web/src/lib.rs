//! Browser bindings for the 3-bus demo page. Each export returns a JSON
//! string; errors come back as a thrown string.

use ndarray::Array1;
use serde::Serialize;
use tsse_core::bddc::{learn_stats, wald_threshold, Bddc, BddcConfig};
use tsse_core::gauss::run_3bus_study;
use tsse_core::netmodel::{three_bus, BusId, PmuPlacement};
use tsse_core::powerflow::{solve_pf, PfOptions};
use tsse_core::sampler::{build_dataset, DatasetSpec, InjectionModel, NoiseModel, Part, Splits};
use tsse_core::Result;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct PfView {
    pub v_mag: Vec<f64>,
    pub v_ang_deg: Vec<f64>,
    pub iterations: usize,
    pub mismatch_history: Vec<f64>,
}

/// Solves the 3-bus system with net injections at buses 2 and 3.
pub fn power_flow(p2: f64, q2: f64, p3: f64, q3: f64) -> Result<PfView> {
    let base = three_bus();
    let case = base.with_injections(&[0.0, p2, p3], &[0.0, q2, q3], None)?;
    let sol = solve_pf(&case, &PfOptions::default())?;
    Ok(PfView {
        v_ang_deg: sol.v_ang.iter().map(|a| a.to_degrees()).collect(),
        v_mag: sol.v_mag,
        iterations: sol.iterations,
        mismatch_history: sol.mismatch_history,
    })
}

#[derive(Serialize)]
pub struct OracleRow {
    pub name: String,
    pub given: Vec<String>,
    pub mae: f64,
}

/// Conditional-mean estimates of |V3| from each set of observed quantities.
pub fn oracle(samples: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let study = run_3bus_study(samples, seed)?;
    Ok(study
        .cases
        .into_iter()
        .map(|c| OracleRow {
            name: c.name,
            given: c.given,
            mae: c.mae,
        })
        .collect())
}

#[derive(Serialize)]
pub struct DetectView {
    pub threshold: f64,
    pub features: Vec<String>,
    pub clean: Vec<f64>,
    pub received: Vec<f64>,
    pub flagged: Vec<usize>,
    pub corrected: Vec<f64>,
}

/// Corrupts one feature of a test frame by `severity` training standard
/// deviations, then runs detection and nearest-condition correction.
pub fn detect(alpha: f64, feature: usize, severity: f64, seed: u64) -> Result<DetectView> {
    let case = three_bus();
    let placement = PmuPlacement::new(&case, &[BusId(1)])?;
    let spec = DatasetSpec {
        samples: 600,
        splits: Splits::new(500, 0, 100),
        noise: NoiseModel::gaussian(),
        seed,
    };
    let ds = build_dataset(&case, &placement, &InjectionModel::three_bus(), &spec)?;
    let train = ds.z(Part::Train);
    let stats = learn_stats(train)?;
    if feature >= stats.len() {
        return Err(tsse_core::Error::Validation(format!(
            "feature {feature} out of range 0..{}",
            stats.len()
        )));
    }
    let row = ds.range(Part::Test).start;
    let clean: Array1<f64> = ds.z_noisy.row(row).to_owned();
    let mut received = clean.clone();
    received[feature] += severity * stats.std[feature];
    let config = BddcConfig {
        alpha,
        esf_enabled: false,
        ..BddcConfig::default()
    };
    let bddc = Bddc::new(stats, train.to_owned(), &placement, &case, config)?;
    let r = bddc.process(received.view())?;
    Ok(DetectView {
        threshold: wald_threshold(alpha)?,
        features: ds.feature_names.clone(),
        clean: clean.to_vec(),
        received: received.to_vec(),
        flagged: r.ibfs,
        corrected: r.corrected,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = powerFlow)]
pub fn power_flow_js(p2: f64, q2: f64, p3: f64, q3: f64) -> std::result::Result<String, JsValue> {
    to_js(power_flow(p2, q2, p3, q3))
}

#[wasm_bindgen(js_name = oracleStudy)]
pub fn oracle_js(samples: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(oracle(samples, seed as u64))
}

#[wasm_bindgen(js_name = detectBadData)]
pub fn detect_js(
    alpha: f64,
    feature: usize,
    severity: f64,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(detect(alpha, feature, severity, seed as u64))
}
