use ndarray::Array2;

use super::{cond_mean_closed, fit_gaussian, GaussianJoint};
use crate::error::Result;
use crate::netmodel::{three_bus, BranchId, BusId, PmuPlacement};
use crate::powerflow::{branch_current, injection_current, BranchEnd, PowerFlowSolution};
use crate::sampler::{build_dataset, DatasetSpec, InjectionModel, NoiseModel, Splits};

/// Variables of the three-bus study, in column order.
pub const STUDY_LABELS: [&str; 5] = ["|V3|", "|I12|", "|I21|", "|I3|", "ang(V1)"];

/// Case name and conditioning columns. The target is always `|V3|`.
pub const STUDY_CASES: [(&str, &[usize]); 5] = [
    ("Case 1", &[4]),
    ("Case 2", &[1]),
    ("Case 3", &[3]),
    ("Case 4", &[1, 2]),
    ("Case 5", &[1, 3]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub given: Vec<String>,
    /// Mean of `|x − E(x | z)|` over all samples.
    pub mae: f64,
    pub regularized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    pub samples: usize,
    pub seed: u64,
    pub resampled: usize,
    pub joint: GaussianJoint,
    pub cases: Vec<CaseResult>,
}

impl StudyResult {
    pub fn mae(&self, case: usize) -> f64 {
        self.cases[case].mae
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,given,mae\n");
        for c in &self.cases {
            out.push_str(&format!("{},{},{:e}\n", c.name, c.given.join(" "), c.mae));
        }
        out
    }
}

/// Solves `f` randomized three-bus power flows and returns the study
/// variables per sample, plus the number of redrawn scenarios.
pub fn study_variables(f: usize, seed: u64) -> Result<(Array2<f64>, usize)> {
    let case = three_bus();
    let placement = PmuPlacement::from_ids(&case, &[1])?;
    let spec = DatasetSpec {
        samples: f,
        splits: Splits::new(f, 0, 0),
        noise: NoiseModel::None,
        seed,
    };
    let ds = build_dataset(&case, &placement, &InjectionModel::three_bus(), &spec)?;
    let n = case.n_buses();
    let mut out = Array2::zeros((f, STUDY_LABELS.len()));
    for (k, x) in ds.x_true.rows().into_iter().enumerate() {
        let sol = PowerFlowSolution {
            v_mag: x.slice(ndarray::s![..n]).to_vec(),
            v_ang: x.slice(ndarray::s![n..]).to_vec(),
            iterations: 0,
            max_mismatch: 0.0,
            mismatch_history: Vec::new(),
        };
        out[(k, 0)] = sol.v_mag[2];
        out[(k, 1)] = branch_current(&sol, &case, BranchId(1), BranchEnd::From)?.norm();
        out[(k, 2)] = branch_current(&sol, &case, BranchId(1), BranchEnd::To)?.norm();
        out[(k, 3)] = injection_current(&sol, &case, BusId(3))?.norm();
        out[(k, 4)] = sol.v_ang[0];
    }
    Ok((out, ds.resampled))
}

/// Fits a joint normal to `f` samples and scores each case's conditional
/// mean of `|V3|` against every sample it was fitted on.
pub fn run_3bus_study(f: usize, seed: u64) -> Result<StudyResult> {
    let (vars, resampled) = study_variables(f, seed)?;
    let labels: Vec<String> = STUDY_LABELS.iter().map(|s| s.to_string()).collect();
    let joint = fit_gaussian(vars.view(), &labels)?;
    let mut cases = Vec::with_capacity(STUDY_CASES.len());
    for (name, given) in STUDY_CASES {
        let mut total = 0.0;
        let mut regularized = false;
        for row in vars.rows() {
            let z: Vec<f64> = given.iter().map(|&g| row[g]).collect();
            let c = cond_mean_closed(&joint, 0, given, &z)?;
            regularized |= c.regularized;
            total += (row[0] - c.value).abs();
        }
        cases.push(CaseResult {
            name: name.into(),
            given: given.iter().map(|&g| labels[g].clone()).collect(),
            mae: total / f as f64,
            regularized,
        });
    }
    Ok(StudyResult {
        samples: f,
        seed,
        resampled,
        joint,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slack_angle_is_constant_and_case1_is_the_marginal() {
        let r = run_3bus_study(2000, 1).unwrap();
        assert!(r.joint.constant[4]);
        let (vars, _) = study_variables(2000, 1).unwrap();
        let mean = vars.column(0).mean().unwrap();
        let mad = vars.column(0).iter().map(|v| (v - mean).abs()).sum::<f64>() / 2000.0;
        assert!((r.mae(0) - mad).abs() < 1e-12);
    }

    #[test]
    fn orderings_that_follow_from_information() {
        let r = run_3bus_study(3000, 2).unwrap();
        let m: Vec<f64> = r.cases.iter().map(|c| c.mae).collect();
        assert!(m[4] < m[1] && m[4] < m[2], "{m:?}");
        assert!(m.iter().all(|&v| v <= m[0]), "{m:?}");
    }

    #[test]
    fn both_ends_of_a_line_without_charging_carry_the_same_magnitude() {
        let (vars, _) = study_variables(200, 3).unwrap();
        for row in vars.rows() {
            assert!((row[1] - row[2]).abs() < 1e-12);
        }
        let r = run_3bus_study(200, 3).unwrap();
        assert!(r.cases[3].regularized);
        assert!((r.mae(3) - r.mae(1)).abs() < 1e-9 * r.mae(1).max(1e-12));
    }

    #[test]
    fn csv_has_one_row_per_case() {
        let r = run_3bus_study(100, 4).unwrap();
        assert_eq!(r.to_csv().lines().count(), 6);
    }
}
