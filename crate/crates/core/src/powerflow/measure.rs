//! Phasor measurements derived from a bus-voltage state.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PowerFlowSolution;
use crate::error::{Error, Result};
use crate::netmodel::{BranchId, BranchRecord, BusId, FeatureKind, NetworkCase, PmuPlacement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchEnd {
    From,
    To,
}

fn voltages(vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    vm.iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect()
}

/// π-model current leaving `at` into the branch.
fn terminal_current(
    case: &NetworkCase,
    br: &BranchRecord,
    at: BusId,
    v: &[Complex64],
) -> Complex64 {
    let far = br.other_end(at).expect("endpoint");
    let vi = v[case.bus_index(at).expect("validated")];
    let vj = v[case.bus_index(far).expect("validated")];
    (vi - vj) * br.series_admittance() + Complex64::new(0.0, 0.5 * br.shunt_susceptance_total) * vi
}

pub fn branch_current(
    solution: &PowerFlowSolution,
    case: &NetworkCase,
    branch: BranchId,
    end: BranchEnd,
) -> Result<Complex64> {
    let br = case.branch(branch)?;
    if !br.in_service {
        return Err(Error::BranchOutOfService(branch.0));
    }
    let at = match end {
        BranchEnd::From => br.from_bus,
        BranchEnd::To => br.to_bus,
    };
    Ok(terminal_current(
        case,
        br,
        at,
        &voltages(&solution.v_mag, &solution.v_ang),
    ))
}

/// Net current injected into the network at `bus`, `(Y V)_bus`.
pub fn injection_current(
    solution: &PowerFlowSolution,
    case: &NetworkCase,
    bus: BusId,
) -> Result<Complex64> {
    let i = case.bus_index(bus)?;
    let v = voltages(&solution.v_mag, &solution.v_ang);
    let mut acc = case.buses()[i].shunt_admittance * v[i];
    for br in case.branches().iter().filter(|b| b.in_service) {
        let (f, t) = (case.bus_index(br.from_bus)?, case.bus_index(br.to_bus)?);
        let ys = br.series_admittance();
        let half = Complex64::new(0.0, 0.5 * br.shunt_susceptance_total);
        if f == i {
            acc += (ys + half) * v[f] - ys * v[t];
        } else if t == i {
            acc += (ys + half) * v[t] - ys * v[f];
        }
    }
    Ok(acc)
}

/// Same quantity as [`injection_current`] assembled from terminal currents of
/// incident branches plus the bus shunt current.
pub fn injection_current_from_branches(
    solution: &PowerFlowSolution,
    case: &NetworkCase,
    bus: BusId,
) -> Result<Complex64> {
    let i = case.bus_index(bus)?;
    let v = voltages(&solution.v_mag, &solution.v_ang);
    let shunt = case.buses()[i].shunt_admittance * v[i];
    Ok(case
        .incident_branches(bus)
        .into_iter()
        .map(|br| terminal_current(case, br, bus, &v))
        .fold(shunt, |a, b| a + b))
}

/// Evaluates the placement's feature schema on a bus-voltage state.
/// Angles are in radians, current angles in (−π, π].
pub fn features_from_state(
    case: &NetworkCase,
    placement: &PmuPlacement,
    v_mag: &[f64],
    v_ang: &[f64],
) -> Result<Vec<f64>> {
    if v_mag.len() != case.n_buses() || v_ang.len() != case.n_buses() {
        return Err(Error::Dimension(format!(
            "state has {}/{} entries, case has {} buses",
            v_mag.len(),
            v_ang.len(),
            case.n_buses()
        )));
    }
    let v = voltages(v_mag, v_ang);
    placement
        .feature_schema
        .iter()
        .map(|f| {
            let i = case.bus_index(f.bus)?;
            Ok(match f.kind {
                FeatureKind::VMag => v_mag[i],
                FeatureKind::VAng => v_ang[i],
                FeatureKind::IMag | FeatureKind::IAng => {
                    let id = f
                        .branch
                        .ok_or_else(|| Error::Schema(format!("{} has no branch", f.name)))?;
                    let br = case.branch(id)?;
                    if !br.in_service {
                        return Err(Error::Schema(format!(
                            "{} refers to out-of-service branch {id}",
                            f.name
                        )));
                    }
                    let c = terminal_current(case, br, f.bus, &v);
                    if f.kind == FeatureKind::IMag {
                        c.norm()
                    } else {
                        c.arg()
                    }
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{
        ieee118, synthetic_grid, three_bus, triangle, two_bus, IEEE118_PMU_BUSES,
    };
    use crate::powerflow::{solve_pf, PfOptions};

    fn solved(case: &NetworkCase) -> PowerFlowSolution {
        solve_pf(case, &PfOptions::default()).unwrap()
    }

    #[test]
    fn flat_case_has_no_currents() {
        let case = triangle();
        let sol = solved(&case);
        for br in case.branches() {
            assert_eq!(
                branch_current(&sol, &case, br.id, BranchEnd::From)
                    .unwrap()
                    .norm(),
                0.0
            );
        }
        for b in case.buses() {
            assert_eq!(injection_current(&sol, &case, b.id).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn two_bus_current_is_voltage_drop_over_z() {
        let case = two_bus()
            .with_injections(&[0.0, -0.1], &[0.0, 0.0], None)
            .unwrap();
        let sol = solved(&case);
        let expected = (sol.voltage(0) - sol.voltage(1)) / Complex64::new(0.0, 0.1);
        let got = branch_current(&sol, &case, BranchId(1), BranchEnd::From).unwrap();
        assert!((got - expected).norm() < 1e-12);
        let back = branch_current(&sol, &case, BranchId(1), BranchEnd::To).unwrap();
        assert!((got + back).norm() < 1e-12);
    }

    #[test]
    fn mirrored_branches_carry_equal_current() {
        // Slack at 1, equal loads on 2 and 3, identical lines 1-2 and 3-1.
        let case = triangle()
            .with_injections(&[0.0, -0.3, -0.3], &[0.0, -0.1, -0.1], None)
            .unwrap();
        let sol = solved(&case);
        let a = branch_current(&sol, &case, BranchId(1), BranchEnd::From)
            .unwrap()
            .norm();
        let b = branch_current(&sol, &case, BranchId(3), BranchEnd::To)
            .unwrap()
            .norm();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shunt_only_bus_draws_shunt_current() {
        let case = three_bus()
            .with_injections(&[0.0; 3], &[0.0; 3], None)
            .unwrap();
        let flat = PowerFlowSolution {
            v_mag: vec![1.0; 3],
            v_ang: vec![0.0; 3],
            iterations: 0,
            max_mismatch: 0.0,
            mismatch_history: vec![],
        };
        let got = injection_current(&flat, &case, BusId(3)).unwrap();
        assert!((got - case.bus(BusId(3)).unwrap().shunt_admittance).norm() < 1e-12);
    }

    #[test]
    fn injection_current_matches_ybus_row() {
        let case = three_bus();
        let sol = solved(&case);
        let y = crate::netmodel::build_ybus(&case);
        let v = sol.voltages();
        for (i, b) in case.buses().iter().enumerate() {
            let oracle: Complex64 = (0..3).map(|j| y[(i, j)] * v[j]).sum();
            let got = injection_current(&sol, &case, b.id).unwrap();
            assert!((got - oracle).norm() < 1e-12);
            // S = V I*, so the injection current reproduces the scheduled power.
            let s = v[i] * got.conj();
            if i != case.slack_index() {
                assert!((s.re - b.p_inj).abs() < 1e-8 && (s.im - b.q_inj).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ybus_and_branch_sum_agree() {
        for case in [three_bus(), ieee118(), synthetic_grid(6, 7, 1)] {
            let sol = solved(&case);
            for b in case.buses() {
                let a = injection_current(&sol, &case, b.id).unwrap();
                let c = injection_current_from_branches(&sol, &case, b.id).unwrap();
                assert!((a - c).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn out_of_service_branch_is_rejected() {
        let case = triangle().with_branch_status(BranchId(2), false).unwrap();
        let sol = solved(&case);
        assert!(matches!(
            branch_current(&sol, &case, BranchId(2), BranchEnd::From),
            Err(Error::BranchOutOfService(2))
        ));
    }

    #[test]
    fn features_follow_schema() {
        let case = ieee118();
        let pl = PmuPlacement::from_ids(&case, &IEEE118_PMU_BUSES).unwrap();
        let sol = solved(&case);
        let z = features_from_state(&case, &pl, &sol.v_mag, &sol.v_ang).unwrap();
        assert_eq!(z.len(), 82);
        for (f, val) in pl.feature_schema.iter().zip(&z) {
            match f.kind {
                FeatureKind::VMag | FeatureKind::IMag => assert!(*val > 0.0, "{}", f.name),
                _ => assert!(val.abs() <= std::f64::consts::PI),
            }
        }
        assert!(features_from_state(&case, &pl, &sol.v_mag[1..], &sol.v_ang).is_err());
    }
}
