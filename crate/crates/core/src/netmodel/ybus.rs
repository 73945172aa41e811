use nalgebra::DMatrix;
use num_complex::Complex64;

use super::NetworkCase;

/// Dense bus admittance matrix, rows/columns in [`NetworkCase::buses`] order.
pub fn build_ybus(case: &NetworkCase) -> DMatrix<Complex64> {
    let n = case.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (i, bus) in case.buses().iter().enumerate() {
        y[(i, i)] += bus.shunt_admittance;
    }
    for br in case.branches().iter().filter(|b| b.in_service) {
        // Indices were checked when the case was built.
        let f = case.bus_index(br.from_bus).expect("validated");
        let t = case.bus_index(br.to_bus).expect("validated");
        let ys = br.series_admittance();
        let half = Complex64::new(0.0, 0.5 * br.shunt_susceptance_total);
        y[(f, f)] += ys + half;
        y[(t, t)] += ys + half;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{three_bus, two_bus, BusId, BusRecord, NetworkCase};

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn two_bus_closed_form() {
        let y = build_ybus(&two_bus());
        assert!(close(y[(0, 0)], Complex64::new(0.0, -10.0)));
        assert!(close(y[(1, 1)], Complex64::new(0.0, -10.0)));
        assert!(close(y[(0, 1)], Complex64::new(0.0, 10.0)));
        assert!(close(y[(1, 0)], Complex64::new(0.0, 10.0)));
    }

    #[test]
    fn bus_shunt_adds_to_diagonal() {
        let base = two_bus();
        let mut buses: Vec<BusRecord> = base.buses().to_vec();
        buses[0].shunt_admittance = Complex64::new(0.0, -100.0).inv();
        let case = NetworkCase::new("shunted", buses, base.branches().to_vec()).unwrap();
        let y = build_ybus(&case);
        assert!(close(y[(0, 0)], Complex64::new(0.0, -10.0 + 0.01)));
        assert!(close(y[(1, 1)], Complex64::new(0.0, -10.0)));
    }

    #[test]
    fn three_bus_matches_hand_computation() {
        // 1/(0.05+j0.1) = 4 - j8, 1/(j0.05) = -j20, 1/(0.02+j0.05) = 6.896551.. - j17.241379..
        let y12 = Complex64::new(4.0, -8.0);
        let y23 = Complex64::new(0.0, -20.0);
        let y31 = Complex64::new(0.02 / 0.0029, -0.05 / 0.0029);
        let case = three_bus();
        let y = build_ybus(&case);
        let i = |b: u32| case.bus_index(BusId(b)).unwrap();
        assert!(close(
            y[(i(1), i(1))],
            y12 + y31 + Complex64::new(0.0, 0.01)
        ));
        assert!(close(y[(i(2), i(2))], y12 + y23));
        assert!(close(
            y[(i(3), i(3))],
            y23 + y31 + Complex64::new(0.0, 0.025)
        ));
        assert!(close(y[(i(1), i(2))], -y12));
        assert!(close(y[(i(2), i(3))], -y23));
        assert!(close(y[(i(3), i(1))], -y31));
    }

    #[test]
    fn symmetric_on_bundled_cases() {
        for case in [three_bus(), crate::netmodel::ieee118()] {
            let y = build_ybus(&case);
            assert!((&y - y.transpose()).iter().all(|d| d.norm() < 1e-14));
        }
    }
}
