//! Polar Newton–Raphson AC power flow.

mod measure;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_solve_in_place;
use crate::netmodel::{build_ybus, BusKind, NetworkCase};

pub use measure::{
    branch_current, features_from_state, injection_current, injection_current_from_branches,
    BranchEnd,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfOptions {
    /// Largest acceptable |ΔP|, |ΔQ| in per-unit.
    pub tolerance: f64,
    /// Upper bound on Newton updates.
    pub max_iterations: usize,
    pub flat_start: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tolerance: 1e-8,
            max_iterations: 20,
            flat_start: true,
        }
    }
}

impl PfOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations < 1 {
            return Err(Error::Config(format!(
                "power flow needs tolerance > 0 and max_iterations >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Mismatch evaluations performed, including the final converged one.
    pub iterations: usize,
    pub max_mismatch: f64,
    /// ∞-norm of the mismatch at each evaluation.
    pub mismatch_history: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn voltage(&self, idx: usize) -> Complex64 {
        Complex64::from_polar(self.v_mag[idx], self.v_ang[idx])
    }

    pub fn voltages(&self) -> Vec<Complex64> {
        (0..self.v_mag.len()).map(|i| self.voltage(i)).collect()
    }
}

/// Sparse view of the admittance matrix plus the bus partition used by the
/// Newton iteration.
#[derive(Clone, Debug)]
pub struct PfModel {
    rows: Vec<Vec<(usize, Complex64)>>,
    p_spec: Vec<f64>,
    q_spec: Vec<f64>,
    /// Non-slack buses: unknown angle, specified P.
    pvpq: Vec<usize>,
    /// PQ buses: unknown magnitude, specified Q.
    pq: Vec<usize>,
    /// Position of each bus in `pvpq` / `pq`.
    ang_pos: Vec<Option<usize>>,
    mag_pos: Vec<Option<usize>>,
    v_set: Vec<Option<f64>>,
    slack: usize,
}

impl PfModel {
    pub fn new(case: &NetworkCase) -> Self {
        let y = build_ybus(case);
        let n = case.n_buses();
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| y[(i, j)].norm() != 0.0)
                    .map(|j| (j, y[(i, j)]))
                    .collect()
            })
            .collect();
        let mut pvpq = Vec::new();
        let mut pq = Vec::new();
        let mut ang_pos = vec![None; n];
        let mut mag_pos = vec![None; n];
        for (i, b) in case.buses().iter().enumerate() {
            if b.kind != BusKind::Slack {
                ang_pos[i] = Some(pvpq.len());
                pvpq.push(i);
            }
            if b.kind == BusKind::Pq {
                mag_pos[i] = Some(pq.len());
                pq.push(i);
            }
        }
        PfModel {
            rows,
            p_spec: case.buses().iter().map(|b| b.p_inj).collect(),
            q_spec: case.buses().iter().map(|b| b.q_inj).collect(),
            pvpq,
            pq,
            ang_pos,
            mag_pos,
            v_set: case.buses().iter().map(|b| b.v_setpoint).collect(),
            slack: case.slack_index(),
        }
    }

    pub fn n_unknowns(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    /// Complex power injected at every bus by the network for the given state.
    pub fn calc_power(&self, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
        let v: Vec<Complex64> = vm
            .iter()
            .zip(va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let current: Complex64 = row.iter().map(|&(j, y)| y * v[j]).sum();
                v[i] * current.conj()
            })
            .collect()
    }

    /// Specified minus calculated power, `[ΔP(pvpq); ΔQ(pq)]`.
    pub fn mismatch(&self, vm: &[f64], va: &[f64]) -> Vec<f64> {
        let s = self.calc_power(vm, va);
        let mut f = Vec::with_capacity(self.n_unknowns());
        f.extend(self.pvpq.iter().map(|&i| self.p_spec[i] - s[i].re));
        f.extend(self.pq.iter().map(|&i| self.q_spec[i] - s[i].im));
        f
    }

    /// Row-major Jacobian of the calculated injections w.r.t. `[θ(pvpq); |V|(pq)]`.
    pub fn jacobian(&self, vm: &[f64], va: &[f64]) -> Vec<f64> {
        let s = self.calc_power(vm, va);
        let m = self.n_unknowns();
        let npvpq = self.pvpq.len();
        let mut jac = vec![0.0; m * m];
        let mut set = |r: usize, c: usize, v: f64| jac[r * m + c] += v;
        for &i in &self.pvpq {
            let rp = self.ang_pos[i].expect("pvpq");
            let rq = self.mag_pos[i].map(|k| npvpq + k);
            for &(j, y) in &self.rows[i] {
                let (g, b) = (y.re, y.im);
                if j == i {
                    let (p, q) = (s[i].re, s[i].im);
                    let v2 = vm[i] * vm[i];
                    set(rp, rp, -q - b * v2);
                    if let Some(rq) = rq {
                        set(rp, rq, p / vm[i] + g * vm[i]);
                        set(rq, rp, p - g * v2);
                        set(rq, rq, q / vm[i] - b * vm[i]);
                    }
                    continue;
                }
                let th = va[i] - va[j];
                let (sin, cos) = th.sin_cos();
                let gs_bc = g * sin - b * cos;
                let gc_bs = g * cos + b * sin;
                if let Some(cj) = self.ang_pos[j] {
                    set(rp, cj, vm[i] * vm[j] * gs_bc);
                    if let Some(rq) = rq {
                        set(rq, cj, -vm[i] * vm[j] * gc_bs);
                    }
                }
                if let Some(cj) = self.mag_pos[j].map(|k| npvpq + k) {
                    set(rp, cj, vm[i] * gc_bs);
                    if let Some(rq) = rq {
                        set(rq, cj, vm[i] * gs_bc);
                    }
                }
            }
        }
        jac
    }

    fn initial_state(&self, warm: Option<(&[f64], &[f64])>) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.len();
        let (mut vm, mut va) = match warm {
            Some((m, a)) if m.len() == n && a.len() == n => (m.to_vec(), a.to_vec()),
            _ => (vec![1.0; n], vec![0.0; n]),
        };
        for i in 0..n {
            if let Some(v) = self.v_set[i] {
                vm[i] = v;
            }
        }
        va[self.slack] = 0.0;
        (vm, va)
    }

    fn solve(
        &self,
        options: &PfOptions,
        warm: Option<(&[f64], &[f64])>,
    ) -> Result<PowerFlowSolution> {
        options.validate()?;
        let (mut vm, mut va) = self.initial_state(warm);
        let m = self.n_unknowns();
        let npvpq = self.pvpq.len();
        let mut history = Vec::new();
        let mut updates = 0;
        loop {
            let mut f = self.mismatch(&vm, &va);
            let norm = f.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            history.push(norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    iterations: history.len(),
                    last_mismatch: norm,
                });
            }
            if norm <= options.tolerance {
                return Ok(PowerFlowSolution {
                    v_mag: vm,
                    v_ang: va,
                    iterations: history.len(),
                    max_mismatch: norm,
                    mismatch_history: history,
                });
            }
            if updates == options.max_iterations {
                return Err(Error::Divergence {
                    iterations: history.len(),
                    last_mismatch: norm,
                });
            }
            let mut jac = self.jacobian(&vm, &va);
            lu_solve_in_place(&mut jac, m, &mut f).map_err(|_| Error::Divergence {
                iterations: history.len(),
                last_mismatch: norm,
            })?;
            for (k, &i) in self.pvpq.iter().enumerate() {
                va[i] += f[k];
            }
            for (k, &i) in self.pq.iter().enumerate() {
                vm[i] += f[npvpq + k];
                if !(vm[i] > 0.0) {
                    return Err(Error::Divergence {
                        iterations: history.len(),
                        last_mismatch: norm,
                    });
                }
            }
            updates += 1;
        }
    }
}

fn check_connected(case: &NetworkCase) -> Result<()> {
    if case.is_connected() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "case {} is islanded",
            case.name()
        )))
    }
}

/// Solves the AC power flow of `case` from a flat start.
pub fn solve_pf(case: &NetworkCase, options: &PfOptions) -> Result<PowerFlowSolution> {
    check_connected(case)?;
    PfModel::new(case).solve(options, None)
}

/// Like [`solve_pf`] but starts from a previous solution unless
/// `options.flat_start` is set. Setpoint magnitudes always come from the case.
pub fn solve_pf_from(
    case: &NetworkCase,
    options: &PfOptions,
    start: &PowerFlowSolution,
) -> Result<PowerFlowSolution> {
    check_connected(case)?;
    let warm = (!options.flat_start).then_some((start.v_mag.as_slice(), start.v_ang.as_slice()));
    PfModel::new(case).solve(options, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{
        ieee118, synthetic_grid, three_bus, triangle, two_bus, BranchId, BusRecord,
    };
    use proptest::prelude::*;

    fn with_load(case: &NetworkCase, p: &[f64], q: &[f64]) -> NetworkCase {
        case.with_injections(p, q, None).unwrap()
    }

    #[test]
    fn zero_injection_flat_start_is_immediate() {
        let sol = solve_pf(&triangle(), &PfOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.v_mag.iter().all(|&v| v == 1.0));
        assert!(sol.v_ang.iter().all(|&a| a == 0.0));
    }

    /// |V2| from the two-bus quadratic: with V1 = 1, z = jX, load P (Q = 0),
    /// |V2|² = (1 ± sqrt(1 − 4 X² P²)) / 2 and sin(θ2) = −P X / |V2|.
    #[test]
    fn two_bus_matches_closed_form() {
        let case = with_load(&two_bus(), &[0.0, -0.1], &[0.0, 0.0]);
        let sol = solve_pf(&case, &PfOptions::default()).unwrap();
        let (x, p) = (0.1f64, 0.1f64);
        let v2 = ((1.0 + (1.0 - 4.0 * x * x * p * p).sqrt()) / 2.0).sqrt();
        let th2 = (-p * x / v2).asin();
        assert!((sol.v_mag[1] - v2).abs() < 1e-9, "{} vs {v2}", sol.v_mag[1]);
        assert!((sol.v_ang[1] - th2).abs() < 1e-9);
        assert!(sol.max_mismatch < 1e-8);
        assert_eq!(sol.v_ang[0], 0.0);
    }

    /// Independent Gauss–Seidel iteration on the three-bus case.
    fn gauss_seidel(case: &NetworkCase) -> Vec<Complex64> {
        let y = build_ybus(case);
        let n = case.n_buses();
        let mut v = vec![Complex64::new(1.0, 0.0); n];
        let s = case.slack_index();
        v[s] = Complex64::new(case.buses()[s].v_setpoint.unwrap(), 0.0);
        for _ in 0..20_000 {
            for i in 0..n {
                if i == s {
                    continue;
                }
                let b = &case.buses()[i];
                let sum: Complex64 = (0..n).filter(|&j| j != i).map(|j| y[(i, j)] * v[j]).sum();
                let sinj = Complex64::new(b.p_inj, b.q_inj);
                v[i] = ((sinj / v[i]).conj() - sum) / y[(i, i)];
            }
        }
        v
    }

    #[test]
    fn three_bus_agrees_with_gauss_seidel() {
        let case = three_bus();
        let sol = solve_pf(&case, &PfOptions::default()).unwrap();
        let gs = gauss_seidel(&case);
        for i in 0..3 {
            assert!((sol.voltage(i) - gs[i]).norm() < 1e-8, "bus {i}");
        }
    }

    #[test]
    fn warm_start_converges_quickly() {
        let case = ieee118();
        let opts = PfOptions::default();
        let sol = solve_pf(&case, &opts).unwrap();
        assert!(sol.max_mismatch < 1e-8);
        let again = solve_pf_from(
            &case,
            &PfOptions {
                flat_start: false,
                ..opts
            },
            &sol,
        )
        .unwrap();
        assert!(again.iterations <= 2);
    }

    #[test]
    fn power_balance_holds_on_118() {
        let case = ieee118();
        let sol = solve_pf(&case, &PfOptions::default()).unwrap();
        let model = PfModel::new(&case);
        let s = model.calc_power(&sol.v_mag, &sol.v_ang);
        let total_injection: f64 = s.iter().map(|c| c.re).sum();
        let v = sol.voltages();
        let mut losses = 0.0;
        for br in case.branches().iter().filter(|b| b.in_service) {
            let f = case.bus_index(br.from_bus).unwrap();
            let t = case.bus_index(br.to_bus).unwrap();
            let i = (v[f] - v[t]) * br.series_admittance();
            losses += i.norm_sqr() * br.series_impedance.re;
        }
        for (k, b) in case.buses().iter().enumerate() {
            losses += v[k].norm_sqr() * b.shunt_admittance.re;
        }
        assert!((total_injection - losses).abs() < 10.0 * 1e-8 * case.n_buses() as f64);
    }

    #[test]
    fn islanded_case_is_validation_error() {
        let case = triangle()
            .with_branch_status(BranchId(1), false)
            .unwrap()
            .with_branch_status(BranchId(3), false)
            .unwrap();
        assert!(matches!(
            solve_pf(&case, &PfOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn impossible_load_diverges() {
        let case = with_load(&two_bus(), &[0.0, -50.0], &[0.0, 0.0]);
        let r = solve_pf(&case, &PfOptions::default());
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn synthetic_grid_converges() {
        let case = synthetic_grid(12, 12, 3);
        let sol = solve_pf(&case, &PfOptions::default()).unwrap();
        assert!(sol.max_mismatch < 1e-8);
        assert!(sol.iterations < 10);
    }

    #[test]
    fn rejects_bad_options() {
        let bad = PfOptions {
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(matches!(solve_pf(&triangle(), &bad), Err(Error::Config(_))));
    }

    fn random_case(seed: u64) -> (NetworkCase, Vec<f64>, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..7);
        let mut buses = vec![BusRecord::slack(1, 1.0)];
        for i in 2..=n {
            if rng.random::<f64>() < 0.3 {
                buses.push(BusRecord::pv(i, rng.random_range(-0.5..0.5), 1.0));
            } else {
                buses.push(
                    BusRecord::pq(i, rng.random_range(-0.5..0.2), rng.random_range(-0.2..0.1))
                        .with_shunt(Complex64::new(0.0, rng.random_range(0.0..0.05))),
                );
            }
        }
        let mut branches = Vec::new();
        for i in 2..=n {
            let j = rng.random_range(1..i);
            let x = rng.random_range(0.05..0.2);
            branches.push(
                crate::netmodel::BranchRecord::new(i - 1, j, i, Complex64::new(0.2 * x, x))
                    .with_charging(rng.random_range(0.0..0.1)),
            );
        }
        let case = NetworkCase::new("rand", buses, branches).unwrap();
        let vm = (0..n).map(|_| rng.random_range(0.9..1.1)).collect();
        let va = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        (case, vm, va)
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(seed in any::<u64>()) {
            let (case, vm, va) = random_case(seed);
            let model = PfModel::new(&case);
            let m = model.n_unknowns();
            let jac = model.jacobian(&vm, &va);
            let h = 1e-6;
            let npvpq = model.pvpq.len();
            for c in 0..m {
                let perturb = |d: f64| {
                    let (mut vm2, mut va2) = (vm.clone(), va.clone());
                    if c < npvpq { va2[model.pvpq[c]] += d } else { vm2[model.pq[c - npvpq]] += d }
                    model.mismatch(&vm2, &va2)
                };
                let (fp, fm) = (perturb(h), perturb(-h));
                for r in 0..m {
                    // Jacobian is of calculated power; mismatch is spec - calc.
                    let fd = -(fp[r] - fm[r]) / (2.0 * h);
                    let an = jac[r * m + c];
                    // Entries near zero are compared absolutely; central differences of
                    // O(1) mismatches carry about 1e-9 of rounding.
                    let scale = an.abs().max(fd.abs()).max(1.0);
                    prop_assert!((an - fd).abs() / scale < 1e-6, "r{} c{}: {} vs {}", r, c, an, fd);
                }
            }
        }
    }
}
