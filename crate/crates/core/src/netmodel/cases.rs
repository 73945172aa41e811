use num_complex::Complex64;
use rand::Rng;

use super::{parse_matpower, BranchRecord, BusRecord, NetworkCase};
use crate::rng;

/// Highest-voltage (345 kV) buses of the IEEE 118-bus system.
pub const IEEE118_PMU_BUSES: [u32; 11] = [8, 9, 10, 26, 30, 38, 63, 64, 65, 68, 81];

const CASE118: &str = include_str!("../../data/case118.m");

/// IEEE 118-bus test case (transformer taps taken at nominal ratio).
pub fn ieee118() -> NetworkCase {
    parse_matpower(CASE118).expect("bundled case118 parses")
}

/// Slack bus 1 feeding bus 2 through `j0.1`, no load.
pub fn two_bus() -> NetworkCase {
    NetworkCase::new(
        "two-bus",
        vec![BusRecord::slack(1, 1.0), BusRecord::pq(2, 0.0, 0.0)],
        vec![BranchRecord::new(1, 1, 2, Complex64::new(0.0, 0.1))],
    )
    .expect("valid two-bus case")
}

/// Three buses in a ring of `j0.1` lines, no load. Branch ids: 1 = 1-2,
/// 2 = 2-3, 3 = 3-1.
pub fn triangle() -> NetworkCase {
    let z = Complex64::new(0.0, 0.1);
    NetworkCase::new(
        "triangle",
        vec![
            BusRecord::slack(1, 1.0),
            BusRecord::pq(2, 0.0, 0.0),
            BusRecord::pq(3, 0.0, 0.0),
        ],
        vec![
            BranchRecord::new(1, 1, 2, z),
            BranchRecord::new(2, 2, 3, z),
            BranchRecord::new(3, 3, 1, z),
        ],
    )
    .expect("valid triangle case")
}

/// Nominal operating point of the three-bus unobservability example.
///
/// Bus 2 carries 2.0 pu generation and 0.5 pu load (net 1.5 + j0.1), bus 3 is
/// a pure 2.0 + j0.5 load. Shunt impedances -j100 (bus 1) and -j40 (bus 3).
pub fn three_bus() -> NetworkCase {
    let shunt = |z_im: f64| Complex64::new(0.0, z_im).inv();
    NetworkCase::new(
        "three-bus",
        vec![
            BusRecord::slack(1, 1.0).with_shunt(shunt(-100.0)),
            BusRecord::pq(2, 2.0 - 0.5, 0.1).with_load(0.5, 0.0),
            BusRecord::pq(3, -2.0, -0.5).with_shunt(shunt(-40.0)),
        ],
        vec![
            BranchRecord::new(1, 1, 2, Complex64::new(0.05, 0.1)),
            BranchRecord::new(2, 2, 3, Complex64::new(0.0, 0.05)),
            BranchRecord::new(3, 3, 1, Complex64::new(0.02, 0.05)),
        ],
    )
    .expect("valid three-bus case")
}

/// Lightly loaded meshed grid of `rows × cols` buses, slack near the centre,
/// every fifth bus a PV generator. Used for scale smoke tests.
pub fn synthetic_grid(rows: usize, cols: usize, seed: u64) -> NetworkCase {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 buses");
    let mut rng = rng::stream(seed, "synthetic-grid");
    let n = rows * cols;
    let id = |r: usize, c: usize| (r * cols + c + 1) as u32;
    let slack_id = id(rows / 2, cols / 2);

    let mut buses = Vec::with_capacity(n);
    let mut total_load = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let bid = id(r, c);
            let p_load = rng.random_range(0.05..0.15);
            total_load += p_load;
            let bus = if bid == slack_id {
                BusRecord::slack(bid, 1.02)
            } else if bid % 5 == 0 {
                BusRecord::pv(bid, 0.0, 1.01).with_load(p_load, 0.3 * p_load)
            } else {
                BusRecord::pq(bid, -p_load, -0.3 * p_load)
            };
            buses.push(bus);
        }
    }
    // Generators cover about 80% of the load; the slack takes the rest.
    let n_pv = buses
        .iter()
        .filter(|b| b.kind == super::BusKind::Pv)
        .count()
        .max(1);
    let per_gen = 0.8 * total_load / n_pv as f64;
    for b in buses.iter_mut().filter(|b| b.kind == super::BusKind::Pv) {
        b.p_inj = per_gen - b.p_load;
    }

    let mut branches = Vec::new();
    let mut next = 1u32;
    let mut line = |a: u32, b: u32, rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rng.random_range(0.02..0.05);
        let br = BranchRecord::new(next, a, b, Complex64::new(0.15 * x, x)).with_charging(0.02);
        next += 1;
        br
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                branches.push(line(id(r, c), id(r, c + 1), &mut rng));
            }
            if r + 1 < rows {
                branches.push(line(id(r, c), id(r + 1, c), &mut rng));
            }
            if r + 1 < rows && c + 1 < cols && (r + c) % 7 == 0 {
                branches.push(line(id(r, c), id(r + 1, c + 1), &mut rng));
            }
        }
    }
    NetworkCase::new(format!("grid-{rows}x{cols}"), buses, branches).expect("valid synthetic grid")
}
