//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any fails. Pass a substring to run a subset,
//! e.g. `cargo test -p validation --test acceptance -- c05`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use tsse_core::bddc::{learn_stats, wald_flag, Bddc, BddcConfig, WaldStats};
use tsse_core::eval::{
    correction_sweep, extreme_study, metrics, scenario_features, stream_replay, BddcSetup,
    MetricsReport, FRAME_INTERVAL_MS,
};
use tsse_core::gauss::{
    cond_mean_closed, cond_mean_integral, run_3bus_study, GaussianJoint, Quadrature,
};
use tsse_core::lse::{build_h, LseSolver};
use tsse_core::mlp::{fine_tune, grad_check, train, FineTune, MlpConfig, MlpModel, TrainReport};
use tsse_core::netmodel::{
    apply_branch_outage, ieee118, synthetic_grid, three_bus, triangle, BusId, NetworkCase,
    PmuPlacement, IEEE118_PMU_BUSES,
};
use tsse_core::powerflow::{features_from_state, solve_pf, PfOptions};
use tsse_core::sampler::{
    build_dataset, make_extreme_scenarios, Dataset, DatasetSpec, InjectionModel, NoiseModel, Part,
    Splits,
};

const SEED: u64 = 42;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Standard {
    case: NetworkCase,
    placement: PmuPlacement,
    injections: InjectionModel,
    ds: Dataset,
    model: MlpModel,
    report: TrainReport,
    stats: WaldStats,
}

fn standard_spec(noise: NoiseModel) -> DatasetSpec {
    DatasetSpec {
        samples: 14_000,
        splits: Splits::new(7500, 2500, 4000),
        noise,
        seed: SEED,
    }
}

fn standard() -> &'static Standard {
    static S: OnceLock<Standard> = OnceLock::new();
    S.get_or_init(|| {
        let case = ieee118();
        let placement = PmuPlacement::from_ids(&case, &IEEE118_PMU_BUSES).unwrap();
        let injections = InjectionModel::parametric_around(&case, 5.0).unwrap();
        let ds = build_dataset(
            &case,
            &placement,
            &injections,
            &standard_spec(NoiseModel::gaussian()),
        )
        .unwrap();
        let (model, report) = train(&ds, &MlpConfig::table3(SEED)).unwrap();
        let stats = learn_stats(ds.z(Part::Train)).unwrap();
        Standard {
            case,
            placement,
            injections,
            ds,
            model,
            report,
            stats,
        }
    })
}

fn test_metrics(model: &MlpModel, ds: &Dataset) -> MetricsReport {
    let z = if model.feature_names == ds.feature_names {
        ds.z(Part::Test).to_owned()
    } else {
        model
            .align_features(ds.z(Part::Test), &ds.feature_names)
            .unwrap()
    };
    metrics(
        model.predict_batch(z.view()).unwrap().view(),
        ds.x(Part::Test),
    )
    .unwrap()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn c01_oracle_table() -> Outcome {
    let t = Instant::now();
    let study = run_3bus_study(10_000, SEED).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let targets = [1.00e-3, 1.4e-4, 2.1e-4, 9.4e-4, 5e-5];
    let m: Vec<f64> = (0..5).map(|i| study.mae(i)).collect();
    let values_ok = m.iter().zip(targets).all(|(&v, t)| within(v, t, 0.5));
    let max = m.iter().cloned().fold(f64::MIN, f64::max);
    let order_ok = m[4] < m[1] && m[4] < m[2] && m[3] > m[1] && m[0] == max;
    let detail = format!(
        "MAE {:.3e} {:.3e} {:.3e} {:.3e} {:.3e} (targets 1.00e-3 1.4e-4 2.1e-4 9.4e-4 5e-5 ±50%), \
         ordering {}, {secs:.1} s",
        m[0],
        m[1],
        m[2],
        m[3],
        m[4],
        if order_ok { "ok" } else { "violated" }
    );
    check(values_ok && order_ok && secs < 120.0, detail)
}

fn random_joint(d: usize, seed: u64) -> (GaussianJoint, Vec<f64>) {
    use rand::{Rng, SeedableRng};
    let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, d, |_, _| g.random_range(-1.0..1.0));
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let mu = DVector::from_fn(d, |_, _| g.random_range(-2.0..2.0));
    let point: Vec<f64> = (0..d).map(|i| mu[i] + g.random_range(-2.0..2.0)).collect();
    let labels = (0..d).map(|i| format!("v{i}")).collect();
    (GaussianJoint::new(labels, mu, sigma).unwrap(), point)
}

fn c02_oracle_self_consistency() -> Outcome {
    let mut runner = TestRunner::new(PtConfig {
        cases: 100,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(&(2usize..=5, any::<u64>(), 1u32..32), |(d, seed, mask)| {
        let (j, point) = random_joint(d, seed);
        let target = (seed % d as u64) as usize;
        let given: Vec<usize> = (0..d)
            .filter(|&i| i != target && mask & (1 << i) != 0)
            .collect();
        let z: Vec<f64> = given.iter().map(|&i| point[i]).collect();
        let c = cond_mean_closed(&j, target, &given, &z).unwrap().value;
        let q = cond_mean_integral(&j, target, &given, &z, &Quadrature::default()).unwrap();
        worst.set(worst.get().max((c - q).abs()));
        prop_assert!((c - q).abs() <= 1e-6, "closed {} vs quadrature {}", c, q);
        Ok(())
    });
    let detail = format!(
        "100 random joints, worst |closed - quadrature| {:.2e}",
        worst.get()
    );
    match result {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{detail}: {e}")),
    }
}

fn c03_estimation_accuracy() -> Outcome {
    let s = standard();
    let m = test_metrics(&s.model, &s.ds);
    let minutes = s.report.wall_seconds / 60.0;
    check(
        m.mag_mape <= 0.35 && m.ang_mae <= 0.009 && minutes <= 30.0,
        format!(
            "MAPE {:.4}% (<= 0.35), MAE {:.5} rad (<= 0.009), training {:.1} min over {} epochs",
            m.mag_mape, m.ang_mae, minutes, s.report.epochs_run
        ),
    )
}

fn c04_noise_robustness() -> Outcome {
    let s = standard();
    let base = test_metrics(&s.model, &s.ds).mag_mape;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, noise) in [
        ("GMM", NoiseModel::gmm()),
        ("Laplace", NoiseModel::laplace()),
    ] {
        let ds = build_dataset(&s.case, &s.placement, &s.injections, &standard_spec(noise))
            .map_err(|e| e.to_string())?;
        let (model, _) = train(&ds, &MlpConfig::table3(SEED)).map_err(|e| e.to_string())?;
        let m = test_metrics(&model, &ds).mag_mape;
        let change = (m - base).abs() / base;
        ok &= change < 0.25;
        parts.push(format!(
            "{name} {m:.4}% ({:+.1}%)",
            100.0 * (m - base) / base
        ));
    }
    check(
        ok,
        format!("Gaussian {base:.4}%, {} (limit ±25%)", parts.join(", ")),
    )
}

fn sweep_setup(s: &Standard) -> BddcSetup<'_> {
    BddcSetup {
        stats: &s.stats,
        database: s.ds.z(Part::Train),
        placement: &s.placement,
        case: &s.case,
        config: BddcConfig {
            esf_enabled: false,
            ..BddcConfig::default()
        },
    }
}

fn c05_bddc_sweeps() -> Outcome {
    let s = standard();
    let setup = sweep_setup(s);
    let mut points: Vec<(f64, f64)> = [0.1, 0.2, 0.3, 0.4, 0.5].map(|e| (e, 3.0)).to_vec();
    points.extend([4.0, 5.0, 6.0, 7.0].map(|v| (0.3, v)));
    let rows = correction_sweep(
        &s.model,
        &setup,
        s.ds.z(Part::Test),
        s.ds.x(Part::Test),
        &points,
        SEED,
    )
    .map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    for r in &rows {
        let mag = r.noc.0 <= r.mean.0 && r.mean.0 <= r.none.0;
        let ang = r.noc.1 <= r.mean.1 && r.mean.1 <= r.none.1;
        if !(mag && ang) {
            bad.push(format!(
                "eta {} sev {}: NOC/mean/none MAPE {:.5}/{:.5}/{:.5} MAE {:.6}/{:.6}/{:.6}",
                r.eta, r.severity, r.noc.0, r.mean.0, r.none.0, r.noc.1, r.mean.1, r.none.1
            ));
        }
    }
    let worst = rows.iter().last().unwrap();
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "NOC <= mean <= none at all {} points (eta 0.3 sev 7: MAPE {:.4}/{:.4}/{:.4})",
                rows.len(),
                worst.noc.0,
                worst.mean.0,
                worst.none.0
            )
        } else {
            format!("ordering violated: {}", bad.join("; "))
        },
    )
}

fn c06_wald_calibration() -> Outcome {
    let s = standard();
    let z = s.ds.z(Part::Test);
    let mut counts = vec![0usize; z.ncols()];
    for row in z.rows() {
        for j in wald_flag(row, &s.stats, 0.05).map_err(|e| e.to_string())? {
            counts[j] += 1;
        }
    }
    let rates: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / z.nrows() as f64)
        .collect();
    let lo = rates.iter().cloned().fold(f64::MAX, f64::min);
    let hi = rates.iter().cloned().fold(f64::MIN, f64::max);
    let outside: Vec<String> = rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| !(0.03..=0.07).contains(&r))
        .map(|(j, r)| format!("{} {r:.3}", s.ds.feature_names[j]))
        .collect();
    check(
        outside.is_empty(),
        format!(
            "false-positive rate per feature in [{lo:.3}, {hi:.3}] over {} features{}",
            rates.len(),
            if outside.is_empty() {
                String::new()
            } else {
                format!("; outside 0.05 ± 0.02: {}", outside.join(", "))
            }
        ),
    )
}

fn c07_extreme_filter() -> Outcome {
    let s = standard();
    let stressed = [BusId(8), BusId(10)];
    let bad = [BusId(68), BusId(81)];
    let scen = make_extreme_scenarios(&s.case, &stressed, (2.0, 3.0), 1000, SEED)
        .map_err(|e| e.to_string())?;
    let (z, x) = scenario_features(&s.case, &s.placement, &scen, &NoiseModel::gaussian(), SEED)
        .map_err(|e| e.to_string())?;
    let setup = BddcSetup {
        config: BddcConfig::default(),
        ..sweep_setup(s)
    };
    let rep = extreme_study(&s.model, &setup, z.view(), x.view(), &bad, 3.0, SEED)
        .map_err(|e| e.to_string())?;
    let [none, without, with] = [&rep.rows[0], &rep.rows[1], &rep.rows[2]];
    let ok = none.mape_mean > without.mape_mean && without.mape_mean >= with.mape_mean;
    check(
        ok,
        format!(
            "MAPE none {:.4}% / without filter {:.4}% / with filter {:.4}%, \
             MAE {:.5} / {:.5} / {:.5} rad, {} of {} scenarios suppressed",
            none.mape_mean,
            without.mape_mean,
            with.mape_mean,
            none.mae_mean,
            without.mae_mean,
            with.mae_mean,
            rep.suppressed,
            rep.scenarios
        ),
    )
}

fn c08_transfer_learning() -> Outcome {
    let s = standard();
    let base = test_metrics(&s.model, &s.ds).mag_mape;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, a, b) in [("T2", 75, 77), ("T3", 38, 37), ("T4", 26, 30)] {
        let id = s
            .case
            .branch_between(BusId(a), BusId(b))
            .ok_or(format!("no branch {a}-{b}"))?
            .id;
        let case = apply_branch_outage(&s.case, id).map_err(|e| e.to_string())?;
        let placement =
            PmuPlacement::from_ids(&case, &IEEE118_PMU_BUSES).map_err(|e| e.to_string())?;
        let spec = DatasetSpec {
            samples: 4000,
            splits: Splits::new(2000, 0, 2000),
            noise: NoiseModel::gaussian(),
            seed: SEED + 1,
        };
        let ds =
            build_dataset(&case, &placement, &s.injections, &spec).map_err(|e| e.to_string())?;
        let stale = test_metrics(&s.model, &ds).mag_mape;
        let ft = FineTune {
            samples: 2000,
            epochs: 90,
            remap: true,
            ..FineTune::default()
        };
        let (tuned, report) = fine_tune(&s.model, &ds, &ft).map_err(|e| e.to_string())?;
        let after = test_metrics(&tuned, &ds).mag_mape;
        let pass = stale > base && after <= 1.5 * base && report.wall_seconds < 150.0;
        ok &= pass;
        parts.push(format!(
            "{name} stale {stale:.4}% tuned {after:.4}% in {:.0} s",
            report.wall_seconds
        ));
    }
    check(
        ok,
        format!(
            "base {base:.4}% (tuned limit {:.4}%); {}",
            1.5 * base,
            parts.join("; ")
        ),
    )
}

fn c09_latency() -> Outcome {
    let s = standard();
    let db = s.ds.z_noisy.slice(s![0..10_000, ..]).to_owned();
    let bddc = Bddc::new(
        s.stats.clone(),
        db,
        &s.placement,
        &s.case,
        BddcConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let frames = s.ds.z(Part::Test).slice(s![0..1000, ..]).to_owned();
    let rep = stream_replay(frames.view(), &s.model, Some(&bddc), FRAME_INTERVAL_MS)
        .map_err(|e| e.to_string())?;
    let l = &rep.latency_ms;
    check(
        l.p95 < FRAME_INTERVAL_MS,
        format!(
            "{} frames, {} features, 10000-row database: latency mean {:.2} ms, p95 {:.2} ms, max {:.2} ms",
            rep.frames,
            s.placement.n_features(),
            l.mean,
            l.p95,
            l.max
        ),
    )
}

fn c10_numerical_kernels() -> Outcome {
    let s = standard();
    let mut notes = Vec::new();

    let mut cases = vec![
        ieee118(),
        three_bus(),
        triangle(),
        synthetic_grid(25, 20, SEED),
    ];
    for (a, b) in [(75, 77), (38, 37), (26, 30)] {
        let id = s.case.branch_between(BusId(a), BusId(b)).unwrap().id;
        cases.push(apply_branch_outage(&s.case, id).unwrap());
    }
    let mut worst_pf = 0.0f64;
    for c in &cases {
        let sol = solve_pf(c, &PfOptions::default()).map_err(|e| format!("{}: {e}", c.name()))?;
        worst_pf = worst_pf.max(sol.max_mismatch);
    }
    notes.push(format!(
        "power-flow mismatch {worst_pf:.1e} on {} cases",
        cases.len()
    ));

    let small = DatasetSpec {
        samples: 300,
        splits: Splits::new(200, 50, 50),
        noise: NoiseModel::gaussian(),
        seed: SEED,
    };
    let c3 = three_bus();
    let p3 = PmuPlacement::from_ids(&c3, &[1]).unwrap();
    let ds3 = build_dataset(&c3, &p3, &InjectionModel::three_bus(), &small).unwrap();
    let cfg = MlpConfig {
        hidden_layers: 2,
        width: 16,
        dropout: 0.0,
        max_epochs: 3,
        ..MlpConfig::table3(SEED)
    };
    let (m3, _) = train(&ds3, &cfg).unwrap();
    let mut worst_grad = 0.0f64;
    for r in 0..5 {
        let z = ds3.z_noisy.row(r).to_vec();
        let x = ds3.x_true.row(r).to_vec();
        worst_grad = worst_grad.max(grad_check(&m3, &z, &x, 1e-6).map_err(|e| e.to_string())?);
    }
    notes.push(format!("gradient check {worst_grad:.1e}"));

    let all: Vec<u32> = s.case.buses().iter().map(|b| b.id.0).collect();
    let full = PmuPlacement::from_ids(&s.case, &all).unwrap();
    let solver = LseSolver::new(&build_h(&s.case, &full).unwrap()).map_err(|e| e.to_string())?;
    let sol = solve_pf(&s.case, &PfOptions::default()).unwrap();
    let z = features_from_state(&s.case, &full, &sol.v_mag, &sol.v_ang).unwrap();
    let z = Array2::from_shape_vec((1, z.len()), z).unwrap();
    let est = solver
        .estimate_features(z.view())
        .map_err(|e| e.to_string())?;
    let n = s.case.n_buses();
    let worst_lse = (0..n)
        .map(|i| {
            (est[(0, i)] - sol.v_mag[i])
                .abs()
                .max((est[(0, n + i)] - sol.v_ang[i]).abs())
        })
        .fold(0.0f64, f64::max);
    notes.push(format!("LSE recovery {worst_lse:.1e}"));

    let grid = synthetic_grid(25, 20, SEED);
    let gids: Vec<u32> = grid.buses().iter().map(|b| b.id.0).step_by(10).collect();
    let gpl = PmuPlacement::from_ids(&grid, &gids).unwrap();
    let gspec = DatasetSpec {
        samples: 400,
        splits: Splits::new(300, 0, 100),
        noise: NoiseModel::gaussian(),
        seed: SEED,
    };
    let ginj = InjectionModel::parametric_around(&grid, 5.0).unwrap();
    let gds = build_dataset(&grid, &gpl, &ginj, &gspec).map_err(|e| e.to_string())?;
    let gcfg = MlpConfig {
        max_epochs: 1,
        ..MlpConfig::table3(SEED)
    };
    let (gm, _) = train(&gds, &gcfg).map_err(|e| e.to_string())?;
    let gm_metrics = test_metrics(&gm, &gds);
    let smoke_ok = gm_metrics.mag_mape.is_finite() && gm_metrics.ang_mae.is_finite();
    notes.push(format!(
        "{}-bus smoke test {}",
        grid.n_buses(),
        if smoke_ok {
            "ok"
        } else {
            "produced non-finite output"
        }
    ));

    check(
        worst_pf < 1e-8 && worst_grad < 1e-4 && worst_lse < 1e-10 && smoke_ok,
        notes.join(", "),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let filter: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("c01", "3-bus oracle table", c01_oracle_table),
        (
            "c02",
            "oracle self-consistency",
            c02_oracle_self_consistency,
        ),
        ("c03", "118-bus estimation", c03_estimation_accuracy),
        ("c04", "noise-model robustness", c04_noise_robustness),
        ("c05", "bad-data sweeps", c05_bddc_sweeps),
        ("c06", "Wald calibration", c06_wald_calibration),
        ("c07", "extreme-scenario filter", c07_extreme_filter),
        ("c08", "transfer learning", c08_transfer_learning),
        ("c09", "latency", c09_latency),
        ("c10", "numerical kernels", c10_numerical_kernels),
    ];
    if args.iter().any(|a| a == "--list") {
        for (id, _, _) in criteria {
            println!("{id}: test");
        }
        return;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id} {name}: PASS ({secs:.0} s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({secs:.0} s) {d}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
