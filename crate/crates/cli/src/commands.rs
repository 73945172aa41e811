use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use serde::Serialize;
use tsse_core::bddc::{learn_stats, Bddc};
use tsse_core::eval::{
    self, correction_sweep, extreme_study, hop_profile as hops, input_tve, metrics,
    scenario_features, BddcSetup, DbStudyConfig, MetricsReport, Summary,
};
use tsse_core::gauss::run_3bus_study;
use tsse_core::lse::{build_h, check_observable, LseSolver};
use tsse_core::mlp::{self, load_model, load_model_checked, save_model, MlpModel};
use tsse_core::netmodel::{
    self, apply_branch_outage, enumerate_n1_topologies, BusId, NetworkCase, PmuPlacement,
    IEEE118_PMU_BUSES,
};
use tsse_core::sampler::{
    build_dataset, fit_kde, make_extreme_scenarios, BandwidthRule, Dataset, DatasetSpec,
    InjectionModel, NoiseModel, Part, Splits, Target,
};
use tsse_core::{Error, Result};

use crate::config::RunConfig;
use crate::output::{fmt, Run};

pub fn load_case(cfg: &RunConfig) -> Result<NetworkCase> {
    let case = match &cfg.case.path {
        Some(p) => NetworkCase::load(p)?,
        None => match cfg.case.builtin.as_str() {
            "ieee118" => netmodel::ieee118(),
            "three_bus" => netmodel::three_bus(),
            "triangle" => netmodel::triangle(),
            "two_bus" => netmodel::two_bus(),
            other => return Err(Error::Config(format!("unknown builtin case '{other}'"))),
        },
    };
    match cfg.case.open_line {
        Some([a, b]) => {
            let br = case
                .branch_between(BusId(a), BusId(b))
                .ok_or_else(|| Error::Validation(format!("no line between buses {a} and {b}")))?;
            apply_branch_outage(&case, br.id)
        }
        None => Ok(case),
    }
}

pub fn load_placement(cfg: &RunConfig, case: &NetworkCase) -> Result<PmuPlacement> {
    if let Some(p) = &cfg.placement.path {
        return PmuPlacement::from_json_ids(case, &fs::read_to_string(p)?);
    }
    let ids: Vec<u32> = match (
        &cfg.placement.buses,
        cfg.case.builtin.as_str(),
        &cfg.case.path,
    ) {
        (Some(b), _, _) => b.clone(),
        (None, "ieee118", None) => IEEE118_PMU_BUSES.to_vec(),
        (None, "three_bus" | "triangle" | "two_bus", None) => vec![1],
        _ => {
            return Err(Error::Config(
                "placement.buses or placement.path is required for this case".into(),
            ))
        }
    };
    PmuPlacement::from_ids(case, &ids)
}

/// Reads a CSV whose header names channels `P@<bus>`, `Q@<bus>` or
/// `slack_v`, one historical value per row.
fn kde_from_history(path: &Path) -> Result<InjectionModel> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let targets = header
        .iter()
        .map(|h| {
            let target = match h.split_once('@') {
                Some(("P", bus)) => Target::P(BusId(parse_bus(bus)?)),
                Some(("Q", bus)) => Target::Q(BusId(parse_bus(bus)?)),
                _ if h == "slack_v" => Target::SlackV,
                _ => {
                    return Err(Error::Parse(format!(
                        "history column '{h}' is not P@bus, Q@bus or slack_v"
                    )))
                }
            };
            Ok((h.to_string(), target))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut history = vec![Vec::new(); targets.len()];
    for rec in r.records() {
        for (j, v) in rec?.iter().enumerate() {
            history[j].push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{v}: {e}")))?,
            );
        }
    }
    fit_kde(&targets, &history, BandwidthRule::Silverman)
}

fn parse_bus(s: &str) -> Result<u32> {
    s.trim_start_matches("bus")
        .parse()
        .map_err(|_| Error::Parse(format!("bad bus id '{s}'")))
}

pub fn load_injections(cfg: &RunConfig, case: &NetworkCase) -> Result<InjectionModel> {
    let inj = &cfg.injections;
    let need_path = || {
        inj.path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("injections.path is required for '{}'", inj.kind)))
    };
    match inj.kind.as_str() {
        "parametric" => InjectionModel::parametric_around(case, inj.pct_std),
        "three_bus" => Ok(InjectionModel::three_bus()),
        "kde" => kde_from_history(need_path()?),
        "file" => {
            let m: InjectionModel = serde_json::from_str(&fs::read_to_string(need_path()?)?)?;
            InjectionModel::new(m.channels)
        }
        other => Err(Error::Config(format!("unknown injection model '{other}'"))),
    }
}

fn noise(cfg: &RunConfig) -> Result<NoiseModel> {
    NoiseModel::from_name(&cfg.noise.family)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.join("meta.json").is_file() {
        return Err(Error::Config(format!(
            "no dataset in {}; run `tsse data generate` first",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn load_for(cfg: &RunConfig, ds: &Dataset) -> Result<MlpModel> {
    let (model, warnings) = load_model_checked(cfg.model_path(), &ds.topology)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(model)
}

/// Test-split metrics, aligning features by name when the model was
/// trained on another schema.
fn score(model: &MlpModel, ds: &Dataset) -> Result<MetricsReport> {
    let z = if model.feature_names == ds.feature_names {
        ds.z(Part::Test).to_owned()
    } else {
        model.align_features(ds.z(Part::Test), &ds.feature_names)?
    };
    let mut m = metrics(model.predict_batch(z.view())?.view(), ds.x(Part::Test))?;
    let tve = input_tve(
        ds.z(Part::Test),
        ds.z_clean_part(Part::Test),
        &ds.feature_is_angle,
    )?;
    m.input_tve = Summary::of(&tve);
    Ok(m)
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: magnitude MAPE {:.4}%  angle MAE {:.5} rad  RMSE {:.3e}",
        m.mag_mape, m.ang_mae, m.rmse
    );
    if let Some(t) = &m.input_tve {
        println!(
            "  input TVE: mean {:.3e}  p95 {:.3e}  max {:.3e}",
            t.mean, t.p95, t.max
        );
    }
}

#[derive(Serialize)]
struct CaseSummary {
    name: String,
    buses: usize,
    branches: usize,
    in_service: usize,
    slack_bus: u32,
    connected: bool,
    n1_secure_outages: usize,
}

pub fn case_validate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let summary = CaseSummary {
        name: case.name().to_string(),
        buses: case.n_buses(),
        branches: case.branches().len(),
        in_service: case.branches().iter().filter(|b| b.in_service).count(),
        slack_bus: case.buses()[case.slack_index()].id.0,
        connected: case.is_connected(),
        n1_secure_outages: enumerate_n1_topologies(&case)?.len(),
    };
    println!(
        "{}: {} buses, {} branches ({} in service), slack bus {}, connected: {}, non-islanding outages: {}",
        summary.name,
        summary.buses,
        summary.branches,
        summary.in_service,
        summary.slack_bus,
        summary.connected,
        summary.n1_secure_outages
    );
    run.write_json("case_summary.json", &summary)?;
    Ok(())
}

pub fn data_generate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let d = &cfg.data;
    let spec = DatasetSpec {
        samples: d.samples,
        splits: Splits::new(d.train, d.val, d.test),
        noise: noise(cfg)?,
        seed: cfg.seed,
    };
    let ds = build_dataset(&case, &placement, &load_injections(cfg, &case)?, &spec)?;
    let dir = cfg.data_dir();
    ds.save(&dir)?;
    for f in ["meta.json", "z_clean.csv", "z_noisy.csv", "x_true.csv"] {
        run.record(dir.join(f));
    }
    let tve = Summary::of(&input_tve(
        ds.z_noisy.view(),
        ds.z_clean.view(),
        &ds.feature_is_angle,
    )?);
    println!(
        "{} rows ({} train / {} val / {} test), {} features, {} states, {} resampled -> {}",
        ds.n_rows(),
        ds.splits.train,
        ds.splits.val,
        ds.splits.test,
        ds.n_features(),
        ds.x_true.ncols(),
        ds.resampled,
        dir.display()
    );
    if let Some(t) = tve {
        println!(
            "achieved input TVE: mean {:.3e}  p95 {:.3e}  max {:.3e}",
            t.mean, t.p95, t.max
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (model, report) = mlp::train(&ds, &cfg.mlp_config()?)?;
    let path = cfg.model_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_model(&model, &path)?;
    run.record(path.clone());
    let rows: Vec<Vec<String>> = (0..report.epochs_run)
        .map(|e| {
            vec![
                (e + 1).to_string(),
                fmt(report.train_loss[e]),
                report.val_loss.get(e).map_or(String::new(), |v| fmt(*v)),
            ]
        })
        .collect();
    run.write_csv(
        "train_history.csv",
        &["epoch", "train_loss", "val_loss"],
        &rows,
    )?;
    println!(
        "trained {} epochs in {:.1} s (best epoch {}, early stop: {}) -> {}",
        report.epochs_run,
        report.wall_seconds,
        report.best_epoch + 1,
        report.stopped_early,
        path.display()
    );
    let m = score(&model, &ds)?;
    print_metrics("test", &m);
    run.write_json("metrics.json", &m)?;
    Ok(())
}

#[derive(Serialize)]
struct FineTuneSummary {
    topology: String,
    stale: MetricsReport,
    tuned: MetricsReport,
    epochs_run: usize,
    wall_seconds: f64,
}

pub fn finetune(cfg: &RunConfig, output: &Path, run: &mut Run) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let base = load_for(cfg, &ds)?;
    let stale = score(&base, &ds)?;
    let (tuned, report) = mlp::fine_tune(&base, &ds, &cfg.finetune())?;
    save_model(&tuned, output)?;
    run.record(output.to_path_buf());
    let after = score(&tuned, &ds)?;
    print_metrics("stale model", &stale);
    print_metrics("fine-tuned", &after);
    println!(
        "fine-tuning took {:.1} s over {} epochs",
        report.wall_seconds, report.epochs_run
    );
    run.write_json(
        "finetune.json",
        &FineTuneSummary {
            topology: ds.topology.clone(),
            stale,
            tuned: after,
            epochs_run: report.epochs_run,
            wall_seconds: report.wall_seconds,
        },
    )?;
    Ok(())
}

pub fn estimate(cfg: &RunConfig, input: &Path, output: &Path, run: &mut Run) -> Result<()> {
    let model = load_model(cfg.model_path())?;
    let mut r = csv::Reader::from_path(input)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        for v in rec?.iter() {
            values.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{v}: {e}")))?,
            );
        }
        rows += 1;
    }
    let z = Array2::from_shape_vec((rows, names.len()), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let z = model.align_features(z.view(), &names)?;
    let x = model.predict_batch(z.view())?;
    let mut w = csv::Writer::from_path(output)?;
    w.write_record(&model.target_names)?;
    for row in x.rows() {
        w.write_record(row.iter().map(|v| fmt(*v)))?;
    }
    w.flush()?;
    run.record(output.to_path_buf());
    println!("estimated {rows} rows -> {}", output.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = load_for(cfg, &ds)?;
    let m = score(&model, &ds)?;
    print_metrics("test", &m);
    let n = m.per_bus_mape.len();
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let bus = ds.state_names[i].trim_start_matches("Vmag@bus").to_string();
            vec![bus, fmt(m.per_bus_mape[i]), fmt(m.per_bus_mae[i])]
        })
        .collect();
    run.write_csv(
        "per_bus.csv",
        &["bus", "mag_mape_pct", "ang_mae_rad"],
        &rows,
    )?;
    run.write_json("metrics.json", &m)?;
    Ok(())
}

pub fn hop_profile(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let ds = load_dataset(cfg)?;
    let model = load_for(cfg, &ds)?;
    let est = model.predict_batch(ds.z(Part::Test))?;
    let table = hops(est.view(), ds.x(Part::Test), &placement, &case)?;
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                r.hops.to_string(),
                r.buses.to_string(),
                fmt(r.mag_mape),
                fmt(r.ang_mae),
            ]
        })
        .collect();
    for r in &table {
        println!(
            "{} hops: {:3} buses  MAPE {:.4}%  MAE {:.5} rad",
            r.hops, r.buses, r.mag_mape, r.ang_mae
        );
    }
    run.write_csv(
        "fig3_hops.csv",
        &["hops", "buses", "mag_mape_pct", "ang_mae_rad"],
        &rows,
    )?;
    Ok(())
}

fn database(cfg: &RunConfig, ds: &Dataset) -> Array2<f64> {
    let z = ds.z(Part::Train);
    let n = cfg.bddc.database_rows.unwrap_or(z.nrows()).min(z.nrows());
    z.slice(s![..n, ..]).to_owned()
}

pub fn bddc_simulate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let ds = load_dataset(cfg)?;
    let model = load_for(cfg, &ds)?;
    let stats = learn_stats(ds.z(Part::Train))?;
    let db = database(cfg, &ds);
    let setup = BddcSetup {
        stats: &stats,
        database: db.view(),
        placement: &placement,
        case: &case,
        config: cfg.bddc.core(),
    };
    let b = &cfg.bddc;
    let header = [
        "eta",
        "severity",
        "corrupted",
        "none_mape",
        "mean_mape",
        "noc_mape",
        "none_mae",
        "mean_mae",
        "noc_mae",
    ];
    let to_rows = |rows: &[eval::SweepRow]| -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| {
                vec![
                    fmt(r.eta),
                    fmt(r.severity),
                    fmt(r.corrupted_fraction),
                    fmt(r.none.0),
                    fmt(r.mean.0),
                    fmt(r.noc.0),
                    fmt(r.none.1),
                    fmt(r.mean.1),
                    fmt(r.noc.1),
                ]
            })
            .collect()
    };
    let points: Vec<(f64, f64)> = b.etas.iter().map(|&e| (e, b.eta_severity)).collect();
    let eta = correction_sweep(
        &model,
        &setup,
        ds.z(Part::Test),
        ds.x(Part::Test),
        &points,
        cfg.seed,
    )?;
    let points: Vec<(f64, f64)> = b.severities.iter().map(|&s| (b.severity_eta, s)).collect();
    let sev = correction_sweep(
        &model,
        &setup,
        ds.z(Part::Test),
        ds.x(Part::Test),
        &points,
        cfg.seed,
    )?;
    println!("eta   sev   MAPE none / mean / NOC (%)");
    for r in eta.iter().chain(&sev) {
        println!(
            "{:.2}  {:.1}  {:.4} / {:.4} / {:.4}",
            r.eta, r.severity, r.none.0, r.mean.0, r.noc.0
        );
    }
    run.write_csv("fig6_eta.csv", &header, &to_rows(&eta))?;
    run.write_csv("fig7_severity.csv", &header, &to_rows(&sev))?;

    let e = &cfg.extreme;
    if e.enabled {
        let stressed: Vec<BusId> = e.stressed.iter().map(|&b| BusId(b)).collect();
        let bad: Vec<BusId> = e.bad_pmus.iter().map(|&b| BusId(b)).collect();
        let scen = make_extreme_scenarios(
            &case,
            &stressed,
            (e.scale[0], e.scale[1]),
            e.count,
            cfg.seed,
        )?;
        let (z, x) = scenario_features(&case, &placement, &scen, &noise(cfg)?, cfg.seed)?;
        let report = extreme_study(
            &model,
            &setup,
            z.view(),
            x.view(),
            &bad,
            e.severity,
            cfg.seed,
        )?;
        println!(
            "stressed scenarios: {} ({} with suppressed flags, {} scale-reduced)",
            report.scenarios, report.suppressed, scen.reduced
        );
        let rows: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                println!(
                    "  {:28} MAPE {:.4} ± {:.4}%  MAE {:.5} ± {:.5} rad",
                    r.method, r.mape_mean, r.mape_std, r.mae_mean, r.mae_std
                );
                vec![
                    r.method.clone(),
                    fmt(r.mape_mean),
                    fmt(r.mape_std),
                    fmt(r.mae_mean),
                    fmt(r.mae_std),
                ]
            })
            .collect();
        run.write_csv(
            "extreme.csv",
            &["method", "mape_mean", "mape_std", "mae_mean", "mae_std"],
            &rows,
        )?;
    }
    Ok(())
}

pub fn oracle(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let study = run_3bus_study(cfg.oracle.samples, cfg.seed)?;
    for c in &study.cases {
        println!(
            "{:7} given {:16} MAE {:.3e}",
            c.name,
            c.given.join(", "),
            c.mae
        );
    }
    let path = run.path("oracle.csv");
    fs::write(&path, study.to_csv())?;
    run.record(path);
    Ok(())
}

#[derive(Serialize)]
struct LseSummary {
    pmus: usize,
    phasors: usize,
    rank: usize,
    required: usize,
    observable: bool,
    metrics: Option<MetricsReport>,
}

pub fn lse(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let model = build_h(&case, &placement)?;
    let obs = check_observable(&model);
    println!(
        "{} PMUs, {} phasors: rank {} of {} ({})",
        placement.pmu_buses.len(),
        model.phasor_names.len(),
        obs.rank,
        obs.required,
        if obs.observable {
            "observable"
        } else {
            "unobservable"
        }
    );
    let mut summary = LseSummary {
        pmus: placement.pmu_buses.len(),
        phasors: model.phasor_names.len(),
        rank: obs.rank,
        required: obs.required,
        observable: obs.observable,
        metrics: None,
    };
    if !obs.observable {
        run.write_json("lse.json", &summary)?;
        return Err(Error::Unobservable {
            rank: obs.rank,
            required: obs.required,
        });
    }
    let solver = LseSolver::new(&model)?;
    let rows = cfg.data.test;
    let spec = DatasetSpec {
        samples: rows,
        splits: Splits::new(0, 0, rows),
        noise: noise(cfg)?,
        seed: cfg.seed,
    };
    let ds = build_dataset(&case, &placement, &load_injections(cfg, &case)?, &spec)?;
    let est = solver.estimate_features(ds.z(Part::Test))?;
    let m = metrics(est.view(), ds.x(Part::Test))?;
    print_metrics("LSE", &m);
    summary.metrics = Some(m);
    run.write_json("lse.json", &summary)?;
    Ok(())
}

pub fn stream(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let ds = load_dataset(cfg)?;
    let model = load_for(cfg, &ds)?;
    let z = ds.z(Part::Test);
    let frames = cfg.stream.frames.unwrap_or(z.nrows()).min(z.nrows());
    let z = z.slice(s![..frames, ..]);
    let bddc = if cfg.stream.bddc {
        Some(Bddc::new(
            learn_stats(ds.z(Part::Train))?,
            database(cfg, &ds),
            &placement,
            &case,
            cfg.bddc.core(),
        )?)
    } else {
        None
    };
    let report = eval::stream_replay(z, &model, bddc.as_ref(), cfg.stream.budget_ms)?;
    let est = Array2::from_shape_fn((frames, model.n_outputs()), |(i, j)| report.estimates[i][j]);
    let m = metrics(est.view(), ds.x(Part::Test).slice(s![..frames, ..]))?;
    let l = &report.latency_ms;
    println!(
        "{} frames: p50 {:.3} ms  p95 {:.3} ms  max {:.3} ms  over {:.0} ms budget: {}  flagged: {}",
        report.frames, l.p50, l.p95, l.max, report.budget_ms, report.over_budget, report.flagged_frames
    );
    print_metrics("stream", &m);

    #[derive(Serialize)]
    struct StreamSummary<'a> {
        frames: usize,
        budget_ms: f64,
        latency_ms: &'a Summary,
        over_budget: usize,
        flagged_frames: usize,
        metrics: MetricsReport,
    }
    run.write_json(
        "stream.json",
        &StreamSummary {
            frames: report.frames,
            budget_ms: report.budget_ms,
            latency_ms: &report.latency_ms,
            over_budget: report.over_budget,
            flagged_frames: report.flagged_frames,
            metrics: m,
        },
    )?;
    Ok(())
}

pub fn db_study(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let case = load_case(cfg)?;
    let placement = load_placement(cfg, &case)?;
    let study = DbStudyConfig {
        sizes: cfg.db_study.sizes.clone(),
        test_rows: cfg.db_study.test_rows,
        val_fraction: cfg.db_study.val_fraction,
        mlp: cfg.mlp_config()?,
        noise: noise(cfg)?,
        seed: cfg.seed,
    };
    let table =
        eval::database_size_study(&case, &placement, &load_injections(cfg, &case)?, &study)?;
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            println!(
                "{:6} rows: MAPE {:.4}%  MAE {:.5} rad  ({:.1} s)",
                r.size, r.mag_mape, r.ang_mae, r.train_seconds
            );
            vec![
                r.size.to_string(),
                fmt(r.mag_mape),
                fmt(r.ang_mae),
                fmt(r.train_seconds),
            ]
        })
        .collect();
    run.write_csv(
        "fig8_dbsize.csv",
        &["size", "mag_mape_pct", "ang_mae_rad", "train_seconds"],
        &rows,
    )?;
    Ok(())
}
