//! The four subcommands: simulate, fit, grid, report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mixem_core::em_driver::{init_theta, run_em, run_grid, EmConfig, GridResult, LossKind};
use mixem_core::flow::{ConditionalFlow, FlowConfig};
use mixem_core::forward_op::{
    load_surrogate, make_random_surrogate, save_surrogate, simulate_measurements, ForwardOperator,
    MeasurementSet,
};
use mixem_core::losses::{elbo, ElboEstimate, PriorBox};
use mixem_core::metrics::{
    distance_ab, marginal_histograms, marginals_to_csv, pair_histograms_to_csv, trace_export,
    trace_to_csv, MetricReport, DEFAULT_BINS_1D, DEFAULT_BINS_2D,
};
use mixem_core::noise_model::NoiseParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Cell, ExperimentConfig, Method};

/// Failures split config problems (exit 1) from aborted runs (exit 2).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Measurements stamped with the config they came from.
#[derive(Debug, Serialize, Deserialize)]
pub struct StampedMeasurements {
    pub config_hash: String,
    pub seed: u64,
    pub set: MeasurementSet,
}

/// Full per-run report file: metrics plus enough metadata to regenerate it.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub report: MetricReport,
}

pub fn build_operator(cfg: &ExperimentConfig) -> CliResult<ForwardOperator> {
    if let Some(path) = &cfg.problem.surrogate_path {
        return load_surrogate(Path::new(path)).map_err(|e| CliError::Config(e.to_string()));
    }
    make_random_surrogate(
        cfg.problem.d,
        cfg.problem.n,
        &cfg.problem.surrogate_hidden,
        (&cfg.problem.prior_lo, &cfg.problem.prior_hi),
        cfg.problem.surrogate_seed,
    )
    .map_err(runtime)
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn measurements_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("measurements_{}.json", cell.tag()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// CSV files start with a stamp comment so any table is regenerable from its
/// own header.
fn write_csv(path: &Path, hash: &str, seed: u64, body: &str) -> CliResult<()> {
    let text = format!("# config={hash} seed={seed}\n{body}");
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    let op = build_operator(cfg)?;
    if cfg.problem.surrogate_path.is_none() {
        save_surrogate(&op, &dir.join("surrogate.json")).map_err(runtime)?;
    }
    for cell in cfg.cells() {
        let set = simulate_measurements(
            &op,
            cfg.theta_true,
            (&cfg.problem.prior_lo, &cfg.problem.prior_hi),
            cell.n,
            cell.seed,
        )
        .map_err(runtime)?;
        let stamped = StampedMeasurements { config_hash: hash.clone(), seed: cell.seed, set };
        write_json(&measurements_path(&dir, &cell), &stamped)?;
    }
    println!("simulated {} cells into {}", cfg.cells().len(), dir.display());
    Ok(())
}

fn flow_config(cfg: &ExperimentConfig) -> FlowConfig {
    let mut fc = FlowConfig::new(cfg.problem.d, cfg.problem.n);
    fc.num_blocks = cfg.flow.num_blocks;
    fc.hidden = cfg.flow.hidden.clone();
    fc
}

fn prior_of(cfg: &ExperimentConfig) -> CliResult<PriorBox> {
    PriorBox::new(cfg.problem.prior_lo.clone(), cfg.problem.prior_hi.clone(), cfg.prior_lambda)
        .map_err(|e| CliError::Config(e.to_string()))
}

fn cell_em_config(cfg: &ExperimentConfig, cell: &Cell, loss: LossKind) -> EmConfig {
    EmConfig { loss, seed: cell.seed, ..cfg.em.clone() }
}

/// Pooled ELBO estimate over all measurements of a cell, on a dedicated
/// reporting stream.
fn report_elbo(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &PriorBox,
    op: &ForwardOperator,
    m: usize,
    seed: u64,
) -> mixem_core::Result<ElboEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e1b);
    let mut value = 0.0;
    let mut var = 0.0;
    for y in ys {
        let e = elbo(flow, y, theta, prior, op, m, &mut rng)?;
        value += e.value;
        var += e.std_error * e.std_error;
    }
    let n = ys.len() as f64;
    Ok(ElboEstimate { value: value / n, m, std_error: var.sqrt() / n })
}

fn write_run_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    cell: &Cell,
    report: &RunReport,
    flow: &ConditionalFlow,
    y0: &[f64],
) -> CliResult<()> {
    let hash = cfg.hash();
    write_json(&dir.join(format!("report_{}.json", cell.tag())), report)?;
    let thinned = trace_export(&report.report.trace, 20).map_err(runtime)?;
    write_csv(&dir.join(format!("trace_{}.csv", cell.tag())), &hash, cell.seed, &trace_to_csv(&thinned))?;

    // Posterior marginals for the cell's first measurement.
    let mut rng = ChaCha8Rng::seed_from_u64(cell.seed ^ 0x4a11_5057);
    let samples = flow.sample_posterior(y0, 2000, &mut rng).map_err(runtime)?;
    let m = marginal_histograms(
        &samples,
        &cfg.problem.prior_lo,
        &cfg.problem.prior_hi,
        DEFAULT_BINS_1D,
        DEFAULT_BINS_2D,
        None,
    )
    .map_err(runtime)?;
    write_csv(&dir.join(format!("marginals_{}.csv", cell.tag())), &hash, cell.seed, &marginals_to_csv(&m))?;
    if cfg.problem.d > 1 {
        write_csv(
            &dir.join(format!("pairs_{}.csv", cell.tag())),
            &hash,
            cell.seed,
            &pair_histograms_to_csv(&m),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    seed: u64,
    theta: NoiseParams,
    flow: ConditionalFlow,
}

/// Run one fit cell end to end; returns the report.
fn fit_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    op: &ForwardOperator,
    prior: &PriorBox,
    set: &MeasurementSet,
) -> CliResult<RunReport> {
    let hash = cfg.hash();
    let loss = cfg.method.loss();
    let em_cfg = cell_em_config(cfg, cell, loss);
    let flow0 = ConditionalFlow::new(flow_config(cfg), cell.seed);
    let theta0 = init_theta(&set.ys, cfg.init_factor).map_err(runtime)?;
    let state = run_em(&set.ys, flow0, theta0, prior, op, &em_cfg).map_err(runtime)?;

    let mut best_flow = state.flow.clone();
    best_flow.params = state.best.params.clone();
    let theta = state.best.theta;
    let e = report_elbo(&best_flow, &set.ys, theta, prior, op, cfg.em.m_elbo, cell.seed)
        .map_err(runtime)?;
    let truth = set.truth.as_ref().map(|t| t.theta);
    let d = truth.map(|t| distance_ab(theta, t)).transpose().map_err(runtime)?;
    let report = RunReport {
        method: cfg.method.name().into(),
        report: MetricReport {
            config_hash: hash.clone(),
            seed: cell.seed,
            n_measurements: set.ys.len(),
            theta,
            theta_true: truth,
            d,
            elbo: e,
            trace: state.trace.clone(),
        },
    };
    let dir = out_dir(cfg)?;
    write_run_outputs(&dir, cfg, cell, &report, &best_flow, &set.ys[0])?;
    write_json(
        &dir.join(format!("checkpoint_{}.json", cell.tag())),
        &Checkpoint { config_hash: hash, seed: cell.seed, theta, flow: best_flow },
    )?;
    Ok(report)
}

/// Run one grid cell; the trace is the grid's ELBO table flattened into
/// iteration order.
fn grid_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    op: &ForwardOperator,
    prior: &PriorBox,
    set: &MeasurementSet,
) -> CliResult<RunReport> {
    let hash = cfg.hash();
    let em_cfg = cell_em_config(cfg, cell, cfg.method.loss());
    let out: GridResult =
        run_grid(&set.ys, &flow_config(cfg), prior, op, &cfg.grid, &em_cfg).map_err(runtime)?;

    let dir = out_dir(cfg)?;
    let mut table = String::from("a,b,elbo\n");
    for c in &out.table {
        table.push_str(&format!("{},{},{}\n", c.a, c.b, c.elbo));
    }
    write_csv(&dir.join(format!("gridtable_{}.csv", cell.tag())), &hash, cell.seed, &table)?;

    let theta = out.best_theta;
    let e = report_elbo(&out.best_flow, &set.ys, theta, prior, op, cfg.em.m_elbo, cell.seed)
        .map_err(runtime)?;
    let truth = set.truth.as_ref().map(|t| t.theta);
    let d = truth.map(|t| distance_ab(theta, t)).transpose().map_err(runtime)?;
    let report = RunReport {
        method: cfg.method.name().into(),
        report: MetricReport {
            config_hash: hash.clone(),
            seed: cell.seed,
            n_measurements: set.ys.len(),
            theta,
            theta_true: truth,
            d,
            elbo: e,
            trace: Vec::new(),
        },
    };
    write_json(&dir.join(format!("report_{}.json", cell.tag())), &report)?;
    write_json(
        &dir.join(format!("checkpoint_{}.json", cell.tag())),
        &Checkpoint { config_hash: hash, seed: cell.seed, theta, flow: out.best_flow },
    )?;
    Ok(report)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Aggregate rows: per-N medians of D and ELBO over seeds.
fn aggregate_csv(method: &str, reports: &[&MetricReport]) -> String {
    let mut ns: Vec<usize> = reports.iter().map(|r| r.n_measurements).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = String::from("method,n,median_d,median_elbo,runs\n");
    for n in ns {
        let rows: Vec<&&MetricReport> =
            reports.iter().filter(|r| r.n_measurements == n).collect();
        let mut ds: Vec<f64> = rows.iter().filter_map(|r| r.d).collect();
        let mut es: Vec<f64> = rows.iter().map(|r| r.elbo.value).collect();
        let md = if ds.is_empty() { f64::NAN } else { median(&mut ds) };
        out.push_str(&format!("{method},{n},{md},{},{}\n", median(&mut es), rows.len()));
    }
    out
}

fn run_sweep(
    cfg: &ExperimentConfig,
    per_cell: impl Fn(&ExperimentConfig, &Cell, &ForwardOperator, &PriorBox, &MeasurementSet) -> CliResult<RunReport>,
) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let op = build_operator(cfg)?;
    let prior = prior_of(cfg)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for cell in cfg.cells() {
        let path = measurements_path(&dir, &cell);
        let stamped: StampedMeasurements = fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("{}: {e} (run `simulate` first)", path.display())))
            .and_then(|t| serde_json::from_str(&t).map_err(runtime))?;
        match per_cell(cfg, &cell, &op, &prior, &stamped.set) {
            Ok(r) => {
                println!(
                    "cell {}: theta = ({:.5}, {:.5}), D = {:?}",
                    cell.tag(),
                    r.report.theta.a,
                    r.report.theta.b,
                    r.report.d
                );
                reports.push(r);
            }
            Err(e) => {
                eprintln!("cell {} failed: {e}", cell.tag());
                failures.push((cell.tag(), e.to_string()));
            }
        }
    }
    if !failures.is_empty() {
        let listing: Vec<String> = failures.iter().map(|(t, e)| format!("{t}: {e}")).collect();
        write_json(&dir.join("failures.json"), &listing)?;
    }
    if reports.is_empty() {
        return Err(CliError::Runtime("all sweep cells failed".into()));
    }
    let refs: Vec<&MetricReport> = reports.iter().map(|r| &r.report).collect();
    write_csv(
        &dir.join("aggregate.csv"),
        &cfg.hash(),
        cfg.seed_base,
        &aggregate_csv(cfg.method.name(), &refs),
    )?;
    Ok(())
}

pub fn cmd_fit(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.method.is_grid() {
        return Err(CliError::Config("method is a grid variant; use the `grid` subcommand".into()));
    }
    run_sweep(cfg, fit_cell)
}

pub fn cmd_grid(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if !cfg.method.is_grid() {
        cfg.method = match cfg.method.loss() {
            LossKind::Forward => Method::GridForward,
            LossKind::Reverse => Method::GridReverse,
        };
    }
    run_sweep(&cfg, grid_cell)
}

/// Merge every per-run report in a directory into one summary.
pub fn cmd_report(dir: &Path) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut reports: Vec<RunReport> = Vec::new();
    let mut corrupt = Vec::new();
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map_or(false, |n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    for p in &paths {
        match fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| {
            serde_json::from_str::<RunReport>(&t).map_err(|e| e.to_string())
        }) {
            Ok(r) => reports.push(r),
            Err(e) => corrupt.push(format!("{}: {e}", p.display())),
        }
    }
    for c in &corrupt {
        eprintln!("skipping corrupt report {c}");
    }
    if reports.is_empty() {
        return Err(CliError::Runtime(format!(
            "nothing to merge in {} ({} corrupt files)",
            dir.display(),
            corrupt.len()
        )));
    }
    let mut methods: Vec<String> = reports.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut out = String::from("method,n,median_d,median_elbo,runs\n");
    for m in &methods {
        let refs: Vec<&MetricReport> =
            reports.iter().filter(|r| &r.method == m).map(|r| &r.report).collect();
        let block = aggregate_csv(m, &refs);
        out.push_str(block.strip_prefix("method,n,median_d,median_elbo,runs\n").unwrap());
    }
    let hash = reports[0].report.config_hash.clone();
    write_csv(&dir.join("summary.csv"), &hash, reports[0].report.seed, &out)?;
    println!("merged {} reports into {}", reports.len(), dir.join("summary.csv").display());
    Ok(())
}
