//! End-to-end runs of the `mixem` binary on a tiny problem: exit codes,
//! output shapes, and byte-identical reruns.

use std::fs;
use std::path::Path;
use std::process::Command;

use mixem_cli::config::{ExperimentConfig, Method};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixem"))
}

/// A config small enough that a full simulate+fit sweep takes seconds.
fn tiny_config(out_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("desk").unwrap();
    cfg.problem.d = 1;
    cfg.problem.n = 4;
    cfg.problem.prior_lo = vec![-1.0];
    cfg.problem.prior_hi = vec![1.0];
    cfg.problem.surrogate_hidden = vec![8];
    cfg.theta_true = mixem_core::NoiseParams::new(0.05, 0.1).unwrap();
    cfg.n_list = vec![2];
    cfg.n_seeds = 1;
    cfg.em.outer_iters = 4;
    cfg.em.k_samples = 16;
    cfg.em.m_elbo = 16;
    cfg.em.batch_size = 8;
    cfg.flow.num_blocks = 2;
    cfg.flow.hidden = vec![8];
    cfg.grid = mixem_core::GridConfig {
        a_grid: vec![0.05, 0.2],
        b_grid: vec![0.05, 0.3],
        steps: 3,
    };
    cfg.out_dir = out_dir.display().to_string();
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, mixem_cli::config::dump_config(cfg)).unwrap();
    path
}

#[test]
fn missing_config_is_exit_code_1() {
    let out = bin().arg("fit").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_without_measurements_is_exit_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("out"));
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = bin().args(["fit", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn print_config_dumps_parseable_toml() {
    let out = bin().args(["--preset", "desk", "--print-config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed.problem.d, 3);
    assert_eq!(parsed.problem.n, 23);
}

#[test]
fn invalid_config_is_exit_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("out"));
    cfg.n_list.clear();
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = bin().args(["simulate", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_fit_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tiny_config(&out_dir);
    let hash = cfg.hash();
    let cfg_path = write_config(tmp.path(), &cfg);

    for sub in ["simulate", "fit", "report"] {
        let out = bin().args([sub, "--config"]).arg(&cfg_path).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let tag = format!("n2_s{}", cfg.seed_base);
    for name in [
        format!("measurements_{tag}.json"),
        format!("report_{tag}.json"),
        format!("trace_{tag}.csv"),
        format!("marginals_{tag}.csv"),
        format!("checkpoint_{tag}.json"),
        "aggregate.csv".into(),
        "summary.csv".into(),
        "surrogate.json".into(),
    ] {
        assert!(out_dir.join(&name).exists(), "missing {name}");
    }

    // Every CSV is stamped with the config hash and seed.
    let trace = fs::read_to_string(out_dir.join(format!("trace_{tag}.csv"))).unwrap();
    assert!(trace.starts_with(&format!("# config={hash} seed={}\n", cfg.seed_base)));
    assert_eq!(trace.lines().nth(1), Some("iter,a,b,elbo"));

    let marginals = fs::read_to_string(out_dir.join(format!("marginals_{tag}.csv"))).unwrap();
    assert_eq!(marginals.lines().nth(1), Some("dim,bin_lo,bin_hi,count"));

    // The report carries the hash, seed, and a finite distance to truth.
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join(format!("report_{tag}.json"))).unwrap())
            .unwrap();
    assert_eq!(report["report"]["config_hash"], serde_json::json!(hash));
    assert!(report["report"]["d"].as_f64().unwrap().is_finite());

    // Single run: the summary equals the aggregate up to the stamp.
    let strip = |t: String| t.lines().skip(1).collect::<Vec<_>>().join("\n");
    let agg = strip(fs::read_to_string(out_dir.join("aggregate.csv")).unwrap());
    let sum = strip(fs::read_to_string(out_dir.join("summary.csv")).unwrap());
    assert_eq!(agg, sum);
}

#[test]
fn refit_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tiny_config(&out_dir);
    let cfg_path = write_config(tmp.path(), &cfg);

    let run = |sub: &str| {
        let out = bin().args([sub, "--config"]).arg(&cfg_path).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run("simulate");
    run("fit");
    let tag = format!("n2_s{}", cfg.seed_base);
    let files = [
        format!("report_{tag}.json"),
        format!("trace_{tag}.csv"),
        format!("marginals_{tag}.csv"),
        format!("checkpoint_{tag}.json"),
        "aggregate.csv".to_string(),
    ];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out_dir.join(f)).unwrap()).collect();
    run("fit");
    for (f, b) in files.iter().zip(before.iter()) {
        let after = fs::read(out_dir.join(f)).unwrap();
        assert_eq!(&after, b, "{f} changed across identical reruns");
    }
}

#[test]
fn grid_emits_full_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tiny_config(&out_dir);
    let cfg_path = write_config(tmp.path(), &cfg);
    for sub in ["simulate", "grid"] {
        let out = bin().args([sub, "--config"]).arg(&cfg_path).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let tag = format!("n2_s{}", cfg.seed_base);
    let table = fs::read_to_string(out_dir.join(format!("gridtable_{tag}.csv"))).unwrap();
    // stamp + header + 2x2 grid
    assert_eq!(table.lines().count(), 2 + 4);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join(format!("report_{tag}.json"))).unwrap())
            .unwrap();
    assert_eq!(report["method"], serde_json::json!("grid-forward"));
}

#[test]
fn method_override_changes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let mut cfg = tiny_config(&out_dir);
    cfg.em.m_latent = 2;
    let cfg_path = write_config(tmp.path(), &cfg);
    assert_eq!(cfg.method, Method::Forward);
    for args in [vec!["simulate"], vec!["fit", "--method", "reverse"]] {
        let out = bin().args(&args).args(["--config"]).arg(cfg_path.to_str().unwrap()).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let tag = format!("n2_s{}", cfg.seed_base);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join(format!("report_{tag}.json"))).unwrap())
            .unwrap();
    assert_eq!(report["method"], serde_json::json!("reverse"));
}
