//! Experiment configuration: a single TOML document with everything needed
//! to regenerate any output byte-for-byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mixem_core::em_driver::{EmConfig, GridConfig, LossKind};
use mixem_core::noise_model::NoiseParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Forward,
    Reverse,
    GridForward,
    GridReverse,
}

impl Method {
    pub fn loss(self) -> LossKind {
        match self {
            Method::Forward | Method::GridForward => LossKind::Forward,
            Method::Reverse | Method::GridReverse => LossKind::Reverse,
        }
    }

    pub fn is_grid(self) -> bool {
        matches!(self, Method::GridForward | Method::GridReverse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Forward => "forward",
            Method::Reverse => "reverse",
            Method::GridForward => "grid-forward",
            Method::GridReverse => "grid-reverse",
        }
    }
}

/// How the forward operator comes into being: generated from a seed or read
/// from a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub d: usize,
    pub n: usize,
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    /// Hidden widths of the generated surrogate net.
    pub surrogate_hidden: Vec<usize>,
    pub surrogate_seed: u64,
    /// When set, load from this path instead of generating.
    pub surrogate_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSection {
    pub num_blocks: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub theta_true: NoiseParams,
    pub n_list: Vec<usize>,
    /// Number of repeated runs per N.
    pub n_seeds: usize,
    pub seed_base: u64,
    pub method: Method,
    pub em: EmConfig,
    pub grid: GridConfig,
    pub flow: FlowSection,
    /// Smoothed-box prior steepness.
    pub prior_lambda: f64,
    /// Over-estimation factor for the initial θ.
    pub init_factor: f64,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let mut cfg = match name {
            "photomask" => base(3, 23, vec![-1.0; 3], vec![1.0; 3], NoiseParams::new(0.005, 0.1).unwrap()),
            "linegrating" => base(7, 77, vec![0.0; 7], vec![1.0; 7], NoiseParams::new(0.03, 0.25).unwrap()),
            // Desk preset: the photomask shape scaled down for quick runs.
            "desk" => {
                let mut c = base(3, 23, vec![-1.0; 3], vec![1.0; 3], NoiseParams::new(0.005, 0.1).unwrap());
                c.n_list = vec![1, 4];
                c.n_seeds = 3;
                c.flow = FlowSection { num_blocks: 4, hidden: vec![32, 32] };
                c
            }
            _ => return None,
        };
        cfg.out_dir = format!("out-{name}");
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n == 0) {
            return Err("n_list must be nonempty and positive".into());
        }
        if self.n_seeds == 0 {
            return Err("n_seeds must be >= 1".into());
        }
        if self.problem.prior_lo.len() != self.problem.d
            || self.problem.prior_hi.len() != self.problem.d
        {
            return Err("prior box dimensions must match d".into());
        }
        let max_n = *self.n_list.iter().max().unwrap();
        self.em.validate(max_n).map_err(|e| e.to_string())?;
        self.grid.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Short content hash carried in every output file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(12);
        for b in &digest[..6] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Sweep cells in a fixed order; the cell index offsets the base seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::with_capacity(self.n_list.len() * self.n_seeds);
        for (i, &n) in self.n_list.iter().enumerate() {
            for s in 0..self.n_seeds {
                let idx = i * self.n_seeds + s;
                cells.push(Cell { n, seed: self.seed_base + idx as u64 });
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub n: usize,
    pub seed: u64,
}

impl Cell {
    pub fn tag(&self) -> String {
        format!("n{}_s{}", self.n, self.seed)
    }
}

fn base(d: usize, n: usize, lo: Vec<f64>, hi: Vec<f64>, theta_true: NoiseParams) -> ExperimentConfig {
    ExperimentConfig {
        problem: ProblemSpec {
            d,
            n,
            prior_lo: lo,
            prior_hi: hi,
            surrogate_hidden: vec![64, 64],
            surrogate_seed: 1,
            surrogate_path: None,
        },
        theta_true,
        n_list: vec![1, 2, 4, 8],
        n_seeds: 10,
        seed_base: 1000,
        method: Method::Forward,
        em: EmConfig::desk_scale(LossKind::Forward, 0),
        grid: GridConfig::default(),
        flow: FlowSection { num_blocks: 6, hidden: vec![64, 64] },
        prior_lambda: 50.0,
        init_factor: 5.0,
        out_dir: "out".into(),
    }
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn dump_config(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}
