//! Evaluation plumbing: the distance-to-truth metric, marginal histograms
//! over the prior box, trace thinning, and the CSV formats.

use serde::{Deserialize, Serialize};

use crate::em_driver::TracePoint;
use crate::losses::ElboEstimate;
use crate::noise_model::NoiseParams;
use crate::{Error, Result};

/// Sum of relative errors `|a − a*|/a* + |b − b*|/b*`.
pub fn distance_ab(theta: NoiseParams, truth: NoiseParams) -> Result<f64> {
    if !(truth.a > 0.0 && truth.b > 0.0) {
        return Err(Error::InvalidParam(
            "distance_ab needs strictly positive true parameters".into(),
        ));
    }
    Ok((theta.a - truth.a).abs() / truth.a + (theta.b - truth.b).abs() / truth.b)
}

/// Everything a single fit produces, regenerable from `config_hash` + `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_measurements: usize,
    pub theta: NoiseParams,
    pub theta_true: Option<NoiseParams>,
    /// Distance to truth; present only when the truth is known.
    pub d: Option<f64>,
    pub elbo: ElboEstimate,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram1D {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram1D {
    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }
}

/// Row-major `bins × bins` grid over a dimension pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram2D {
    pub dims: (usize, usize),
    pub lo: (f64, f64),
    pub hi: (f64, f64),
    pub bins: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Marginals {
    pub one_d: Vec<Histogram1D>,
    pub two_d: Vec<Histogram2D>,
    pub truth: Option<Vec<f64>>,
    pub n_samples: usize,
}

pub const DEFAULT_BINS_1D: usize = 50;
pub const DEFAULT_BINS_2D: usize = 40;

#[inline]
fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    // Out-of-box samples land in the edge bins so totals stay exact.
    let t = (x - lo) / (hi - lo) * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

/// Per-dimension 1-D histograms and pairwise 2-D histograms over the prior
/// box, with the ground-truth point carried along for plotting.
pub fn marginal_histograms(
    samples: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    bins_1d: usize,
    bins_2d: usize,
    truth: Option<&[f64]>,
) -> Result<Marginals> {
    if samples.is_empty() {
        return Err(Error::DimMismatch("marginal_histograms needs samples".into()));
    }
    let d = lo.len();
    if hi.len() != d || samples.iter().any(|s| s.len() != d) {
        return Err(Error::DimMismatch("sample/box dimension mismatch".into()));
    }
    if bins_1d < 2 || bins_2d < 2 {
        return Err(Error::InvalidParam("need at least 2 bins".into()));
    }
    let mut one_d: Vec<Histogram1D> = (0..d)
        .map(|j| Histogram1D { dim: j, lo: lo[j], hi: hi[j], counts: vec![0; bins_1d] })
        .collect();
    let mut two_d: Vec<Histogram2D> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| Histogram2D {
            dims: (i, j),
            lo: (lo[i], lo[j]),
            hi: (hi[i], hi[j]),
            bins: bins_2d,
            counts: vec![0; bins_2d * bins_2d],
        })
        .collect();
    for s in samples {
        for j in 0..d {
            one_d[j].counts[bin_of(s[j], lo[j], hi[j], bins_1d)] += 1;
        }
        for h in two_d.iter_mut() {
            let (i, j) = h.dims;
            let bi = bin_of(s[i], lo[i], hi[i], bins_2d);
            let bj = bin_of(s[j], lo[j], hi[j], bins_2d);
            h.counts[bi * bins_2d + bj] += 1;
        }
    }
    Ok(Marginals { one_d, two_d, truth: truth.map(<[f64]>::to_vec), n_samples: samples.len() })
}

/// Thin a trace to every `thin`-th validated iteration, always keeping the
/// final point.
pub fn trace_export(trace: &[TracePoint], thin: usize) -> Result<Vec<TracePoint>> {
    if trace.is_empty() {
        return Err(Error::DimMismatch("trace_export needs a nonempty trace".into()));
    }
    let thin = thin.max(1);
    let last = trace.len() - 1;
    Ok(trace
        .iter()
        .enumerate()
        .filter(|(i, p)| p.iter % thin == 0 || *i == last)
        .map(|(_, p)| *p)
        .collect())
}

/// CSV with header `iter,a,b,elbo`; floats printed shortest-round-trip so a
/// parse-back is exact.
pub fn trace_to_csv(rows: &[TracePoint]) -> String {
    let mut out = String::from("iter,a,b,elbo\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.a, r.b, r.elbo));
    }
    out
}

pub fn trace_from_csv(text: &str) -> Result<Vec<TracePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,a,b,elbo") => {}
        other => return Err(Error::Parse(format!("bad trace header: {other:?}"))),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad trace row: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
            Ok(TracePoint {
                iter: f[0].parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?,
                a: num(f[1])?,
                b: num(f[2])?,
                elbo: num(f[3])?,
            })
        })
        .collect()
}

/// CSV with header `dim,bin_lo,bin_hi,count` over all 1-D marginals.
pub fn marginals_to_csv(m: &Marginals) -> String {
    let mut out = String::from("dim,bin_lo,bin_hi,count\n");
    for h in &m.one_d {
        for (i, c) in h.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", h.dim, h.edge(i), h.edge(i + 1), c));
        }
    }
    out
}

/// CSV for the pairwise grids: `dim_i,dim_j,bin_i,bin_j,count`.
pub fn pair_histograms_to_csv(m: &Marginals) -> String {
    let mut out = String::from("dim_i,dim_j,bin_i,bin_j,count\n");
    for h in &m.two_d {
        for bi in 0..h.bins {
            for bj in 0..h.bins {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    h.dims.0,
                    h.dims.1,
                    bi,
                    bj,
                    h.counts[bi * h.bins + bj]
                ));
            }
        }
    }
    out
}
