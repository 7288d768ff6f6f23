use std::cmp::Ordering;
use std::f64::consts::LN_2;

use ctxmod_autodiff::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Nats per image to bits per dimension.
pub fn bpd(loss_nats: f64, n_pixels: usize) -> f64 {
    assert!(n_pixels > 0, "bpd needs a positive pixel count");
    loss_nats / (n_pixels as f64 * LN_2)
}

fn check_samples(x: &Tensor, y: &Tensor, min: usize) -> Result<(usize, usize, usize)> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(CoreError::Data(format!(
            "sample sets must be [N, d] with equal d, got {sx:?} and {sy:?}"
        )));
    }
    if sx[0] < min || sy[0] < min {
        return Err(CoreError::Data(format!("need at least {min} samples per set")));
    }
    Ok((sx[0], sy[0], sx[1]))
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Sample covariance with `n − 1` normalisation.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(CoreError::Data("covariance needs at least 2 samples".into()));
    }
    let mean = column_means(x);
    let centred = Tensor::new(
        &[n, d],
        x.data().chunks_exact(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect(),
    )?;
    Ok(centred.matmul_ex(true, &centred, false)?.scale(1.0 / (n - 1) as f64))
}

/// Mean absolute difference of the empirical covariance matrices.
pub fn cov_error(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (_, _, d) = check_samples(x, y, 2)?;
    let (cx, cy) = (covariance(x)?, covariance(y)?);
    let total: f64 = cx.data().iter().zip(cy.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / (d * d) as f64)
}

/// Mean absolute difference of the sample means.
pub fn mean_error(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (_, _, d) = check_samples(x, y, 1)?;
    let total: f64 = column_means(x).iter().zip(column_means(y)).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "sigma")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled subsample.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub max_samples: usize,
    pub seed: u64,
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            max_samples: 1000,
            seed: 0,
            bandwidth: Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub mmd2: f64,
    pub sigma: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Rows in canonical order, then a seeded subsample of at most `cap` rows.
fn canonical_subsample(x: &Tensor, cap: usize, seed: u64) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut rows: Vec<&[f64]> = x.data().chunks_exact(d).collect();
    rows.sort_by(|a, b| lex_cmp(a, b));
    if rows.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, rows.len(), cap).into_vec();
        keep.sort_unstable();
        rows = keep.into_iter().map(|i| rows[i]).collect();
    }
    Ok(Tensor::new(&[rows.len(), d], rows.concat())?)
}

fn sq_norms(x: &Tensor) -> Vec<f64> {
    let d = x.shape()[1];
    x.data().chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum()).collect()
}

/// Pairwise squared distances `‖x_i − y_j‖²`.
fn sq_dists(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (nx, ny) = (sq_norms(x), sq_norms(y));
    let mut g = x.matmul_ex(false, y, true)?;
    let m = y.shape()[0];
    for (i, row) in g.data_mut().chunks_exact_mut(m).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (nx[i] + ny[j] - 2.0 * *v).max(0.0);
        }
    }
    Ok(g)
}

fn median(mut v: Vec<f64>) -> f64 {
    let mid = v.len() / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Unbiased estimate of squared MMD with an RBF kernel.
///
/// Equal-sized subsamples use the paired h-statistic, which vanishes exactly
/// on identical sets; otherwise the general unbiased form is used.
pub fn mmd2(x: &Tensor, y: &Tensor, cfg: &MmdConfig) -> Result<MmdResult> {
    check_samples(x, y, 2)?;
    if cfg.max_samples < 2 {
        return Err(CoreError::Config("MMD subsample cap must be at least 2".into()));
    }
    let xs = canonical_subsample(x, cfg.max_samples, cfg.seed)?;
    let ys = canonical_subsample(y, cfg.max_samples, cfg.seed)?;
    let (n, m) = (xs.shape()[0], ys.shape()[0]);
    let dxx = sq_dists(&xs, &xs)?;
    let dyy = sq_dists(&ys, &ys)?;
    let dxy = sq_dists(&xs, &ys)?;

    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(CoreError::Config(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Median => {
            let mut pooled = Vec::with_capacity((n + m) * (n + m - 1) / 2);
            for i in 0..n {
                pooled.extend(dxx.data()[i * n + i + 1..(i + 1) * n].iter().map(|v| v.sqrt()));
            }
            for i in 0..m {
                pooled.extend(dyy.data()[i * m + i + 1..(i + 1) * m].iter().map(|v| v.sqrt()));
            }
            pooled.extend(dxy.data().iter().map(|v| v.sqrt()));
            let med = median(pooled);
            if med == 0.0 {
                return Ok(MmdResult { mmd2: 0.0, sigma: 0.0 });
            }
            med
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |d2: f64| (-gamma * d2).exp();
    let off_diag = |d: &Tensor, len: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..len {
            for j in 0..len {
                if i != j {
                    s += k(d.data()[i * len + j]);
                }
            }
        }
        s
    };
    let kxx = off_diag(&dxx, n);
    let kyy = off_diag(&dyy, m);
    let value = if n == m {
        let cross = off_diag(&dxy, n) + off_diag(&dxy.transpose()?, n);
        (kxx + kyy - cross) / (n * (n - 1)) as f64
    } else {
        let cross: f64 = dxy.data().iter().map(|&v| k(v)).sum();
        kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * cross / (n * m) as f64
    };
    Ok(MmdResult { mmd2: value, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mmd: f64,
    pub cov_error: f64,
    pub mean_error: f64,
}

impl Cell {
    pub fn compare(x: &Tensor, y: &Tensor, cfg: &MmdConfig) -> Result<Self> {
        Ok(Self {
            mmd: mmd2(x, y, cfg)?.mmd2,
            cov_error: cov_error(x, y)?,
            mean_error: mean_error(x, y)?,
        })
    }

    fn average(cells: &[Cell]) -> Option<Cell> {
        if cells.is_empty() {
            return None;
        }
        let k = cells.len() as f64;
        Some(Cell {
            mmd: cells.iter().map(|c| c.mmd).sum::<f64>() / k,
            cov_error: cells.iter().map(|c| c.cov_error).sum::<f64>() / k,
            mean_error: cells.iter().map(|c| c.mean_error).sum::<f64>() / k,
        })
    }
}

/// Cells for the observational context, averaged single-target contexts and
/// averaged held-out contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub obs: Option<Cell>,
    pub ivn: Option<Cell>,
    pub ood: Option<Cell>,
}

impl Groups {
    pub fn from_cells(obs: Option<Cell>, ivn: &[Cell], ood: &[Cell]) -> Self {
        Self {
            obs,
            ivn: Cell::average(ivn),
            ood: Cell::average(ood),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub reconstructed: Groups,
    pub generated: Groups,
    pub elbo_bpd: f64,
    pub recon_bpd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error of the mean; present with two or more runs.
    pub stderr: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = (values.len() >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Some(Stat { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd: MmdConfig,
    pub runs: Vec<RunMetrics>,
    /// `"{source}.{group}.{metric}"` → statistic across runs.
    pub summary: std::collections::BTreeMap<String, Stat>,
}

const SOURCES: [&str; 2] = ["reconstructed", "generated"];
const GROUPS: [&str; 3] = ["obs", "ivn", "ood"];
const METRICS: [&str; 3] = ["mmd", "cov_error", "mean_error"];

fn cell_of(r: &RunMetrics, source: &str, group: &str) -> Option<Cell> {
    let g = if source == "generated" { &r.generated } else { &r.reconstructed };
    match group {
        "obs" => g.obs,
        "ivn" => g.ivn,
        _ => g.ood,
    }
}

fn metric_of(c: &Cell, metric: &str) -> f64 {
    match metric {
        "mmd" => c.mmd,
        "cov_error" => c.cov_error,
        _ => c.mean_error,
    }
}

impl MetricsReport {
    pub fn aggregate(mmd: MmdConfig, runs: Vec<RunMetrics>) -> Self {
        let mut summary = std::collections::BTreeMap::new();
        for s in SOURCES {
            for g in GROUPS {
                for m in METRICS {
                    let vals: Vec<f64> = runs
                        .iter()
                        .filter_map(|r| cell_of(r, s, g))
                        .map(|c| metric_of(&c, m))
                        .collect();
                    if let Some(stat) = Stat::of(&vals) {
                        summary.insert(format!("{s}.{g}.{m}"), stat);
                    }
                }
            }
        }
        let fields: [(&str, fn(&RunMetrics) -> f64); 2] =
            [("elbo_bpd", |r| r.elbo_bpd), ("recon_bpd", |r| r.recon_bpd)];
        for (key, f) in fields {
            let vals: Vec<f64> = runs.iter().map(f).collect();
            if let Some(stat) = Stat::of(&vals) {
                summary.insert(format!("validation.{key}"), stat);
            }
        }
        Self { mmd, runs, summary }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// A `tabular` with one row per source and metric and one column per group.
    pub fn to_latex(&self) -> String {
        let fmt = |s: Option<&Stat>| match s {
            Some(Stat { mean, stderr: Some(e) }) => format!("{mean:.4} $\\pm$ {e:.4}"),
            Some(Stat { mean, stderr: None }) => format!("{mean:.4}"),
            None => "--".into(),
        };
        let mut out = String::from("\\begin{tabular}{llccc}\n\\hline\nSource & Metric & obs & ivn & ood \\\\\n\\hline\n");
        for s in SOURCES {
            for m in METRICS {
                let cells: Vec<String> = GROUPS
                    .iter()
                    .map(|g| fmt(self.summary.get(&format!("{s}.{g}.{m}"))))
                    .collect();
                out += &format!("{s} & {} & {} \\\\\n", m.replace('_', "\\_"), cells.join(" & "));
            }
        }
        out += "\\hline\n";
        for key in ["elbo_bpd", "recon_bpd"] {
            out += &format!(
                "validation & {} & \\multicolumn{{3}}{{c}}{{{}}} \\\\\n",
                key.replace('_', "\\_"),
                fmt(self.summary.get(&format!("validation.{key}")))
            );
        }
        out + "\\hline\n\\end{tabular}\n"
    }
}
