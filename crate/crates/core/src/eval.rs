use ctxmod_autodiff::Tensor;
use ctxmod_quad::readout_quadrants;
use serde::{Deserialize, Serialize};

use crate::data::{chw_to_image, ContextData};
use crate::error::{CoreError, Result};
use crate::metrics::{bpd, Cell, Groups, MmdConfig, RunMetrics};
use crate::sem::InterventionSet;
use crate::vae::{LossWeights, Model};

/// Quadrant readouts of a batch of channel-major images.
pub fn readout_batch(x: &Tensor, n: usize) -> Result<Vec<[f64; 4]>> {
    let p = 3 * n * n;
    if x.rank() != 2 || x.shape()[1] != p {
        return Err(CoreError::Data(format!("batch shape {:?} is not [B, {p}]", x.shape())));
    }
    x.data()
        .chunks_exact(p)
        .map(|row| Ok(readout_quadrants(&chw_to_image(row, n)?)))
        .collect()
}

/// How often each quadrant reads out in the intervened range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantScore {
    pub targets: Vec<usize>,
    /// Fraction of samples whose quadrant `k` reads out ≥ 0.5.
    pub high_fraction: [f64; 4],
    /// Fraction of samples with every targeted quadrant ≥ 0.5.
    pub all_targets_high: f64,
    /// Smallest fraction, over non-targeted quadrants, of samples reading ≤ 0.5.
    pub min_untargeted_low: f64,
}

/// Scores readouts against a target set over the first four concepts.
pub fn score_quadrants(readouts: &[[f64; 4]], targets: &InterventionSet) -> QuadrantScore {
    let n = readouts.len().max(1) as f64;
    let quad_targets: Vec<usize> = targets.iter().filter(|&j| j < 4).collect();
    let mut high = [0.0; 4];
    for r in readouts {
        for k in 0..4 {
            if r[k] >= 0.5 {
                high[k] += 1.0 / n;
            }
        }
    }
    let all = readouts
        .iter()
        .filter(|r| quad_targets.iter().all(|&k| r[k] >= 0.5))
        .count() as f64
        / n;
    let min_low = (0..4)
        .filter(|k| !quad_targets.contains(k))
        .map(|k| readouts.iter().filter(|r| r[k] <= 0.5).count() as f64 / n)
        .fold(1.0, f64::min);
    QuadrantScore {
        targets: quad_targets,
        high_fraction: high,
        all_targets_high: all,
        min_untargeted_low: min_low,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Reference images per context and generated samples per context.
    pub count: usize,
    pub seed: u64,
    pub mmd: MmdConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            seed: 0,
            mmd: MmdConfig::default(),
        }
    }
}

/// Compares reconstructions and prior samples with each context's images.
///
/// Contexts without targets form the obs group, single-target contexts the
/// ivn group and the `ood` contexts the held-out group.
pub fn evaluate_run(
    model: &Model,
    train: &[ContextData],
    ood: &[ContextData],
    cfg: &EvalConfig,
) -> Result<RunMetrics> {
    if cfg.count < 2 {
        return Err(CoreError::Data("evaluation needs at least two samples per context".into()));
    }
    let mut rec = (None, Vec::new(), Vec::new());
    let mut gen = (None, Vec::new(), Vec::new());
    let mut elbo = (0.0, 0.0, 0usize);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    for (group, contexts) in [(0, train), (1, ood)] {
        for (i, c) in contexts.iter().enumerate() {
            let x = c.head(cfg.count);
            let r = model.reconstruct(&x, &c.targets)?;
            let g = model.generate(&c.targets, x.shape()[0], cfg.seed.wrapping_add(i as u64 + 1000 * group))?;
            let rc = Cell::compare(&r, &x, &cfg.mmd)?;
            let gc = Cell::compare(&g, &x, &cfg.mmd)?;
            if group == 1 {
                rec.2.push(rc);
                gen.2.push(gc);
                continue;
            }
            let parts = model.elbo(&x, &c.targets, &LossWeights::default(), &mut rng)?;
            elbo.0 += parts.loss * x.shape()[0] as f64;
            elbo.1 += parts.recon * x.shape()[0] as f64;
            elbo.2 += x.shape()[0];
            if c.targets.is_empty() {
                rec.0 = Some(rc);
                gen.0 = Some(gc);
            } else {
                rec.1.push(rc);
                gen.1.push(gc);
            }
        }
    }
    let pixels = model.config.pixels();
    let k = elbo.2.max(1) as f64;
    Ok(RunMetrics {
        seed: cfg.seed,
        reconstructed: Groups::from_cells(rec.0, &rec.1, &rec.2),
        generated: Groups::from_cells(gen.0, &gen.1, &gen.2),
        elbo_bpd: bpd(elbo.0 / k, pixels),
        recon_bpd: bpd(elbo.1 / k, pixels),
    })
}
