use ctxmod_quad::{Concept, ContextId, Dataset, Image};

use crate::error::{CoreError, Result};
use crate::sem::InterventionSet;

/// Images of one context, flattened channel-major (`[3, n, n]`) as `f32`.
#[derive(Debug, Clone)]
pub struct ContextData {
    pub label: String,
    pub targets: InterventionSet,
    pub n: usize,
    pub images: Vec<f32>,
}

impl ContextData {
    pub fn pixels(&self) -> usize {
        3 * self.n * self.n
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn from_images(label: impl Into<String>, targets: InterventionSet, images: &[Image]) -> Result<Self> {
        let n = images
            .first()
            .map(Image::side)
            .ok_or_else(|| CoreError::Data("context has no images".into()))?;
        let mut flat = Vec::with_capacity(images.len() * 3 * n * n);
        for img in images {
            if img.side() != n {
                return Err(CoreError::Data("images of mixed sizes".into()));
            }
            flat.extend(hwc_to_chw(img));
        }
        Ok(Self {
            label: label.into(),
            targets,
            n,
            images: flat,
        })
    }

    /// First `count` images as a `[count, 3·n·n]` batch.
    pub fn head(&self, count: usize) -> ctxmod_autodiff::Tensor {
        let count = count.min(self.len());
        let data = self.images[..count * self.pixels()].iter().map(|&v| v as f64).collect();
        ctxmod_autodiff::Tensor::new(&[count, self.pixels()], data).expect("non-empty context")
    }
}

/// Intervention set of a quad context over the six modelled concepts.
pub fn targets_of(ctx: &ContextId) -> InterventionSet {
    InterventionSet::new(ctx.targets().iter().map(|c| c.index()), Concept::ALL.len())
        .expect("quad concepts are in range")
}

pub fn hwc_to_chw(img: &Image) -> Vec<f32> {
    let n = img.side();
    let d = img.data();
    let mut out = vec![0.0; 3 * n * n];
    for p in 0..n * n {
        for c in 0..3 {
            out[c * n * n + p] = d[3 * p + c];
        }
    }
    out
}

/// Converts a channel-major vector of intensities back to an image, clamping to `[0, 1]`.
pub fn chw_to_image(v: &[f64], n: usize) -> Result<Image> {
    if v.len() != 3 * n * n {
        return Err(CoreError::Data(format!("expected {} values, got {}", 3 * n * n, v.len())));
    }
    let mut data = vec![0.0f32; 3 * n * n];
    for p in 0..n * n {
        for c in 0..3 {
            data[3 * p + c] = v[c * n * n + p].clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Image::from_data(n, data)?)
}

/// Loads the given contexts of a dataset (all when `contexts` is empty).
pub fn load_contexts(ds: &Dataset, contexts: &[ContextId]) -> Result<Vec<ContextData>> {
    let wanted = if contexts.is_empty() { ds.contexts() } else { contexts.to_vec() };
    wanted
        .iter()
        .map(|ctx| ContextData::from_images(ctx.label(), targets_of(ctx), &ds.load(ctx)?))
        .collect()
}

/// Renders contexts in memory with the same per-image seeding as the on-disk generator.
pub fn synthesize(contexts: &[(ContextId, usize)], n: usize, seed: u64) -> Result<Vec<ContextData>> {
    let manifest = ctxmod_quad::plan(&ctxmod_quad::DatasetConfig {
        n,
        contexts: contexts.to_vec(),
        seed,
    })?;
    manifest
        .contexts
        .iter()
        .map(|e| {
            let images = (0..e.count)
                .map(|i| ctxmod_quad::render(&manifest.latents(e, i), n))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            ContextData::from_images(e.id.label(), targets_of(&e.id), &images)
        })
        .collect()
}
