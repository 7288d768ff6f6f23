use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, QuadError, Result};
use crate::latents::{sample_latents, ContextId, QuadLatents};
use crate::render::{check_side, render, Image};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRanges {
    pub observational: [f64; 2],
    pub intervened: [f64; 2],
    pub object: [f64; 2],
}

impl Default for ValueRanges {
    fn default() -> Self {
        Self {
            observational: [0.0, 0.5],
            intervened: [0.5, 1.0],
            object: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: ContextId,
    pub count: usize,
    pub file: String,
    /// Global index of this context's first image; image `i` uses the seed
    /// `seed ^ (first_index + i)`.
    pub first_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: usize,
    pub channels: usize,
    pub dtype: String,
    pub layout: String,
    pub seed: u64,
    pub value_ranges: ValueRanges,
    pub contexts: Vec<ContextEntry>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub n: usize,
    pub contexts: Vec<(ContextId, usize)>,
    pub seed: u64,
}

impl DatasetConfig {
    /// Every context of `contexts` with the same count.
    pub fn uniform(n: usize, contexts: &[ContextId], per_context: usize, seed: u64) -> Self {
        Self {
            n,
            contexts: contexts.iter().map(|c| (c.clone(), per_context)).collect(),
            seed,
        }
    }
}

fn payload_name(ctx: &ContextId) -> String {
    format!("{}.f32", ctx.label().replace('+', "_"))
}

/// File names in a manifest must name a plain file inside the dataset directory.
fn valid_file_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name != MANIFEST_FILE
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl DatasetManifest {
    pub fn image_len(&self) -> usize {
        self.n * self.n * self.channels
    }

    pub fn expected_bytes(&self, entry: &ContextEntry) -> Option<u64> {
        (entry.count as u64)
            .checked_mul(self.image_len() as u64)?
            .checked_mul(BYTES_PER_VALUE)
    }

    pub fn entry(&self, ctx: &ContextId) -> Option<&ContextEntry> {
        self.contexts.iter().find(|e| &e.id == ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QuadError::Manifest(m));
        if self.version != FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        check_side(self.n).map_err(|e| QuadError::Manifest(e.to_string()))?;
        if self.n > 4096 {
            return bad(format!("image side {} too large", self.n));
        }
        if self.channels != 3 || self.dtype != "f32" || self.layout != "NHWC" {
            return bad("expected 3-channel f32 NHWC payloads".into());
        }
        if self.contexts.is_empty() {
            return bad("no contexts".into());
        }
        let mut next_index = 0u64;
        for (i, e) in self.contexts.iter().enumerate() {
            if e.count == 0 {
                return bad(format!("{}: count must be positive", e.id));
            }
            if !valid_file_name(&e.file) {
                return bad(format!("{}: invalid payload file name {:?}", e.id, e.file));
            }
            if self.contexts[..i].iter().any(|p| p.id == e.id || p.file == e.file) {
                return bad(format!("{}: duplicate context or file", e.id));
            }
            if e.first_index != next_index {
                return bad(format!("{}: first_index {} should be {next_index}", e.id, e.first_index));
            }
            if self.expected_bytes(e).is_none() {
                return bad(format!("{}: payload size overflows", e.id));
            }
            next_index = next_index
                .checked_add(e.count as u64)
                .ok_or_else(|| QuadError::Manifest("image count overflows".into()))?;
        }
        let listed: Vec<&String> = self.contexts.iter().map(|e| &e.file).collect();
        if self.files.iter().collect::<Vec<_>>() != listed {
            return bad("files list does not match contexts".into());
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Self =
            serde_json::from_slice(bytes).map_err(|e| QuadError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Latents of image `i` of a context, recomputed from the seed.
    pub fn latents(&self, entry: &ContextEntry, i: usize) -> QuadLatents {
        image_latents(&entry.id, self.seed, entry.first_index + i as u64)
    }
}

fn image_latents(ctx: &ContextId, seed: u64, global_index: u64) -> QuadLatents {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ global_index);
    sample_latents(ctx, &mut rng)
}

/// Builds the manifest for a configuration without rendering anything.
pub fn plan(config: &DatasetConfig) -> Result<DatasetManifest> {
    let mut first_index = 0u64;
    let contexts: Vec<ContextEntry> = config
        .contexts
        .iter()
        .map(|(id, count)| {
            let e = ContextEntry {
                id: id.clone(),
                count: *count,
                file: payload_name(id),
                first_index,
            };
            first_index += *count as u64;
            e
        })
        .collect();
    let m = DatasetManifest {
        version: FORMAT_VERSION,
        n: config.n,
        channels: 3,
        dtype: "f32".into(),
        layout: "NHWC".into(),
        seed: config.seed,
        value_ranges: ValueRanges::default(),
        files: contexts.iter().map(|e| e.file.clone()).collect(),
        contexts,
    };
    m.validate()?;
    Ok(m)
}

/// Renders every image of one context as little-endian `f32` bytes.
pub fn render_context(m: &DatasetManifest, entry: &ContextEntry) -> Vec<u8> {
    let img_bytes = m.image_len() * BYTES_PER_VALUE as usize;
    let mut out = vec![0u8; entry.count * img_bytes];
    out.par_chunks_mut(img_bytes).enumerate().for_each(|(i, buf)| {
        let l = m.latents(entry, i);
        let img = render(&l, m.n).expect("sampled latents are valid");
        for (dst, v) in buf.chunks_exact_mut(4).zip(img.data()) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
    });
    out
}

/// Renders all contexts into `dir`, writing one payload per context and the manifest.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    let m = plan(config)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for e in &m.contexts {
        let path = dir.join(&e.file);
        fs::write(&path, render_context(&m, e)).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, m.to_json()).map_err(io_err(&path))?;
    Ok(m)
}

/// Decodes a little-endian `f32` payload into images.
pub fn decode_payload(bytes: &[u8], n: usize) -> Result<Vec<Image>> {
    check_side(n)?;
    let img_bytes = n * n * 3 * 4;
    if bytes.len() % img_bytes != 0 {
        return Err(QuadError::Manifest(format!(
            "payload of {} bytes is not a whole number of {n}x{n} images",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(img_bytes)
        .map(|chunk| {
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(QuadError::Manifest("pixel value outside [0, 1]".into()));
            }
            Image::from_data(n, data)
        })
        .collect()
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest = DatasetManifest::from_json(&bytes)?;
        for e in &manifest.contexts {
            let p = dir.join(&e.file);
            let len = fs::metadata(&p).map_err(io_err(&p))?.len();
            if Some(len) != manifest.expected_bytes(e) {
                return Err(QuadError::Manifest(format!(
                    "{}: {len} bytes, expected {}",
                    e.file,
                    manifest.expected_bytes(e).unwrap_or(0)
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn contexts(&self) -> Vec<ContextId> {
        self.manifest.contexts.iter().map(|e| e.id.clone()).collect()
    }

    pub fn load(&self, ctx: &ContextId) -> Result<Vec<Image>> {
        let e = self
            .manifest
            .entry(ctx)
            .ok_or_else(|| QuadError::MissingContext(ctx.to_string()))?;
        let p = self.dir.join(&e.file);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        decode_payload(&bytes, self.manifest.n)
    }
}
