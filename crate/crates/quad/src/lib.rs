//! The quad benchmark: images made of four coloured quadrants and a central
//! object, generated under observational and interventional contexts.

mod dataset;
mod error;
mod latents;
mod render;

pub use dataset::{
    decode_payload, generate_dataset, plan, render_context, ContextEntry, Dataset, DatasetConfig,
    DatasetManifest, ValueRanges, FORMAT_VERSION, MANIFEST_FILE,
};
pub use error::{QuadError, Result};
pub use latents::{sample_latents, Concept, ContextId, ObjectShape, QuadLatents};
pub use render::{
    check_side, colour, hue, hue_distance, readout_quadrants, render, Image, READOUT_EXCLUSION,
    R_MAX, R_MIN,
};
