//! Synthetic faces, mesh corruption, and the triplet dataset format.

pub mod dataset;
pub mod mesh;
pub mod pgm;
pub mod render;

pub use dataset::{
    generate, load_dataset, make_dataset, make_daily, make_triplet, split_identities, validate, validate_dir,
    DailyPhoto, Dataset, DatasetConfig, IdentityRecord, Split, SplitRatios, Triplet, ValidationReport,
};
pub use mesh::{apply_mesh, apply_mesh_gray, label_components, synth_mesh};
pub use pgm::{read_pgm, write_pgm};
pub use render::{render_face, render_with, Identity, Jitter, JitterRange, Render, DEFAULT_HEIGHT, DEFAULT_WIDTH};
