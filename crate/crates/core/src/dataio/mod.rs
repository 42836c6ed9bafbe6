//! On-disk volumes, subject manifests and the synthetic data generator.

mod dataset;
mod manifest;
mod synth;
mod volume;

pub use dataset::{Batch, Dataset, Sample, TargetColumn};
pub use manifest::{
    attach_residuals, load_manifest, read_residuals, write_manifest, write_predictions, write_residuals, LoadOptions,
    Manifest, ResidualRow, Split, SubjectRecord, RESERVED_COLUMNS, TABULAR_PREFIX,
};
pub use synth::{
    generate_synthetic, synthetic_schema, GroundTruth, SubjectTruth, SynthOutput, SynthSpec, MANIFEST_FILE,
    SCHEMA_FILE, TRUTH_FILE, VOLUME_DIR,
};
pub use volume::{
    decode_volume, encode_volume, load_volume, save_volume, voxel_offset, VolumeError, VOLUME_HEADER_LEN, VOLUME_MAGIC,
    VOLUME_VERSION,
};
