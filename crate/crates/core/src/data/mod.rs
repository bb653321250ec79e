//! Volume files, synthetic phantoms, resampling and patch sampling.

mod dataset;
mod io;
mod patches;
mod resample;
mod synthetic;

pub use dataset::{
    case_seed, generate_dataset, image_path, label_path, load_case, read_manifest, write_manifest, CaseEntry,
    DatasetManifest, Split, MANIFEST_FILE,
};
pub use io::{payload_path, read_header, read_volume, write_volume, VolumeHeader, Voxel};
pub use patches::{sample_patches, window_around, Patch};
pub use resample::{resample_image, resample_labels, zscore};
pub use synthetic::{foreground_fraction, generate_case, Ellipsoid, SyntheticSpec};
