//! Dataset directories: `case_<id>_img.{hdr,raw}`, `case_<id>_lbl.{hdr,raw}`
//! and a `manifest.json` listing every case with its split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_volume, write_volume};
use super::synthetic::{generate_case, SyntheticSpec};
use crate::error::{format_err, invalid, io_err, Result};
use crate::volume::{LabelVolume, Volume};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub cases: Vec<CaseEntry>,
    /// The generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.cases.iter().filter(move |c| c.split == split).map(|c| c.id.as_str())
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_img.hdr"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_lbl.hdr"))
}

/// Seed of case `index` in a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Generates `cases` phantoms into `dir`; the last `val_cases` form the
/// validation split.
pub fn generate_dataset(dir: &Path, spec: &SyntheticSpec, cases: usize, val_cases: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    if cases == 0 || val_cases > cases {
        return invalid(format!("cannot hold out {val_cases} of {cases} cases"));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(cases);
    for i in 0..cases {
        let id = format!("{i:03}");
        let (image, labels) = generate_case(&spec.with_seed(case_seed(spec.seed, i)))?;
        write_volume(&image_path(dir, &id), &image)?;
        write_volume(&label_path(dir, &id), &labels)?;
        let split = if i + val_cases >= cases { Split::Val } else { Split::Train };
        entries.push(CaseEntry { id, split });
    }
    let manifest = DatasetManifest { num_classes: spec.num_classes, cases: entries, synthetic: Some(spec.clone()) };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| format_err("manifest", e.to_string()))?;
    if m.num_classes < 2 {
        return Err(format_err("num_classes", format!("need at least 2 classes, found {}", m.num_classes)));
    }
    Ok(m)
}

/// Loads one case and checks that image and labels agree.
pub fn load_case(dir: &Path, id: &str, num_classes: usize) -> Result<(Volume, LabelVolume)> {
    let image: Volume = read_volume(&image_path(dir, id))?;
    let labels: LabelVolume = read_volume(&label_path(dir, id))?;
    if image.dims() != labels.dims() || image.spacing_mm() != labels.spacing_mm() {
        return Err(format_err("dims", format!("case {id}: image and label grids differ")));
    }
    if let Some(&c) = labels.data().iter().find(|&&c| c as usize >= num_classes) {
        return Err(format_err("labels", format!("case {id}: class {c} out of range for {num_classes} classes")));
    }
    if !image.data().iter().all(|v| v.is_finite()) {
        return Err(format_err("payload", format!("case {id}: image has non-finite values")));
    }
    Ok((image, labels))
}
