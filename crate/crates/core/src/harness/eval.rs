//! Whole-case evaluation: sliding-window segmentation followed by the
//! metric suite for every foreground class.

use std::path::Path;

use phnet_tensor::Element;

use super::infer::segment;
use super::train::{prepare_case, PreparedCase};
use crate::data::{read_manifest, Split};
use crate::error::Result;
use crate::metrics::{class_metrics, dice, HausdorffMode, ReportRow};
use crate::model::{load_checkpoint, PhNet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub patch_dhw: [usize; 3],
    pub overlap: f64,
    pub tolerance_mm: f64,
    pub hd_mode: HausdorffMode,
}

/// Mean Dice over every case and foreground class.
pub fn mean_foreground_dice<T: Element>(
    net: &PhNet<T>,
    cases: &[PreparedCase],
    patch: [usize; 3],
    overlap: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for c in cases {
        let pred = segment(net, &c.image, patch, overlap)?;
        for k in 1..net.cfg.num_classes {
            total += dice(&pred, &c.labels, k as u8)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Metric rows for the given cases. A case that cannot be segmented (for
/// example because the window is larger than the volume) yields one error
/// row per class instead of aborting the run.
pub fn evaluate_cases<T: Element>(
    net: &PhNet<T>,
    data_dir: &Path,
    ids: &[String],
    settings: &EvalSettings,
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for id in ids {
        let result = prepare_case(data_dir, id, &net.cfg).and_then(|c| {
            let pred = segment(net, &c.image, settings.patch_dhw, settings.overlap)?;
            (1..net.cfg.num_classes)
                .map(|k| class_metrics(&pred, &c.labels, k as u8, settings.tolerance_mm, settings.hd_mode))
                .collect::<Result<Vec<_>>>()
        });
        match result {
            Ok(per_class) => {
                for (k, m) in per_class.into_iter().enumerate() {
                    rows.push(ReportRow { case: id.clone(), class: (k + 1) as u8, outcome: Ok(m) });
                }
            }
            Err(e) => {
                for k in 1..net.cfg.num_classes {
                    rows.push(ReportRow { case: id.clone(), class: k as u8, outcome: Err(e.to_string()) });
                }
            }
        }
    }
    rows
}

/// Evaluates a checkpoint on one split of a dataset directory.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    settings: &EvalSettings,
) -> Result<Vec<ReportRow>> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(data_dir)?;
    let ids: Vec<String> = manifest.ids(split).map(String::from).collect();
    Ok(evaluate_cases(&net, data_dir, &ids, settings))
}
