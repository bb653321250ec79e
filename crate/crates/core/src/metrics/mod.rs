//! Overlap, volume and surface metrics for label volumes, and the training
//! loss.

mod distance;
mod loss;
mod report;

pub use distance::{
    hausdorff, percentile, squared_distance_transform, surface_dice, surface_distances, surface_voxels, HausdorffMode,
    SurfaceDistances,
};
pub use loss::{cross_entropy, dice_ce_loss, one_hot, DICE_SMOOTH};
pub use report::{write_report, ReportRow, REPORT_COLUMNS};

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::volume::LabelVolume;

pub(crate) fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return invalid(format!("prediction {:?} and ground truth {:?} differ in shape", pred.dims(), gt.dims()));
    }
    if pred.spacing_mm() != gt.spacing_mm() {
        return invalid(format!("prediction spacing {:?} differs from ground truth {:?}", pred.spacing_mm(), gt.spacing_mm()));
    }
    Ok(())
}

/// Voxel counts `(|P|, |G|, |P ∩ G|)` for class `c`.
fn counts(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> Result<(usize, usize, usize)> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> Result<f64> {
    let (p, g, both) = counts(pred, gt, c)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`, 1 when both are empty.
pub fn iou(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> Result<f64> {
    let (p, g, both) = counts(pred, gt, c)?;
    let union = p + g - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// `100 · |V_pred − V_gt| / V_gt` with volumes in mm³; `None` when the
/// ground truth is empty.
pub fn nvd(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> Result<Option<f64>> {
    let (p, g, _) = counts(pred, gt, c)?;
    if g == 0 {
        return Ok(None);
    }
    let v = gt.voxel_volume_mm3();
    let (vp, vg) = (p as f64 * v, g as f64 * v);
    Ok(Some(100.0 * (vp - vg).abs() / vg))
}

/// All metrics for one class; undefined values are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub iou: f64,
    pub surface_dice: f64,
    pub nvd: Option<f64>,
    pub hd: Option<f64>,
}

/// Computes every metric for class `c`, sharing one pair of distance
/// transforms between the surface metrics.
pub fn class_metrics(
    pred: &LabelVolume,
    gt: &LabelVolume,
    c: u8,
    tolerance_mm: f64,
    mode: HausdorffMode,
) -> Result<ClassMetrics> {
    if !(tolerance_mm >= 0.0) {
        return invalid(format!("surface tolerance must be non-negative, got {tolerance_mm}"));
    }
    let (p, g, both) = counts(pred, gt, c)?;
    let dist = surface_distances(pred, gt, c)?;
    Ok(ClassMetrics {
        dice: if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 },
        iou: if p + g == both { 1.0 } else { both as f64 / (p + g - both) as f64 },
        surface_dice: distance::surface_dice_from(dist.as_ref(), p + g == 0, tolerance_mm),
        nvd: nvd(pred, gt, c)?,
        hd: dist.as_ref().map(|d| distance::hd_from(d, mode)),
    })
}
