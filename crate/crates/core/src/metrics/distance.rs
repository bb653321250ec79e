//! Boundary extraction and surface distances with anisotropic spacing.
//!
//! Boundary voxels use 6-connectivity: a foreground voxel is on the surface if
//! one of its face neighbours is background or lies outside the grid.
//! Distances are between voxel centres, in millimetres, and come from an
//! exact separable squared Euclidean distance transform.

use super::check_pair;
use crate::error::{invalid, Result};
use crate::volume::LabelVolume;

/// Surface voxels of class `c` as `(z, y, x)` indices.
pub fn surface_voxels(mask: &LabelVolume, c: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let inside = |z: usize, y: usize, x: usize| mask.get(z, y, x) == c;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !inside(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !inside(z - 1, y, x)
                    || !inside(z + 1, y, x)
                    || !inside(z, y - 1, x)
                    || !inside(z, y + 1, x)
                    || !inside(z, y, x - 1)
                    || !inside(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f(q) + (w (p - q))²` evaluated at every `p`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let xq = w * q as f64;
        while let Some(&p) = sites.last() {
            let xp = w * p as f64;
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= *bounds.last().expect("one bound per site") {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let xp = w * p as f64;
        while k + 1 < sites.len() && bounds[k + 1] < xp {
            k += 1;
        }
        let dx = xp - w * sites[k] as f64;
        *o = dx * dx + f[sites[k]];
    }
}

/// Squared distance in mm² from every voxel to the nearest of `sites`;
/// infinite everywhere when `sites` is empty.
pub fn squared_distance_transform(dims: [usize; 3], spacing_dhw: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut grid = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in sites {
        grid[(z * h + y) * w + x] = 0.0;
    }
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut s, mut b) = (Vec::new(), Vec::new());
    // Innermost axis first, so the x term is added before y and z.
    for axis in [2, 1, 0] {
        let n = dims[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let stride = strides[axis];
        for start in 0..grid.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = grid[start + i * stride];
            }
            edt_1d(&line, spacing_dhw[axis], &mut out, &mut s, &mut b);
            for (i, v) in out.iter().enumerate() {
                grid[start + i * stride] = *v;
            }
        }
    }
    grid
}

/// Distances from each surface voxel of one mask to the other mask's surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

impl SurfaceDistances {
    pub fn pooled(&self) -> Vec<f64> {
        let mut all = Vec::with_capacity(self.pred_to_gt.len() + self.gt_to_pred.len());
        all.extend_from_slice(&self.pred_to_gt);
        all.extend_from_slice(&self.gt_to_pred);
        all
    }
}

/// `None` when either mask has no voxel of class `c`.
pub fn surface_distances(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> Result<Option<SurfaceDistances>> {
    check_pair(pred, gt)?;
    let (sp, sg) = (surface_voxels(pred, c), surface_voxels(gt, c));
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let dims = gt.dims();
    let spacing = gt.spacing_dhw();
    let to_gt = squared_distance_transform(dims, spacing, &sg);
    let to_pred = squared_distance_transform(dims, spacing, &sp);
    let lookup = |field: &[f64], pts: &[[usize; 3]]| -> Vec<f64> {
        pts.iter().map(|&[z, y, x]| field[(z * dims[1] + y) * dims[2] + x].sqrt()).collect()
    };
    Ok(Some(SurfaceDistances { pred_to_gt: lookup(&to_gt, &sp), gt_to_pred: lookup(&to_pred, &sg) }))
}

/// Which statistic of the pooled directed distances to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    Max,
    #[default]
    P95,
}

/// Percentile `p ∈ [0, 100]` of `values` with linear interpolation between
/// closest ranks (rank `p/100 · (n − 1)`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub(crate) fn hd_from(distances: &SurfaceDistances, mode: HausdorffMode) -> f64 {
    let pooled = distances.pooled();
    match mode {
        HausdorffMode::Max => pooled.iter().copied().fold(0.0, f64::max),
        HausdorffMode::P95 => percentile(&pooled, 95.0),
    }
}

/// Symmetric Hausdorff distance in mm, or `None` (undefined) when either
/// mask is empty.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, c: u8, mode: HausdorffMode) -> Result<Option<f64>> {
    Ok(surface_distances(pred, gt, c)?.map(|d| hd_from(&d, mode)))
}

pub(crate) fn surface_dice_from(distances: Option<&SurfaceDistances>, both_empty: bool, tolerance_mm: f64) -> f64 {
    match distances {
        Some(d) => {
            let hits = d.pooled().iter().filter(|&&v| v <= tolerance_mm).count();
            hits as f64 / (d.pred_to_gt.len() + d.gt_to_pred.len()) as f64
        }
        None if both_empty => 1.0,
        None => 0.0,
    }
}

/// Fraction of both surfaces lying within `tolerance_mm` of the other.
/// Two empty masks score 1, one empty mask scores 0.
pub fn surface_dice(pred: &LabelVolume, gt: &LabelVolume, c: u8, tolerance_mm: f64) -> Result<f64> {
    if !(tolerance_mm >= 0.0) {
        return invalid(format!("surface tolerance must be non-negative, got {tolerance_mm}"));
    }
    let d = surface_distances(pred, gt, c)?;
    let both_empty = !pred.data().contains(&c) && !gt.data().contains(&c);
    Ok(surface_dice_from(d.as_ref(), both_empty, tolerance_mm))
}
