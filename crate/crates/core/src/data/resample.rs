//! Resampling to a target voxel spacing.
//!
//! Output extents are `round(n · spacing / target)` per axis. Grids are
//! centre-aligned: output voxel `o` samples source coordinate
//! `(o + 0.5) · target / spacing − 0.5`, clamped to the source grid.

use crate::error::{invalid, Result};
use crate::volume::{Grid, LabelVolume, Volume};

struct AxisMap {
    /// Per output index: lower source index, upper source index, weight of upper.
    taps: Vec<(usize, usize, f64)>,
}

impl AxisMap {
    fn new(n_src: usize, n_out: usize, ratio: f64) -> Self {
        let last = (n_src - 1) as f64;
        let taps = (0..n_out)
            .map(|o| {
                let p = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, p - lo as f64)
            })
            .collect();
        AxisMap { taps }
    }

    fn nearest(&self, o: usize) -> usize {
        let (lo, hi, f) = self.taps[o];
        if f >= 0.5 {
            hi
        } else {
            lo
        }
    }
}

fn plan<T: Copy>(v: &Grid<T>, target_mm: [f64; 3]) -> Result<([usize; 3], [AxisMap; 3])> {
    if target_mm.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return invalid(format!("target spacing must be positive, got {target_mm:?}"));
    }
    let src = v.spacing_dhw();
    let target = [target_mm[2], target_mm[1], target_mm[0]];
    let dims = v.dims();
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (dims[a] as f64 * src[a] / target[a]).round() as usize;
        if out[a] == 0 {
            return invalid(format!("resampling {dims:?} from {:?} to {target_mm:?} mm gives an empty grid", v.spacing_mm()));
        }
    }
    let maps = [0, 1, 2].map(|a| AxisMap::new(dims[a], out[a], target[a] / src[a]));
    Ok((out, maps))
}

/// Trilinear resampling of an image, clamping at the borders.
pub fn resample_image(v: &Volume, target_mm: [f64; 3]) -> Result<Volume> {
    let (out, [mz, my, mx]) = plan(v, target_mm)?;
    let mut data = Vec::with_capacity(out.iter().product());
    for &(z0, z1, fz) in &mz.taps {
        for &(y0, y1, fy) in &my.taps {
            for &(x0, x1, fx) in &mx.taps {
                let at = |z, y, x| v.get(z, y, x) as f64;
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                data.push(lerp(c0, c1, fz) as f32);
            }
        }
    }
    Grid::new(out, target_mm, data)
}

/// Nearest-neighbour resampling of a label map, so no new class ids appear.
pub fn resample_labels(v: &LabelVolume, target_mm: [f64; 3]) -> Result<LabelVolume> {
    let (out, [mz, my, mx]) = plan(v, target_mm)?;
    let mut data = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        let sz = mz.nearest(z);
        for y in 0..out[1] {
            let sy = my.nearest(y);
            for x in 0..out[2] {
                data.push(v.get(sz, sy, mx.nearest(x)));
            }
        }
    }
    Grid::new(out, target_mm, data)
}

/// Per-volume z-score: zero mean, unit variance. A constant volume maps to
/// zeros.
pub fn zscore(v: &Volume) -> Volume {
    let n = v.numel() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    v.map(|x| ((x as f64 - mean) * inv) as f32)
}
