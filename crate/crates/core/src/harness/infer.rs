//! Sliding-window inference with uniform averaging of overlapping windows.
//!
//! Window logits are accumulated in a fixed order (sorted by corner), so the
//! stitched result does not depend on the order windows are evaluated in.

use phnet_tensor::{Element, Tensor};

use crate::error::{invalid, Result};
use crate::model::PhNet;
use crate::volume::{LabelVolume, Volume};

/// Window corners along one axis of extent `n` for windows of `p` with
/// fractional overlap in `[0, 1)`. The last window is flush with the end.
pub fn window_starts(n: usize, p: usize, overlap: f64) -> Result<Vec<usize>> {
    if p == 0 || p > n {
        return invalid(format!("window {p} does not fit extent {n}"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return invalid(format!("overlap must be in [0, 1), got {overlap}"));
    }
    let step = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..=n - p).step_by(step).collect();
    if *starts.last().expect("at least one window") != n - p {
        starts.push(n - p);
    }
    Ok(starts)
}

/// Every window corner `(z, y, x)` in canonical (lexicographic) order.
pub fn window_grid(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<[usize; 3]>> {
    let [sz, sy, sx] = [0, 1, 2].map(|a| window_starts(dims[a], patch[a], overlap));
    let (sz, sy, sx) = (sz?, sy?, sx?);
    let mut out = Vec::with_capacity(sz.len() * sy.len() * sx.len());
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Averages per-window logits `(K, pd, ph, pw)` into a `(K, D, H, W)` map.
/// `windows` may be in any order; accumulation follows corner order.
pub fn stitch<T: Element>(dims: [usize; 3], mut windows: Vec<([usize; 3], Tensor<T>)>) -> Result<Tensor<T>> {
    let Some((_, first)) = windows.first() else {
        return invalid("no windows to stitch");
    };
    if first.rank() != 4 {
        return invalid(format!("window logits must be (K, D, H, W), got {:?}", first.shape()));
    }
    let first_shape = first.shape().to_vec();
    let classes = first_shape[0];
    let patch = [first_shape[1], first_shape[2], first_shape[3]];
    windows.sort_by_key(|(origin, _)| *origin);
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut sum = vec![T::of(0.0); classes * n];
    let mut count = vec![0u32; n];
    for (origin, logits) in &windows {
        if logits.shape() != [classes, patch[0], patch[1], patch[2]] {
            return invalid(format!("window logits {:?} differ from {first_shape:?}", logits.shape()));
        }
        if (0..3).any(|a| origin[a] + patch[a] > dims[a]) {
            return invalid(format!("window at {origin:?} leaves the volume {dims:?}"));
        }
        let data = logits.data();
        let pn = patch.iter().product::<usize>();
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                let dst = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let src = (z * patch[1] + y) * patch[2];
                for x in 0..patch[2] {
                    count[dst + x] += 1;
                    for k in 0..classes {
                        sum[k * n + dst + x] += data[k * pn + src + x];
                    }
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return invalid(format!("voxel {i} is not covered by any window"));
    }
    for k in 0..classes {
        for (s, &c) in sum[k * n..(k + 1) * n].iter_mut().zip(&count) {
            *s = *s / T::of(c as f64);
        }
    }
    Ok(Tensor::from_vec(&[classes, d, h, w], sum)?)
}

/// Image as a `(1, 1, D, H, W)` network input.
pub fn volume_tensor<T: Element>(v: &Volume) -> Tensor<T> {
    let [d, h, w] = v.dims();
    Tensor::from_fn(&[1, 1, d, h, w], |i| T::of(v.data()[i] as f64))
}

/// Stitched logits `(K, D, H, W)` of `net` over the whole image.
pub fn sliding_window_logits<T: Element>(
    net: &PhNet<T>,
    image: &Volume,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Tensor<T>> {
    let dims = image.dims();
    net.check_extents(patch)?;
    let mut windows = Vec::new();
    for origin in window_grid(dims, patch, overlap)? {
        let crop = image.crop(origin, patch)?;
        let logits = net.infer(&volume_tensor(&crop))?;
        let shape = logits.shape().to_vec();
        windows.push((origin, logits.reshape(&shape[1..])?));
    }
    stitch(dims, windows)
}

/// Class with the largest logit per voxel; ties go to the lower class.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>, spacing_mm: [f64; 3]) -> Result<LabelVolume> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return invalid(format!("logits must be (K, D, H, W), got {shape:?}"));
    }
    let (classes, dims) = (shape[0], [shape[1], shape[2], shape[3]]);
    let n: usize = dims.iter().product();
    let data = logits.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if data[k * n + i] > data[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(dims, spacing_mm, labels)
}

/// Segments `image` with sliding windows and returns the label map.
pub fn segment<T: Element>(net: &PhNet<T>, image: &Volume, patch: [usize; 3], overlap: f64) -> Result<LabelVolume> {
    let logits = sliding_window_logits(net, image, patch, overlap)?;
    argmax_labels(&logits, image.spacing_mm())
}
