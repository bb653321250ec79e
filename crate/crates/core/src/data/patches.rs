//! Random training patches, optionally centred on foreground.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `(z, y, x)` corner in the source volume.
    pub origin: [usize; 3],
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Corner of an `size` window centred as closely as possible on `center`
/// while staying inside `dims`.
pub fn window_around(center: [usize; 3], size: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| center[a].saturating_sub(size[a] / 2).min(dims[a] - size[a]))
}

/// Draws `n` patches of `size` (`(d, h, w)`). With probability `fg_bias` a
/// patch is centred on a uniformly chosen foreground voxel, when any exists;
/// otherwise its corner is uniform over valid positions.
pub fn sample_patches<R: Rng>(
    image: &Volume,
    labels: &LabelVolume,
    size: [usize; 3],
    n: usize,
    fg_bias: f64,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let dims = image.dims();
    if labels.dims() != dims {
        return invalid(format!("image {dims:?} and labels {:?} differ in shape", labels.dims()));
    }
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return invalid(format!("patch {size:?} does not fit volume {dims:?}"));
    }
    if !(0.0..=1.0).contains(&fg_bias) {
        return invalid(format!("fg_bias must be in [0, 1], got {fg_bias}"));
    }
    let foreground: Vec<usize> =
        labels.data().iter().enumerate().filter(|(_, &c)| c != 0).map(|(i, _)| i).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let centred = rng.random_bool(fg_bias) && !foreground.is_empty();
        let origin = if centred {
            let i = foreground[rng.random_range(0..foreground.len())];
            let center = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            window_around(center, size, dims)
        } else {
            [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]))
        };
        out.push(Patch { origin, image: image.crop(origin, size)?, labels: labels.crop(origin, size)? });
    }
    Ok(out)
}
