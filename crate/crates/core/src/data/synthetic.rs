//! Synthetic anisotropic phantoms: ellipsoids of each foreground class on a
//! noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PhnetError, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// `(depth, height, width)` in voxels.
    pub dims: [usize; 3],
    /// `(x, y, z)` in mm.
    pub spacing_mm: [f64; 3],
    pub num_classes: usize,
    /// Inclusive range of ellipsoids drawn per foreground class.
    pub blobs_per_class: [usize; 2],
    /// Semi-axis range in mm; each axis is drawn independently.
    pub radius_mm: [f64; 2],
    /// Mean intensity per class, background first.
    pub intensity_means: Vec<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dims: [32, 64, 64],
            spacing_mm: [1.0, 1.0, 4.0],
            num_classes: 2,
            blobs_per_class: [1, 3],
            radius_mm: [10.0, 18.0],
            intensity_means: vec![0.0, 1.0],
            noise_sigma: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize {
            return invalid(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.dims.iter().any(|&n| n == 0) {
            return invalid(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return invalid(format!("spacing must be positive, got {:?}", self.spacing_mm));
        }
        let [bmin, bmax] = self.blobs_per_class;
        if bmin > bmax {
            return invalid(format!("blob count range {:?} is empty", self.blobs_per_class));
        }
        let [rmin, rmax] = self.radius_mm;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return invalid(format!("radius range must be positive and ordered, got {:?}", self.radius_mm));
        }
        if self.intensity_means.len() != self.num_classes {
            return invalid(format!(
                "{} intensity means for {} classes",
                self.intensity_means.len(),
                self.num_classes
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// The same spec with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticSpec { seed, ..self.clone() }
    }
}

/// An ellipsoid in physical coordinates (mm, voxel centres at `i · spacing`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    /// `(z, y, x)` centre in mm.
    pub center_mm: [f64; 3],
    /// `(z, y, x)` semi-axes in mm.
    pub radii_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p_mm: [f64; 3]) -> bool {
        (0..3).map(|a| ((p_mm[a] - self.center_mm[a]) / self.radii_mm[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn draw_ellipsoid(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, class: usize) -> Result<Ellipsoid> {
    let spacing = [spec.spacing_mm[2], spec.spacing_mm[1], spec.spacing_mm[0]];
    let mut center_mm = [0.0; 3];
    let mut radii_mm = [0.0; 3];
    for a in 0..3 {
        let r = rng.random_range(spec.radius_mm[0]..=spec.radius_mm[1]);
        let extent = (spec.dims[a] - 1) as f64 * spacing[a];
        if 2.0 * r > extent {
            return Err(PhnetError::Generation(format!(
                "class {class}: a blob of radius {r:.2} mm does not fit along axis {} ({extent:.2} mm)",
                ["z", "y", "x"][a]
            )));
        }
        radii_mm[a] = r;
        center_mm[a] = rng.random_range(r..=extent - r);
    }
    Ok(Ellipsoid { center_mm, radii_mm })
}

/// Generates one case. Classes are painted in increasing order, so later
/// classes overwrite earlier ones where blobs overlap.
pub fn generate_case(spec: &SyntheticSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let spacing = [spec.spacing_mm[2], spec.spacing_mm[1], spec.spacing_mm[0]];
    let mut labels = LabelVolume::filled(spec.dims, spec.spacing_mm, 0)?;
    for class in 1..spec.num_classes {
        let count = rng.random_range(spec.blobs_per_class[0]..=spec.blobs_per_class[1]);
        for _ in 0..count {
            let e = draw_ellipsoid(&mut rng, spec, class)?;
            // Only scan the bounding box.
            let lo: Vec<usize> =
                (0..3).map(|a| ((e.center_mm[a] - e.radii_mm[a]) / spacing[a]).floor().max(0.0) as usize).collect();
            let hi: Vec<usize> = (0..3)
                .map(|a| (((e.center_mm[a] + e.radii_mm[a]) / spacing[a]).ceil() as usize).min(spec.dims[a] - 1))
                .collect();
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let p = [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]];
                        if e.contains(p) {
                            labels.set(z, y, x, class as u8);
                        }
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| PhnetError::Generation(e.to_string()))?;
    let mut image = Vec::with_capacity(d * h * w);
    for &c in labels.data() {
        image.push(spec.intensity_means[c as usize] + noise.sample(&mut rng));
    }
    Ok((Volume::new(spec.dims, spec.spacing_mm, image)?, labels))
}

/// Fraction of voxels with a non-zero label.
pub fn foreground_fraction(labels: &LabelVolume) -> f64 {
    labels.data().iter().filter(|&&c| c != 0).count() as f64 / labels.numel() as f64
}
