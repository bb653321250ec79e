//! Dense 3D grids with physical voxel spacing.

use crate::error::{invalid, Result};

/// A 3D grid stored depth-major, i.e. index `(z * H + y) * W + x` with `x`
/// fastest. Spacing is kept in `(x, y, z)` order, matching file headers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<T>,
}

/// Image intensities.
pub type Volume = Grid<f32>;
/// Class ids.
pub type LabelVolume = Grid<u8>;

impl<T: Copy> Grid<T> {
    /// `dims` are `(depth, height, width)`.
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return invalid(format!("grid extents must be positive, got {dims:?}"));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return invalid(format!("spacing must be positive, got {spacing_mm:?}"));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return invalid(format!("grid {dims:?} needs {n} values, got {}", data.len()));
        }
        Ok(Grid { dims, spacing_mm, data })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing_mm, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    /// Spacing reordered to match `dims`: `(z, y, x)`.
    pub fn spacing_dhw(&self) -> [f64; 3] {
        [self.spacing_mm[2], self.spacing_mm[1], self.spacing_mm[0]]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { dims: self.dims, spacing_mm: self.spacing_mm, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sub-grid starting at `origin` (`(z, y, x)`) with extents `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Grid<T>> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return invalid(format!("crop {origin:?} + {size:?} exceeds grid {:?}", self.dims));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Grid::new(size, self.spacing_mm, data)
    }
}
