//! Volumes, label maps and landmark sets.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scalar intensity grid with voxel spacing in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

pub(crate) fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::shape(format!("dims {dims:?} need {n} values, got {len}")));
    }
    Ok(())
}

impl<T: Scalar> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, spacing: [1.0; 3], data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume { dims, spacing, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(d, h, w)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// View as a `(1, 1, D, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([1, 1, self.dims[0], self.dims[1], self.dims[2]], self.data.clone()).expect("valid volume")
    }

    /// Inverse of [`Volume::to_tensor`]; channel 0 of batch 0 is used.
    pub fn from_tensor(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        Volume::new(t.spatial(), spacing, t.channel(0, 0).to_vec())
    }
}

/// Integer class labels on a grid; class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<i32>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<i32>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        if data.iter().any(|&l| l < 0) {
            return Err(Error::invalid("labels must be non-negative"));
        }
        Ok(LabelMap { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> i32 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    /// Sorted foreground classes present in the map.
    pub fn classes(&self) -> Vec<i32> {
        let mut c: Vec<i32> = self.data.iter().copied().filter(|&l| l > 0).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Boolean mask of class `c`.
    pub fn mask(&self, c: i32) -> Vec<bool> {
        self.data.iter().map(|&l| l == c).collect()
    }
}

/// Corresponding points in millimeters: `moving[i]` pairs with `fixed[i]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LandmarkSet {
    moving: Vec<[f64; 3]>,
    fixed: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(moving: Vec<[f64; 3]>, fixed: Vec<[f64; 3]>) -> Result<Self> {
        if moving.len() != fixed.len() {
            return Err(Error::shape(format!("{} moving vs {} fixed landmarks", moving.len(), fixed.len())));
        }
        if moving.iter().chain(&fixed).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinate".into()));
        }
        Ok(LandmarkSet { moving, fixed })
    }

    pub fn moving(&self) -> &[[f64; 3]] {
        &self.moving
    }

    pub fn fixed(&self) -> &[[f64; 3]] {
        &self.fixed
    }

    pub fn len(&self) -> usize {
        self.moving.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moving.is_empty()
    }
}
