//! Core 3D volume types and axis-aligned boxes.
//!
//! All volumes use one fixed linear ordering: x fastest, then y, then z,
//! so `index = x + W*(y + H*z)`. Every window, crop, and accumulation
//! computation in the crate depends on this ordering.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Background class id.
pub const CLASS_BACKGROUND: u8 = 0;
/// Pancreas class id (organ tissue outside the tumor).
pub const CLASS_PANCREAS: u8 = 1;
/// Tumor class id. Tumor voxels are a subset of the organ region.
pub const CLASS_TUMOR: u8 = 2;
/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 3;

/// Voxel grid dimensions `(W, H, L)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub l: usize,
}

impl Dims {
    pub fn new(w: usize, h: usize, l: usize) -> Self {
        Dims { w, h, l }
    }

    /// Total voxel count `W*H*L`.
    pub fn count(&self) -> usize {
        self.w * self.h * self.l
    }

    /// Linear index of voxel `(x, y, z)`; x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.w;
        let y = (idx / self.w) % self.h;
        let z = idx / (self.w * self.h);
        [x, y, z]
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x < self.w && y < self.h && z < self.l
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.l]
    }

    fn check_positive(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.l == 0 {
            return Err(Error::Shape(format!("dims must all be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

/// Axis-aligned box with inclusive corners, in voxel coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Box3 {
    /// Both corners inclusive; panics if `lo > hi` on any axis.
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        assert!(
            lo.iter().zip(&hi).all(|(a, b)| a <= b),
            "box lo {lo:?} exceeds hi {hi:?}"
        );
        Box3 { lo, hi }
    }

    /// Edge lengths `hi - lo + 1`.
    pub fn size(&self) -> Dims {
        Dims::new(
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        )
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn fits_in(&self, dims: Dims) -> bool {
        let d = dims.as_array();
        (0..3).all(|a| self.hi[a] < d[a])
    }

    /// Grow by `margin` on every side, clamped to `[0, dim-1]` per axis.
    /// A margin of 0 is the identity.
    pub fn padded(&self, margin: usize, dims: Dims) -> Box3 {
        let d = dims.as_array();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = self.lo[a].saturating_sub(margin);
            hi[a] = (self.hi[a] + margin).min(d[a] - 1);
        }
        Box3 { lo, hi }
    }
}

fn crop_raw<T: Copy>(data: &[T], dims: Dims, b: &Box3, channels: usize) -> Vec<T> {
    let size = b.size();
    let mut out = Vec::with_capacity(size.count() * channels);
    let row_len = size.w * channels;
    for z in b.lo[2]..=b.hi[2] {
        for y in b.lo[1]..=b.hi[1] {
            let start = (dims.index(b.lo[0], y, z)) * channels;
            out.extend_from_slice(&data[start..start + row_len]);
        }
    }
    out
}

fn check_box(b: &Box3, dims: Dims) -> Result<()> {
    if !b.fits_in(dims) {
        return Err(Error::Shape(format!("box {b:?} exceeds volume dims {dims:?}")));
    }
    Ok(())
}

/// Raw scan: one signed intensity value (Hounsfield units) per voxel.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CtVolume {
    dims: Dims,
    data: Vec<i16>,
}

impl CtVolume {
    pub fn new(dims: Dims, data: Vec<i16>) -> Result<Self> {
        dims.check_positive()?;
        if data.len() != dims.count() {
            return Err(Error::Shape(format!(
                "payload has {} elements, dims {dims:?} require {}",
                data.len(),
                dims.count()
            )));
        }
        Ok(CtVolume { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn crop(&self, b: &Box3) -> Result<CtVolume> {
        check_box(b, self.dims)?;
        Ok(CtVolume {
            dims: b.size(),
            data: crop_raw(&self.data, self.dims, b, 1),
        })
    }
}

/// Per-voxel class mask over {0 background, 1 pancreas, 2 tumor}.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        dims.check_positive()?;
        if data.len() != dims.count() {
            return Err(Error::Shape(format!(
                "payload has {} elements, dims {dims:?} require {}",
                data.len(),
                dims.count()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label value {bad} outside {{0,1,2}}")));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.count()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        assert!((v as usize) < NUM_CLASSES);
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    /// Voxel count of one class.
    pub fn class_count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Tightest box containing every voxel whose class is in `classes`,
    /// or `None` when no such voxel exists.
    pub fn bounding_box(&self, classes: &[u8]) -> Option<Box3> {
        assert!(
            !classes.is_empty() && classes.iter().all(|&c| (c as usize) < NUM_CLASSES),
            "classes must be a non-empty subset of {{0,1,2}}"
        );
        let mut tracked = [false; NUM_CLASSES];
        for &c in classes {
            tracked[c as usize] = true;
        }
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut found = false;
        let mut idx = 0;
        for z in 0..self.dims.l {
            for y in 0..self.dims.h {
                for x in 0..self.dims.w {
                    if tracked[self.data[idx] as usize] {
                        found = true;
                        let p = [x, y, z];
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                    idx += 1;
                }
            }
        }
        found.then(|| Box3 { lo, hi })
    }

    pub fn crop(&self, b: &Box3) -> Result<LabelVolume> {
        check_box(b, self.dims)?;
        Ok(LabelVolume {
            dims: b.size(),
            data: crop_raw(&self.data, self.dims, b, 1),
        })
    }
}

/// Per-voxel 3-class probability field, channel innermost:
/// `data[3*index(x,y,z) + class]`.
#[derive(Clone, PartialEq, Debug)]
pub struct ProbVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl ProbVolume {
    /// Tolerance on per-voxel probability sums.
    pub const SUM_TOL: f32 = 1e-5;

    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.check_positive()?;
        if data.len() != dims.count() * NUM_CLASSES {
            return Err(Error::Shape(format!(
                "payload has {} elements, dims {dims:?} require {}",
                data.len(),
                dims.count() * NUM_CLASSES
            )));
        }
        for chunk in data.chunks_exact(NUM_CLASSES) {
            let sum: f32 = chunk.iter().sum();
            if !(sum - 1.0).abs().le(&Self::SUM_TOL) || chunk.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Format(format!(
                    "voxel probabilities {chunk:?} are not a distribution"
                )));
            }
        }
        Ok(ProbVolume { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The 3 class probabilities of voxel `(x, y, z)`.
    #[inline]
    pub fn probs(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = self.dims.index(x, y, z) * NUM_CLASSES;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, b: &Box3) -> Result<ProbVolume> {
        check_box(b, self.dims)?;
        Ok(ProbVolume {
            dims: b.size(),
            data: crop_raw(&self.data, self.dims, b, NUM_CLASSES),
        })
    }
}
