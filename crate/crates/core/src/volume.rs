//! Volumetric containers: intensity volumes and organ label masks.
//!
//! Voxel data is stored row-major as `[z][y][x]` (depth, height, width) with
//! `x` fastest, which is also the NIfTI on-disk order. Spacing and origin are
//! kept in `(x, y, z)` order, matching NIfTI `pixdim[1..=3]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Grid dimensions `D×H×W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Shape3 { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Shape3 { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// `(z, y, x)` of a linear index.
    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }

    /// Extent along a coordinate axis: 0 = x (width), 1 = y (height), 2 = z (depth).
    pub const fn axis_len(&self, axis: usize) -> usize {
        match axis {
            0 => self.w,
            1 => self.h,
            _ => self.d,
        }
    }

    /// Linear-index stride along a coordinate axis (x, y, z).
    pub const fn axis_stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.w,
            _ => self.w * self.h,
        }
    }

    pub fn min_dim(&self) -> usize {
        self.d.min(self.h).min(self.w)
    }

    pub fn divisible_by(&self, m: usize) -> bool {
        self.d.is_multiple_of(m) && self.h.is_multiple_of(m) && self.w.is_multiple_of(m)
    }

    /// Shape after `levels` successive 2× reductions.
    pub fn halved(&self, levels: u32) -> Shape3 {
        let f = 1usize << levels;
        Shape3::new(self.d / f, self.h / f, self.w / f)
    }

    pub fn fits_within(&self, other: &Shape3) -> bool {
        self.d <= other.d && self.h <= other.h && self.w <= other.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// A 3D scalar image with physical metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub shape: Shape3,
    pub data: Vec<T>,
    /// Voxel size in mm, `(x, y, z)`.
    pub spacing: [f64; 3],
    /// Physical position of voxel `(0, 0, 0)` in mm, `(x, y, z)`.
    pub origin: [f64; 3],
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "volume {shape} needs {} voxels, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Volume {
            shape,
            data,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        Volume {
            shape,
            data: vec![value; shape.len()],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume {
            shape,
            data,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn with_geometry(mut self, spacing: [f64; 3], origin: [f64; 3]) -> Self {
        self.spacing = spacing;
        self.origin = origin;
        self
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.data.len()).unwrap_or_else(T::one);
        self.data.iter().copied().sum::<T>() / n
    }

    pub fn max_abs_diff(&self, other: &Volume<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("scalar cast"))
                .collect(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

/// Organ structures scored during evaluation, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Organ {
    Heart = 1,
    Aorta = 2,
    Trachea = 3,
    Esophagus = 4,
}

impl Organ {
    pub const ALL: [Organ; 4] = [Organ::Heart, Organ::Aorta, Organ::Trachea, Organ::Esophagus];

    pub const fn label(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            Organ::Heart => "heart",
            Organ::Aorta => "aorta",
            Organ::Trachea => "trachea",
            Organ::Esophagus => "esophagus",
        }
    }
}

pub const BACKGROUND: u8 = 0;
/// Largest valid label value; labels are `0..=MAX_LABEL`.
pub const MAX_LABEL: u8 = 4;

/// Integer organ labels aligned with an intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub shape: Shape3,
    pub data: Vec<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl LabelMask {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "mask {shape} needs {} voxels, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::validation(format!(
                "label {bad} outside the declared set 0..={MAX_LABEL}"
            )));
        }
        Ok(LabelMask {
            shape,
            data,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        })
    }

    pub fn background(shape: Shape3) -> Self {
        LabelMask {
            shape,
            data: vec![BACKGROUND; shape.len()],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn with_geometry(mut self, spacing: [f64; 3], origin: [f64; 3]) -> Self {
        self.spacing = spacing;
        self.origin = origin;
        self
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Voxel count per label value `0..=MAX_LABEL`.
    pub fn histogram(&self) -> [usize; MAX_LABEL as usize + 1] {
        let mut h = [0; MAX_LABEL as usize + 1];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }

    pub fn check_aligned<T>(&self, volume: &Volume<T>) -> Result<()> {
        if self.shape != volume.shape {
            return Err(Error::shape(format!(
                "mask {} does not match volume {}",
                self.shape, volume.shape
            )));
        }
        Ok(())
    }
}
