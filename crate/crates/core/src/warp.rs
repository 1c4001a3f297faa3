//! Displacement fields and the differentiable grid sampler.
//!
//! Coordinates are normalized per axis so that the first and last voxel
//! centres sit at `-1` and `+1`. A [`DeformationField`] holds a displacement
//! that is added to the identity grid; the sampler reads the moving volume at
//! `identity + displacement`. Channel 0 displaces along x (width), channel 1
//! along y (height), channel 2 along z (depth).

use crate::error::{Error, Result};
use crate::resample::resize_trilinear;
use crate::scalar::{lit, to_f64, Scalar};
use crate::volume::{Shape3, Volume};

/// Per-voxel 3-vector displacement in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    shape: Shape3,
    /// Channel-major: `data[c * N + i]`.
    data: Vec<T>,
}

impl<T: Scalar> DeformationField<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * shape.len() {
            return Err(Error::shape(format!(
                "field {shape} needs {} values (3 channels), got {}",
                3 * shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "deformation field contains non-finite values",
            ));
        }
        Ok(DeformationField { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        DeformationField {
            shape,
            data: vec![T::zero(); 3 * shape.len()],
        }
    }

    pub fn constant(shape: Shape3, value: [T; 3]) -> Self {
        let n = shape.len();
        let mut data = Vec::with_capacity(3 * n);
        for v in value {
            data.extend(std::iter::repeat_n(v, n));
        }
        DeformationField { shape, data }
    }

    /// Builds a field from a per-voxel closure of `(z, y, x)`.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Self {
        let n = shape.len();
        let mut data = vec![T::zero(); 3 * n];
        for i in 0..n {
            let (z, y, x) = shape.coords(i);
            let v = f(z, y, x);
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        DeformationField { shape, data }
    }

    /// Wraps network output without the finiteness scan.
    pub(crate) fn from_raw(shape: Shape3, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), 3 * shape.len());
        DeformationField { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [T; 3] {
        let n = self.shape.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: T) -> Self {
        DeformationField {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Mean absolute component, the range regularizer's value.
    pub fn mean_abs(&self) -> T {
        let n = T::from_usize(self.data.len()).expect("len");
        self.data.iter().map(|v| v.abs()).sum::<T>() / n
    }

    /// Displacement of voxel `i` converted to voxel units per axis.
    pub fn voxel_displacement(&self, i: usize) -> [f64; 3] {
        let v = self.at(i);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = to_f64(v[c]) * voxels_per_unit(self.shape.axis_len(c));
        }
        out
    }

    /// Largest per-voxel Euclidean displacement in voxel units.
    pub fn max_voxel_norm(&self) -> f64 {
        (0..self.shape.len())
            .map(|i| {
                let d = self.voxel_displacement(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> DeformationField<U> {
        DeformationField {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("cast"))
                .collect(),
        }
    }
}

/// Half the axis extent in voxels: one normalized unit along an axis of `n` voxels.
#[inline]
pub fn voxels_per_unit(n: usize) -> f64 {
    (n.max(1) - 1) as f64 / 2.0
}

/// Normalized coordinate of voxel index `i` along an axis of length `n`.
#[inline]
pub fn normalized_coord<T: Scalar>(i: usize, n: usize) -> T {
    if n > 1 {
        lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    } else {
        T::zero()
    }
}

/// Per-voxel normalized coordinates of a grid, channel-major `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityGrid<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Scalar> IdentityGrid<T> {
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [T; 3] {
        let n = self.shape.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

pub fn identity_grid<T: Scalar>(shape: Shape3) -> Result<IdentityGrid<T>> {
    if shape.min_dim() < 2 {
        return Err(Error::validation(format!(
            "identity grid needs every dimension >= 2, got {shape}"
        )));
    }
    Ok(identity_grid_unchecked(shape))
}

pub(crate) fn identity_grid_unchecked<T: Scalar>(shape: Shape3) -> IdentityGrid<T> {
    let n = shape.len();
    let xs: Vec<T> = (0..shape.w).map(|i| normalized_coord(i, shape.w)).collect();
    let ys: Vec<T> = (0..shape.h).map(|i| normalized_coord(i, shape.h)).collect();
    let zs: Vec<T> = (0..shape.d).map(|i| normalized_coord(i, shape.d)).collect();
    let mut data = vec![T::zero(); 3 * n];
    for i in 0..n {
        let (z, y, x) = shape.coords(i);
        data[i] = xs[x];
        data[n + i] = ys[y];
        data[2 * n + i] = zs[z];
    }
    IdentityGrid { shape, data }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Linear,
    Nearest,
}

/// Treatment of sample locations outside the volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Clamp the location to the nearest border voxel.
    #[default]
    Border,
    /// Treat everything outside as zero.
    Zeros,
}

/// Linear-interpolation stencil along one axis.
#[derive(Clone, Copy)]
struct AxisStencil<T> {
    i0: isize,
    i1: isize,
    w0: T,
    w1: T,
    /// d(unnormalized position)/d(normalized coordinate), zero when clamped.
    dpos: T,
}

#[inline]
fn axis_stencil<T: Scalar>(i: usize, d: T, n: usize, padding: Padding) -> AxisStencil<T> {
    let scale: T = lit(voxels_per_unit(n));
    // Voxel position of `g(i) + d`, formed without the grid's rounding so a
    // zero displacement lands exactly on the lattice.
    let u = T::from_usize(i).expect("index") + d * scale;
    match padding {
        Padding::Border => {
            let last = T::from_usize(n - 1).expect("len");
            // A point exactly on the border is not clamped; it takes the
            // inward one-sided derivative so an all-border grid still trains.
            let (uc, dpos) = if u < T::zero() {
                (T::zero(), T::zero())
            } else if u > last {
                (last, T::zero())
            } else {
                (u, scale)
            };
            let mut i0 = uc.floor().to_isize().unwrap_or(0);
            if n >= 2 && i0 > n as isize - 2 {
                i0 = n as isize - 2;
            }
            let i1 = if n >= 2 { i0 + 1 } else { i0 };
            let f = uc - T::from_isize(i0).expect("index");
            AxisStencil {
                i0,
                i1,
                w0: T::one() - f,
                w1: f,
                dpos,
            }
        }
        Padding::Zeros => {
            let fl = u.floor();
            let i0 = fl.to_isize().unwrap_or(isize::MIN / 2);
            let f = u - fl;
            AxisStencil {
                i0,
                i1: i0 + 1,
                w0: T::one() - f,
                w1: f,
                dpos: scale,
            }
        }
    }
}

#[inline]
fn in_range(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

#[inline]
fn stencils<T: Scalar>(
    shape: Shape3,
    i: usize,
    d: [T; 3],
    padding: Padding,
) -> [AxisStencil<T>; 3] {
    let (z, y, x) = shape.coords(i);
    [
        axis_stencil(x, d[0], shape.w, padding),
        axis_stencil(y, d[1], shape.h, padding),
        axis_stencil(z, d[2], shape.d, padding),
    ]
}

/// Interpolated value at voxel `i` displaced by `d`, and its derivative with
/// respect to the three normalized coordinates.
#[inline]
fn sample_linear_at<T: Scalar>(
    data: &[T],
    shape: Shape3,
    i: usize,
    d: [T; 3],
    padding: Padding,
) -> (T, [T; 3]) {
    let [sx, sy, sz] = stencils(shape, i, d, padding);
    let fetch = |z: isize, y: isize, x: isize| -> T {
        if in_range(z, shape.d) && in_range(y, shape.h) && in_range(x, shape.w) {
            data[shape.index(z as usize, y as usize, x as usize)]
        } else {
            T::zero()
        }
    };
    let v000 = fetch(sz.i0, sy.i0, sx.i0);
    let v001 = fetch(sz.i0, sy.i0, sx.i1);
    let v010 = fetch(sz.i0, sy.i1, sx.i0);
    let v011 = fetch(sz.i0, sy.i1, sx.i1);
    let v100 = fetch(sz.i1, sy.i0, sx.i0);
    let v101 = fetch(sz.i1, sy.i0, sx.i1);
    let v110 = fetch(sz.i1, sy.i1, sx.i0);
    let v111 = fetch(sz.i1, sy.i1, sx.i1);

    // Collapse x, then y, then z.
    let c00 = v000 * sx.w0 + v001 * sx.w1;
    let c01 = v010 * sx.w0 + v011 * sx.w1;
    let c10 = v100 * sx.w0 + v101 * sx.w1;
    let c11 = v110 * sx.w0 + v111 * sx.w1;
    let c0 = c00 * sy.w0 + c01 * sy.w1;
    let c1 = c10 * sy.w0 + c11 * sy.w1;
    let value = c0 * sz.w0 + c1 * sz.w1;

    let dx = ((v001 - v000) * sy.w0 * sz.w0
        + (v011 - v010) * sy.w1 * sz.w0
        + (v101 - v100) * sy.w0 * sz.w1
        + (v111 - v110) * sy.w1 * sz.w1)
        * sx.dpos;
    let dy = ((c01 - c00) * sz.w0 + (c11 - c10) * sz.w1) * sy.dpos;
    let dz = (c1 - c0) * sz.dpos;
    (value, [dx, dy, dz])
}

#[inline]
fn nearest_index(i: usize, d: f64, n: usize, padding: Padding) -> Option<usize> {
    let u = (i as f64 + d * voxels_per_unit(n)).round();
    match padding {
        Padding::Border => Some(u.clamp(0.0, (n - 1) as f64) as usize),
        Padding::Zeros => (u >= 0.0 && u <= (n - 1) as f64).then_some(u as usize),
    }
}

fn check_same_shape<T>(v: Shape3, field: &DeformationField<T>) -> Result<()> {
    if v != field.shape {
        return Err(Error::shape(format!(
            "volume {v} and field {} differ",
            field.shape
        )));
    }
    Ok(())
}

/// Resamples `v` at `identity + field`.
pub fn grid_sample<T: Scalar>(
    v: &Volume<T>,
    field: &DeformationField<T>,
    mode: SampleMode,
    padding: Padding,
) -> Result<Volume<T>> {
    check_same_shape(v.shape, field)?;
    let data = match mode {
        SampleMode::Linear => sample_linear(&v.data, v.shape, field, padding),
        SampleMode::Nearest => sample_nearest(&v.data, v.shape, field, padding),
    };
    Ok(Volume {
        shape: v.shape,
        data,
        spacing: v.spacing,
        origin: v.origin,
    })
}

pub(crate) fn sample_linear<T: Scalar>(
    data: &[T],
    shape: Shape3,
    field: &DeformationField<T>,
    padding: Padding,
) -> Vec<T> {
    (0..shape.len())
        .map(|i| sample_linear_at(data, shape, i, field.at(i), padding).0)
        .collect()
}

/// Nearest-neighbour resampling of arbitrary voxel payloads (labels included).
pub fn sample_nearest<U: Copy + Default, T: Scalar>(
    data: &[U],
    shape: Shape3,
    field: &DeformationField<T>,
    padding: Padding,
) -> Vec<U> {
    (0..shape.len())
        .map(|i| {
            let d = field.at(i);
            let (z, y, x) = shape.coords(i);
            let ix = nearest_index(x, to_f64(d[0]), shape.w, padding);
            let iy = nearest_index(y, to_f64(d[1]), shape.h, padding);
            let iz = nearest_index(z, to_f64(d[2]), shape.d, padding);
            match (iz, iy, ix) {
                (Some(z), Some(y), Some(x)) => data[shape.index(z, y, x)],
                _ => U::default(),
            }
        })
        .collect()
}

/// Gradients of a linear [`grid_sample`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct SampleGrads<T> {
    /// Same layout as the sampled volume; empty when not requested.
    pub volume: Vec<T>,
    /// Channel-major, same layout as the field.
    pub field: Vec<T>,
}

/// Back-propagates `grad_out` (one value per output voxel) through linear sampling.
pub fn grid_sample_backward<T: Scalar>(
    v: &Volume<T>,
    field: &DeformationField<T>,
    padding: Padding,
    grad_out: &[T],
    want_volume_grad: bool,
) -> Result<SampleGrads<T>> {
    check_same_shape(v.shape, field)?;
    if grad_out.len() != v.shape.len() {
        return Err(Error::shape("output gradient length differs from volume"));
    }
    Ok(sample_linear_backward(
        &v.data,
        v.shape,
        field,
        padding,
        grad_out,
        want_volume_grad,
    ))
}

pub(crate) fn sample_linear_backward<T: Scalar>(
    data: &[T],
    shape: Shape3,
    field: &DeformationField<T>,
    padding: Padding,
    grad_out: &[T],
    want_volume_grad: bool,
) -> SampleGrads<T> {
    let n = shape.len();
    let mut gfield = vec![T::zero(); 3 * n];
    let mut gvol = if want_volume_grad {
        vec![T::zero(); n]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let go = grad_out[i];
        if go == T::zero() {
            continue;
        }
        let d = field.at(i);
        let (_, dc) = sample_linear_at(data, shape, i, d, padding);
        for c in 0..3 {
            gfield[c * n + i] = dc[c] * go;
        }
        if want_volume_grad {
            let [sx, sy, sz] = stencils(shape, i, d, padding);
            for (iz, wz) in [(sz.i0, sz.w0), (sz.i1, sz.w1)] {
                for (iy, wy) in [(sy.i0, sy.w0), (sy.i1, sy.w1)] {
                    for (ix, wx) in [(sx.i0, sx.w0), (sx.i1, sx.w1)] {
                        if in_range(iz, shape.d) && in_range(iy, shape.h) && in_range(ix, shape.w) {
                            gvol[shape.index(iz as usize, iy as usize, ix as usize)] +=
                                wz * wy * wx * go;
                        }
                    }
                }
            }
        }
    }
    SampleGrads {
        volume: gvol,
        field: gfield,
    }
}

/// Trilinear upsampling of a coarser field. Values are not rescaled because
/// normalized displacements are resolution independent.
pub fn upsample_field<T: Scalar>(
    field: &DeformationField<T>,
    target: Shape3,
) -> Result<DeformationField<T>> {
    if !field.shape.fits_within(&target) {
        return Err(Error::validation(format!(
            "upsample_field cannot shrink {} to {target}",
            field.shape
        )));
    }
    Ok(DeformationField::from_raw(
        target,
        resize_trilinear(&field.data, 3, field.shape, target),
    ))
}

/// Linear map `R` and translation `t` acting on normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T> {
    /// Row-major 3×3; `rotation[r][c]`.
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        RigidTransform {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    /// Rotation about x, then y, then z (`R = Rz·Ry·Rx`), angles in degrees.
    pub fn from_euler_degrees(angles: [f64; 3], translation: [T; 3]) -> Self {
        let [ax, ay, az] = angles.map(f64::to_radians);
        let rx = [
            [1.0, 0.0, 0.0],
            [0.0, ax.cos(), -ax.sin()],
            [0.0, ax.sin(), ax.cos()],
        ];
        let ry = [
            [ay.cos(), 0.0, ay.sin()],
            [0.0, 1.0, 0.0],
            [-ay.sin(), 0.0, ay.cos()],
        ];
        let rz = [
            [az.cos(), -az.sin(), 0.0],
            [az.sin(), az.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let r = matmul3(&rz, &matmul3(&ry, &rx));
        RigidTransform {
            rotation: r.map(|row| row.map(lit)),
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `φ'(p) = R·(g(p) + φ(p)) + t − g(p)`: the sampling locations are moved
/// rigidly while the result stays a displacement.
pub fn apply_rigid_to_field<T: Scalar>(
    field: &DeformationField<T>,
    transform: &RigidTransform<T>,
) -> Result<DeformationField<T>> {
    if !transform.is_finite() {
        return Err(Error::validation("rigid transform has non-finite entries"));
    }
    let shape = field.shape;
    let n = shape.len();
    let grid = identity_grid_unchecked::<T>(shape);
    let mut data = vec![T::zero(); 3 * n];
    for i in 0..n {
        let g = grid.at(i);
        let d = field.at(i);
        let q = transform.apply([g[0] + d[0], g[1] + d[1], g[2] + d[2]]);
        for c in 0..3 {
            data[c * n + i] = q[c] - g[c];
        }
    }
    Ok(DeformationField::from_raw(shape, data))
}

/// Gradients of [`apply_rigid_to_field`].
#[derive(Clone, Debug)]
pub struct RigidGrads<T> {
    pub field: Vec<T>,
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

pub fn apply_rigid_backward<T: Scalar>(
    field: &DeformationField<T>,
    transform: &RigidTransform<T>,
    grad_out: &[T],
) -> RigidGrads<T> {
    let shape = field.shape;
    let n = shape.len();
    let grid = identity_grid_unchecked::<T>(shape);
    let r = &transform.rotation;
    let mut gfield = vec![T::zero(); 3 * n];
    let mut grot = [[T::zero(); 3]; 3];
    let mut gt = [T::zero(); 3];
    for i in 0..n {
        let go = [grad_out[i], grad_out[n + i], grad_out[2 * n + i]];
        let g = grid.at(i);
        let d = field.at(i);
        let p = [g[0] + d[0], g[1] + d[1], g[2] + d[2]];
        for row in 0..3 {
            gt[row] += go[row];
            for col in 0..3 {
                grot[row][col] += go[row] * p[col];
                gfield[col * n + i] += r[row][col] * go[row];
            }
        }
    }
    RigidGrads {
        field: gfield,
        rotation: grot,
        translation: gt,
    }
}

/// Forward differences of every channel along every axis.
///
/// Component `(c, a)` is `φ_c(p + e_a) − φ_c(p)` in voxel steps, zero on the
/// last slice along `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient<T> {
    pub shape: Shape3,
    /// `data[(3 * c + a) * N + i]`.
    pub data: Vec<T>,
}

impl<T: Scalar> FieldGradient<T> {
    pub fn component(&self, channel: usize, axis: usize) -> &[T] {
        let n = self.shape.len();
        let k = 3 * channel + axis;
        &self.data[k * n..(k + 1) * n]
    }
}

pub fn spatial_gradient<T: Scalar>(field: &DeformationField<T>) -> FieldGradient<T> {
    let shape = field.shape;
    let n = shape.len();
    let mut data = vec![T::zero(); 9 * n];
    for c in 0..3 {
        let src = field.channel(c);
        for a in 0..3 {
            let stride = shape.axis_stride(a);
            let len = shape.axis_len(a);
            let out = &mut data[(3 * c + a) * n..(3 * c + a + 1) * n];
            for i in 0..n {
                let pos = (i / stride) % len;
                if pos + 1 < len {
                    out[i] = src[i + stride] - src[i];
                }
            }
        }
    }
    FieldGradient { shape, data }
}

/// Adjoint of [`spatial_gradient`]: maps a 9-component gradient back to the field.
pub fn spatial_gradient_adjoint<T: Scalar>(shape: Shape3, grad: &[T]) -> Vec<T> {
    let n = shape.len();
    assert_eq!(grad.len(), 9 * n, "gradient length");
    let mut out = vec![T::zero(); 3 * n];
    for c in 0..3 {
        for a in 0..3 {
            let stride = shape.axis_stride(a);
            let len = shape.axis_len(a);
            let g = &grad[(3 * c + a) * n..(3 * c + a + 1) * n];
            let dst = &mut out[c * n..(c + 1) * n];
            for i in 0..n {
                let pos = (i / stride) % len;
                if pos + 1 < len {
                    dst[i + stride] += g[i];
                    dst[i] -= g[i];
                }
            }
        }
    }
    out
}

/// Determinant of `I + ∂u/∂p` per voxel, with `u` the displacement in voxel
/// units. Central differences inside, one-sided on the boundary.
pub fn jacobian_determinant<T: Scalar>(field: &DeformationField<T>) -> Result<Volume<T>> {
    let shape = field.shape;
    if shape.min_dim() < 2 {
        return Err(Error::validation(format!(
            "jacobian needs every dimension >= 2, got {shape}"
        )));
    }
    let n = shape.len();
    let scale: [f64; 3] = [0, 1, 2].map(|c| voxels_per_unit(shape.axis_len(c)));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut j = [[0.0f64; 3]; 3];
        for (c, row) in j.iter_mut().enumerate() {
            let ch = field.channel(c);
            for (a, entry) in row.iter_mut().enumerate() {
                let stride = shape.axis_stride(a);
                let len = shape.axis_len(a);
                let pos = (i / stride) % len;
                let d = if pos == 0 {
                    to_f64(ch[i + stride]) - to_f64(ch[i])
                } else if pos + 1 == len {
                    to_f64(ch[i]) - to_f64(ch[i - stride])
                } else {
                    0.5 * (to_f64(ch[i + stride]) - to_f64(ch[i - stride]))
                };
                *entry = d * scale[c] + if a == c { 1.0 } else { 0.0 };
            }
        }
        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        out.push(lit(det));
    }
    Volume::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: Shape3, rng: &mut ChaCha8Rng) -> Volume<f64> {
        Volume::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_field(shape: Shape3, amp: f64, rng: &mut ChaCha8Rng) -> DeformationField<f64> {
        DeformationField::from_fn(shape, |_, _, _| [0; 3].map(|_| rng.gen_range(-amp..amp)))
    }

    #[test]
    fn identity_grid_corners_and_centre() {
        let g = identity_grid::<f64>(Shape3::cube(2)).unwrap();
        for i in 0..8 {
            assert!(g.at(i).iter().all(|v| v.abs() == 1.0));
        }
        let g3 = identity_grid::<f64>(Shape3::cube(3)).unwrap();
        assert_eq!(g3.at(Shape3::cube(3).index(1, 1, 1)), [0.0, 0.0, 0.0]);
        assert!(identity_grid::<f64>(Shape3::new(1, 4, 4)).is_err());
    }

    #[test]
    fn identity_grid_matches_per_axis_linspace() {
        let shape = Shape3::new(5, 4, 3);
        let g = identity_grid::<f64>(shape).unwrap();
        let lin = |n: usize, i: usize| -1.0 + 2.0 * i as f64 / (n as f64 - 1.0);
        for i in 0..shape.len() {
            let (z, y, x) = shape.coords(i);
            let p = g.at(i);
            assert!((p[0] - lin(3, x)).abs() < 1e-15);
            assert!((p[1] - lin(4, y)).abs() < 1e-15);
            assert!((p[2] - lin(5, z)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_field_reproduces_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(Shape3::new(4, 5, 6), &mut rng);
        let zero = DeformationField::zeros(v.shape);
        let lin = grid_sample(&v, &zero, SampleMode::Linear, Padding::Border).unwrap();
        assert!(lin.max_abs_diff(&v) <= 1e-12);
        let near = grid_sample(&v, &zero, SampleMode::Nearest, Padding::Border).unwrap();
        assert_eq!(near.data, v.data);
    }

    #[test]
    fn one_voxel_shift_along_x_clamps_border() {
        let shape = Shape3::new(3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(shape, &mut rng);
        let step = 2.0 / (shape.w as f64 - 1.0);
        let field = DeformationField::constant(shape, [step, 0.0, 0.0]);
        let out = grid_sample(&v, &field, SampleMode::Linear, Padding::Border).unwrap();
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let src = (x + 1).min(shape.w - 1);
                    assert!((out.at(z, y, x) - v.at(z, y, src)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeros_padding_reads_zero_outside() {
        let shape = Shape3::cube(4);
        let v = Volume::<f64>::filled(shape, 1.0);
        let field = DeformationField::constant(shape, [3.0, 0.0, 0.0]);
        let out = grid_sample(&v, &field, SampleMode::Linear, Padding::Zeros).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
        let near = grid_sample(&v, &field, SampleMode::Nearest, Padding::Zeros).unwrap();
        assert!(near.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let v = Volume::<f64>::zeros(Shape3::cube(4));
        let f = DeformationField::zeros(Shape3::cube(5));
        assert!(matches!(
            grid_sample(&v, &f, SampleMode::Linear, Padding::Border),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sampler_volume_gradient_is_adjoint_of_forward() {
        // The sampler is linear in the volume, so <S v, w> = <v, Sᵀ w>.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape3::new(4, 5, 3);
        let v = random_volume(shape, &mut rng);
        let f = random_field(shape, 0.4, &mut rng);
        let w: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for padding in [Padding::Border, Padding::Zeros] {
            let sv = grid_sample(&v, &f, SampleMode::Linear, padding).unwrap();
            let g = grid_sample_backward(&v, &f, padding, &w, true).unwrap();
            let lhs: f64 = sv.data.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.data.iter().zip(&g.volume).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_constant_and_rejects_shrinking() {
        let f = DeformationField::constant(Shape3::cube(2), [0.25, -0.5, 0.125f64]);
        let up = upsample_field(&f, Shape3::new(4, 6, 8)).unwrap();
        for i in 0..up.shape().len() {
            assert_eq!(up.at(i), [0.25, -0.5, 0.125]);
        }
        assert!(upsample_field(&up, Shape3::cube(2)).is_err());
    }

    #[test]
    fn rigid_identity_is_noop_and_translation_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(Shape3::new(3, 4, 5), 0.3, &mut rng);
        let same = apply_rigid_to_field(&f, &RigidTransform::identity()).unwrap();
        for (a, b) in same.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let t = RigidTransform {
            translation: [0.5, 0.0, 0.0],
            ..RigidTransform::identity()
        };
        let moved = apply_rigid_to_field(&DeformationField::zeros(Shape3::cube(3)), &t).unwrap();
        for i in 0..27 {
            assert_eq!(moved.at(i), [0.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn rigid_rotation_matches_affine_displacement() {
        let shape = Shape3::new(3, 5, 4);
        let rot = RigidTransform::<f64>::from_euler_degrees([0.0, 0.0, 90.0], [0.0; 3]);
        let out = apply_rigid_to_field(&DeformationField::zeros(shape), &rot).unwrap();
        let g = identity_grid::<f64>(shape).unwrap();
        for i in 0..shape.len() {
            let p = g.at(i);
            // 90° about z: (x, y, z) -> (-y, x, z)
            let expect = [-p[1] - p[0], p[0] - p[1], 0.0];
            let got = out.at(i);
            for c in 0..3 {
                assert!((got[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_gradient_of_ramp_and_constant() {
        let shape = Shape3::cube(4);
        let c = DeformationField::constant(shape, [0.3, 0.1, -0.2f64]);
        assert!(spatial_gradient(&c).data.iter().all(|&v| v == 0.0));

        let s = 0.25;
        let ramp = DeformationField::from_fn(shape, |_, _, x| [s * x as f64, 0.0, 0.0]);
        let g = spatial_gradient(&ramp);
        let gx = g.component(0, 0);
        for i in 0..shape.len() {
            let (_, _, x) = shape.coords(i);
            let expect = if x + 1 < shape.w { s } else { 0.0 };
            assert_eq!(gx[i], expect);
        }
        for k in 1..9 {
            assert!(g.data[k * shape.len()..(k + 1) * shape.len()]
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spatial_gradient_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape3::new(3, 4, 5);
        let f = random_field(shape, 1.0, &mut rng);
        let w: Vec<f64> = (0..9 * shape.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let lhs: f64 = spatial_gradient(&f)
            .data
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum();
        let adj = spatial_gradient_adjoint(shape, &w);
        let rhs: f64 = f.data().iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn jacobian_of_identity_translation_and_scaling() {
        let shape = Shape3::new(6, 7, 8);
        let ones = |v: &Volume<f64>| v.data.iter().all(|&d| (d - 1.0).abs() < 1e-12);
        assert!(ones(
            &jacobian_determinant(&DeformationField::zeros(shape)).unwrap()
        ));
        let t = DeformationField::constant(shape, [0.3, -0.2, 0.1]);
        assert!(ones(&jacobian_determinant(&t).unwrap()));

        let g = identity_grid::<f64>(shape).unwrap();
        let scale = DeformationField::from_fn(shape, |z, y, x| {
            let p = g.at(shape.index(z, y, x));
            [0.1 * p[0], 0.1 * p[1], 0.1 * p[2]]
        });
        let j = jacobian_determinant(&scale).unwrap();
        for z in 1..shape.d - 1 {
            for y in 1..shape.h - 1 {
                for x in 1..shape.w - 1 {
                    assert!((j.at(z, y, x) - 1.1f64.powi(3)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn field_rejects_wrong_length_and_nan() {
        assert!(DeformationField::<f64>::new(Shape3::cube(2), vec![0.0; 23]).is_err());
        let mut d = vec![0.0; 24];
        d[5] = f64::NAN;
        assert!(DeformationField::<f64>::new(Shape3::cube(2), d).is_err());
    }
}
