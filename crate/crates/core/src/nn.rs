//! Layer primitives with hand-written backward passes.
//!
//! Activations are channel-major: `data[c * N + i]` with `i` a voxel index of
//! a [`Shape3`]. Convolutions use 3×3×3 kernels, padding 1 and stride 1 or 2,
//! lowered to im2col + GEMM over runs of output rows so the column buffer
//! stays in cache.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{gemm, lit, to_f64, MatRef, Scalar};
use crate::volume::Shape3;

pub const KERNEL_VOLUME: usize = 27;
const COL_BUDGET_BYTES: usize = 1 << 20;
const MAX_CHUNK_ROWS: usize = 256;

/// Stacked channels over one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(channels: usize, shape: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * shape.len(), "tensor length");
        Tensor {
            channels,
            shape,
            data,
        }
    }

    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Tensor::new(channels, shape, vec![T::zero(); channels * shape.len()])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Concatenates channel blocks that share one grid.
pub fn concat_channels<T: Scalar>(parts: &[&[T]], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        debug_assert_eq!(p.len() % n, 0);
        out.extend_from_slice(p);
    }
    out
}

/// A named learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Parameters keyed by dotted path, e.g. `refine2.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, dims: Vec<usize>, data: Vec<T>) {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "param dims vs data"
        );
        self.entries.insert(key.into(), Param { dims, data });
    }

    pub fn get(&self, key: &str) -> &[T] {
        &self
            .entries
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter `{key}`"))
            .data
    }

    pub fn get_mut(&mut self, key: &str) -> &mut [T] {
        &mut self
            .entries
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing parameter `{key}`"))
            .data
    }

    pub fn param(&self, key: &str) -> Option<&Param<T>> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            dims: p.dims.clone(),
                            data: vec![T::zero(); p.data.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    /// `self += other`, keys must match.
    pub fn accumulate(&mut self, other: &ParamStore<T>) {
        for (k, p) in &mut self.entries {
            for (a, &b) in p.data.iter_mut().zip(other.get(k)) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in self.entries.values_mut() {
            for v in &mut p.data {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over every key starting with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, p)| p.data.iter())
            .map(|&v| to_f64(v).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            dims: p.dims.clone(),
                            data: p.data.iter().map(|&v| U::from(v).expect("cast")).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same keys and dims.
    pub fn check_layout<U>(&self, other: &ParamStore<U>) -> Result<()> {
        for (k, p) in &self.entries {
            match other.entries.get(k) {
                None => return Err(Error::checkpoint(k, "missing")),
                Some(q) if q.dims != p.dims => {
                    return Err(Error::checkpoint(
                        k,
                        format!("shape {:?}, expected {:?}", q.dims, p.dims),
                    ))
                }
                _ => {}
            }
        }
        if let Some(k) = other
            .entries
            .keys()
            .find(|k| !self.entries.contains_key(*k))
        {
            return Err(Error::checkpoint(k, "unexpected key"));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-key generator, so a parameter's initial value does not depend on
/// which other parameters exist.
pub fn key_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key))
}

pub fn normal_init<T: Scalar>(seed: u64, key: &str, len: usize, std: f64) -> Vec<T> {
    if std == 0.0 {
        return vec![T::zero(); len];
    }
    let mut rng = key_rng(seed, key);
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| lit(dist.sample(&mut rng))).collect()
}

/// He initialization for a layer followed by a leaky ReLU.
pub fn he_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt()
}

pub fn conv_out_shape(shape: Shape3, stride: usize) -> Shape3 {
    let f = |n: usize| (n - 1) / stride + 1;
    Shape3::new(f(shape.d), f(shape.h), f(shape.w))
}

/// Geometry of a 3×3×3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, stride: usize, in_shape: Shape3) -> Self {
        ConvGeom {
            cin,
            cout,
            stride,
            in_shape,
            out_shape: conv_out_shape(in_shape, stride),
        }
    }

    fn k(&self) -> usize {
        self.cin * KERNEL_VOLUME
    }

    /// Output rows (`(z, y)` lines) per GEMM chunk, sized so the column
    /// buffer fits in L2.
    fn rows_per_chunk<T: Scalar>(&self) -> usize {
        let per_row = self.k() * self.out_shape.w * T::BYTES;
        (COL_BUDGET_BYTES / per_row.max(1)).clamp(1, MAX_CHUNK_ROWS)
    }

    fn rows(&self) -> usize {
        self.out_shape.d * self.out_shape.h
    }
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - 1;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Fills `cols` (K × P) for output rows `r0..r1`, every entry overwritten.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let (is, os, s) = (g.in_shape, g.out_shape, g.stride);
    let w = os.w;
    let p = (r1 - r0) * w;
    cols.resize(g.k() * p, T::zero());
    let n_in = is.len();
    for ci in 0..g.cin {
        let xc = &x[ci * n_in..(ci + 1) * n_in];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for r in r0..r1 {
                        let d = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                        let (oz, oy) = (r / os.h, r % os.h);
                        let (Some(iz), Some(iy)) = (tap(oz, kz, s, is.d), tap(oy, ky, s, is.h))
                        else {
                            d.fill(T::zero());
                            continue;
                        };
                        let src = &xc[(iz * is.h + iy) * is.w..(iz * is.h + iy + 1) * is.w];
                        if s == 1 {
                            match kx {
                                0 => {
                                    d[0] = T::zero();
                                    d[1..].copy_from_slice(&src[..w - 1]);
                                }
                                1 => d.copy_from_slice(src),
                                _ => {
                                    d[..w - 1].copy_from_slice(&src[1..]);
                                    d[w - 1] = T::zero();
                                }
                            }
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = tap(ox, kx, s, is.w).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input grid; adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [T]) {
    let (is, os, s) = (g.in_shape, g.out_shape, g.stride);
    let w = os.w;
    let p = (r1 - r0) * w;
    let n_in = is.len();
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * n_in..(ci + 1) * n_in];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for r in r0..r1 {
                        let (oz, oy) = (r / os.h, r % os.h);
                        let (Some(iz), Some(iy)) = (tap(oz, kz, s, is.d), tap(oy, ky, s, is.h))
                        else {
                            continue;
                        };
                        let d = &mut dxc[(iz * is.h + iy) * is.w..(iz * is.h + iy + 1) * is.w];
                        let c = &src[(r - r0) * w..(r - r0 + 1) * w];
                        if s == 1 {
                            let (dst, from) = match kx {
                                0 => (&mut d[..w - 1], &c[1..]),
                                1 => (&mut d[..], c),
                                _ => (&mut d[1..], &c[..w - 1]),
                            };
                            for (a, &b) in dst.iter_mut().zip(from) {
                                *a += b;
                            }
                        } else {
                            for (ox, &v) in c.iter().enumerate() {
                                if let Some(ix) = tap(ox, kx, s, is.w) {
                                    d[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `cout × cin × 27` row-major.
pub fn conv3d_forward<T: Scalar>(x: &[T], g: &ConvGeom, weight: &[T], bias: &[T]) -> Vec<T> {
    assert_eq!(x.len(), g.cin * g.in_shape.len(), "conv input length");
    assert_eq!(weight.len(), g.cout * g.k(), "conv weight length");
    let n_out = g.out_shape.len();
    let w = g.out_shape.w;
    let mut out = vec![T::zero(); g.cout * n_out];
    let mut cols = Vec::new();
    let step = g.rows_per_chunk::<T>();
    let wmat = MatRef::row_major(weight, g.cout, g.k());
    let mut r0 = 0;
    while r0 < g.rows() {
        let r1 = (r0 + step).min(g.rows());
        im2col(x, g, r0, r1, &mut cols);
        let p = (r1 - r0) * w;
        gemm(
            wmat,
            MatRef::row_major(&cols, g.k(), p),
            T::zero(),
            &mut out[r0 * w..],
            n_out,
        );
        r0 = r1;
    }
    for (o, &b) in bias.iter().enumerate() {
        if b != T::zero() {
            for v in &mut out[o * n_out..(o + 1) * n_out] {
                *v += b;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let n_out = g.out_shape.len();
    assert_eq!(dy.len(), g.cout * n_out, "conv output gradient length");
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dy[o * n_out..(o + 1) * n_out].iter().copied().sum::<T>();
    }
    let w = g.out_shape.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.cin * g.in_shape.len()]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let step = g.rows_per_chunk::<T>();
    let k = g.k();
    let mut r0 = 0;
    while r0 < g.rows() {
        let r1 = (r0 + step).min(g.rows());
        let p = (r1 - r0) * w;
        let dy_chunk = MatRef::strided(&dy[r0 * w..], g.cout, p, n_out, 1);
        im2col(x, g, r0, r1, &mut cols);
        gemm(
            dy_chunk,
            MatRef::row_major(&cols, k, p).t(),
            T::one(),
            dweight,
            k,
        );
        if let Some(dx) = dx.as_mut() {
            dcols.resize(k * p, T::zero());
            gemm(
                MatRef::row_major(weight, g.cout, k).t(),
                dy_chunk,
                T::zero(),
                &mut dcols,
                p,
            );
            col2im(&dcols, g, r0, r1, dx);
        }
        r0 = r1;
    }
    dx
}

pub fn leaky_relu_forward<T: Scalar>(x: &[T], slope: T) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { v * slope })
        .collect()
}

pub fn leaky_relu_backward<T: Scalar>(pre: &[T], dy: &[T], slope: T) -> Vec<T> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &d)| if p > T::zero() { d } else { d * slope })
        .collect()
}

/// Saved statistics of a per-channel normalization.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization over all voxels of the (single-sample) batch,
/// followed by the affine `gamma·x̂ + beta`. Statistics are always the batch's own.
pub fn norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / channels;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        let mean = xc.iter().map(|&v| to_f64(v)).sum::<f64>() / n as f64;
        let var = xc.iter().map(|&v| (to_f64(v) - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        let (m, ist): (T, T) = (lit(mean), lit(is));
        inv_std.push(ist);
        for i in 0..n {
            let h = (xc[i] - m) * ist;
            xhat[c * n + i] = h;
            y[c * n + i] = gamma[c] * h + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let channels = cache.inv_std.len();
    let n = dy.len() / channels;
    let inv_n: T = lit(1.0 / n as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let dyc = &dy[c * n..(c + 1) * n];
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for i in 0..n {
            sum_dy += to_f64(dyc[i]);
            sum_dy_xh += to_f64(dyc[i] * xh[i]);
        }
        dgamma[c] += lit(sum_dy_xh);
        dbeta[c] += lit(sum_dy);
        let k = gamma[c] * cache.inv_std[c];
        let (mean_dy, mean_dy_xh): (T, T) = (lit::<T>(sum_dy) * inv_n, lit::<T>(sum_dy_xh) * inv_n);
        for i in 0..n {
            dx[c * n + i] = k * (dyc[i] - mean_dy - xh[i] * mean_dy_xh);
        }
    }
    dx
}

/// `y = W·x + b` with `W` `out × in` row-major.
pub fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (out, inp) = (bias.len(), x.len());
    assert_eq!(weight.len(), out * inp, "linear weight length");
    (0..out)
        .map(|o| {
            weight[o * inp..(o + 1) * inp]
                .iter()
                .zip(x)
                .map(|(&w, &v)| w * v)
                .sum::<T>()
                + bias[o]
        })
        .collect()
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let inp = x.len();
    let mut dx = vec![T::zero(); inp];
    for (o, &d) in dy.iter().enumerate() {
        dbias[o] += d;
        let row = &weight[o * inp..(o + 1) * inp];
        let drow = &mut dweight[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

/// Maximum over channels at each voxel, with the winning channel recorded.
pub fn channel_max_forward<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<u32>) {
    let n = x.len() / channels;
    let mut m = x[..n].to_vec();
    let mut arg = vec![0u32; n];
    for c in 1..channels {
        for i in 0..n {
            let v = x[c * n + i];
            if v > m[i] {
                m[i] = v;
                arg[i] = c as u32;
            }
        }
    }
    (m, arg)
}

pub fn channel_max_backward<T: Scalar>(dm: &[T], arg: &[u32], channels: usize) -> Vec<T> {
    let n = dm.len();
    let mut dx = vec![T::zero(); channels * n];
    for i in 0..n {
        dx[arg[i] as usize * n + i] = dm[i];
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn conv_naive(x: &[f64], g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
        let (is, os) = (g.in_shape, g.out_shape);
        let mut out = vec![0.0; g.cout * os.len()];
        for o in 0..g.cout {
            for (j, v) in out[o * os.len()..(o + 1) * os.len()].iter_mut().enumerate() {
                let (oz, oy, ox) = os.coords(j);
                let mut acc = b[o];
                for ci in 0..g.cin {
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iz = (oz * g.stride + kz) as isize - 1;
                                let iy = (oy * g.stride + ky) as isize - 1;
                                let ix = (ox * g.stride + kx) as isize - 1;
                                if iz < 0 || iy < 0 || ix < 0 {
                                    continue;
                                }
                                let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                if iz >= is.d || iy >= is.h || ix >= is.w {
                                    continue;
                                }
                                acc += w[((o * g.cin + ci) * 3 + kz) * 9 + ky * 3 + kx]
                                    * x[ci * is.len() + is.index(iz, iy, ix)];
                            }
                        }
                    }
                }
                *v = acc;
            }
        }
        out
    }

    fn seq(len: usize, a: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, shape) in [
            (1, Shape3::new(3, 4, 5)),
            (2, Shape3::new(4, 6, 8)),
            (2, Shape3::new(5, 3, 7)),
        ] {
            let g = ConvGeom::new(2, 3, stride, shape);
            let x = seq(2 * shape.len(), 0.37);
            let w = seq(3 * 2 * 27, 0.11);
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv3d_forward(&x, &g, &w, &b);
            let slow = conv_naive(&x, &g, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        for stride in [1, 2] {
            conv_adjoint_case(ConvGeom::new(2, 3, stride, Shape3::new(4, 6, 5)));
        }
    }

    fn conv_adjoint_case(g: ConvGeom) {
        let x = seq(2 * g.in_shape.len(), 0.29);
        let w = seq(3 * 2 * 27, 0.17);
        let dy = seq(3 * g.out_shape.len(), 0.07);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3d_backward(&x, &g, &w, &dy, &mut dw, &mut db, true).unwrap();
        let y0 = conv3d_forward(&x, &g, &w, &[0.0; 3]);
        // <conv(x), dy> is linear in both x and w.
        let lhs: f64 = y0.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9);
        assert!((lhs - via_w).abs() < 1e-9);
        assert!((db[0] - dy[..g.out_shape.len()].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn zero_input_normalizes_to_beta() {
        let x = vec![0.0f64; 16];
        let pre = leaky_relu_forward(&x, 0.01);
        let (y, _) = norm_forward(&pre, 2, &[1.0, 2.0], &[0.5, -0.25], 1e-5);
        assert!(y[..8].iter().all(|&v| v == 0.5));
        assert!(y[8..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn norm_output_is_standardized() {
        let x = seq(40, 0.9);
        let (y, _) = norm_forward(&x, 2, &[1.0, 1.0], &[0.0, 0.0], 0.0);
        for c in 0..2 {
            let yc = &y[c * 20..(c + 1) * 20];
            let m: f64 = yc.iter().sum::<f64>() / 20.0;
            let v: f64 = yc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_max_routes_gradient_to_winner() {
        let x = vec![1.0, 5.0, 3.0, 2.0, 4.0, 0.0];
        let (m, arg) = channel_max_forward(&x, 2);
        assert_eq!(m, vec![2.0, 5.0, 3.0]);
        let dx = channel_max_backward(&[1.0, 1.0, 1.0], &arg, 2);
        assert_eq!(dx, vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn layout_check_names_the_key() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x.weight", vec![2, 2], vec![0.0; 4]);
        let mut b = ParamStore::<f32>::new();
        b.insert("x.weight", vec![4], vec![0.0; 4]);
        match a.check_layout(&b) {
            Err(Error::Checkpoint { key, .. }) => assert_eq!(key, "x.weight"),
            other => panic!("{other:?}"),
        }
    }
}
