//! Separable trilinear resizing and average pooling over channel-major data.
//!
//! Resizing aligns corners: output index `i` on an axis of length `m` reads
//! source position `i * (n - 1) / (m - 1)`, so the extreme voxels of both grids
//! coincide. That is the convention under which normalized `[-1, 1]`
//! coordinates mean the same physical location at every resolution.

use crate::scalar::{lit, Scalar};
use crate::volume::Shape3;

struct Taps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn taps<T: Scalar>(src: usize, dst: usize) -> Taps<T> {
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for i in 0..dst {
        let s = if dst > 1 {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        };
        let l = (s.floor() as usize).min(src - 1);
        let h = (l + 1).min(src - 1);
        lo.push(l);
        hi.push(h);
        frac.push(lit(s - l as f64));
    }
    Taps { lo, hi, frac }
}

fn with_axis(shape: Shape3, axis: usize, n: usize) -> Shape3 {
    match axis {
        0 => Shape3::new(shape.d, shape.h, n),
        1 => Shape3::new(shape.d, n, shape.w),
        _ => Shape3::new(n, shape.h, shape.w),
    }
}

/// Splits a shape into `(outer, axis, inner)` extents around a coordinate axis.
fn split(shape: Shape3, axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (shape.d * shape.h, shape.w, 1),
        1 => (shape.d, shape.h, shape.w),
        _ => (1, shape.d, shape.h * shape.w),
    }
}

fn resize_axis<T: Scalar>(
    src: &[T],
    channels: usize,
    shape: Shape3,
    axis: usize,
    n: usize,
) -> Vec<T> {
    let (outer, len, inner) = split(shape, axis);
    let tp = taps::<T>(len, n);
    let mut out = vec![T::zero(); channels * outer * n * inner];
    for co in 0..channels * outer {
        let s = &src[co * len * inner..(co + 1) * len * inner];
        let o = &mut out[co * n * inner..(co + 1) * n * inner];
        for i in 0..n {
            let (l, h, f) = (tp.lo[i], tp.hi[i], tp.frac[i]);
            let g = T::one() - f;
            let (sl, sh) = (
                &s[l * inner..(l + 1) * inner],
                &s[h * inner..(h + 1) * inner],
            );
            for ((dst, &a), &b) in o[i * inner..(i + 1) * inner].iter_mut().zip(sl).zip(sh) {
                *dst = a * g + b * f;
            }
        }
    }
    out
}

fn resize_axis_adjoint<T: Scalar>(
    grad: &[T],
    channels: usize,
    src_shape: Shape3,
    axis: usize,
    n: usize,
) -> Vec<T> {
    let (outer, len, inner) = split(src_shape, axis);
    let tp = taps::<T>(len, n);
    let mut out = vec![T::zero(); channels * outer * len * inner];
    for co in 0..channels * outer {
        let g = &grad[co * n * inner..(co + 1) * n * inner];
        let o = &mut out[co * len * inner..(co + 1) * len * inner];
        for i in 0..n {
            let (l, h, f) = (tp.lo[i], tp.hi[i], tp.frac[i]);
            let w = T::one() - f;
            for k in 0..inner {
                let gi = g[i * inner + k];
                o[l * inner + k] += gi * w;
                o[h * inner + k] += gi * f;
            }
        }
    }
    out
}

/// Trilinear resize of `channels` stacked volumes from `from` to `to`.
pub fn resize_trilinear<T: Scalar>(src: &[T], channels: usize, from: Shape3, to: Shape3) -> Vec<T> {
    assert_eq!(src.len(), channels * from.len(), "source length");
    let mut cur = src.to_vec();
    let mut shape = from;
    for axis in 0..3 {
        let n = to.axis_len(axis);
        if shape.axis_len(axis) != n {
            cur = resize_axis(&cur, channels, shape, axis, n);
            shape = with_axis(shape, axis, n);
        }
    }
    cur
}

/// Adjoint of [`resize_trilinear`]: maps a gradient on the `to` grid back onto `from`.
pub fn resize_trilinear_adjoint<T: Scalar>(
    grad: &[T],
    channels: usize,
    from: Shape3,
    to: Shape3,
) -> Vec<T> {
    assert_eq!(grad.len(), channels * to.len(), "gradient length");
    // Forward passes run x, y, z; the adjoint runs them in reverse.
    let mut shapes = vec![from];
    for axis in 0..3 {
        let last = *shapes.last().expect("non-empty");
        shapes.push(with_axis(last, axis, to.axis_len(axis)));
    }
    let mut cur = grad.to_vec();
    for axis in (0..3).rev() {
        let src_shape = shapes[axis];
        let n = to.axis_len(axis);
        if src_shape.axis_len(axis) != n {
            cur = resize_axis_adjoint(&cur, channels, src_shape, axis, n);
        }
    }
    cur
}

/// 2×2×2 block mean. Every dimension of `shape` must be even.
pub fn avg_pool2<T: Scalar>(src: &[T], channels: usize, shape: Shape3) -> (Vec<T>, Shape3) {
    assert!(
        shape.d.is_multiple_of(2) && shape.h.is_multiple_of(2) && shape.w.is_multiple_of(2),
        "pooling needs even dimensions, got {shape}"
    );
    let out_shape = shape.halved(1);
    let eighth: T = lit(0.125);
    let n_in = shape.len();
    let mut out = Vec::with_capacity(channels * out_shape.len());
    for c in 0..channels {
        let s = &src[c * n_in..(c + 1) * n_in];
        for z in 0..out_shape.d {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut acc = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = shape.index(2 * z + dz, 2 * y + dy, 2 * x);
                            acc += s[row] + s[row + 1];
                        }
                    }
                    out.push(acc * eighth);
                }
            }
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identity_resize_is_exact() {
        let s = Shape3::new(3, 4, 5);
        let src: Vec<f64> = (0..2 * s.len()).map(|i| (i as f64).sin()).collect();
        assert_eq!(resize_trilinear(&src, 2, s, s), src);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let from = Shape3::new(2, 3, 4);
        let to = Shape3::new(5, 4, 7);
        let x: Vec<f64> = (0..2 * from.len())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let y: Vec<f64> = (0..2 * to.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let ax = resize_trilinear(&x, 2, from, to);
        let aty = resize_trilinear_adjoint(&y, 2, from, to);
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);
    }

    #[test]
    fn corners_align_between_grids() {
        let from = Shape3::new(2, 2, 2);
        let to = Shape3::new(3, 5, 4);
        let src: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let out = resize_trilinear(&src, 1, from, to);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[to.len() - 1], 7.0);
        assert_eq!(out[to.index(0, 0, 3)], 1.0);
    }

    #[test]
    fn pooling_is_block_mean() {
        let s = Shape3::cube(2);
        let src = vec![1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];
        let (out, shape) = avg_pool2::<f64>(&src, 1, s);
        assert_eq!(shape, Shape3::cube(1));
        assert_eq!(out, vec![0.0]);
    }
}
