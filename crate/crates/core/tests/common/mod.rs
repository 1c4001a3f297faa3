#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagereg::volume::{Shape3, Volume};
use stagereg::warp::DeformationField;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(rng: &mut ChaCha8Rng, shape: Shape3) -> Volume<f64> {
    Volume::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_field(rng: &mut ChaCha8Rng, shape: Shape3, amp: f64) -> DeformationField<f64> {
    DeformationField::from_fn(shape, |_, _, _| {
        [
            rng.gen_range(-amp..amp),
            rng.gen_range(-amp..amp),
            rng.gen_range(-amp..amp),
        ]
    })
}

/// `-1 + 2i/(n-1)`, or 0 on a one-voxel axis.
pub fn coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Border-clamped trilinear read at normalized `(x, y, z)`, written as plain
/// loops over the eight corners.
pub fn trilinear(v: &Volume<f64>, p: [f64; 3]) -> f64 {
    let dims = [v.shape.w, v.shape.h, v.shape.d];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let u = ((p[a] + 1.0) / 2.0 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let f = u.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(n - 1);
        t[a] = u - f;
    }
    let mut acc = 0.0;
    for cz in 0..2 {
        for cy in 0..2 {
            for cx in 0..2 {
                let x = if cx == 0 { lo[0] } else { hi[0] };
                let y = if cy == 0 { lo[1] } else { hi[1] };
                let z = if cz == 0 { lo[2] } else { hi[2] };
                let wx = if cx == 0 { 1.0 - t[0] } else { t[0] };
                let wy = if cy == 0 { 1.0 - t[1] } else { t[1] };
                let wz = if cz == 0 { 1.0 - t[2] } else { t[2] };
                acc += wx * wy * wz * v.at(z, y, x);
            }
        }
    }
    acc
}

/// Reference warp: `out(p) = v(g(p) + φ(p))`.
pub fn warp_oracle(v: &Volume<f64>, phi: &DeformationField<f64>) -> Vec<f64> {
    let s = v.shape;
    let mut out = Vec::with_capacity(s.len());
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let d = phi.at(s.index(z, y, x));
                out.push(trilinear(
                    v,
                    [
                        coord(x, s.w) + d[0],
                        coord(y, s.h) + d[1],
                        coord(z, s.d) + d[2],
                    ],
                ));
            }
        }
    }
    out
}

/// Forward difference of channel `c` along axis `a` (0 = x) at a voxel,
/// zero on the last slice of that axis.
pub fn forward_diff(
    phi: &DeformationField<f64>,
    c: usize,
    a: usize,
    z: usize,
    y: usize,
    x: usize,
) -> f64 {
    let s = phi.shape();
    let (mut z1, mut y1, mut x1) = (z, y, x);
    match a {
        0 if x + 1 < s.w => x1 += 1,
        1 if y + 1 < s.h => y1 += 1,
        2 if z + 1 < s.d => z1 += 1,
        _ => return 0.0,
    }
    phi.at(s.index(z1, y1, x1))[c] - phi.at(s.index(z, y, x))[c]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
