//! Preprocessing, pairing and synthetic data.
//!
//! The synthetic harness draws a chest-like phantom (torso cylinder, heart
//! ellipsoid, three vertical tubes) and a smooth random displacement composed
//! with a small rigid motion. A synthetic pair is built so the field that
//! registers `moving` onto `fixed` is exactly the generated one:
//! `fixed = moving ∘ φ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::resize_trilinear;
use crate::scalar::{lit, to_f64, Scalar};
use crate::volume::{LabelMask, Organ, Shape3, Volume};
use crate::warp::{
    apply_rigid_to_field, grid_sample, normalized_coord, sample_nearest, voxels_per_unit,
    DeformationField, Padding, RigidTransform, SampleMode,
};

pub const DEFAULT_WINDOW: (f64, f64) = (-160.0, 240.0);

/// Smallest edge a phantom may have; below this the tubes fall between voxels.
pub const MIN_PHANTOM_DIM: usize = 16;

const PHANTOM_STREAM: u64 = 1;
const FIELD_STREAM: u64 = 2;

/// Clip to `[low, high]`, map affinely onto `[-1, 1]`, then resize trilinearly.
pub fn preprocess<T: Scalar>(
    v: &Volume<T>,
    window_low: f64,
    window_high: f64,
    target: Shape3,
) -> Result<Volume<T>> {
    if !(window_low < window_high) {
        return Err(Error::validation(format!(
            "window low {window_low} must be below high {window_high}"
        )));
    }
    if target.is_empty() || !target.divisible_by(16) {
        return Err(Error::validation(format!(
            "target shape {target} must be divisible by 16"
        )));
    }
    let scale = 2.0 / (window_high - window_low);
    let windowed: Vec<T> = v
        .data
        .iter()
        .map(|&x| lit::<T>((to_f64(x).clamp(window_low, window_high) - window_low) * scale - 1.0))
        .collect();
    let data = resize_trilinear(&windowed, 1, v.shape, target);
    let spacing = [0, 1, 2].map(|a| {
        let (from, to) = (v.shape.axis_len(a), target.axis_len(a));
        if to > 1 {
            v.spacing[a] * (from.max(1) - 1) as f64 / (to - 1) as f64
        } else {
            v.spacing[a]
        }
    });
    Ok(Volume::new(target, data)?.with_geometry(spacing, v.origin))
}

/// Nearest-neighbour resize for label masks.
pub fn resize_mask(mask: &LabelMask, target: Shape3) -> LabelMask {
    let pick = |i: usize, from: usize, to: usize| -> usize {
        if to > 1 {
            ((i as f64 * (from - 1) as f64 / (to - 1) as f64).round() as usize).min(from - 1)
        } else {
            0
        }
    };
    let s = mask.shape;
    let mut data = Vec::with_capacity(target.len());
    for z in 0..target.d {
        for y in 0..target.h {
            for x in 0..target.w {
                data.push(mask.at(
                    pick(z, s.d, target.d),
                    pick(y, s.h, target.h),
                    pick(x, s.w, target.w),
                ));
            }
        }
    }
    LabelMask {
        shape: target,
        data,
        spacing: mask.spacing,
        origin: mask.origin,
    }
}

/// Ordered `(fixed, moving)` index pairs over `n` items, shuffled by `seed`.
///
/// The procedure: list every `(i, j)` with `i != j` in lexicographic order,
/// then run Fisher-Yates with a `ChaCha8Rng` seeded from `seed`: for `k` from
/// `len - 1` down to `1`, draw `r = rng.gen_range(0..=k)` and swap `k`, `r`.
pub fn pair_indices(n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::validation(format!(
            "pairing needs at least 2 volumes, got {n}"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in (1..pairs.len()).rev() {
        let r = rng.gen_range(0..=k);
        pairs.swap(k, r);
    }
    Ok(pairs)
}

pub fn make_pairs<T: Scalar>(
    volumes: &[Volume<T>],
    seed: u64,
) -> Result<Vec<(Volume<T>, Volume<T>)>> {
    Ok(pair_indices(volumes.len(), seed)?
        .into_iter()
        .map(|(f, m)| (volumes[f].clone(), volumes[m].clone()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub shape: Shape3,
    /// Peak magnitude of the non-rigid component, voxels.
    pub max_displacement: f64,
    /// Gaussian blur applied to the noise field, voxels.
    pub smoothness_sigma: f64,
    /// Each Euler angle is drawn from `[-range, range]` degrees.
    pub rigid_angle_range: f64,
    /// Each shift component is drawn from `[-range, range]` voxels.
    pub rigid_shift_range: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: Shape3::cube(32),
            max_displacement: 3.0,
            smoothness_sigma: 4.0,
            rigid_angle_range: 5.0,
            rigid_shift_range: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.min_dim() < 2 {
            return Err(Error::validation(format!(
                "synthetic shape {s} needs every dim >= 2"
            )));
        }
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::validation(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        finite_nonneg("max_displacement", self.max_displacement)?;
        finite_nonneg("smoothness_sigma", self.smoothness_sigma)?;
        finite_nonneg("rigid_angle_range", self.rigid_angle_range)?;
        finite_nonneg("rigid_shift_range", self.rigid_shift_range)?;
        if self.max_displacement >= s.min_dim() as f64 / 4.0 {
            return Err(Error::validation(format!(
                "max_displacement {} must be below min(shape)/4 = {}",
                self.max_displacement,
                s.min_dim() as f64 / 4.0
            )));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Axis-aligned ellipsoid in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Circular tube running along z in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tube {
    pub center_xy: [f64; 2],
    pub radius: f64,
    pub z_range: [f64; 2],
}

impl Tube {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center_xy[0];
        let dy = p[1] - self.center_xy[1];
        dx * dx + dy * dy <= self.radius * self.radius
            && p[2] >= self.z_range[0]
            && p[2] <= self.z_range[1]
    }
}

/// Analytic description of a phantom; points are normalized `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    /// Semi-axes of the elliptic torso cross-section in x and y.
    pub torso: [f64; 2],
    pub heart: Ellipsoid,
    pub aorta: Tube,
    pub trachea: Tube,
    pub esophagus: Tube,
    texture_phase: [f64; 3],
}

impl PhantomGeometry {
    pub fn in_torso(&self, p: [f64; 3]) -> bool {
        (p[0] / self.torso[0]).powi(2) + (p[1] / self.torso[1]).powi(2) <= 1.0
    }

    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        if self.heart.contains(p) {
            Organ::Heart.label()
        } else if self.aorta.contains(p) {
            Organ::Aorta.label()
        } else if self.trachea.contains(p) {
            Organ::Trachea.label()
        } else if self.esophagus.contains(p) {
            Organ::Esophagus.label()
        } else {
            0
        }
    }

    pub fn intensity_at(&self, p: [f64; 3]) -> f64 {
        if !self.in_torso(p) {
            return -1.0;
        }
        let base = match self.label_at(p) {
            1 => 0.35,
            2 => 0.8,
            3 => -0.95,
            4 => 0.05,
            _ => -0.3,
        };
        let ph = self.texture_phase;
        let texture = 0.04
            * ((3.0 * p[0] + ph[0]).sin() * (2.5 * p[1] + ph[1]).cos()
                + (2.0 * p[2] + ph[2]).sin());
        (base + texture).clamp(-1.0, 1.0)
    }
}

/// Jittered phantom layout; the nominal layout keeps all structures disjoint
/// and every tube at least one voxel wide on a 16³ grid.
pub fn phantom_geometry(cfg: &SynthConfig) -> PhantomGeometry {
    let mut rng = cfg.rng(PHANTOM_STREAM);
    let mut j = |amp: f64| rng.gen_range(-amp..=amp);
    let torso = [0.85 + j(0.03), 0.7 + j(0.03)];
    let heart = Ellipsoid {
        center: [0.05 + j(0.03), 0.22 + j(0.03), -0.25 + j(0.03)],
        radii: [
            0.3 * (1.0 + j(0.08)),
            0.25 * (1.0 + j(0.08)),
            0.3 * (1.0 + j(0.08)),
        ],
    };
    let aorta = Tube {
        center_xy: [-0.3 + j(0.03), -0.3 + j(0.03)],
        radius: 0.12 * (1.025 + j(0.075)),
        z_range: [-0.85 + j(0.05), 0.75 + j(0.05)],
    };
    let trachea = Tube {
        center_xy: [0.0 + j(0.03), 0.05 + j(0.03)],
        radius: 0.11 * (1.025 + j(0.075)),
        z_range: [0.2 + j(0.03), 0.95 + j(0.03)],
    };
    let esophagus = Tube {
        center_xy: [0.15 + j(0.03), -0.3 + j(0.03)],
        radius: 0.11 * (1.025 + j(0.075)),
        z_range: [-0.9 + j(0.05), 0.9 + j(0.05)],
    };
    let texture_phase = [
        j(std::f64::consts::PI),
        j(std::f64::consts::PI),
        j(std::f64::consts::PI),
    ];
    PhantomGeometry {
        torso,
        heart,
        aorta,
        trachea,
        esophagus,
        texture_phase,
    }
}

fn voxel_point(shape: Shape3, z: usize, y: usize, x: usize) -> [f64; 3] {
    [
        normalized_coord::<f64>(x, shape.w),
        normalized_coord::<f64>(y, shape.h),
        normalized_coord::<f64>(z, shape.d),
    ]
}

pub fn generate_phantom<T: Scalar>(cfg: &SynthConfig) -> Result<(Volume<T>, LabelMask)> {
    cfg.validate()?;
    if cfg.shape.min_dim() < MIN_PHANTOM_DIM {
        return Err(Error::validation(format!(
            "phantom shape {} too small to fit structures (min dim {MIN_PHANTOM_DIM})",
            cfg.shape
        )));
    }
    let geo = phantom_geometry(cfg);
    let s = cfg.shape;
    let vol = Volume::from_fn(s, |z, y, x| lit(geo.intensity_at(voxel_point(s, z, y, x))));
    let mut labels = Vec::with_capacity(s.len());
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                labels.push(geo.label_at(voxel_point(s, z, y, x)));
            }
        }
    }
    Ok((vol, LabelMask::new(s, labels)?))
}

/// Separable Gaussian blur with clamped borders, one channel at a time.
pub fn gaussian_smooth<T: Scalar>(
    data: &[T],
    channels: usize,
    shape: Shape3,
    sigma: f64,
) -> Vec<T> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let kernel: Vec<T> = raw.iter().map(|&k| lit(k / norm)).collect();
    let n = shape.len();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let len = shape.axis_len(axis) as isize;
        let stride = shape.axis_stride(axis);
        let mut next = vec![T::zero(); cur.len()];
        for c in 0..channels {
            let src = &cur[c * n..(c + 1) * n];
            let dst = &mut next[c * n..(c + 1) * n];
            for i in 0..n {
                let pos = ((i / stride) % len as usize) as isize;
                let base = i - pos as usize * stride;
                let mut acc = T::zero();
                for (k, &w) in kernel.iter().enumerate() {
                    let q = (pos + k as isize - radius).clamp(0, len - 1) as usize;
                    acc += w * src[base + q * stride];
                }
                dst[i] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// White noise scaled so its largest per-voxel norm is `max_displacement` voxels,
/// optionally blurred first. Returned in normalized units.
fn nonrigid_component<T: Scalar>(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    sigma: f64,
) -> DeformationField<T> {
    let s = cfg.shape;
    let n = s.len();
    let noise: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = gaussian_smooth(&noise, 3, s, sigma);
    let peak = (0..n)
        .map(|i| {
            (0..3)
                .map(|c| smooth[c * n + i].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    if cfg.max_displacement == 0.0 || peak == 0.0 {
        return DeformationField::zeros(s);
    }
    let k = cfg.max_displacement / peak;
    let data = (0..3 * n)
        .map(|j| lit(smooth[j] * k / voxels_per_unit(s.axis_len(j / n))))
        .collect();
    DeformationField::from_raw(s, data)
}

fn random_rigid<T: Scalar>(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> RigidTransform<T> {
    let mut draw = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let angles = [0; 3].map(|_| draw(cfg.rigid_angle_range));
    let shift = [0; 3].map(|_| draw(cfg.rigid_shift_range));
    let t = [0, 1, 2].map(|a| lit(shift[a] / voxels_per_unit(cfg.shape.axis_len(a))));
    RigidTransform::from_euler_degrees(angles, t)
}

/// Smooth random displacement composed with a random small rigid motion:
/// `φ = R(g + u) + t − g`, where `u` is blurred noise scaled to
/// `max_displacement` voxels. That bound applies to `u`; the rigid part adds
/// up to the configured angle and shift ranges on top.
pub fn synth_deformation<T: Scalar>(cfg: &SynthConfig) -> Result<DeformationField<T>> {
    cfg.validate()?;
    let mut rng = cfg.rng(FIELD_STREAM);
    let u = nonrigid_component::<T>(cfg, &mut rng, cfg.smoothness_sigma);
    let rigid = random_rigid::<T>(cfg, &mut rng);
    apply_rigid_to_field(&u, &rigid)
}

/// The un-blurred noise field `synth_deformation` starts from, at the same
/// amplitude and without the rigid part. Useful as a roughness reference.
pub fn synth_noise_field<T: Scalar>(cfg: &SynthConfig) -> Result<DeformationField<T>> {
    cfg.validate()?;
    let mut rng = cfg.rng(FIELD_STREAM);
    Ok(nonrigid_component::<T>(cfg, &mut rng, 0.0))
}

/// A phantom pair with known ground truth: `fixed = moving ∘ field`, so
/// `field` is the exact registration of `moving` onto `fixed`.
#[derive(Clone, Debug)]
pub struct SyntheticPair<T> {
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub fixed_mask: LabelMask,
    pub moving_mask: LabelMask,
    pub field: DeformationField<T>,
}

pub fn synthetic_pair<T: Scalar>(cfg: &SynthConfig) -> Result<SyntheticPair<T>> {
    let (moving, moving_mask) = generate_phantom::<T>(cfg)?;
    let field = synth_deformation::<T>(cfg)?;
    Ok(warp_into_pair(moving, moving_mask, field))
}

/// Builds a pair from an existing moving image and a chosen field.
pub fn warp_into_pair<T: Scalar>(
    moving: Volume<T>,
    moving_mask: LabelMask,
    field: DeformationField<T>,
) -> SyntheticPair<T> {
    let fixed =
        grid_sample(&moving, &field, SampleMode::Linear, Padding::Border).expect("aligned shapes");
    let labels = sample_nearest(
        &moving_mask.data,
        moving_mask.shape,
        &field,
        Padding::Border,
    );
    let fixed_mask = LabelMask {
        shape: moving_mask.shape,
        data: labels,
        spacing: moving_mask.spacing,
        origin: moving_mask.origin,
    };
    SyntheticPair {
        fixed,
        moving,
        fixed_mask,
        moving_mask,
        field,
    }
}
