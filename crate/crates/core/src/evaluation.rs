//! Overlap and field-recovery metrics, timing, the (α, β) grid search and
//! slice overlays.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::ParamStore;
use crate::scalar::{to_f64, Scalar};
use crate::training::{train, TrainConfig, TrainPair};
use crate::volume::{LabelMask, Organ, Shape3, Volume};
use crate::warp::{jacobian_determinant, sample_nearest, DeformationField, Padding};

/// `2|A∩B| / (|A|+|B|)` over voxels carrying `label`; 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "dice between {} and {}",
            a.shape, b.shape
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Dice of each organ, in [`Organ::ALL`] order.
pub fn organ_dice(a: &LabelMask, b: &LabelMask) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, organ) in out.iter_mut().zip(Organ::ALL) {
        *o = dice(a, b, organ.label())?;
    }
    Ok(out)
}

pub fn mean4(v: &[f64; 4]) -> f64 {
    v.iter().sum::<f64>() / 4.0
}

/// Nearest-neighbour warp of labels, clamping at the border.
pub fn warp_mask<T: Scalar>(mask: &LabelMask, field: &DeformationField<T>) -> Result<LabelMask> {
    if mask.shape != field.shape() {
        return Err(Error::shape(format!(
            "mask {} vs field {}",
            mask.shape,
            field.shape()
        )));
    }
    let data = sample_nearest(&mask.data, mask.shape, field, Padding::Border);
    Ok(LabelMask {
        shape: mask.shape,
        data,
        spacing: mask.spacing,
        origin: mask.origin,
    })
}

/// Mean per-voxel Euclidean distance between two fields, in voxels.
pub fn endpoint_error<T: Scalar>(
    pred: &DeformationField<T>,
    truth: &DeformationField<T>,
) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "fields {} and {}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.shape().len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (pred.voxel_displacement(i), truth.voxel_displacement(i));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / n.max(1) as f64)
}

/// Share of voxels whose Jacobian determinant is `<= 0`.
pub fn fold_fraction<T: Scalar>(field: &DeformationField<T>) -> Result<f64> {
    let j = jacobian_determinant(field)?;
    let folded = j.data.iter().filter(|&&v| v <= T::zero()).count();
    Ok(folded as f64 / j.data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Heart, aorta, trachea, esophagus.
    pub dice: [f64; 4],
    pub dice_mean: f64,
    /// Only when a ground-truth field is known.
    pub epe_voxels: Option<f64>,
    pub time_sec: f64,
    pub fold_fraction: f64,
}

/// One registration pair with the masks (and, for synthetic data, the true
/// field) needed to score it.
#[derive(Clone, Debug)]
pub struct EvalPair<T> {
    pub fixed_id: String,
    pub moving_id: String,
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub fixed_mask: LabelMask,
    pub moving_mask: LabelMask,
    pub true_field: Option<DeformationField<T>>,
}

impl<T: Scalar> EvalPair<T> {
    pub fn train_pair(&self) -> TrainPair<T> {
        TrainPair::new(self.fixed.clone(), self.moving.clone())
    }

    /// Dice of the masks before registration.
    pub fn unregistered_dice(&self) -> Result<[f64; 4]> {
        organ_dice(&self.moving_mask, &self.fixed_mask)
    }
}

/// Registers `moving` to `fixed`, warps the moving mask by the final field
/// and scores it. The clock covers the forward pass and the mask warp only.
pub fn evaluate_pair<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    pair: &EvalPair<T>,
) -> Result<MetricsReport> {
    pair.fixed_mask.check_aligned(&pair.fixed)?;
    pair.moving_mask.check_aligned(&pair.moving)?;
    let start = Instant::now();
    let out = net.infer(params, &pair.fixed, &pair.moving)?;
    let warped = warp_mask(&pair.moving_mask, out.final_field())?;
    let time_sec = start.elapsed().as_secs_f64();
    let phi = out.final_field();
    let dice = organ_dice(&warped, &pair.fixed_mask)?;
    let epe_voxels = pair
        .true_field
        .as_ref()
        .map(|t| endpoint_error(phi, t))
        .transpose()?;
    Ok(MetricsReport {
        dice,
        dice_mean: mean4(&dice),
        epe_voxels,
        time_sec,
        fold_fraction: fold_fraction(phi)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub fixed_id: String,
    pub moving_id: String,
    pub metrics: MetricsReport,
}

pub fn evaluate_dataset<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    pairs: &[EvalPair<T>],
) -> Result<Vec<PairMetrics>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairMetrics {
                fixed_id: p.fixed_id.clone(),
                moving_id: p.moving_id.clone(),
                metrics: evaluate_pair(net, params, p)?,
            })
        })
        .collect()
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "fixed_id",
    "moving_id",
    "dice_heart",
    "dice_aorta",
    "dice_trachea",
    "dice_esophagus",
    "dice_mean",
    "epe_voxels",
    "time_sec",
    "fold_fraction",
];

/// One row per pair; `epe_voxels` is empty when there is no ground truth.
pub fn write_metrics_csv(path: &Path, rows: &[PairMetrics]) -> Result<()> {
    let err = |e: csv::Error| Error::format("metrics csv", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(METRICS_COLUMNS).map_err(err)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![r.fixed_id.clone(), r.moving_id.clone()];
        rec.extend(m.dice.iter().map(|d| d.to_string()));
        rec.push(m.dice_mean.to_string());
        rec.push(m.epe_voxels.map_or(String::new(), |e| e.to_string()));
        rec.push(m.time_sec.to_string());
        rec.push(m.fold_fraction.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean Dice over pairs.
pub fn mean_dice(rows: &[PairMetrics]) -> f64 {
    rows.iter().map(|r| r.metrics.dice_mean).sum::<f64>() / rows.len().max(1) as f64
}

pub const DEFAULT_ALPHAS: [f64; 3] = [1.0, 10.0, 100.0];
pub const DEFAULT_BETAS: [f64; 3] = [10.0, 100.0, 1000.0];

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    /// NaN when training diverged.
    pub mean_dice: f64,
    pub final_loss: f64,
    pub status: String,
}

/// Trains a fresh model per `(α, β)` from `base` and scores it on `eval`.
/// Divergent cells are recorded as NaN and the search continues.
pub fn grid_search<T: Scalar>(
    alphas: &[f64],
    betas: &[f64],
    base: &TrainConfig,
    train_pairs: &[TrainPair<T>],
    eval: &[EvalPair<T>],
) -> Result<Vec<GridCell>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::validation(
            "grid search needs at least one alpha and one beta",
        ));
    }
    if eval.is_empty() {
        return Err(Error::validation("grid search needs evaluation pairs"));
    }
    let net = Network::new(base.network.clone())?;
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let mut cfg = base.clone();
            cfg.weights.alpha = alpha;
            cfg.weights.beta = beta;
            let cell = match train(cfg, train_pairs, None) {
                Ok(outcome) => {
                    let rows = evaluate_dataset(&net, &outcome.checkpoint.params, eval)?;
                    let final_loss = outcome.history.last().map_or(f64::NAN, |r| r.report.total);
                    GridCell {
                        alpha,
                        beta,
                        mean_dice: mean_dice(&rows),
                        final_loss,
                        status: "ok".into(),
                    }
                }
                Err(Error::Divergence { step, .. }) => GridCell {
                    alpha,
                    beta,
                    mean_dice: f64::NAN,
                    final_loss: f64::NAN,
                    status: format!("diverged at step {step}"),
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn write_grid_csv(path: &Path, cells: &[GridCell]) -> Result<()> {
    let err = |e: csv::Error| Error::format("grid csv", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["alpha", "beta", "mean_dice", "final_loss", "status"])
        .map_err(err)?;
    for c in cells {
        w.write_record([
            c.alpha.to_string(),
            c.beta.to_string(),
            c.mean_dice.to_string(),
            c.final_loss.to_string(),
            c.status.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The cell with the highest mean Dice, ignoring NaN cells.
pub fn best_cell(cells: &[GridCell]) -> Option<&GridCell> {
    cells
        .iter()
        .filter(|c| c.mean_dice.is_finite())
        .max_by(|a, b| a.mean_dice.total_cmp(&b.mean_dice))
}

/// Contour colors: heart green, aorta yellow, trachea blue, esophagus red.
pub const ORGAN_COLORS: [[u8; 3]; 4] = [[0, 255, 0], [255, 255, 0], [0, 0, 255], [255, 0, 0]];

/// Axis index as used by fields: 0 = x, 1 = y, 2 = z.
fn slice_dims(shape: Shape3, axis: usize) -> Result<(usize, usize)> {
    Ok(match axis {
        0 => (shape.d, shape.h),
        1 => (shape.d, shape.w),
        2 => (shape.h, shape.w),
        _ => {
            return Err(Error::validation(format!(
                "axis must be 0, 1 or 2, got {axis}"
            )))
        }
    })
}

fn slice_index(shape: Shape3, axis: usize, k: usize, row: usize, col: usize) -> usize {
    match axis {
        0 => shape.index(row, col, k),
        1 => shape.index(row, k, col),
        _ => shape.index(k, row, col),
    }
}

/// Renders one slice as RGB: gray is the mean of `fixed` and `warped` under a
/// shared intensity range, and every mask's organ boundaries are drawn in the
/// organ color (later masks on top).
pub fn render_overlay<T: Scalar>(
    fixed: &Volume<T>,
    warped: &Volume<T>,
    masks: &[&LabelMask],
    axis: usize,
    k: usize,
) -> Result<(u32, u32, Vec<u8>)> {
    let shape = fixed.shape;
    if warped.shape != shape {
        return Err(Error::shape(format!(
            "fixed {shape} vs warped {}",
            warped.shape
        )));
    }
    for m in masks {
        m.check_aligned(fixed)?;
    }
    let (rows, cols) = slice_dims(shape, axis)?;
    let depth = shape.axis_len(axis);
    if k >= depth {
        return Err(Error::validation(format!(
            "slice {k} out of range for axis {axis} with {depth} slices"
        )));
    }
    let (lo, hi) = fixed
        .data
        .iter()
        .chain(&warped.data)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(to_f64(v)), hi.max(to_f64(v)))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let i = slice_index(shape, axis, k, r, c);
            let v = 0.5 * (to_f64(fixed.data[i]) + to_f64(warped.data[i]));
            let g = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    for m in masks {
        let at = |r: usize, c: usize| m.data[slice_index(shape, axis, k, r, c)];
        for r in 0..rows {
            for c in 0..cols {
                let l = at(r, c);
                if l == 0 {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == rows
                    || c + 1 == cols
                    || at(r - 1, c) != l
                    || at(r + 1, c) != l
                    || at(r, c - 1) != l
                    || at(r, c + 1) != l;
                if edge {
                    let o = (r * cols + c) * 3;
                    rgb[o..o + 3].copy_from_slice(&ORGAN_COLORS[l as usize - 1]);
                }
            }
        }
    }
    Ok((cols as u32, rows as u32, rgb))
}

/// Writes [`render_overlay`] as a PNG.
pub fn export_overlay<T: Scalar>(
    fixed: &Volume<T>,
    warped: &Volume<T>,
    masks: &[&LabelMask],
    axis: usize,
    k: usize,
    path: &Path,
) -> Result<()> {
    let (w, h, rgb) = render_overlay(fixed, warped, masks, axis, k)?;
    image::save_buffer_with_format(
        path,
        &rgb,
        w,
        h,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format("overlay", other.to_string()),
    })
}
