//! The unsupervised objective.
//!
//! Per stage `s`: `sim_s + λ·(α·range_s + β·smooth_s)`, where `sim` is the MSE
//! between the stage's fixed image and the stage-warped moving image, `range`
//! is the mean absolute displacement and `smooth` the mean magnitude of the
//! forward-difference gradient. The total sums active stages with equal weight.
//! Values are accumulated in f64 whatever the scalar type.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};
use crate::volume::Volume;
use crate::warp::{spatial_gradient, spatial_gradient_adjoint, DeformationField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothNorm {
    /// Mean absolute value of the 9 partial derivatives.
    #[default]
    L1,
    /// Mean squared value of the 9 partial derivatives.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub smooth_norm: SmoothNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1e3,
            alpha: 10.0,
            beta: 1e2,
            smooth_norm: SmoothNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "loss weight {name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn range_weight(&self) -> f64 {
        self.lambda * self.alpha
    }

    pub fn smooth_weight(&self) -> f64 {
        self.lambda * self.beta
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

pub fn similarity_mse<T: Scalar>(fixed: &Volume<T>, warped: &Volume<T>) -> Result<f64> {
    if fixed.shape != warped.shape {
        return Err(Error::shape(format!(
            "similarity between {} and {}",
            fixed.shape, warped.shape
        )));
    }
    Ok(mse(&fixed.data, &warped.data))
}

fn mse<T: Scalar>(f: &[T], w: &[T]) -> f64 {
    let s: f64 = f
        .iter()
        .zip(w)
        .map(|(&a, &b)| {
            let d = to_f64(b) - to_f64(a);
            d * d
        })
        .sum();
    s / f.len().max(1) as f64
}

/// `∂ mse / ∂ warped`.
pub fn similarity_mse_grad<T: Scalar>(fixed: &[T], warped: &[T]) -> Vec<T> {
    let k: T = lit(2.0 / fixed.len().max(1) as f64);
    fixed
        .iter()
        .zip(warped)
        .map(|(&f, &w)| (w - f) * k)
        .collect()
}

pub fn range_loss<T: Scalar>(field: &DeformationField<T>) -> f64 {
    let d = field.data();
    d.iter().map(|&v| to_f64(v).abs()).sum::<f64>() / d.len().max(1) as f64
}

/// Subgradient of [`range_loss`], taking `sign(0) = 0`.
pub fn range_loss_grad<T: Scalar>(field: &DeformationField<T>) -> Vec<T> {
    let d = field.data();
    let k: T = lit(1.0 / d.len().max(1) as f64);
    d.iter().map(|&v| sign(v) * k).collect()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn smooth_loss<T: Scalar>(field: &DeformationField<T>, norm: SmoothNorm) -> f64 {
    let g = spatial_gradient(field);
    let total: f64 = match norm {
        SmoothNorm::L1 => g.data.iter().map(|&v| to_f64(v).abs()).sum(),
        SmoothNorm::L2 => g.data.iter().map(|&v| to_f64(v).powi(2)).sum(),
    };
    total / g.data.len().max(1) as f64
}

pub fn smooth_loss_grad<T: Scalar>(field: &DeformationField<T>, norm: SmoothNorm) -> Vec<T> {
    let g = spatial_gradient(field);
    let k: T = lit(1.0 / g.data.len().max(1) as f64);
    let outer: Vec<T> = match norm {
        SmoothNorm::L1 => g.data.iter().map(|&v| sign(v) * k).collect(),
        SmoothNorm::L2 => {
            let two = k + k;
            g.data.iter().map(|&v| v * two).collect()
        }
    };
    spatial_gradient_adjoint(field.shape(), &outer)
}

/// One stage's inputs to the objective.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a, T> {
    pub fixed: &'a Volume<T>,
    pub warped: &'a Volume<T>,
    pub field: &'a DeformationField<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTerms {
    pub active: bool,
    pub sim: f64,
    pub range: f64,
    pub smooth: f64,
}

impl StageTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        if !self.active {
            return 0.0;
        }
        let reg = (if w.alpha == 0.0 {
            0.0
        } else {
            w.alpha * self.range
        }) + (if w.beta == 0.0 {
            0.0
        } else {
            w.beta * self.smooth
        });
        self.sim + if w.lambda == 0.0 { 0.0 } else { w.lambda * reg }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Coarse to fine.
    pub stages: Vec<StageTerms>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    /// Term-wise mean over a batch; a stage counts as active if it is in any report.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let stages = reports.first().map_or(0, |r| r.stages.len());
        let mut out = LossReport {
            stages: vec![StageTerms::default(); stages],
            total: 0.0,
        };
        for r in reports {
            out.total += r.total / n;
            for (o, s) in out.stages.iter_mut().zip(&r.stages) {
                o.active |= s.active;
                o.sim += s.sim / n;
                o.range += s.range / n;
                o.smooth += s.smooth / n;
            }
        }
        out
    }

    pub fn similarity(&self) -> f64 {
        self.stages.iter().map(|s| s.sim).sum()
    }

    /// `step=… total=… s0.active=… s0.sim=… s0.range=… s0.smooth=… …`
    pub fn record_line(&self, step: u64) -> String {
        let mut out = format!("step={step} total={}", self.total);
        for (i, s) in self.stages.iter().enumerate() {
            let _ = write!(
                out,
                " s{i}.active={} s{i}.sim={} s{i}.range={} s{i}.smooth={}",
                s.active as u8, s.sim, s.range, s.smooth
            );
        }
        out
    }

    pub fn parse_record(line: &str) -> Result<BTreeMap<String, f64>> {
        line.split_whitespace()
            .map(|tok| {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::format("record", format!("token `{tok}` lacks `=`")))?;
                let v: f64 = v
                    .parse()
                    .map_err(|_| Error::format(k, format!("not a number: `{v}`")))?;
                Ok((k.to_string(), v))
            })
            .collect()
    }
}

fn check_stage<T: Scalar>(i: usize, s: &StageInput<'_, T>) -> Result<()> {
    if s.fixed.shape != s.warped.shape || s.fixed.shape != s.field.shape() {
        return Err(Error::shape(format!(
            "stage {i}: fixed {}, warped {}, field {} must agree",
            s.fixed.shape,
            s.warped.shape,
            s.field.shape()
        )));
    }
    Ok(())
}

pub fn total_loss<T: Scalar>(
    stages: &[StageInput<'_, T>],
    active: &[bool],
    weights: &LossWeights,
) -> Result<LossReport> {
    check_len(stages.len(), active.len(), "stage list vs activity mask")?;
    let mut terms = Vec::with_capacity(stages.len());
    for (i, (s, &on)) in stages.iter().zip(active).enumerate() {
        check_stage(i, s)?;
        terms.push(if on {
            StageTerms {
                active: true,
                sim: mse(&s.fixed.data, &s.warped.data),
                range: range_loss(s.field),
                smooth: smooth_loss(s.field, weights.smooth_norm),
            }
        } else {
            StageTerms::default()
        });
    }
    let total = terms.iter().map(|t| t.weighted(weights)).sum();
    Ok(LossReport {
        stages: terms,
        total,
    })
}

/// Gradients of the total with respect to one stage's warped image and field.
#[derive(Clone, Debug)]
pub struct StageGrads<T> {
    pub warped: Vec<T>,
    pub field: Vec<T>,
}

/// Per-stage gradients of [`total_loss`]; inactive stages get all-zero vectors.
pub fn total_loss_backward<T: Scalar>(
    stages: &[StageInput<'_, T>],
    active: &[bool],
    weights: &LossWeights,
) -> Result<Vec<StageGrads<T>>> {
    check_len(stages.len(), active.len(), "stage list vs activity mask")?;
    let mut out = Vec::with_capacity(stages.len());
    for (i, (s, &on)) in stages.iter().zip(active).enumerate() {
        check_stage(i, s)?;
        let n = s.fixed.shape.len();
        if !on {
            out.push(StageGrads {
                warped: vec![T::zero(); n],
                field: vec![T::zero(); 3 * n],
            });
            continue;
        }
        let warped = similarity_mse_grad(&s.fixed.data, &s.warped.data);
        let mut field = vec![T::zero(); 3 * n];
        let wr = weights.range_weight();
        if wr != 0.0 {
            let k: T = lit(wr);
            for (f, g) in field.iter_mut().zip(range_loss_grad(s.field)) {
                *f += g * k;
            }
        }
        let ws = weights.smooth_weight();
        if ws != 0.0 {
            let k: T = lit(ws);
            for (f, g) in field
                .iter_mut()
                .zip(smooth_loss_grad(s.field, weights.smooth_norm))
            {
                *f += g * k;
            }
        }
        out.push(StageGrads { warped, field });
    }
    Ok(out)
}
