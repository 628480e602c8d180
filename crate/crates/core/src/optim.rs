//! Riemannian SGD for ball parameters, momentum SGD for everything else.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypgeo::{self, GeoError, PoincarePoint, TangentVector};
use crate::nn::{ModelState, ParamKind, PARAM_NAMES};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("missing gradient for `{0}`")]
    MissingGradient(&'static str),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Geometry(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Euclidean group only.
    pub momentum: f64,
    /// Euclidean group only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling applied before either rule.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 60,
            batch_size: 16,
            seed: 0,
            clip_norm: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return Err(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }

    /// Cosine-decayed rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        0.5 * self.lr * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos())
    }
}

/// One retraction step along the Riemannian gradient `grad_e / λ_p²`.
pub fn riemannian_sgd_step(p: &PoincarePoint, grad_e: &[f64], lr: f64) -> Result<PoincarePoint, OptimError> {
    if grad_e.iter().any(|g| !g.is_finite()) {
        return Err(GeoError::NonFinite.into());
    }
    let lambda = hypgeo::conformal_factor(p)?;
    let scale = -lr / (lambda * lambda);
    let v = TangentVector::new(grad_e.iter().map(|g| g * scale).collect(), p.clone())?;
    Ok(hypgeo::exp_at(p, &v)?)
}

/// `velocity ← momentum·velocity + grad + weight_decay·w; w ← w − lr·velocity`.
pub fn euclidean_sgd_step(
    w: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), ShapeError> {
    for other in [grad, &*velocity] {
        if !w.same_shape(other) {
            return Err(ShapeError::Mismatch {
                op: "sgd",
                lhs: w.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    for ((wi, gi), vi) in w
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *vi = momentum * *vi + gi + weight_decay * *wi;
        *wi -= lr * *vi;
    }
    Ok(())
}

/// What [`Optimizer::step_all`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Rule applied to each parameter, in canonical order.
    pub rules: Vec<(&'static str, ParamKind)>,
    /// Parameters left untouched because of non-finite gradients.
    pub skipped: Vec<&'static str>,
}

/// Momentum buffers and the rule dispatch for a [`ModelState`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    velocities: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, state: &ModelState) -> Self {
        let velocities = state.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { cfg, velocities }
    }

    /// Clips `grads` to the global norm ceiling and applies the rule of
    /// each parameter at rate `lr`.
    pub fn step_all(
        &mut self,
        state: &mut ModelState,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<StepReport, OptimError> {
        if grads.len() != PARAM_NAMES.len() {
            return Err(OptimError::MissingGradient(PARAM_NAMES[grads.len().min(PARAM_NAMES.len() - 1)]));
        }
        let mut finite = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().ok_or(OptimError::MissingGradient(PARAM_NAMES[i]))?;
            finite.push(g.is_finite());
        }
        let grad_norm = grads
            .iter()
            .zip(&finite)
            .filter(|(_, ok)| **ok)
            .map(|(g, _)| g.as_ref().map_or(0.0, Tensor::sum_squares))
            .sum::<f64>()
            .sqrt();
        let clipped = grad_norm > self.cfg.clip_norm;
        let factor = if clipped { self.cfg.clip_norm / grad_norm } else { 1.0 };

        let kinds: Vec<ParamKind> = (0..grads.len()).map(|i| state.kind(i)).collect();
        let curvature = state.curvature;
        let mut report = StepReport {
            grad_norm,
            clipped,
            rules: Vec::with_capacity(grads.len()),
            skipped: Vec::new(),
        };
        for (i, param) in state.params_mut().into_iter().enumerate() {
            let name = PARAM_NAMES[i];
            if !finite[i] {
                log::warn!("non-finite gradient for `{name}`; update skipped");
                report.skipped.push(name);
                continue;
            }
            let mut g = grads[i].clone().expect("checked above");
            if clipped {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            match kinds[i] {
                ParamKind::Euclidean => euclidean_sgd_step(
                    param,
                    &g,
                    &mut self.velocities[i],
                    lr,
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                )?,
                ParamKind::Manifold => {
                    let p = PoincarePoint::project(param.data().to_vec(), curvature)?;
                    let next = riemannian_sgd_step(&p, g.data(), lr)?;
                    param.data_mut().copy_from_slice(next.coords());
                }
            }
            report.rules.push((name, kinds[i]));
        }
        Ok(report)
    }
}
