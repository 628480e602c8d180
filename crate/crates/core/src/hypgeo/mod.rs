//! Poincaré-ball primitives.
//!
//! Points live in the open ball of radius `1/√c`, where `c > 0` is the
//! magnitude of the (negative) curvature. All operations are pure and
//! operate in double precision.
//!
//! | Operation | Formula |
//! |---|---|
//! | [`conformal_factor`] | `λ_x = 2 / (1 − c‖x‖²)` |
//! | [`mobius_add`] | `((1 + 2c⟨x,y⟩ + c‖y‖²)x + (1 − c‖x‖²)y) / (1 + 2c⟨x,y⟩ + c²‖x‖²‖y‖²)` |
//! | [`mobius_matvec`] | `tanh(‖Mx‖/‖x‖ · atanh(√c‖x‖)) · Mx / (√c‖Mx‖)` |
//! | [`exp0`] / [`log0`] | `tanh(√c‖v‖) v/(√c‖v‖)` / `atanh(√c‖y‖) y/(√c‖y‖)` |
//! | [`exp_at`] | `x ⊕ tanh(√c λ_x ‖v‖/2) v/(√c‖v‖)` |
//! | [`dist`] | `(2/√c) atanh(√c ‖(−x) ⊕ y‖)` |
//! | [`hnorm`] | `(2/√c) atanh(√c ‖x‖)` |
//!
//! Every operation returning a [`PoincarePoint`] projects its result back
//! into the safe ball `‖x‖ ≤ (1 − BALL_EPS)/√c`.

pub mod diff;

use thiserror::Error;

use crate::tensor::Tensor;

/// Radial safety margin, relative to the ball radius.
pub const BALL_EPS: f64 = 1e-5;
/// Upper clamp for `atanh` arguments.
pub const ATANH_MAX: f64 = 1.0 - 1e-7;
/// Floor for norms appearing in denominators.
pub const MIN_NORM: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("point outside the ball: c‖x‖² = {0}")]
    OutsideBall(f64),
    #[error("tangent vector is not based at the given point")]
    WrongBase,
}

/// Magnitude `c > 0` of the negative curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self, GeoError> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(GeoError::InvalidCurvature(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Radius `1/√c` of the ball.
    pub fn radius(self) -> f64 {
        1.0 / self.sqrt()
    }

    /// Largest admissible Euclidean norm inside the safe ball.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// A point of the Poincaré ball, always inside the safe radius.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl PoincarePoint {
    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    /// Projects an arbitrary finite vector into the safe ball.
    pub fn project(coords: Vec<f64>, curvature: Curvature) -> Result<Self, GeoError> {
        project_to_ball(coords, curvature)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn is_origin(&self) -> bool {
        self.coords.iter().all(|&v| v == 0.0)
    }

    /// Gyrogroup inverse `−x`.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base: PoincarePoint,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, base: PoincarePoint) -> Result<Self, GeoError> {
        if coords.len() != base.dim() {
            return Err(GeoError::Dimension(coords.len(), base.dim()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        Ok(Self { coords, base })
    }

    pub fn at_origin(coords: Vec<f64>, curvature: Curvature) -> Result<Self, GeoError> {
        let base = PoincarePoint::origin(coords.len(), curvature);
        Self::new(coords, base)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn base(&self) -> &PoincarePoint {
        &self.base
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn clamp_atanh_arg(u: f64) -> f64 {
    u.clamp(-ATANH_MAX, ATANH_MAX)
}

fn same_space(x: &PoincarePoint, y: &PoincarePoint) -> Result<(), GeoError> {
    if x.dim() != y.dim() {
        return Err(GeoError::Dimension(x.dim(), y.dim()));
    }
    if x.curvature != y.curvature {
        return Err(GeoError::CurvatureMismatch(x.curvature.0, y.curvature.0));
    }
    Ok(())
}

/// Radially clamps `v` to norm `(1 − BALL_EPS)/√c` when it reaches beyond it.
pub fn project_to_ball(mut v: Vec<f64>, c: Curvature) -> Result<PoincarePoint, GeoError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GeoError::NonFinite);
    }
    let n = norm(&v);
    let max = c.max_norm();
    if n >= max {
        let mut scale = max / n;
        let scaled = |s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let mut out = scaled(scale);
        // Rounding can leave the rescaled norm an ulp above the target.
        while norm(&out) > max {
            scale *= 1.0 - f64::EPSILON;
            out = scaled(scale);
        }
        v = out;
    }
    Ok(PoincarePoint {
        coords: v,
        curvature: c,
    })
}

/// Conformal factor `λ_x^c = 2/(1 − c‖x‖²)`.
pub fn conformal_factor(x: &PoincarePoint) -> Result<f64, GeoError> {
    let cx2 = x.curvature.0 * dot(&x.coords, &x.coords);
    if cx2 >= 1.0 {
        return Err(GeoError::OutsideBall(cx2));
    }
    Ok(2.0 / (1.0 - cx2))
}

fn mobius_add_raw(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let coef_x = 1.0 + 2.0 * c * xy + c * y2;
    let coef_y = 1.0 - c * x2;
    let denom = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter()
        .zip(y)
        .map(|(a, b)| (coef_x * a + coef_y * b) / denom)
        .collect()
}

/// Möbius (gyrovector) addition `x ⊕_c y`.
pub fn mobius_add(x: &PoincarePoint, y: &PoincarePoint) -> Result<PoincarePoint, GeoError> {
    same_space(x, y)?;
    project_to_ball(mobius_add_raw(&x.coords, &y.coords, x.curvature.0), x.curvature)
}

/// Möbius matrix-vector product `M^{⊗c}(x)` for `M` of shape `rows × dim(x)`.
pub fn mobius_matvec(m: &Tensor, x: &PoincarePoint) -> Result<PoincarePoint, GeoError> {
    if m.rank() != 2 || m.shape()[1] != x.dim() {
        return Err(GeoError::Dimension(m.cols(), x.dim()));
    }
    let c = x.curvature;
    let rows = m.shape()[0];
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Ok(PoincarePoint::origin(rows, c));
    }
    let mx = m.matvec(&x.coords).expect("shape checked");
    let mx_norm = norm(&mx);
    if mx_norm == 0.0 {
        return Ok(PoincarePoint::origin(rows, c));
    }
    let sc = c.sqrt();
    let inner = mx_norm / x_norm.max(MIN_NORM) * clamp_atanh_arg(sc * x_norm).atanh();
    let scale = inner.tanh() / (sc * mx_norm.max(MIN_NORM));
    project_to_ball(mx.into_iter().map(|v| v * scale).collect(), c)
}

/// Exponential map at the origin.
pub fn exp0(v: &[f64], c: Curvature) -> Result<PoincarePoint, GeoError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GeoError::NonFinite);
    }
    let n = norm(v);
    if n == 0.0 {
        return Ok(PoincarePoint::origin(v.len(), c));
    }
    let sc = c.sqrt();
    let scale = (sc * n).tanh() / (sc * n.max(MIN_NORM));
    project_to_ball(v.iter().map(|x| x * scale).collect(), c)
}

/// Logarithmic map at the origin.
pub fn log0(y: &PoincarePoint) -> TangentVector {
    let c = y.curvature;
    let n = y.norm();
    let coords = if n == 0.0 {
        vec![0.0; y.dim()]
    } else {
        let sc = c.sqrt();
        let scale = clamp_atanh_arg(sc * n).atanh() / (sc * n.max(MIN_NORM));
        y.coords.iter().map(|v| v * scale).collect()
    };
    TangentVector {
        coords,
        base: PoincarePoint::origin(y.dim(), c),
    }
}

/// Exponential map at an arbitrary base point, composed through Möbius addition.
pub fn exp_at(x: &PoincarePoint, v: &TangentVector) -> Result<PoincarePoint, GeoError> {
    if v.base.dim() != x.dim() {
        return Err(GeoError::Dimension(v.base.dim(), x.dim()));
    }
    if v.base != *x {
        return Err(GeoError::WrongBase);
    }
    let n = norm(&v.coords);
    if n == 0.0 {
        return Ok(x.clone());
    }
    let c = x.curvature;
    let sc = c.sqrt();
    let lambda = conformal_factor(x)?;
    let scale = (sc * lambda * n / 2.0).tanh() / (sc * n.max(MIN_NORM));
    let step: Vec<f64> = v.coords.iter().map(|a| a * scale).collect();
    project_to_ball(mobius_add_raw(&x.coords, &step, c.0), c)
}

/// Geodesic distance.
pub fn dist(x: &PoincarePoint, y: &PoincarePoint) -> Result<f64, GeoError> {
    same_space(x, y)?;
    let diff = mobius_add(&x.neg(), y)?;
    let sc = x.curvature.sqrt();
    Ok(2.0 / sc * clamp_atanh_arg(sc * diff.norm()).atanh())
}

/// Hyperbolic norm, the geodesic distance to the origin.
pub fn hnorm(x: &PoincarePoint) -> f64 {
    let sc = x.curvature.sqrt();
    2.0 / sc * clamp_atanh_arg(sc * x.norm()).atanh()
}
