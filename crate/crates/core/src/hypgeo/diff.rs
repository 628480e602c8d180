//! Graph-recorded versions of the ball operations.
//!
//! Each function mirrors its pure counterpart in the parent module with the
//! same clamps and projection, so values agree and gradients are taken of
//! exactly the function that is evaluated.

use crate::autodiff::{AutodiffError, Var};
use crate::tensor::Tensor;

use super::{Curvature, MIN_NORM};

type Result<T> = std::result::Result<T, AutodiffError>;

/// The space embeddings live in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Poincare(Curvature),
    /// Flat-space ablation: Möbius operations become their linear analogues.
    Euclidean,
}

fn zeros_like<'g>(x: Var<'g>, len: usize) -> Result<Var<'g>> {
    x.graph().constant(Tensor::zeros(&[len]))
}

/// Radially clamps into the safe ball.
pub fn project<'g>(x: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let n = x.norm()?;
    let max = c.max_norm();
    if n.item()? >= max {
        let scale = n.clamp_min(MIN_NORM)?;
        x.div(scale)?.scale(max)
    } else {
        Ok(x)
    }
}

pub fn exp0<'g>(v: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let n = v.norm()?;
    if n.item()? == 0.0 {
        return Ok(v);
    }
    let sc = c.sqrt();
    let arg = n.clamp_min(MIN_NORM)?.scale(sc)?;
    let factor = arg.tanh()?.div(arg)?;
    project(v.mul(factor)?, c)
}

pub fn log0<'g>(y: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let n = y.norm()?;
    if n.item()? == 0.0 {
        return Ok(y);
    }
    let sc = c.sqrt();
    let arg = n.clamp_min(MIN_NORM)?.scale(sc)?;
    let factor = arg.atanh()?.div(arg)?;
    y.mul(factor)
}

pub fn mobius_add<'g>(x: Var<'g>, y: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let g = x.graph();
    let cv = c.value();
    let one = g.scalar(1.0)?;
    let xy = x.dot(y)?;
    let x2 = x.dot(x)?;
    let y2 = y.dot(y)?;
    let base = one.add(xy.scale(2.0 * cv)?)?;
    let coef_x = base.add(y2.scale(cv)?)?;
    let coef_y = one.sub(x2.scale(cv)?)?;
    let denom = base.add(x2.mul(y2)?.scale(cv * cv)?)?;
    let num = x.mul(coef_x)?.add(y.mul(coef_y)?)?;
    project(num.div(denom)?, c)
}

/// `M^{⊗c}(x)` for a rows×dim matrix `m`.
pub fn mobius_matvec<'g>(m: Var<'g>, x: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let rows = m.shape()?[0];
    let xn = x.norm()?;
    if xn.item()? == 0.0 {
        return zeros_like(x, rows);
    }
    let mx = m.matmul(x)?;
    let mxn = mx.norm()?;
    if mxn.item()? == 0.0 {
        return zeros_like(x, rows);
    }
    let sc = c.sqrt();
    let xn = xn.clamp_min(MIN_NORM)?;
    let mxn = mxn.clamp_min(MIN_NORM)?;
    let inner = mxn.div(xn)?.mul(xn.scale(sc)?.atanh()?)?;
    let factor = inner.tanh()?.div(mxn.scale(sc)?)?;
    project(mx.mul(factor)?, c)
}

/// Geodesic distance `(2/√c) atanh(√c ‖(−x) ⊕ y‖)`.
pub fn dist<'g>(x: Var<'g>, y: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let diff = mobius_add(x.neg()?, y, c)?;
    let sc = c.sqrt();
    diff.norm()?.scale(sc)?.atanh()?.scale(2.0 / sc)
}

/// Hyperbolic norm `(2/√c) atanh(√c ‖x‖)`.
pub fn hnorm<'g>(x: Var<'g>, c: Curvature) -> Result<Var<'g>> {
    let sc = c.sqrt();
    x.norm()?.scale(sc)?.atanh()?.scale(2.0 / sc)
}

impl Geometry {
    pub fn curvature(&self) -> Option<Curvature> {
        match self {
            Geometry::Poincare(c) => Some(*c),
            Geometry::Euclidean => None,
        }
    }

    /// Lifts a Euclidean feature vector into the space.
    pub fn lift<'g>(&self, v: Var<'g>) -> Result<Var<'g>> {
        match self {
            Geometry::Poincare(c) => exp0(v, *c),
            Geometry::Euclidean => Ok(v),
        }
    }

    /// Chart back to the tangent space at the origin.
    pub fn chart<'g>(&self, y: Var<'g>) -> Result<Var<'g>> {
        match self {
            Geometry::Poincare(c) => log0(y, *c),
            Geometry::Euclidean => Ok(y),
        }
    }

    /// Affine layer `M ⊗ x ⊕ b` (or `Mx + b` in flat space).
    pub fn affine<'g>(&self, m: Var<'g>, x: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        match self {
            Geometry::Poincare(c) => mobius_add(mobius_matvec(m, x, *c)?, b, *c),
            Geometry::Euclidean => m.matmul(x)?.add(b),
        }
    }

    pub fn dist<'g>(&self, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
        match self {
            Geometry::Poincare(c) => dist(x, y, *c),
            Geometry::Euclidean => x.sub(y)?.norm(),
        }
    }

    pub fn norm<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            Geometry::Poincare(c) => hnorm(x, *c),
            Geometry::Euclidean => x.norm(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheck, Graph};
    use crate::hypgeo::{self, PoincarePoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_in_ball(rng: &mut impl Rng, dim: usize, c: Curvature) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = hypgeo::norm(&v);
        let r = rng.random_range(0.05..0.9) * c.radius();
        v.iter().map(|x| x / n * r).collect()
    }

    fn run1(f: impl for<'g> Fn(Var<'g>) -> Result<Var<'g>>, x: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let v = g.constant(Tensor::vector(x.to_vec())).unwrap();
        f(v).unwrap().value().unwrap().into_data()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn values_agree_with_pure_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &cv in &[1.0, 0.5, 0.1, 0.01] {
            let c = Curvature::new(cv).unwrap();
            for _ in 0..50 {
                let x = rand_in_ball(&mut rng, 4, c);
                let y = rand_in_ball(&mut rng, 4, c);
                let px = PoincarePoint::project(x.clone(), c).unwrap();
                let py = PoincarePoint::project(y.clone(), c).unwrap();

                close(&run1(|v| exp0(v, c), &x), hypgeo::exp0(&x, c).unwrap().coords(), 1e-12);
                close(&run1(|v| log0(v, c), &x), hypgeo::log0(&px).coords(), 1e-12);

                let g = Graph::new();
                let (vx, vy) = (
                    g.constant(Tensor::vector(x.clone())).unwrap(),
                    g.constant(Tensor::vector(y.clone())).unwrap(),
                );
                let s = mobius_add(vx, vy, c).unwrap().value().unwrap();
                close(s.data(), hypgeo::mobius_add(&px, &py).unwrap().coords(), 1e-12);
                let d = dist(vx, vy, c).unwrap().item().unwrap();
                assert!((d - hypgeo::dist(&px, &py).unwrap()).abs() < 1e-9);
                let h = hnorm(vx, c).unwrap().item().unwrap();
                assert!((h - hypgeo::hnorm(&px)).abs() < 1e-12);

                let m = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
                let vm = g.constant(m.clone()).unwrap();
                let y = mobius_matvec(vm, vx, c).unwrap().value().unwrap();
                close(y.data(), hypgeo::mobius_matvec(&m, &px).unwrap().coords(), 1e-12);
            }
        }
    }

    #[test]
    fn hnorm_of_projected_point_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = Curvature::new(1.0).unwrap();
        for _ in 0..100 {
            let x = Tensor::vector(rand_in_ball(&mut rng, 5, c));
            let report = check_gradients(
                |_, v| hnorm(project(v, c)?, c),
                &x,
                &GradCheck::default(),
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn ball_operations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = GradCheck::default();
        for &cv in &[1.0, 0.1] {
            let c = Curvature::new(cv).unwrap();
            for _ in 0..100 {
                let x = Tensor::vector(rand_in_ball(&mut rng, 4, c));
                let y = Tensor::vector(rand_in_ball(&mut rng, 4, c));
                let w = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
                let m = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
                let checks: Vec<Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>>> = vec![
                    Box::new(|g, v| exp0(v, c)?.dot(g.constant(w.clone())?)),
                    Box::new(|g, v| log0(v, c)?.dot(g.constant(w.clone())?)),
                    Box::new(|g, v| mobius_add(v, g.constant(y.clone())?, c)?.dot(g.constant(w.clone())?)),
                    Box::new(|g, v| mobius_add(g.constant(y.clone())?, v, c)?.dot(g.constant(w.clone())?)),
                    Box::new(|g, v| mobius_matvec(g.constant(m.clone())?, v, c)?.dot(g.constant(w.clone())?)),
                    Box::new(|g, v| dist(v, g.constant(y.clone())?, c)),
                    Box::new(|_, v| hnorm(v, c)),
                ];
                for (i, f) in checks.iter().enumerate() {
                    let report = check_gradients(f, &x, &cfg).unwrap();
                    assert!(report.passed(), "check {i} c={cv}: {report:?}");
                }
            }
        }
    }

    #[test]
    fn euclidean_geometry_is_flat() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let o = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(Geometry::Euclidean.norm(x).unwrap().item().unwrap(), 5.0);
        assert_eq!(Geometry::Euclidean.dist(x, o).unwrap().item().unwrap(), 5.0);
        assert_eq!(Geometry::Euclidean.lift(x).unwrap().value().unwrap().data(), &[3.0, 4.0]);
    }
}
