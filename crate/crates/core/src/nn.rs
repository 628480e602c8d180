//! The model: a shared per-point encoder with max-pooling, the lift into
//! the ball, a Möbius projection layer and a Möbius classification head.
//!
//! Every forward pass runs on an autodiff [`Graph`]; inference binds the
//! parameters as constants, training binds them as trainable leaves, so
//! both paths evaluate exactly the same function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::data::{Point, PointCloud};
use crate::hypgeo::diff::Geometry;
use crate::hypgeo::{Curvature, GeoError};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Which update rule a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Euclidean,
    /// Lives on the Poincaré ball; updated by Riemannian SGD.
    Manifold,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden widths of the per-point map.
    pub hidden: [usize; 2],
    /// Encoder output width.
    pub m: usize,
    /// Embedding dimension.
    pub f: usize,
    pub classes: usize,
    pub curvature: f64,
    pub euclidean_mode: bool,
    /// Radius to which encoder outputs are clipped before the lift.
    pub feature_clip: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 128],
            m: 256,
            f: 256,
            classes: 8,
            curvature: 1.0,
            euclidean_mode: false,
            feature_clip: Some(2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobiusLayerParams {
    /// `f × m`.
    pub m: Tensor,
    /// Ball point of dimension `f`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `K × f`.
    pub w: Tensor,
    /// Ball point of dimension `K`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub mobius: MobiusLayerParams,
    pub head: HeadParams,
    pub curvature: Curvature,
    pub euclidean_mode: bool,
    pub feature_clip: Option<f64>,
}

/// Parameter names in canonical order.
pub const PARAM_NAMES: [&str; 10] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "encoder.w3",
    "encoder.b3",
    "mobius.m",
    "mobius.b",
    "head.w",
    "head.b",
];

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches")
}

impl ModelState {
    /// Fan-in uniform initialization; the manifold biases start at the origin.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> std::result::Result<Self, GeoError> {
        let curvature = Curvature::new(cfg.curvature)?;
        let [h1, h2] = cfg.hidden;
        let (m, f, k) = (cfg.m, cfg.f, cfg.classes);
        Ok(Self {
            encoder: EncoderParams {
                w1: uniform(rng, &[3, h1], 3),
                b1: uniform(rng, &[h1], 3),
                w2: uniform(rng, &[h1, h2], h1),
                b2: uniform(rng, &[h2], h1),
                w3: uniform(rng, &[h2, m], h2),
                b3: uniform(rng, &[m], h2),
            },
            mobius: MobiusLayerParams {
                m: uniform(rng, &[f, m], m),
                b: Tensor::zeros(&[f]),
            },
            head: HeadParams {
                w: uniform(rng, &[k, f], f),
                b: Tensor::zeros(&[k]),
            },
            curvature,
            euclidean_mode: cfg.euclidean_mode,
            feature_clip: cfg.feature_clip,
        })
    }

    pub fn geometry(&self) -> Geometry {
        if self.euclidean_mode {
            Geometry::Euclidean
        } else {
            Geometry::Poincare(self.curvature)
        }
    }

    pub fn classes(&self) -> usize {
        self.head.w.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.mobius.m.rows()
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [&Tensor; 10] {
        let e = &self.encoder;
        [
            &e.w1,
            &e.b1,
            &e.w2,
            &e.b2,
            &e.w3,
            &e.b3,
            &self.mobius.m,
            &self.mobius.b,
            &self.head.w,
            &self.head.b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 10] {
        let e = &mut self.encoder;
        [
            &mut e.w1,
            &mut e.b1,
            &mut e.w2,
            &mut e.b2,
            &mut e.w3,
            &mut e.b3,
            &mut self.mobius.m,
            &mut self.mobius.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    /// Update rule of parameter `index`; everything is Euclidean in flat mode.
    pub fn kind(&self, index: usize) -> ParamKind {
        let name = PARAM_NAMES[index];
        if !self.euclidean_mode && (name == "mobius.b" || name == "head.b") {
            ParamKind::Manifold
        } else {
            ParamKind::Euclidean
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Binds all parameters to `g`, as trainable leaves if `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Result<BoundModel<'g>> {
        let vars = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            vars,
            geometry: self.geometry(),
            feature_clip: self.feature_clip,
        })
    }

    /// Binds parameters as constants except `index`, which is replaced by `var`.
    pub fn bind_replacing<'g>(&self, g: &'g Graph, index: usize, var: Var<'g>) -> Result<BoundModel<'g>> {
        let mut bound = self.bind(g, false)?;
        bound.vars[index] = var;
        Ok(bound)
    }

    /// Whole-pipeline embedding of a set of points.
    pub fn embed(&self, points: &[Point]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let model = self.bind(&g, false)?;
        Ok(model.embed(points)?.value()?.into_data())
    }

    pub fn logits(&self, points: &[Point]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let model = self.bind(&g, false)?;
        let z = model.embed(points)?;
        Ok(model.logits(z)?.value()?.into_data())
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        Ok(argmax(&self.logits(&cloud.points)?))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Model parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct BoundModel<'g> {
    pub vars: Vec<Var<'g>>,
    pub geometry: Geometry,
    pub feature_clip: Option<f64>,
}

impl<'g> BoundModel<'g> {
    fn graph(&self) -> &'g Graph {
        self.vars[0].graph()
    }

    /// Encoder output `E(P)`: the shared map applied to every point, then a
    /// coordinatewise max over points.
    pub fn encode(&self, points: &[Point]) -> Result<Var<'g>> {
        if points.is_empty() {
            return Err(AutodiffError::Shape(crate::tensor::ShapeError::Rank {
                op: "encode",
                expected: 2,
                shape: vec![0, 3],
            }));
        }
        let data = points.iter().flatten().copied().collect();
        let x = self.graph().constant(Tensor::matrix(points.len(), 3, data)?)?;
        let v = &self.vars;
        let h = x.matmul(v[0])?.add(v[1])?.relu()?;
        let h = h.matmul(v[2])?.add(v[3])?.relu()?;
        h.matmul(v[4])?.add(v[5])?.max_axis(0)
    }

    /// `z = H(exp0(E(P)))`, or `M·E(P) + b` in flat mode.
    pub fn embed(&self, points: &[Point]) -> Result<Var<'g>> {
        let mut e = self.encode(points)?;
        if let Some(r) = self.feature_clip {
            let n = e.norm()?;
            if n.item()? > r {
                e = e.div(n)?.scale(r)?;
            }
        }
        let u = self.geometry.lift(e)?;
        self.geometry.affine(self.vars[6], u, self.vars[7])
    }

    /// `log0(W ⊗ z ⊕ b_head)`.
    pub fn logits(&self, z: Var<'g>) -> Result<Var<'g>> {
        let y = self.geometry.affine(self.vars[8], z, self.vars[9])?;
        self.geometry.chart(y)
    }

    /// Cross-entropy of `logits` against `label`.
    pub fn cross_entropy(&self, logits: Var<'g>, label: usize) -> Result<Var<'g>> {
        let k = logits.shape()?[0];
        let mut onehot = vec![0.0; k];
        onehot[label] = 1.0;
        let target = self.graph().constant(Tensor::vector(onehot))?;
        logits
            .softmax()?
            .dot(target)?
            .clamp_min(f64::MIN_POSITIVE)?
            .log()?
            .neg()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheck};
    use crate::data::{generate_shape, ShapeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, euclidean_mode: bool, curvature: f64) -> ModelState {
        let cfg = ModelConfig {
            hidden: [8, 12],
            m: 10,
            f: 6,
            classes: 4,
            curvature,
            euclidean_mode,
            feature_clip: None,
        };
        ModelState::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        generate_shape(ShapeKind::Chair, n, 0.01, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn encode(state: &ModelState, points: &[Point]) -> Vec<f64> {
        let g = Graph::new();
        let m = state.bind(&g, false).unwrap();
        m.encode(points).unwrap().value().unwrap().into_data()
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let state = small(1, false, 1.0);
        let c = cloud(2, 64);
        let mut shuffled = c.points.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let a = encode(&state, &c.points);
        let b = encode(&state, &shuffled);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(state.embed(&c.points).unwrap(), state.embed(&shuffled).unwrap());
        assert_eq!(state.predict(&c).unwrap(), state.predict(&PointCloud { points: shuffled, ..c.clone() }).unwrap());
    }

    #[test]
    fn repeated_point_encodes_like_single_point() {
        let state = small(3, false, 1.0);
        let p = [0.1, -0.4, 0.7];
        assert_eq!(encode(&state, &vec![p; 50]), encode(&state, &[p]));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let state = small(3, false, 1.0);
        assert!(state.embed(&[]).is_err());
    }

    #[test]
    fn embeddings_stay_in_the_ball() {
        let mut state = small(4, false, 1.0);
        // large weights push the lift towards the boundary
        for v in state.encoder.w3.data_mut() {
            *v *= 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let max = state.curvature.max_norm();
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let pts: Vec<Point> = (0..n)
                .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
                .collect();
            let z = state.embed(&pts).unwrap();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= max + 1e-12, "{norm}");
        }
    }

    #[test]
    fn zero_features_and_bias_embed_at_origin() {
        let mut state = small(6, false, 1.0);
        for t in [&mut state.encoder.w3, &mut state.encoder.b3] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(state.embed(&cloud(7, 32).points).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_curvature_approaches_flat_model() {
        let flat = small(8, true, 1.0);
        let mut hyper = flat.clone();
        hyper.euclidean_mode = false;
        let pts = cloud(9, 64).points;
        let e = flat.embed(&pts).unwrap();
        let mut last = f64::INFINITY;
        for c in [1e-1, 1e-3, 1e-5] {
            hyper.curvature = Curvature::new(c).unwrap();
            let h = hyper.embed(&pts).unwrap();
            let dev = h.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dev < last);
            last = dev;
        }
        assert!(last < 1e-4, "{last}");
    }

    #[test]
    fn identical_head_rows_give_uniform_softmax() {
        let mut state = small(10, false, 1.0);
        state.head.w = Tensor::matrix(2, 6, [0.3, -0.1, 0.2, 0.0, 0.5, 0.1].repeat(2)).unwrap();
        state.head.b = Tensor::zeros(&[2]);
        let l = state.logits(&cloud(11, 32).points).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(state.predict(&cloud(11, 32)).unwrap(), 0);
    }

    #[test]
    fn manifold_partition() {
        let hyper = small(12, false, 1.0);
        let kinds: Vec<_> = (0..10).map(|i| hyper.kind(i)).collect();
        assert_eq!(kinds.iter().filter(|k| **k == ParamKind::Manifold).count(), 2);
        assert_eq!(kinds[7], ParamKind::Manifold);
        assert_eq!(kinds[9], ParamKind::Manifold);
        let flat = small(12, true, 1.0);
        assert!((0..10).all(|i| flat.kind(i) == ParamKind::Euclidean));
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut state = small(13, false, 1.0);
        // move the manifold biases off the origin
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for i in [7, 9] {
            for v in state.params_mut()[i].data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let pts = cloud(15, 48).points;
        for index in 0..10 {
            let x = state.params()[index].clone();
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, x.len(), x.len().min(10)).into_vec();
            let cfg = GradCheck {
                tol: 1e-4,
                indices: Some(idx),
                ..GradCheck::default()
            };
            let report = check_gradients(
                |g, v| {
                    let model = state.bind_replacing(g, index, v)?;
                    let z = model.embed(&pts)?;
                    let l = model.logits(z)?;
                    model.cross_entropy(l, 2)
                },
                &x,
                &cfg,
            )
            .unwrap();
            assert!(report.passed(), "{}: {report:?}", PARAM_NAMES[index]);
        }
    }
}
