//! The part-whole hierarchy and contrastive regularizers, the total
//! training objective and triplet assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Var};
use crate::data::{Dataset, PointCloud};
use crate::hypgeo::diff::Geometry;
use crate::hypgeo::{self, GeoError, PoincarePoint};
use crate::nn::BoundModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TripletError {
    #[error("class {0} has no negative candidates")]
    NoNegatives(usize),
    #[error("cloud `{id}` has {have} points, fewer than the whole minimum {need}")]
    CloudTooSmall { id: String, have: usize, need: usize },
    #[error("invalid size range: {0}")]
    Range(String),
}

/// Coefficients of the total loss `CE + α·R_contr + β·R_hier`, the
/// hierarchy margin numerator `γ` and the contrastive margin `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            gamma: 1000.0,
            delta: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Size ranges (inclusive) for wholes and parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub whole_min: usize,
    pub whole_max: usize,
    pub part_min: usize,
    pub part_max: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            whole_min: 800,
            whole_max: 1024,
            part_min: 200,
            part_max: 600,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), TripletError> {
        if self.whole_min == 0 || self.whole_min > self.whole_max {
            return Err(TripletError::Range(format!(
                "whole sizes {}..={}",
                self.whole_min, self.whole_max
            )));
        }
        if self.part_min == 0 || self.part_min > self.part_max {
            return Err(TripletError::Range(format!(
                "part sizes {}..={}",
                self.part_min, self.part_max
            )));
        }
        Ok(())
    }
}

/// Aligned (whole⁺, part⁺, part⁻) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub wholes: Vec<PointCloud>,
    pub parts_pos: Vec<PointCloud>,
    pub parts_neg: Vec<PointCloud>,
    pub part_sizes: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.wholes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wholes.is_empty()
    }
}

/// Builds one triplet per anchor cloud index: a uniform subsample of the
/// anchor with size in the whole range, a kNN part of the anchor with size
/// `N′` in the part range, and a kNN part of size `N′` of a uniformly chosen
/// cloud with another label.
pub fn build_triplets(
    dataset: &Dataset,
    anchors: &[usize],
    rng: &mut impl Rng,
    cfg: &TripletConfig,
) -> Result<TripletBatch, TripletError> {
    cfg.validate()?;
    let by_label = dataset.by_label();
    let mut batch = TripletBatch {
        wholes: Vec::with_capacity(anchors.len()),
        parts_pos: Vec::with_capacity(anchors.len()),
        parts_neg: Vec::with_capacity(anchors.len()),
        part_sizes: Vec::with_capacity(anchors.len()),
        labels: Vec::with_capacity(anchors.len()),
    };
    for &a in anchors {
        let cloud = &dataset.clouds[a];
        if cloud.len() < cfg.whole_min {
            return Err(TripletError::CloudTooSmall {
                id: cloud.id.clone(),
                have: cloud.len(),
                need: cfg.whole_min,
            });
        }
        let negatives = dataset.len() - by_label[cloud.label].len();
        if negatives == 0 {
            return Err(TripletError::NoNegatives(cloud.label));
        }

        let n_whole = rng.random_range(cfg.whole_min..=cfg.whole_max.min(cloud.len()));
        batch.wholes.push(cloud.select(&cloud.subsample_indices(n_whole, rng)));

        let n_part = rng.random_range(cfg.part_min..=cfg.part_max);
        batch.parts_pos.push(cloud.random_part(n_part, rng));

        // The k-th cloud outside the anchor's class, in dataset order.
        let mut k = rng.random_range(0..negatives);
        let neg = dataset
            .clouds
            .iter()
            .filter(|c| c.label != cloud.label)
            .find(|_| {
                let hit = k == 0;
                k = k.wrapping_sub(1);
                hit
            })
            .expect("k < negatives");
        batch.parts_neg.push(neg.random_part(n_part, rng));
        batch.part_sizes.push(n_part);
        batch.labels.push(cloud.label);
    }
    Ok(batch)
}

/// `max(0, −‖z_whole‖_D + ‖z_part‖_D + γ/N′)`.
pub fn r_hier(z_whole: &PoincarePoint, z_part: &PoincarePoint, n_part: usize, gamma: f64) -> f64 {
    hier_hinge(hypgeo::hnorm(z_whole), hypgeo::hnorm(z_part), n_part, gamma)
}

/// The hierarchy hinge on precomputed norms.
pub fn hier_hinge(norm_whole: f64, norm_part: f64, n_part: usize, gamma: f64) -> f64 {
    (-norm_whole + norm_part + gamma / n_part as f64).max(0.0)
}

/// `max(0, d(z_whole, z_part⁺) − d(z_whole, z_part⁻) + δ)`.
pub fn r_contr(
    z_whole: &PoincarePoint,
    z_pos: &PoincarePoint,
    z_neg: &PoincarePoint,
    delta: f64,
) -> Result<f64, GeoError> {
    Ok(contr_hinge(
        hypgeo::dist(z_whole, z_pos)?,
        hypgeo::dist(z_whole, z_neg)?,
        delta,
    ))
}

/// The contrastive hinge on precomputed distances.
pub fn contr_hinge(d_pos: f64, d_neg: f64, delta: f64) -> f64 {
    (d_pos - d_neg + delta).max(0.0)
}

/// Graph version of [`r_hier`]; the hinge passes zero gradient at zero.
pub fn r_hier_var<'g>(
    geometry: &Geometry,
    z_whole: Var<'g>,
    z_part: Var<'g>,
    n_part: usize,
    gamma: f64,
) -> Result<Var<'g>, AutodiffError> {
    let margin = z_whole.graph().scalar(gamma / n_part as f64)?;
    geometry
        .norm(z_part)?
        .sub(geometry.norm(z_whole)?)?
        .add(margin)?
        .relu()
}

/// Graph version of [`r_contr`].
pub fn r_contr_var<'g>(
    geometry: &Geometry,
    z_whole: Var<'g>,
    z_pos: Var<'g>,
    z_neg: Var<'g>,
    delta: f64,
) -> Result<Var<'g>, AutodiffError> {
    let margin = z_whole.graph().scalar(delta)?;
    geometry
        .dist(z_whole, z_pos)?
        .sub(geometry.dist(z_whole, z_neg)?)?
        .add(margin)?
        .relu()
}

/// Loss terms of one triplet. Terms whose weight is zero are not evaluated.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss<'g> {
    pub ce: Var<'g>,
    pub r_hier: Option<Var<'g>>,
    pub r_contr: Option<Var<'g>>,
    pub total: Var<'g>,
}

/// Loss of triplet `i` of `batch`: cross-entropy on the whole, plus the
/// weighted regularizers. With `crop_augment`, the cross-entropy is the
/// mean over the whole and its positive part, so random kNN crops join
/// classification training.
pub fn sample_loss<'g>(
    model: &BoundModel<'g>,
    batch: &TripletBatch,
    i: usize,
    w: &LossWeights,
    crop_augment: bool,
) -> Result<SampleLoss<'g>, AutodiffError> {
    let geometry = model.geometry;
    let label = batch.labels[i];
    let z_whole = model.embed(&batch.wholes[i].points)?;
    let mut ce = model.cross_entropy(model.logits(z_whole)?, label)?;

    let need_pos = w.alpha > 0.0 || w.beta > 0.0 || crop_augment;
    let z_pos = if need_pos {
        Some(model.embed(&batch.parts_pos[i].points)?)
    } else {
        None
    };
    if crop_augment {
        let z = z_pos.expect("embedded above");
        let crop_ce = model.cross_entropy(model.logits(z)?, label)?;
        ce = ce.add(crop_ce)?.scale(0.5)?;
    }
    let mut total = ce;
    let r_hier = if w.beta > 0.0 {
        let z = z_pos.expect("embedded above");
        let r = r_hier_var(&geometry, z_whole, z, batch.part_sizes[i], w.gamma)?;
        total = total.add(r.scale(w.beta)?)?;
        Some(r)
    } else {
        None
    };
    let r_contr = if w.alpha > 0.0 {
        let z_neg = model.embed(&batch.parts_neg[i].points)?;
        let r = r_contr_var(&geometry, z_whole, z_pos.expect("embedded above"), z_neg, w.delta)?;
        total = total.add(r.scale(w.alpha)?)?;
        Some(r)
    } else {
        None
    };
    Ok(SampleLoss {
        ce,
        r_hier,
        r_contr,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheck, Graph};
    use crate::data::{generate_dataset, DatasetSpec, ShapeKind};
    use crate::hypgeo::Curvature;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    /// A point on the first axis with the given hyperbolic norm at c = 1.
    fn at_hnorm(h: f64, dim: usize) -> PoincarePoint {
        let mut v = vec![0.0; dim];
        v[0] = (h / 2.0).tanh();
        PoincarePoint::project(v, Curvature::default()).unwrap()
    }

    #[test]
    fn hierarchy_hinge_examples() {
        assert_eq!(hier_hinge(5.0, 2.0, 500, 1000.0), 0.0);
        assert_eq!(hier_hinge(1.0, 2.0, 500, 1000.0), 3.0);
        let z = at_hnorm(1.3, 3);
        assert_eq!(r_hier(&z, &z, 300, 0.0), 0.0);
        let r = r_hier(&at_hnorm(1.0, 2), &at_hnorm(2.0, 2), 500, 1000.0);
        assert!((r - 3.0).abs() < 1e-9);
    }

    #[test]
    fn contrastive_hinge_examples() {
        assert_eq!(contr_hinge(1.0, 6.0, 4.0), 0.0);
        assert_eq!(contr_hinge(3.0, 2.0, 4.0), 5.0);
        let c = Curvature::default();
        let w = PoincarePoint::project(vec![0.2, 0.1], c).unwrap();
        let p = PoincarePoint::project(vec![-0.3, 0.4], c).unwrap();
        assert_eq!(r_contr(&w, &p, &p, 4.0).unwrap(), 4.0);
    }

    #[test]
    fn hierarchy_margin_shrinks_with_part_size() {
        let (w, p) = (at_hnorm(3.0, 2), at_hnorm(1.0, 2));
        let mut last = f64::INFINITY;
        for n in [200, 300, 400, 500, 600] {
            let r = r_hier(&w, &p, n, 1000.0);
            assert!(r < last);
            last = r;
        }
        // exactly zero once the norm gap covers the margin
        assert_eq!(r_hier(&at_hnorm(4.0, 2), &p, 500, 1000.0), 0.0);
        assert!(r_hier(&at_hnorm(2.9, 2), &p, 500, 1000.0) > 0.0);
    }

    #[test]
    fn contrastive_swap_negates_unsaturated_branch() {
        let c = Curvature::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut unsaturated = 0;
        for _ in 0..200 {
            let mut pt = || PoincarePoint::project((0..3).map(|_| rng.random_range(-0.5..0.5)).collect(), c).unwrap();
            let (w, p, n) = (pt(), pt(), pt());
            let delta = 0.3;
            let r = r_contr(&w, &p, &n, delta).unwrap();
            if r == 0.0 {
                continue;
            }
            unsaturated += 1;
            // swapped arguments with -δ give the negated hinge argument
            let (dp, dn) = (hypgeo::dist(&w, &p).unwrap(), hypgeo::dist(&w, &n).unwrap());
            assert!((r - (dp - dn + delta)).abs() < 1e-12);
            assert!(((dn - dp - delta) + r).abs() < 1e-12);
            assert_eq!(r_contr(&w, &n, &p, -delta).unwrap(), 0.0);
        }
        assert!(unsaturated > 20);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let geometry = Geometry::Poincare(Curvature::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = GradCheck {
            tol: 1e-5,
            ..GradCheck::default()
        };
        for _ in 0..30 {
            let v = |rng: &mut ChaCha8Rng, r: f64| {
                Tensor::vector((0..4).map(|_| rng.random_range(-r..r)).collect())
            };
            let (whole, part, neg) = (v(&mut rng, 0.45), v(&mut rng, 0.3), v(&mut rng, 0.45));
            let report = check_gradients(
                |g, x| r_hier_var(&geometry, x, g.constant(part.clone())?, 400, 1.0),
                &whole,
                &cfg,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
            let report = check_gradients(
                |g, x| r_contr_var(&geometry, g.constant(whole.clone())?, x, g.constant(neg.clone())?, 4.0),
                &part,
                &cfg,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn hinge_corner_is_reported_as_kink() {
        let geometry = Geometry::Poincare(Curvature::default());
        let part = Tensor::vector(vec![0.3, 0.0]);
        // whole norm chosen so the hinge sits exactly at zero with γ = 0
        let report = check_gradients(
            |g, x| r_hier_var(&geometry, x, g.constant(part.clone())?, 400, 0.0),
            &Tensor::vector(vec![0.3, 0.0]),
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.kinks() > 0);
    }

    fn dataset() -> Dataset {
        generate_dataset(&DatasetSpec {
            classes: vec![ShapeKind::Sphere, ShapeKind::Table, ShapeKind::Chair],
            per_class_train: 4,
            per_class_test: 1,
            points_per_cloud: 1024,
            noise_sigma: 0.01,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn triplets_respect_ranges_and_labels() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TripletConfig::default();
        let anchors: Vec<usize> = (0..ds.len()).collect();
        for _ in 0..5 {
            let b = build_triplets(&ds, &anchors, &mut rng, &cfg).unwrap();
            assert_eq!(b.len(), ds.len());
            for i in 0..b.len() {
                let src = &ds.clouds[anchors[i]];
                assert!((800..=1024).contains(&b.wholes[i].len()));
                assert!((200..=600).contains(&b.part_sizes[i]));
                assert_eq!(b.parts_pos[i].len(), b.part_sizes[i]);
                assert_eq!(b.parts_neg[i].len(), b.part_sizes[i]);
                assert_ne!(b.parts_neg[i].label, b.labels[i]);
                let pts: HashSet<[u64; 3]> = src.points.iter().map(|p| p.map(f64::to_bits)).collect();
                assert!(b.parts_pos[i].points.iter().all(|p| pts.contains(&p.map(f64::to_bits))));
                assert!(b.wholes[i].points.iter().all(|p| pts.contains(&p.map(f64::to_bits))));
            }
        }
    }

    #[test]
    fn negatives_never_share_the_anchor_label() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TripletConfig {
            whole_min: 8,
            whole_max: 8,
            part_min: 1,
            part_max: 1,
        };
        let anchors: Vec<usize> = (0..10_000).map(|i| i % ds.len()).collect();
        let b = build_triplets(&ds, &anchors, &mut rng, &cfg).unwrap();
        for i in 0..b.len() {
            assert_ne!(b.parts_neg[i].label, b.labels[i]);
        }
    }

    #[test]
    fn triplet_errors() {
        let mut ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TripletConfig {
            whole_min: 2000,
            whole_max: 2048,
            ..TripletConfig::default()
        };
        assert!(matches!(
            build_triplets(&ds, &[0], &mut rng, &cfg),
            Err(TripletError::CloudTooSmall { .. })
        ));
        ds.clouds.iter_mut().for_each(|c| c.label = 0);
        assert_eq!(
            build_triplets(&ds, &[0], &mut rng, &TripletConfig::default()),
            Err(TripletError::NoNegatives(0))
        );
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = build_triplets(&ds, &[0, 5], &mut rng, &TripletConfig::default()).unwrap();
        let state = crate::nn::ModelState::init(
            &crate::nn::ModelConfig {
                hidden: [8, 8],
                m: 8,
                f: 4,
                classes: 3,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let g = Graph::new();
        let model = state.bind(&g, false).unwrap();
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let l = sample_loss(&model, &batch, 1, &w, false).unwrap();
        assert!(l.r_hier.is_none() && l.r_contr.is_none());
        assert_eq!(l.total.item().unwrap(), l.ce.item().unwrap());
        let full = sample_loss(&model, &batch, 1, &LossWeights::default(), false).unwrap();
        let expected = full.ce.item().unwrap()
            + 0.01 * full.r_contr.unwrap().item().unwrap()
            + 0.01 * full.r_hier.unwrap().item().unwrap();
        assert!((full.total.item().unwrap() - expected).abs() < 1e-12);
    }
}
