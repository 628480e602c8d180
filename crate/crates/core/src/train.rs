//! The training loop and the evaluation modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{stream_rng, Dataset};
use crate::nn::{argmax, ModelConfig, ModelState, PARAM_NAMES};
use crate::optim::{OptimConfig, Optimizer};
use crate::regularizer::{build_triplets, sample_loss, LossWeights, TripletConfig};
use crate::tensor::Tensor;
use crate::Error;

/// Generator streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_TRIPLETS: u64 = 3;

/// Everything a training run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub triplets: TripletConfig,
    pub optim: OptimConfig,
    /// Adds cross-entropy on random kNN crops.
    pub crop_augment: bool,
    /// Evaluate accuracies every this many epochs (and always after the
    /// last); other epochs record NaN accuracies.
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            triplets: TripletConfig::default(),
            optim: OptimConfig::default(),
            crop_augment: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let m = &self.model;
        if m.hidden.contains(&0) || m.m == 0 || m.f == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if m.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(m.curvature > 0.0 && m.curvature.is_finite()) {
            return Err(Error::Config(format!("curvature must be positive, got {}", m.curvature)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.weights.validate().map_err(Error::Config)?;
        self.triplets
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate().map_err(Error::Config)
    }
}

/// Mean loss terms and accuracies after one epoch. Regularizers that are
/// switched off are recorded as NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub r_hier: f64,
    pub r_contr: f64,
    pub total: f64,
    pub train_oa: f64,
    pub train_aa: f64,
    pub test_oa: f64,
    pub test_aa: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,ce,r_hier,r_contr,total,train_oa,train_aa,test_oa,test_aa";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.lr,
            self.ce,
            self.r_hier,
            self.r_contr,
            self.total,
            self.train_oa,
            self.train_aa,
            self.test_oa,
            self.test_aa
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: ModelState,
    /// State after the evaluated epoch with the highest test OA (earliest on
    /// ties).
    pub best: ModelState,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

/// Trains a fresh model on `train`, evaluating on both sets in full mode
/// after every `eval_every` epochs and after the last one. `on_epoch` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    if train_set.num_classes() != cfg.model.classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            cfg.model.classes,
            train_set.num_classes()
        )));
    }
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let seed = cfg.optim.seed;
    let mut state = ModelState::init(&cfg.model, &mut stream_rng(seed, STREAM_INIT))?;
    let mut opt = Optimizer::new(cfg.optim.clone(), &state);
    let mut shuffle_rng = stream_rng(seed, STREAM_SHUFFLE);
    let mut triplet_rng = stream_rng(seed, STREAM_TRIPLETS);

    let mut records = Vec::with_capacity(cfg.optim.epochs);
    let mut best = (f64::NEG_INFINITY, 0, state.clone());
    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);

        let mut sums = [0.0; 4];
        for anchors in order.chunks(cfg.optim.batch_size) {
            let batch = build_triplets(train_set, anchors, &mut triplet_rng, &cfg.triplets)?;
            let mut grads: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
            for i in 0..batch.len() {
                let g = Graph::new();
                let model = state.bind(&g, true)?;
                let loss = sample_loss(&model, &batch, i, &cfg.weights, cfg.crop_augment)?;
                let total = loss.total.item()?;
                if !total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss {total} in epoch {epoch}")));
                }
                sums[0] += loss.ce.item()?;
                sums[1] += loss.r_hier.map_or(Ok(0.0), |v| v.item())?;
                sums[2] += loss.r_contr.map_or(Ok(0.0), |v| v.item())?;
                sums[3] += total;
                let mut gs = g.backward(loss.total)?;
                for (acc, v) in grads.iter_mut().zip(&model.vars) {
                    let gv = gs.take(*v).expect("trainable leaf");
                    match acc {
                        Some(a) => a.data_mut().iter_mut().zip(gv.data()).for_each(|(x, y)| *x += y),
                        None => *acc = Some(gv),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let report = opt.step_all(&mut state, &grads, lr)?;
            if !report.skipped.is_empty() {
                log::warn!("epoch {epoch}: skipped updates for {:?}", report.skipped);
            }
        }
        if !state.is_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after epoch {epoch}")));
        }

        let n = train_set.len() as f64;
        let off = |on: bool, v: f64| if on { v / n } else { f64::NAN };
        let due = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.optim.epochs;
        let accuracy = |set: &Dataset| -> Result<(f64, f64), Error> {
            if due {
                let r = evaluate(&state, set, EvalMode::Full, seed)?;
                Ok((r.oa, r.aa))
            } else {
                Ok((f64::NAN, f64::NAN))
            }
        };
        let (train_oa, train_aa) = accuracy(train_set)?;
        let (test_oa, test_aa) = accuracy(test_set)?;
        let record = EpochRecord {
            epoch,
            lr,
            ce: sums[0] / n,
            r_hier: off(cfg.weights.beta > 0.0, sums[1]),
            r_contr: off(cfg.weights.alpha > 0.0, sums[2]),
            total: sums[3] / n,
            train_oa,
            train_aa,
            test_oa,
            test_aa,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train OA {:.3} test OA {:.3}",
            record.total,
            record.train_oa,
            record.test_oa
        );
        on_epoch(&record);
        if record.test_oa > best.0 {
            best = (record.test_oa, epoch, state.clone());
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        last: state,
        best: best.2,
        best_epoch: best.1,
        records,
    })
}

/// How each test cloud is presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// The complete cloud.
    Full,
    /// `k` uniformly kept points.
    Subsample(usize),
    /// One random kNN part of `n` points.
    Part(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Full => f.write_str("full"),
            EvalMode::Subsample(k) => write!(f, "subsample:{k}"),
            EvalMode::Part(n) => write!(f, "part:{n}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("invalid mode `{s}`; expected full, subsample:<k> or part:<n>");
        if s == "full" {
            return Ok(EvalMode::Full);
        }
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        match kind {
            "subsample" => Ok(EvalMode::Subsample(n)),
            "part" => Ok(EvalMode::Part(n)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub oa: f64,
    pub aa: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Overall accuracy and the unweighted mean of per-class accuracies over
/// classes that occur in `labels`.
pub fn accuracies(predictions: &[usize], labels: &[usize], classes: usize) -> (f64, f64, Vec<f64>) {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (p, l) in predictions.iter().zip(labels) {
        count[*l] += 1;
        if p == l {
            hit[*l] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    let oa = correct as f64 / labels.len().max(1) as f64;
    let per_class: Vec<f64> = hit
        .iter()
        .zip(&count)
        .map(|(h, c)| if *c == 0 { f64::NAN } else { *h as f64 / *c as f64 })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    let aa = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (oa, aa, per_class)
}

/// Classifies every cloud of `dataset` under `mode`. Random views use a
/// generator derived from `seed` and the cloud index, so results do not
/// depend on evaluation order.
pub fn evaluate(state: &ModelState, dataset: &Dataset, mode: EvalMode, seed: u64) -> Result<EvalReport, Error> {
    if dataset.num_classes() != state.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            state.classes(),
            dataset.num_classes()
        )));
    }
    let mut predictions = Vec::with_capacity(dataset.len());
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        let mut rng = stream_rng(seed, (1 << 40) | i as u64);
        let logits = match mode {
            EvalMode::Full => state.logits(&cloud.points)?,
            EvalMode::Subsample(k) => {
                let idx = cloud.subsample_indices(k, &mut rng);
                state.logits(&cloud.select(&idx).points)?
            }
            EvalMode::Part(n) => state.logits(&cloud.random_part(n, &mut rng).points)?,
        };
        predictions.push(argmax(&logits));
    }
    let labels: Vec<usize> = dataset.clouds.iter().map(|c| c.label).collect();
    let (oa, aa, per_class) = accuracies(&predictions, &labels, dataset.num_classes());
    Ok(EvalReport {
        mode,
        oa,
        aa,
        per_class,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_definitions() {
        let (oa, aa, per) = accuracies(&[0, 0, 0, 1], &[0, 0, 0, 1], 2);
        assert_eq!((oa, aa), (1.0, 1.0));
        assert_eq!(per, vec![1.0, 1.0]);
        // three of class 0 right, the single class-1 sample wrong
        let (oa, aa, _) = accuracies(&[0, 0, 0, 0], &[0, 0, 0, 1], 2);
        assert_eq!(oa, 0.75);
        assert_eq!(aa, 0.5);
        let (_, aa, per) = accuracies(&[0], &[0], 3);
        assert_eq!(aa, 1.0);
        assert!(per[1].is_nan());
    }

    #[test]
    fn eval_mode_parsing() {
        assert_eq!("full".parse::<EvalMode>().unwrap(), EvalMode::Full);
        assert_eq!("subsample:128".parse::<EvalMode>().unwrap(), EvalMode::Subsample(128));
        assert_eq!("part:300".parse::<EvalMode>().unwrap(), EvalMode::Part(300));
        for bad in ["", "part", "part:x", "part:0", "crop:5"] {
            assert!(bad.parse::<EvalMode>().is_err(), "{bad}");
        }
        assert_eq!(EvalMode::Part(300).to_string(), "part:300");
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let r = EpochRecord {
            epoch: 3,
            lr: 0.01,
            ce: 1.0,
            r_hier: f64::NAN,
            r_contr: 0.5,
            total: 1.2,
            train_oa: 0.5,
            train_aa: 0.5,
            test_oa: 0.25,
            test_aa: 0.25,
        };
        assert_eq!(
            r.csv_row().split(',').count(),
            EpochRecord::CSV_HEADER.split(',').count()
        );
        assert!(r.csv_row().contains("NaN"));
    }
}
