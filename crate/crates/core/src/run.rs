//! The user-facing commands: train, eval, embed and sweep.
//!
//! A training run directory holds:
//!
//! ```text
//! config.json    the RunConfig, verbatim
//! metrics.csv    one record per epoch (see EpochRecord::CSV_HEADER)
//! best.ckpt      state after the epoch with the highest test OA
//! last.ckpt      state after the final epoch
//! manifest.json  seed, crate version, best epoch and the files above
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{generate_dataset, load_dataset, split, stream_rng, Dataset, DatasetSpec};
use crate::hypgeo::{self, PoincarePoint};
use crate::nn::ModelState;
use crate::regularizer::LossWeights;
use crate::train::{evaluate, train, EpochRecord, EvalMode, EvalReport, TrainConfig, TrainOutcome};
use crate::Error;

/// Where the clouds come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(DatasetSpec),
    /// A dataset directory split into `per_class_train`/`per_class_test`
    /// clouds per class with generator seed `seed`.
    Directory {
        path: PathBuf,
        per_class_train: usize,
        per_class_test: usize,
        seed: u64,
    },
}

impl DataSource {
    /// Loads or generates the data and returns the (train, test) split.
    pub fn load(&self) -> Result<(Dataset, Dataset), Error> {
        match self {
            DataSource::Synthetic(spec) => {
                let all = generate_dataset(spec)?;
                Ok(split(&all, spec.per_class_train, spec.per_class_test, spec.seed)?)
            }
            DataSource::Directory {
                path,
                per_class_train,
                per_class_test,
                seed,
            } => {
                let all = load_dataset(path)?;
                Ok(split(&all, *per_class_train, *per_class_test, *seed)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate(self.train.triplets.whole_min)?;
                if spec.classes.len() != self.train.model.classes {
                    return Err(Error::Config(format!(
                        "{} classes requested but the model has {}",
                        spec.classes.len(),
                        self.train.model.classes
                    )));
                }
            }
            DataSource::Directory {
                per_class_train,
                per_class_test,
                ..
            } => {
                if *per_class_train == 0 || *per_class_test == 0 {
                    return Err(Error::Config("per-class counts must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Reads a `config.json` written by [`cmd_train`].
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_test_oa: f64,
    pub final_test_oa: f64,
    pub files: Vec<String>,
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
    pub train_set: Dataset,
    pub test_set: Dataset,
}

/// Trains according to `cfg` and writes the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun, Error> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let config_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(&dir.join("config.json"), config_json + "\n")?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{}", EpochRecord::CSV_HEADER).map_err(io_err(&metrics_path))?;
    let mut write_err = None;
    let outcome = train(&cfg.train, &train_set, &test_set, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", r.csv_row()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path)(e));
    }

    let ckpt = |name: &str, state: &ModelState| -> Result<(), Error> {
        Ok(checkpoint::save(&dir.join(name), state)?)
    };
    ckpt("best.ckpt", &outcome.best)?;
    ckpt("last.ckpt", &outcome.last)?;
    let last = outcome.records.last().expect("at least one epoch");
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.optim.seed,
        epochs: cfg.train.optim.epochs,
        best_epoch: outcome.best_epoch,
        best_test_oa: outcome.records[outcome.best_epoch].test_oa,
        final_test_oa: last.test_oa,
        files: ["config.json", "metrics.csv", "best.ckpt", "last.ckpt"]
            .map(String::from)
            .to_vec(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), manifest_json + "\n")?;
    Ok(TrainRun {
        dir,
        outcome,
        train_set,
        test_set,
    })
}

/// Evaluates `state` on `dataset` under every mode.
pub fn cmd_eval(state: &ModelState, dataset: &Dataset, modes: &[EvalMode], seed: u64) -> Result<Vec<EvalReport>, Error> {
    modes.iter().map(|m| evaluate(state, dataset, *m, seed)).collect()
}

/// Renders evaluation reports as a CSV table, one row per mode.
pub fn eval_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("mode,points,oa,aa\n");
    for r in reports {
        let points = match r.mode {
            EvalMode::Full => "all".to_string(),
            EvalMode::Subsample(k) => k.to_string(),
            EvalMode::Part(n) => n.to_string(),
        };
        writeln!(out, "{},{points},{:.6},{:.6}", r.mode, r.oa, r.aa).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedOptions {
    /// Random kNN parts embedded per object.
    pub parts_per_object: usize,
    /// Inclusive range of part sizes.
    pub part_range: (usize, usize),
    /// Inclusive range of whole subsample sizes.
    pub whole_range: (usize, usize),
    /// Object ids whose whole embeddings get a pairwise distance matrix.
    pub distance_ids: Vec<String>,
    pub seed: u64,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            parts_per_object: 3,
            part_range: (200, 650),
            whole_range: (800, 1024),
            distance_ids: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRecord {
    pub id: String,
    pub label: usize,
    pub is_part: bool,
    pub n_points: usize,
    pub coords: Vec<f64>,
    pub hnorm: f64,
}

/// Embeds every object (as a uniform subsample in the whole range) and
/// `parts_per_object` random kNN parts of it.
pub fn embed_records(state: &ModelState, dataset: &Dataset, opts: &EmbedOptions) -> Result<Vec<EmbedRecord>, Error> {
    let (pmin, pmax) = opts.part_range;
    let (wmin, wmax) = opts.whole_range;
    if pmin == 0 || pmin > pmax || wmin == 0 || wmin > wmax {
        return Err(Error::Config("invalid part or whole size range".into()));
    }
    let norm_of = |z: &[f64]| -> Result<f64, Error> {
        if state.euclidean_mode {
            Ok(hypgeo::norm(z))
        } else {
            Ok(hypgeo::hnorm(&PoincarePoint::project(z.to_vec(), state.curvature)?))
        }
    };
    let mut out = Vec::with_capacity(dataset.len() * (1 + opts.parts_per_object));
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        let mut rng = stream_rng(opts.seed, (2 << 40) | i as u64);
        let hi = wmax.min(cloud.len());
        let n = rng.random_range(wmin.min(hi)..=hi);
        let whole = cloud.select(&cloud.subsample_indices(n, &mut rng));
        let mut views = vec![(false, whole)];
        for _ in 0..opts.parts_per_object {
            let k = rng.random_range(pmin..=pmax);
            views.push((true, cloud.random_part(k, &mut rng)));
        }
        for (is_part, view) in views {
            let coords = state.embed(&view.points)?;
            out.push(EmbedRecord {
                id: cloud.id.clone(),
                label: cloud.label,
                is_part,
                n_points: view.len(),
                hnorm: norm_of(&coords)?,
                coords,
            });
        }
    }
    Ok(out)
}

/// Writes `embeddings.csv` and, when ids are requested, `distances.csv`
/// into `out`. Returns the records.
pub fn cmd_embed(state: &ModelState, dataset: &Dataset, opts: &EmbedOptions, out: &Path) -> Result<Vec<EmbedRecord>, Error> {
    let records = embed_records(state, dataset, opts)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let f = state.embed_dim();
    let mut csv = String::from("id,label,is_part,n_points,hnorm");
    for j in 0..f {
        write!(csv, ",z{j}").expect("string write");
    }
    csv.push('\n');
    for r in &records {
        write!(csv, "{},{},{},{},{:?}", r.id, r.label, r.is_part as u8, r.n_points, r.hnorm).expect("string write");
        for v in &r.coords {
            write!(csv, ",{v:?}").expect("string write");
        }
        csv.push('\n');
    }
    write_file(&out.join("embeddings.csv"), csv)?;

    if !opts.distance_ids.is_empty() {
        let mut points = Vec::with_capacity(opts.distance_ids.len());
        for id in &opts.distance_ids {
            let r = records
                .iter()
                .find(|r| !r.is_part && &r.id == id)
                .ok_or_else(|| Error::Config(format!("unknown object id `{id}`")))?;
            points.push(&r.coords);
        }
        let mut csv = String::from("id");
        for id in &opts.distance_ids {
            write!(csv, ",{id}").expect("string write");
        }
        csv.push('\n');
        for (id, a) in opts.distance_ids.iter().zip(&points) {
            csv.push_str(id);
            for b in &points {
                let d = if state.euclidean_mode {
                    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
                } else {
                    let pa = PoincarePoint::project(a.to_vec(), state.curvature)?;
                    let pb = PoincarePoint::project(b.to_vec(), state.curvature)?;
                    hypgeo::dist(&pa, &pb)?
                };
                write!(csv, ",{d:?}").expect("string write");
            }
            csv.push('\n');
        }
        write_file(&out.join("distances.csv"), csv)?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Dim,
    Curvature,
    Ablation,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dim" => Ok(SweepAxis::Dim),
            "curvature" => Ok(SweepAxis::Curvature),
            "ablation" => Ok(SweepAxis::Ablation),
            _ => Err(format!("unknown sweep axis `{s}`; expected dim, curvature or ablation")),
        }
    }
}

/// One training configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepVariant {
    pub name: String,
    /// Column value: the dimension, curvature or ablation label.
    pub setting: String,
    pub cfg: TrainConfig,
}

fn with_weights(base: &TrainConfig, alpha: f64, beta: f64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.weights = LossWeights { alpha, beta, ..base.weights };
    cfg
}

/// The grid for `axis`, derived from `base`. Regularized variants use the
/// weights of `base`; unregularized ones zero both.
pub fn sweep_variants(base: &TrainConfig, axis: SweepAxis) -> Vec<SweepVariant> {
    let (a, b) = (base.weights.alpha, base.weights.beta);
    match axis {
        SweepAxis::Ablation => [("ce-only", 0.0, 0.0), ("r_hier", 0.0, b), ("r_contr", a, 0.0), ("full", a, b)]
            .into_iter()
            .map(|(name, alpha, beta)| {
                let mut cfg = with_weights(base, alpha, beta);
                cfg.model.euclidean_mode = false;
                SweepVariant {
                    name: name.to_string(),
                    setting: name.to_string(),
                    cfg,
                }
            })
            .collect(),
        SweepAxis::Curvature => [1.0, 0.5, 0.1, 0.01]
            .into_iter()
            .map(|c| {
                let mut cfg = base.clone();
                cfg.model.curvature = c;
                cfg.model.euclidean_mode = false;
                SweepVariant {
                    name: format!("hycore-c{c}"),
                    setting: c.to_string(),
                    cfg,
                }
            })
            .collect(),
        SweepAxis::Dim => {
            let rows = [
                ("euclidean-ce", true, 0.0, 0.0),
                ("eucore", true, a, b),
                ("hyperbolic-ce", false, 0.0, 0.0),
                ("hycore", false, a, b),
            ];
            let mut out = Vec::new();
            for (name, flat, alpha, beta) in rows {
                for f in [16, 64, 256] {
                    let mut cfg = with_weights(base, alpha, beta);
                    cfg.model.euclidean_mode = flat;
                    cfg.model.f = f;
                    out.push(SweepVariant {
                        name: format!("{name}-f{f}"),
                        setting: f.to_string(),
                        cfg,
                    });
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub setting: String,
    pub seed: u64,
    pub final_test_oa: f64,
    pub final_test_aa: f64,
    pub best_test_oa: f64,
}

/// Trains every variant of `axis` for every seed into
/// `<out_dir>/<variant>/seed<seed>/` and writes `sweep.csv` with one row
/// per run followed by per-variant means.
pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, seeds: &[u64]) -> Result<Vec<SweepRow>, Error> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    base.validate()?;
    let variants = sweep_variants(&base.train, axis);
    let mut rows = Vec::new();
    for v in &variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train = v.cfg.clone();
            cfg.train.optim.seed = seed;
            cfg.out_dir = base.out_dir.join(&v.name).join(format!("seed{seed}"));
            log::info!("sweep: {} seed {seed}", v.name);
            let run = cmd_train(&cfg)?;
            let records = &run.outcome.records;
            let last = records.last().expect("at least one epoch");
            rows.push(SweepRow {
                variant: v.name.clone(),
                setting: v.setting.clone(),
                seed,
                final_test_oa: last.test_oa,
                final_test_aa: last.test_aa,
                best_test_oa: records[run.outcome.best_epoch].test_oa,
            });
        }
    }
    fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    write_file(&base.out_dir.join("sweep.csv"), sweep_table(&rows))?;
    Ok(rows)
}

/// CSV of sweep rows followed by one `mean` row per variant.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,setting,seed,final_test_oa,final_test_aa,best_test_oa\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.variant, r.setting, r.seed, r.final_test_oa, r.final_test_aa, r.best_test_oa
        )
        .expect("string write");
    }
    let mut seen: Vec<&str> = Vec::new();
    for r in rows {
        if seen.contains(&r.variant.as_str()) {
            continue;
        }
        seen.push(&r.variant);
        let group: Vec<&SweepRow> = rows.iter().filter(|x| x.variant == r.variant).collect();
        let mean = |f: fn(&SweepRow) -> f64| group.iter().map(|x| f(x)).sum::<f64>() / group.len() as f64;
        writeln!(
            out,
            "{},{},mean,{:.6},{:.6},{:.6}",
            r.variant,
            r.setting,
            mean(|x| x.final_test_oa),
            mean(|x| x.final_test_aa),
            mean(|x| x.best_test_oa)
        )
        .expect("string write");
    }
    out
}
