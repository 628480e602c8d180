use hycore::checkpoint;
use hycore::data::{DatasetSpec, ShapeKind};
use hycore::hypgeo::Curvature;
use hycore::run::{cmd_embed, cmd_eval, cmd_train, DataSource, EmbedOptions, RunConfig, RunManifest};
use hycore::train::{evaluate, EvalMode, TrainConfig};
use hycore::Error;

fn tiny(out_dir: std::path::PathBuf) -> RunConfig {
    let mut train = TrainConfig::default();
    train.model.hidden = [8, 16];
    train.model.m = 16;
    train.model.f = 4;
    train.model.classes = 3;
    train.model.curvature = 0.7;
    train.optim.epochs = 3;
    train.optim.batch_size = 4;
    train.optim.lr = 0.05;
    RunConfig {
        data: DataSource::Synthetic(DatasetSpec {
            classes: vec![ShapeKind::Sphere, ShapeKind::Cone, ShapeKind::Table],
            per_class_train: 6,
            per_class_test: 3,
            ..DatasetSpec::default()
        }),
        train,
        out_dir,
    }
}

#[test]
fn logged_train_accuracy_matches_full_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cmd_train(&tiny(tmp.path().join("run"))).unwrap();
    let last = run.outcome.records.last().unwrap();
    let state = checkpoint::load(&run.dir.join("last.ckpt")).unwrap();
    let train = evaluate(&state, &run.train_set, EvalMode::Full, 0).unwrap();
    assert_eq!(train.oa, last.train_oa);
    assert_eq!(train.aa, last.train_aa);
    let test = evaluate(&state, &run.test_set, EvalMode::Full, 0).unwrap();
    assert_eq!(test.oa, last.test_oa);

    let best = checkpoint::load(&run.dir.join("best.ckpt")).unwrap();
    let best_oa = evaluate(&best, &run.test_set, EvalMode::Full, 0).unwrap().oa;
    assert_eq!(best_oa, run.outcome.records[run.outcome.best_epoch].test_oa);
    assert!(run.outcome.records.iter().all(|r| r.test_oa <= best_oa));
}

#[test]
fn run_directory_can_be_replayed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path().join("a"));
    cmd_train(&cfg).unwrap();
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.epochs, 3);
    let mut replay = RunConfig::load(&cfg.out_dir.join("config.json")).unwrap();
    assert_eq!(replay, cfg);
    replay.out_dir = tmp.path().join("b");
    cmd_train(&replay).unwrap();
    for f in ["metrics.csv", "last.ckpt", "best.ckpt"] {
        assert_eq!(
            std::fs::read(cfg.out_dir.join(f)).unwrap(),
            std::fs::read(replay.out_dir.join(f)).unwrap()
        );
    }
}

#[test]
fn full_size_subsample_equals_full_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cmd_train(&tiny(tmp.path().join("run"))).unwrap();
    let reports = cmd_eval(
        &run.outcome.last,
        &run.test_set,
        &[EvalMode::Full, EvalMode::Subsample(1024)],
        5,
    )
    .unwrap();
    assert_eq!(reports[0].predictions, reports[1].predictions);
}

#[test]
fn embeddings_stay_in_ball_and_count_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cmd_train(&tiny(tmp.path().join("run"))).unwrap();
    let opts = EmbedOptions {
        parts_per_object: 2,
        distance_ids: vec![run.test_set.clouds[0].id.clone(), run.test_set.clouds[1].id.clone()],
        ..EmbedOptions::default()
    };
    let out = tmp.path().join("embed");
    let records = cmd_embed(&run.outcome.last, &run.test_set, &opts, &out).unwrap();
    assert_eq!(records.len(), run.test_set.len() * 3);
    let radius = Curvature::new(0.7).unwrap().radius();
    for r in &records {
        let norm = r.coords.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < radius);
        assert_eq!(r.coords.len(), 4);
    }
    let csv = std::fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), records.len() + 1);
    let distances = std::fs::read_to_string(out.join("distances.csv")).unwrap();
    assert_eq!(distances.lines().count(), 3);
}

#[test]
fn invalid_configs_are_rejected_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path().join("run"));
    cfg.train.model.classes = 5;
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(tmp.path().join("run"));
    cfg.train.triplets.part_min = 700;
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 2);
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn sparse_evaluation_still_scores_the_last_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path().join("run"));
    cfg.train.optim.epochs = 4;
    cfg.train.eval_every = 3;
    let run = cmd_train(&cfg).unwrap();
    let evaluated: Vec<bool> = run.outcome.records.iter().map(|r| !r.test_oa.is_nan()).collect();
    assert_eq!(evaluated, vec![false, false, true, true]);
    assert!(run.outcome.best_epoch >= 2);
    let last = evaluate(&run.outcome.last, &run.test_set, EvalMode::Full, 0).unwrap();
    assert_eq!(last.oa, run.outcome.records[3].test_oa);
    assert!(run.outcome.records.iter().all(|r| r.ce.is_finite()));

    cfg.train.eval_every = 0;
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
}
