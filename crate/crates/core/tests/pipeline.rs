//! End-to-end behaviour of training, checkpoints, evaluation and the CLI.

use std::process::Command;

use ndarray::Array2;

use metaaug::augment::Registry;
use metaaug::data::{normalize_zscore, Batch, Split, TimeSeries};
use metaaug::encoder::{Encoder, EncoderConfig, Pooling};
use metaaug::eval::{classify_eval, window_features, Featurizer};
use metaaug::rng::RngStream;
use metaaug::runner::{run, DatasetSpec, EvalSpec, ExperimentConfig};
use metaaug::synthetic::{planted_bumps, PlantedConfig};
use metaaug::train::{fit, read_csv, resume, Ablation, EncoderSpec, Mode, StepRecord, TrainConfig, TrainState};

fn small_encoder() -> EncoderSpec {
    EncoderSpec { channels: 8, depth: 3, output_dim: 16, ..EncoderSpec::default() }
}

fn planted(n_train: usize, length: usize) -> metaaug::data::Dataset {
    let cfg = PlantedConfig { n_train, n_test: 20, length, ..PlantedConfig::default() };
    normalize_zscore(&planted_bumps(&cfg).unwrap()).unwrap().0
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, encoder: small_encoder(), ..TrainConfig::default() }
}

#[test]
fn fit_is_deterministic() {
    let ds = planted(24, 48).subset(Split::Train);
    let a = fit(&ds, &Registry::full(), config(2), None).unwrap();
    let b = fit(&ds, &Registry::full(), config(2), None).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.state, b.state);
    let mut other = config(2);
    other.seed = 1;
    let c = fit(&ds, &Registry::full(), other, None).unwrap();
    assert_ne!(a.steps, c.steps);
}

#[test]
fn zero_epochs_returns_initial_state() {
    let ds = planted(16, 32).subset(Split::Train);
    let out = fit(&ds, &Registry::full(), config(0), None).unwrap();
    let init = TrainState::new(config(0), &Registry::full(), 1, ds.num_classes).unwrap();
    assert!(out.steps.is_empty());
    assert_eq!(out.state, init);
    assert!(out.state.policy.probabilities().iter().all(|&p| p == 0.5));
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = planted(24, 48).subset(Split::Train);
    let straight = fit(&ds, &Registry::full(), config(4), None).unwrap();

    let mut cfg = config(4);
    cfg.checkpoint_every = Some(2);
    let logged_run = fit(&ds, &Registry::full(), cfg, Some(dir.path())).unwrap();
    assert_eq!(logged_run.steps, straight.steps);
    let loaded = TrainState::load(&dir.path().join("checkpoint_0002.json")).unwrap();
    assert_eq!(loaded.epoch, 2);
    let second = resume(loaded, &ds, None).unwrap();

    assert_eq!(second.steps[..], straight.steps[straight.steps.len() / 2..]);
    assert_eq!(second.state.encoder, straight.state.encoder);
    assert_eq!(second.state.policy, straight.state.policy);
    assert_eq!(second.state.head, straight.state.head);
    let logged: Vec<StepRecord> = read_csv(&dir.path().join("loss.csv")).unwrap();
    assert_eq!(logged, straight.steps);
}

#[test]
fn each_step_touches_only_its_parameters() {
    let ds = planted(16, 48);
    let train = ds.subset(Split::Train);
    let mut cfg = config(1);
    cfg.mode = Mode::Supervised;
    let reg = Registry::full();
    let mut st = TrainState::new(cfg, &reg, 1, ds.num_classes).unwrap();
    let b = Batch::from_dataset(&train, &[0, 1, 2, 3], None).unwrap();
    let stream = RngStream::new(5);
    let gates = st.gates(stream.derive(0)).unwrap();
    let views = st.views(&b.values, &b.mask, &gates, stream.derive(1)).unwrap();

    let before = st.clone();
    st.encoder_step(&b.values, &b.mask, &views).unwrap();
    assert_ne!(st.encoder, before.encoder);
    assert_eq!(st.policy, before.policy);
    assert_eq!(st.head, before.head);

    let before = st.clone();
    let labels = b.labels.as_deref();
    let (_, _, zx, zv) = st.meta_step(&b.values, &b.mask, labels, &gates, &views).unwrap();
    assert_eq!(st.encoder, before.encoder);
    assert_eq!(st.head, before.head);
    assert_ne!(st.policy.logits, before.policy.logits);

    let before = st.clone();
    st.classifier_step(&zx, &zv, labels).unwrap();
    assert_eq!(st.encoder, before.encoder);
    assert_eq!(st.policy, before.policy);
    assert_ne!(st.head, before.head);
}

#[test]
fn fixed_single_augmentation_keeps_gate_open() {
    let ds = planted(16, 48).subset(Split::Train);
    let mut cfg = config(2);
    cfg.ablation = "single:subsequence".parse::<Ablation>().unwrap();
    let out = fit(&ds, &Registry::full(), cfg, None).unwrap();
    assert_eq!(out.state.registry.names(), vec!["subsequence"]);
    // the policy is never trained under a fixed augmentation
    assert_eq!(out.state.policy.logits, vec![0.0]);
    let g = out.state.gates(RngStream::new(1)).unwrap();
    assert_eq!(g.a, vec![1.0]);
}

#[test]
fn two_hundred_steps_stay_finite() {
    let ds = planted(200, 128).subset(Split::Train);
    let cfg = TrainConfig { epochs: 8, encoder: EncoderSpec { channels: 8, depth: 3, output_dim: 16, ..Default::default() }, ..Default::default() };
    let out = fit(&ds, &Registry::full(), cfg, None).unwrap();
    assert_eq!(out.steps.len(), 200);
    assert!(out.steps.iter().all(|s| s.report().is_finite()));
}

#[test]
fn forecasting_features_are_causal() {
    let mut cfg = EncoderConfig::new(1);
    cfg.channels = 4;
    cfg.depth = 2;
    cfg.output_dim = 8;
    cfg.pooling = Pooling::Last;
    let enc = Encoder::new(cfg, &mut RngStream::new(2).rng()).unwrap();
    let vals: Vec<f64> = (0..120).map(|t| (t as f64 * 0.2).sin()).collect();
    let mut changed = vals.clone();
    changed[80] += 5.0;
    let a = TimeSeries::univariate(&vals, "a").unwrap();
    let b = TimeSeries::univariate(&changed, "b").unwrap();
    let times: Vec<usize> = (10..110).collect();
    let f = Featurizer::Encoder { encoder: &enc, pooling: Pooling::Last };
    let za = window_features(f, &a, &times, 24).unwrap();
    let zb = window_features(f, &b, &times, 24).unwrap();
    for (k, &t) in times.iter().enumerate() {
        let same = za.row(k) == zb.row(k);
        // a window ending before step 80 never sees it
        if t < 80 {
            assert!(same, "t = {t}");
        }
        if t == 80 {
            assert!(!same);
        }
    }
}

#[test]
fn classification_metrics_are_reproducible() {
    let ds = planted(24, 48);
    let out = fit(&ds.subset(Split::Train), &Registry::full(), config(1), None).unwrap();
    let frozen = out.state.encoder.clone();
    let a = classify_eval(&out.state.encoder, &ds).unwrap();
    let b = classify_eval(&out.state.encoder, &ds).unwrap();
    assert_eq!(a, b);
    assert_eq!(out.state.encoder, frozen);
}

#[test]
fn encode_is_repeatable() {
    let mut cfg = EncoderConfig::new(2);
    cfg.channels = 4;
    cfg.depth = 2;
    cfg.output_dim = 5;
    let enc = Encoder::new(cfg, &mut RngStream::new(4).rng()).unwrap();
    let x = ndarray::Array3::from_shape_fn((3, 20, 2), |(i, t, f)| (i + t * f) as f64 * 0.1);
    let m = ndarray::Array3::from_elem(x.raw_dim(), true);
    let a: Array2<f64> = enc.encode(&x, &m, Pooling::Max, 2).unwrap();
    let b = enc.encode(&x, &m, Pooling::Max, 64).unwrap();
    assert_eq!(a, b);
}

fn smoke_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "smoke".into(),
        tags: vec!["test".into()],
        out_dir: out.to_path_buf(),
        registry: "full".into(),
        dataset: DatasetSpec::Planted(PlantedConfig { n_train: 100, n_test: 100, length: 128, ..Default::default() }),
        train: TrainConfig { epochs: 2, encoder: small_encoder(), ..Default::default() },
        eval: EvalSpec::Classify,
    }
}

#[test]
fn smoke_pipeline_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(&smoke_config(d1.path()), false).unwrap();
    let b = run(&smoke_config(d2.path()), false).unwrap();
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.metrics, b.metrics);
    let la = std::fs::read(a.dir.join("loss.csv")).unwrap();
    let lb = std::fs::read(b.dir.join("loss.csv")).unwrap();
    assert_eq!(la, lb);
    assert!(a.dir.join("policy.svg").exists());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metaaug"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cli().args(["verify", "--suite", "properties", "--seed", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\n[dataset]\nkind = \"planted\"\n[train]\nbatch_size = 1\n").unwrap();
    let out = cli().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = cli().args(["run", "--config"]).arg(dir.path().join("missing.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // valid config, but one training instance cannot be batched
    let mut cfg = smoke_config(&dir.path().join("runs"));
    cfg.dataset = DatasetSpec::Planted(PlantedConfig { n_train: 1, n_test: 4, length: 32, ..Default::default() });
    let failing = dir.path().join("fail.toml");
    std::fs::write(&failing, cfg.to_toml().unwrap()).unwrap();
    let out = cli().args(["run", "--config"]).arg(&failing).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_run_then_skip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(&dir.path().join("runs"));
    cfg.dataset = DatasetSpec::Planted(PlantedConfig { n_train: 16, n_test: 8, length: 32, ..Default::default() });
    cfg.train.epochs = 1;
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let first = cli().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let second = cli().args(["run", "--config"]).arg(&path).output().unwrap();
    assert!(String::from_utf8_lossy(&second.stdout).contains("skipped"));
}

#[test]
fn shipped_configs_validate() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    // every test in this binary that reads data agrees on this root
    std::env::set_var("METAAUG_DATA", root.join("data"));
    let dir = root.join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 3);
}
