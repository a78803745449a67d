//! Experiment orchestration: TOML configs, dataset resolution, fit + eval
//! runs recorded in a flat-file results store, ablation and criteria sweeps.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Registry;
use crate::data::{normalize_zscore, Dataset, Split, SplitSeries, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{classify_eval, forecast_eval, render_forecast_table, ClassifyReport, Featurizer, ForecastRow, ForecastTask};
use crate::io::{load_archive, load_csv, ArchiveFormat};
use crate::objectives::LossReport;
use crate::plot::{plot_criteria_scatter, plot_policy_trajectory, SweepPoint};
use crate::synthetic::{one_destroyer_registry, planted_bumps, preserving_first_registry, PlantedConfig};
use crate::train::{fit, write_csv, Ablation, TrainConfig, TrainState};

/// Relative dataset paths are resolved against this directory.
pub const DATA_ROOT_ENV: &str = "METAAUG_DATA";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn resolve(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_root().join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Ts,
    Ucr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Generated planted-bump classification data.
    Planted(PlantedConfig),
    /// `<dir>/<name>_TRAIN.*` and `<dir>/<name>_TEST.*`.
    Archive {
        name: String,
        #[serde(default)]
        dir: PathBuf,
        format: ArchiveKind,
    },
    /// One long CSV series cut chronologically; training uses windows of
    /// the train range.
    Series {
        name: String,
        path: PathBuf,
        /// Univariate target column; all numeric columns when absent.
        target: Option<String>,
        #[serde(default)]
        split: SplitSpec,
        window: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSpec {
    None,
    #[default]
    Classify,
    Forecast(ForecastTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// `full`, `preserving`, `one_destroyer`, or a comma-separated
    /// transform list such as `jitter:std=0.5,subsequence`.
    #[serde(default = "default_registry")]
    pub registry: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_registry() -> String {
    "full".into()
}

pub fn resolve_registry(spec: &str) -> Result<Registry> {
    match spec.trim() {
        "full" => Ok(Registry::full()),
        "preserving" => Ok(preserving_first_registry()),
        "one_destroyer" => Ok(one_destroyer_registry()),
        s => Registry::parse(s),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the training knobs, the registry and that referenced files
    /// exist.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.train.validate().map_err(cfg)?;
        resolve_registry(&self.registry).map_err(cfg)?;
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        let missing = |p: PathBuf| Err(Error::Config(format!("{} does not exist", p.display())));
        match &self.dataset {
            DatasetSpec::Planted(_) => {}
            DatasetSpec::Archive { name, dir, format } => {
                let (a, b) = crate::io::archive_paths(&resolve(dir), name, archive_format(*format));
                for p in [a, b] {
                    if !p.exists() {
                        return missing(p);
                    }
                }
            }
            DatasetSpec::Series { path, split, window, stride, .. } => {
                let p = resolve(path);
                if !p.exists() {
                    return missing(p);
                }
                split.validate().map_err(cfg)?;
                if *window < 2 || *stride == 0 {
                    return Err(Error::Config("window must be >= 2 and stride >= 1".into()));
                }
            }
        }
        match (&self.dataset, &self.eval) {
            (DatasetSpec::Series { .. }, EvalSpec::Classify) => {
                Err(Error::Config("classification eval needs a labelled dataset".into()))
            }
            (DatasetSpec::Series { .. }, _) | (_, EvalSpec::None | EvalSpec::Classify) => Ok(()),
            (_, EvalSpec::Forecast(_)) => Err(Error::Config("forecast eval needs a series dataset".into())),
        }
    }

    /// SHA-256 over everything that determines a run's outputs (name, tags
    /// and output location excluded).
    pub fn hash(&self) -> Result<String> {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "registry": self.registry,
            "train": self.train,
            "eval": self.eval,
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }

    pub fn run_id(&self) -> Result<String> {
        let name: String =
            self.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        Ok(format!("{name}-{}", &self.hash()?[..12]))
    }
}

fn archive_format(k: ArchiveKind) -> ArchiveFormat {
    match k {
        ArchiveKind::Ts => ArchiveFormat::Ts,
        ArchiveKind::Ucr => ArchiveFormat::Ucr,
    }
}

/// A dataset ready for training and evaluation, z-scored with training
/// statistics.
#[derive(Debug, Clone)]
pub enum LoadedData {
    Labelled(Dataset),
    Series { name: String, split: SplitSeries, windows: Dataset },
}

impl LoadedData {
    pub fn training_set(&self) -> Dataset {
        match self {
            LoadedData::Labelled(ds) => ds.subset(Split::Train),
            LoadedData::Series { windows, .. } => windows.clone(),
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<LoadedData> {
    match spec {
        DatasetSpec::Planted(cfg) => Ok(LoadedData::Labelled(normalize_zscore(&planted_bumps(cfg)?)?.0)),
        DatasetSpec::Archive { name, dir, format } => {
            let ds = load_archive(resolve(dir), name, archive_format(*format))?;
            Ok(LoadedData::Labelled(normalize_zscore(&ds)?.0))
        }
        DatasetSpec::Series { name, path, target, split, window, stride } => {
            let csv = load_csv(resolve(path), target.as_deref())?;
            let split = SplitSeries::new(csv.series, split)?.normalized()?;
            let windows = split.training_windows(*window, *stride)?;
            Ok(LoadedData::Series { name: name.clone(), split, windows })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    pub classify: Option<ClassifyReport>,
    pub forecast: Vec<ForecastRow>,
    /// Mean losses of the last epoch.
    pub final_epoch: Option<LossReport>,
    /// `(transform, normalized weight)` after training.
    pub policy: Vec<(String, f64)>,
}

impl RunMetrics {
    /// Headline scalar: accuracy for classification, mean MSE otherwise.
    pub fn headline(&self) -> Option<f64> {
        if let Some(c) = &self.classify {
            return Some(c.accuracy);
        }
        (!self.forecast.is_empty()).then(|| self.forecast.iter().map(|r| r.mse).sum::<f64>() / self.forecast.len() as f64)
    }
}

/// Evaluates a trained encoder according to `spec`.
pub fn evaluate(state: &TrainState, data: &LoadedData, spec: &EvalSpec) -> Result<RunMetrics> {
    let mut m = RunMetrics { policy: policy_weights(state), ..Default::default() };
    match (spec, data) {
        (EvalSpec::None, _) => {}
        (EvalSpec::Classify, LoadedData::Labelled(ds)) => m.classify = Some(classify_eval(&state.encoder, ds)?),
        (EvalSpec::Forecast(task), LoadedData::Series { name, split, .. }) => {
            let f = Featurizer::Encoder { encoder: &state.encoder, pooling: state.encoder.config.pooling };
            m.forecast = forecast_eval(f, split, name, task)?;
        }
        _ => return Err(Error::Config("eval kind does not match the dataset".into())),
    }
    Ok(m)
}

fn policy_weights(state: &TrainState) -> Vec<(String, f64)> {
    let s = state.policy.snapshot();
    s.names.into_iter().zip(s.normalized).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub name: String,
    pub tags: Vec<String>,
    pub status: RunStatus,
    pub started: u64,
    pub finished: Option<u64>,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// One directory per run plus a JSON index, updated under an advisory
/// file lock.
#[derive(Debug, Clone)]
pub struct ResultsStore {
    pub root: PathBuf,
}

impl ResultsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let p = self.index_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn find(&self, hash: &str) -> Result<Option<RunRecord>> {
        Ok(self.records()?.into_iter().rev().find(|r| r.config_hash == hash))
    }

    /// Replaces (or appends) the record with the same run id.
    pub fn upsert(&self, record: RunRecord) -> Result<()> {
        let lock_path = self.root.join("index.lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        let mut all = self.records()?;
        match all.iter_mut().find(|r| r.run_id == record.run_id) {
            Some(r) => *r = record,
            None => all.push(record),
        }
        let tmp = self.root.join("index.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&all)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, self.index_path()).map_err(|e| Error::io(self.index_path(), e))?;
        File::unlock(&lock).map_err(|e| Error::io(&lock_path, e))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    /// A completed run with the same hash already existed.
    pub skipped: bool,
    pub metrics: RunMetrics,
}

/// Fit then evaluate; artifacts go to `<out_dir>/<run_id>/`. A completed
/// run with the same config hash is reused unless `force`.
pub fn run(config: &ExperimentConfig, force: bool) -> Result<RunOutcome> {
    config.validate()?;
    let store = ResultsStore::open(&config.out_dir)?;
    let hash = config.hash()?;
    let run_id = config.run_id()?;
    let dir = store.run_dir(&run_id);
    if !force {
        if let Some(prev) = store.find(&hash)?.filter(|r| r.status == RunStatus::Completed) {
            info!("config {hash} already ran as {}; skipping", prev.run_id);
            return Ok(RunOutcome {
                dir: store.run_dir(&prev.run_id),
                run_id: prev.run_id,
                skipped: true,
                metrics: prev.metrics.unwrap_or_default(),
            });
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    fs::write(dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;
    let mut record = RunRecord {
        run_id: run_id.clone(),
        config_hash: hash,
        name: config.name.clone(),
        tags: config.tags.clone(),
        status: RunStatus::Running,
        started: now(),
        finished: None,
        metrics: None,
        error: None,
    };
    store.upsert(record.clone())?;
    let result = execute(config, &dir);
    record.finished = Some(now());
    match result {
        Ok(metrics) => {
            record.status = RunStatus::Completed;
            record.metrics = Some(metrics.clone());
            store.upsert(record)?;
            Ok(RunOutcome { run_id, dir, skipped: false, metrics })
        }
        Err(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(e.to_string());
            store.upsert(record)?;
            Err(e)
        }
    }
}

fn execute(config: &ExperimentConfig, dir: &Path) -> Result<RunMetrics> {
    let data = load_dataset(&config.dataset)?;
    let registry = resolve_registry(&config.registry)?;
    let out = fit(&data.training_set(), &registry, config.train.clone(), Some(dir))?;
    if out.policy.iter().map(|r| r.epoch).max().unwrap_or(0) >= 1 {
        plot_policy_trajectory(&out.policy, &dir.join("policy.svg"))?;
    }
    let mut metrics = evaluate(&out.state, &data, &config.eval)?;
    metrics.final_epoch = out.epochs.last().copied();
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?).map_err(|e| Error::io(dir, e))?;
    if !metrics.forecast.is_empty() {
        write_csv(&dir.join("forecast.csv"), &metrics.forecast)?;
        fs::write(dir.join("table.md"), render_forecast_table(&metrics.forecast)).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(c) = &metrics.classify {
        let table = format!("dataset | accuracy | C\n--- | --- | ---\n{} | {:.4} | {}\n", c.dataset, c.accuracy, c.c);
        fs::write(dir.join("table.md"), table).map_err(|e| Error::io(dir, e))?;
    }
    Ok(metrics)
}

/// The ablation rows, in table order.
pub fn ablation_variants() -> Vec<(&'static str, Ablation)> {
    vec![
        ("InfoTS", Ablation::None),
        ("Random", Ablation::Random),
        ("All", Ablation::All),
        ("w/o Fidelity", Ablation::NoFidelity),
        ("w/o Variety", Ablation::NoVariety),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub run_id: String,
    pub metrics: RunMetrics,
}

/// Runs every ablation variant of `base` and writes `ablation.md` into the
/// output directory.
pub fn ablation_sweep(base: &ExperimentConfig, force: bool) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, ab) in ablation_variants() {
        let mut cfg = base.clone();
        cfg.train.ablation = ab;
        cfg.tags.push(format!("ablation:{label}"));
        let out = run(&cfg, force)?;
        rows.push(AblationRow { method: label.to_string(), run_id: out.run_id, metrics: out.metrics });
    }
    let table = render_ablation_table(&rows);
    let path = base.out_dir.join(format!("{}-ablation.md", base.name));
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Methods as rows; forecasting gives MSE/MAE per horizon, classification
/// gives accuracy. Every cell carries its run id in the last column.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let horizons: Vec<usize> = rows.first().map_or(Vec::new(), |r| r.metrics.forecast.iter().map(|f| f.horizon).collect());
    let mut head = vec!["method".to_string()];
    if horizons.is_empty() {
        head.push("accuracy".into());
    }
    for h in &horizons {
        head.push(format!("MSE@{h}"));
        head.push(format!("MAE@{h}"));
    }
    head.push("run".into());
    let mut out = format!("{}\n{}\n", head.join(" | "), vec!["---"; head.len()].join(" | "));
    for r in rows {
        let mut cells = vec![r.method.clone()];
        if horizons.is_empty() {
            cells.push(r.metrics.classify.as_ref().map_or("-".into(), |c| format!("{:.4}", c.accuracy)));
        }
        for h in &horizons {
            match r.metrics.forecast.iter().find(|f| f.horizon == *h) {
                Some(f) => cells.extend([format!("{:.4}", f.mse), format!("{:.4}", f.mae)]),
                None => cells.extend(["-".to_string(), "-".to_string()]),
            }
        }
        cells.push(r.run_id.clone());
        out.push_str(&cells.join(" | "));
        out.push('\n');
    }
    out
}

/// Fixes each transform spec in turn as the only augmentation, records the
/// final-epoch criteria and the headline metric, and plots the scatter.
/// Returns the points and the rank correlation.
pub fn criteria_sweep(base: &ExperimentConfig, specs: &[String], force: bool) -> Result<(Vec<SweepPoint>, Option<f64>)> {
    let mut points = Vec::new();
    for spec in specs {
        let mut cfg = base.clone();
        cfg.train.ablation = Ablation::Single(spec.clone());
        cfg.tags.push(format!("single:{spec}"));
        let out = run(&cfg, force)?;
        let criteria = out
            .metrics
            .final_epoch
            .map(|r| r.criteria)
            .ok_or_else(|| Error::Config("criteria sweep needs at least one epoch".into()))?;
        let metric = out.metrics.headline().ok_or_else(|| Error::Config("criteria sweep needs an eval".into()))?;
        points.push(SweepPoint { label: spec.clone(), criteria, metric });
    }
    let stem = base.out_dir.join(format!("{}-criteria", base.name));
    let metric = if matches!(base.eval, EvalSpec::Forecast(_)) { "mean MSE" } else { "accuracy" };
    let rho = plot_criteria_scatter(&points, metric, &stem.with_extension("svg"), &stem.with_extension("csv"))?;
    Ok((points, rho))
}
