//! Experiment runner behind the `gradient-remedy` binary.
//!
//! An [`ExperimentSpec`] names a run, a training configuration, the
//! synthetic data parameters and a list of seeds. [`run`] trains one model
//! per seed and [`sweep`] does the same for several strategies. Every seed
//! gets its own directory:
//!
//! ```text
//! <out>/<name>/[<strategy>/]seed-<n>/
//!     steps.csv     one row per training step
//!     epochs.csv    one row per epoch
//!     layers.csv    one row per remedied vector per step
//!     metrics.json  final metrics of the run
//!     final.net     network checkpoint (text format, see `Network`)
//! <out>/<name>/summary.csv
//! ```
//!
//! Specs can be stored as TOML; command-line flags override file values.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Network, NetworkShape};
use crate::surgery::{RatioRule, Strategy};
use crate::synthdata::SyntheticTask;
use crate::trainer::{
    self, ChannelSink, CsvStatsWriter, EpochStats, LayerGrouping, Optimizer, StatsEvent,
    SyntheticSource, TrainConfig, TrainError,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GRADIENT_REMEDY_OUT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";
const NET_SEED_SALT: u64 = 0x0005_EED0_F4E7;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec:\n{}", list(.0))]
    Invalid(Vec<ConfigError>),
    #[error("seed {seed}: {source}")]
    Train {
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn list(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| format!("  - {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataParams {
    pub dim: usize,
    pub num_classes: usize,
    pub snr_db: f64,
    /// Held-out samples used for the per-epoch evaluation.
    pub eval_samples: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            dim: 32,
            num_classes: 4,
            snr_db: 0.0,
            eval_samples: 1000,
        }
    }
}

/// Hidden layer widths; input and output widths follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchParams {
    pub trunk: Vec<usize>,
    pub aux_hidden: Vec<usize>,
    pub dom_hidden: Vec<usize>,
}

impl Default for ArchParams {
    fn default() -> Self {
        let shape = NetworkShape::default();
        Self {
            trunk: shape.trunk,
            aux_hidden: shape.aux_hidden,
            dom_hidden: shape.dom_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Defaults to `$GRADIENT_REMEDY_OUT`, then `runs`.
    pub output_dir: Option<PathBuf>,
    /// Also write the per-unit `layers.csv`.
    pub write_layers: bool,
    pub train: TrainConfig,
    pub data: DataParams,
    pub arch: ArchParams,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1],
            output_dir: None,
            write_layers: true,
            train: TrainConfig::default(),
            data: DataParams::default(),
            arch: ArchParams::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        fs::write(path, self.to_toml_string()?).map_err(io_err(path))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
        })
    }

    /// Directory holding this experiment's outputs.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.data.dim,
            trunk: self.arch.trunk.clone(),
            aux_hidden: self.arch.aux_hidden.clone(),
            dom_hidden: self.arch.dom_hidden.clone(),
            num_classes: self.data.num_classes,
        }
    }

    /// Copy of this spec running `variant` instead of the configured strategy.
    pub fn with_variant(&self, variant: &StrategyVariant) -> Self {
        let mut spec = self.clone();
        spec.train.remedy.strategy = variant.strategy;
        spec.train.remedy.rescale_enabled = variant.rescale;
        spec
    }
}

/// A strategy as named on the command line: `naive`, `pcgrad`,
/// `fixed-theta:<deg>[deg]`, `gradient-remedy` or `projection-only`
/// (gradient remedy without rescale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyVariant {
    pub strategy: Strategy,
    pub rescale: bool,
}

impl std::str::FromStr for StrategyVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let plain = |strategy| Ok(StrategyVariant {
            strategy,
            rescale: true,
        });
        match s {
            "naive" | "naive-sum" => plain(Strategy::NaiveSum),
            "pcgrad" => plain(Strategy::PCGrad),
            "gradient-remedy" | "remedy" => plain(Strategy::GradientRemedy),
            "projection-only" => Ok(StrategyVariant {
                strategy: Strategy::GradientRemedy,
                rescale: false,
            }),
            _ => {
                let angle = s
                    .strip_prefix("fixed-theta:")
                    .ok_or_else(|| format!("unknown strategy `{s}`"))?;
                let deg = parse_degrees(angle)?;
                plain(Strategy::FixedTheta {
                    theta: deg.to_radians(),
                })
            }
        }
    }
}

impl fmt::Display for StrategyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.strategy {
            Strategy::GradientRemedy if !self.rescale => write!(f, "projection-only"),
            s => write!(f, "{}", s.label()),
        }
    }
}

/// Parses `36`, `36deg` or `36°` as degrees.
pub fn parse_degrees(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let t = t
        .strip_suffix("deg")
        .or_else(|| t.strip_suffix('°'))
        .unwrap_or(t);
    t.trim()
        .parse::<f64>()
        .map_err(|_| format!("bad angle `{s}`"))
}

/// Checks a spec without running it.
pub fn validate(spec: &ExperimentSpec) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    let mut bad = |field, message: String| errors.push(ConfigError { field, message });
    let t = &spec.train;
    let r = &t.remedy;

    if spec.name.trim().is_empty() {
        bad("name", "must not be empty".into());
    }
    if spec.name.contains(['/', '\\']) {
        bad("name", "must not contain path separators".into());
    }
    if spec.seeds.is_empty() {
        bad("seeds", "need at least one seed".into());
    }
    if !(r.k > 1.0 && r.k.is_finite()) {
        bad("k", "K must exceed 1".into());
    }
    if let Strategy::FixedTheta { theta } = r.strategy {
        // Compared in degrees so that 90° entered on the command line passes.
        let deg = theta.to_degrees();
        if !(deg > 0.0 && deg <= 90.0 + 1e-9) {
            bad("theta", format!("θ must lie in (0°, 90°], got {deg}°"));
        }
    }
    if !(0.0..=1.0).contains(&t.lambda) {
        bad("lambda", format!("λ must lie in [0, 1], got {}", t.lambda));
    }
    if !(r.r_min > 0.0 && r.r_min < 1.0) {
        bad("r_min", format!("must lie in (0, 1), got {}", r.r_min));
    }
    if let RatioRule::Constant(c) = r.ratio_rule {
        if !(c > 0.0 && c < 1.0) {
            bad("ratio_rule", format!("constant ratio must lie in (0, 1), got {c}"));
        }
    }
    if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
        bad("learning_rate", "must be positive".into());
    }
    if let Optimizer::Adam { beta1, beta2, eps } = t.optimizer {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            bad("optimizer", "Adam needs β1, β2 in [0, 1) and ε > 0".into());
        }
    }
    for (field, v) in [
        ("epochs", t.epochs),
        ("batches_per_epoch", t.batches_per_epoch),
        ("batch_size", t.batch_size),
        ("eval_samples", spec.data.eval_samples),
    ] {
        if v == 0 {
            bad(field, "must be positive".into());
        }
    }
    if spec.data.dim < 2 {
        bad("dim", "must be at least 2".into());
    }
    if spec.data.num_classes < 2 {
        bad("classes", "must be at least 2".into());
    }
    if !spec.data.snr_db.is_finite() {
        bad("snr_db", "must be finite".into());
    }
    if spec.arch.trunk.is_empty() {
        bad("trunk", "need at least one trunk layer".into());
    }
    let widths = spec.arch.trunk.iter().chain(&spec.arch.aux_hidden).chain(&spec.arch.dom_hidden);
    if widths.into_iter().any(|&w| w == 0) {
        bad("arch", "layer widths must be positive".into());
    }
    errors
}

/// Final metrics of one seed, also written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub strategy: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_eval_accuracy: f64,
    pub final_eval_aux_mse: f64,
    pub final_loss_aux: f64,
    pub final_loss_dom: f64,
    /// Means over epochs of the per-epoch percentages.
    pub pct_conflicting: f64,
    pub pct_conflicting_pre: f64,
    pub pct_wrongly_dominant: f64,
    pub pct_wrongly_dominant_pre: f64,
    pub output_dir: PathBuf,
}

impl SeedResult {
    fn from_epochs(strategy: String, seed: u64, epochs: &[EpochStats], output_dir: PathBuf) -> Self {
        let n = epochs.len().max(1) as f64;
        let mean = |f: fn(&EpochStats) -> f64| epochs.iter().map(f).sum::<f64>() / n;
        let last = epochs.last();
        Self {
            strategy,
            seed,
            epochs: epochs.len(),
            final_eval_accuracy: last.map_or(0.0, |e| e.eval_accuracy),
            final_eval_aux_mse: last.map_or(0.0, |e| e.eval_aux_mse),
            final_loss_aux: last.map_or(0.0, |e| e.loss_aux),
            final_loss_dom: last.map_or(0.0, |e| e.loss_dom),
            pct_conflicting: mean(|e| e.pct_conflicting),
            pct_conflicting_pre: mean(|e| e.pct_conflicting_pre),
            pct_wrongly_dominant: mean(|e| e.pct_wrongly_dominant),
            pct_wrongly_dominant_pre: mean(|e| e.pct_wrongly_dominant_pre),
            output_dir,
        }
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub seeds: usize,
    pub acc_median: f64,
    pub acc_min: f64,
    pub acc_max: f64,
    pub pct_conflicting_mean: f64,
    pub pct_wrongly_dominant_mean: f64,
    pub pct_wrongly_dominant_median: f64,
}

impl SummaryRow {
    pub fn from_results(strategy: &str, results: &[SeedResult]) -> Self {
        let acc: Vec<f64> = results.iter().map(|r| r.final_eval_accuracy).collect();
        let wd: Vec<f64> = results.iter().map(|r| r.pct_wrongly_dominant).collect();
        let n = results.len().max(1) as f64;
        Self {
            strategy: strategy.to_string(),
            seeds: results.len(),
            acc_median: median(&acc),
            acc_min: acc.iter().copied().fold(f64::INFINITY, f64::min),
            acc_max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            pct_conflicting_mean: results.iter().map(|r| r.pct_conflicting).sum::<f64>() / n,
            pct_wrongly_dominant_mean: wd.iter().sum::<f64>() / n,
            pct_wrongly_dominant_median: median(&wd),
        }
    }
}

/// Median; the mean of the two middle values for even lengths. NaN if empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct StrategyReport {
    pub label: String,
    pub seeds: Vec<SeedResult>,
    pub summary: SummaryRow,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub strategies: Vec<StrategyReport>,
}

impl RunReport {
    pub fn strategy(&self, label: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.label == label)
    }
}

/// Trains one model per seed with the spec's strategy.
pub fn run(spec: &ExperimentSpec) -> Result<RunReport, ExperimentError> {
    execute(spec, &[(spec.train.remedy.label(), spec.clone())], false)
}

/// Trains every variant on every seed. Each variant gets a subdirectory;
/// `summary.csv` holds one row per variant.
pub fn sweep(spec: &ExperimentSpec, variants: &[StrategyVariant]) -> Result<RunReport, ExperimentError> {
    if variants.is_empty() {
        return Err(ExperimentError::Invalid(vec![ConfigError {
            field: "strategies",
            message: "need at least one strategy".into(),
        }]));
    }
    let jobs: Vec<(String, ExperimentSpec)> = variants
        .iter()
        .map(|v| {
            let s = spec.with_variant(v);
            (s.train.remedy.label(), s)
        })
        .collect();
    execute(spec, &jobs, true)
}

fn execute(
    spec: &ExperimentSpec,
    jobs: &[(String, ExperimentSpec)],
    nested: bool,
) -> Result<RunReport, ExperimentError> {
    let errors: Vec<ConfigError> = jobs.iter().flat_map(|(_, s)| validate(s)).collect();
    if !errors.is_empty() {
        return Err(ExperimentError::Invalid(errors));
    }
    let mut labels: Vec<&str> = jobs.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != jobs.len() {
        return Err(ExperimentError::Invalid(vec![ConfigError {
            field: "strategies",
            message: "strategies must be distinct".into(),
        }]));
    }

    let dir = spec.run_dir();
    let existed = dir.exists();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut created: Vec<PathBuf> = Vec::new();

    let result = (|| {
        let units: Vec<(usize, u64, PathBuf)> = jobs
            .iter()
            .enumerate()
            .flat_map(|(j, (label, s))| {
                let base = if nested { dir.join(label) } else { dir.clone() };
                s.seeds
                    .iter()
                    .map(move |&seed| (j, seed, base.join(format!("seed-{seed}"))))
            })
            .collect();
        for (_, _, d) in &units {
            if d.exists() {
                fs::remove_dir_all(d).map_err(io_err(d))?;
            }
            created.push(d.clone());
        }
        if nested {
            for (label, _) in jobs {
                created.push(dir.join(label));
            }
        }
        let results: Vec<(usize, SeedResult)> = units
            .par_iter()
            .map(|(j, seed, d)| run_seed(&jobs[*j].1, &jobs[*j].0, *seed, d).map(|r| (*j, r)))
            .collect::<Result<_, _>>()?;

        let strategies: Vec<StrategyReport> = jobs
            .iter()
            .enumerate()
            .map(|(j, (label, _))| {
                let seeds: Vec<SeedResult> = results
                    .iter()
                    .filter(|(k, _)| *k == j)
                    .map(|(_, r)| r.clone())
                    .collect();
                let summary = SummaryRow::from_results(label, &seeds);
                StrategyReport {
                    label: label.clone(),
                    seeds,
                    summary,
                }
            })
            .collect();
        let summary_path = dir.join("summary.csv");
        created.push(summary_path.clone());
        write_summary(&summary_path, &strategies)?;
        Ok(RunReport {
            dir: dir.clone(),
            strategies,
        })
    })();

    if result.is_err() {
        for path in created.iter().rev() {
            if path.is_dir() {
                let _ = fs::remove_dir_all(path);
            } else {
                let _ = fs::remove_file(path);
            }
        }
        if !existed {
            let _ = fs::remove_dir_all(&dir);
        }
    }
    result
}

/// Trains a single seed into `dir`.
pub fn run_seed(
    spec: &ExperimentSpec,
    label: &str,
    seed: u64,
    dir: &Path,
) -> Result<SeedResult, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let train_err = |source| ExperimentError::Train { seed, source };

    let mut config = spec.train.clone();
    config.seed = seed;
    let task = SyntheticTask::new(seed, spec.data.num_classes, spec.data.dim)
        .map_err(|e| train_err(e.into()))?;
    let source = SyntheticSource {
        task,
        snr_db: spec.data.snr_db,
        eval_samples: spec.data.eval_samples,
        batches_per_epoch: config.batches_per_epoch,
    };
    let net = Network::new(&spec.network_shape(), seed ^ NET_SEED_SALT).map_err(|e| train_err(e.into()))?;

    let mut writer = CsvStatsWriter::create(dir, spec.write_layers).map_err(train_err)?;
    let (tx, rx) = mpsc::channel::<StatsEvent>();
    let output = std::thread::scope(|scope| {
        let consumer = scope.spawn(move || -> Result<(), TrainError> {
            for event in rx {
                writer.consume(event)?;
            }
            writer.flush()
        });
        let mut sink = ChannelSink(tx);
        let trained = trainer::train_with(&config, &config.remedy, &source, net, &mut sink);
        drop(sink);
        let written = consumer.join().expect("stats writer thread panicked");
        trained.and_then(|out| written.map(|_| out))
    })
    .map_err(train_err)?;

    let result = SeedResult::from_epochs(label.to_string(), seed, &output.epochs, dir.to_path_buf());
    let metrics = dir.join("metrics.json");
    fs::write(&metrics, serde_json::to_string_pretty(&result)?).map_err(io_err(&metrics))?;
    let ckpt = dir.join("final.net");
    let file = fs::File::create(&ckpt).map_err(io_err(&ckpt))?;
    output
        .net
        .write_checkpoint(BufWriter::new(file))
        .map_err(|e| train_err(e.into()))?;
    Ok(result)
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "strategy",
    "seeds",
    "acc_median",
    "acc_min",
    "acc_max",
    "pct_conflicting_mean",
    "pct_wrongly_dominant_mean",
    "pct_wrongly_dominant_median",
];

fn write_summary(path: &Path, strategies: &[StrategyReport]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    let f = trainer::fmt_float;
    for s in strategies {
        let r = &s.summary;
        w.write_record([
            r.strategy.clone(),
            r.seeds.to_string(),
            f(r.acc_median),
            f(r.acc_min),
            f(r.acc_max),
            f(r.pct_conflicting_mean),
            f(r.pct_wrongly_dominant_mean),
            f(r.pct_wrongly_dominant_median),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Command-line overrides applied on top of a spec (or the defaults).
#[derive(Debug, Clone, Default, Args)]
pub struct SpecOverrides {
    /// TOML experiment spec; flags given alongside override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// naive | pcgrad | fixed-theta:<deg> | gradient-remedy | projection-only
    #[arg(long)]
    pub strategy: Option<StrategyVariant>,
    /// Dominance threshold K.
    #[arg(long)]
    pub k: Option<f64>,
    /// Weight of the dominant task's loss.
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Fixed projection angle in degrees, for fixed-theta.
    #[arg(long = "theta-deg")]
    pub theta_deg: Option<f64>,
    /// cos-theta-prime | inv-sqrt-k | const:<c>
    #[arg(long = "ratio-rule")]
    pub ratio_rule: Option<RatioRule>,
    #[arg(long = "r-min")]
    pub r_min: Option<f64>,
    /// Disable the rescale step of gradient-remedy.
    #[arg(long = "no-rescale")]
    pub no_rescale: bool,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batches-per-epoch")]
    pub batches_per_epoch: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long = "warmup-steps")]
    pub warmup_steps: Option<usize>,
    /// combined | separate
    #[arg(long)]
    pub grouping: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long = "snr-db", allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    #[arg(long = "eval-samples")]
    pub eval_samples: Option<usize>,
    /// Comma-separated trunk widths.
    #[arg(long, value_delimiter = ',')]
    pub trunk: Option<Vec<usize>>,
    /// Output root; defaults to $GRADIENT_REMEDY_OUT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the per-unit layers.csv.
    #[arg(long = "no-layers-csv")]
    pub no_layers_csv: bool,
}

impl SpecOverrides {
    /// Loads `--config` if given, then applies every flag that was set.
    pub fn resolve(&self) -> Result<ExperimentSpec, ExperimentError> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        self.apply(&mut spec)
            .map_err(|e| ExperimentError::Invalid(vec![e]))?;
        Ok(spec)
    }

    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<(), ConfigError> {
        let t = &mut spec.train;
        if let Some(name) = &self.name {
            spec.name = name.clone();
        }
        if let Some(v) = self.strategy {
            t.remedy.strategy = v.strategy;
            t.remedy.rescale_enabled = v.rescale;
        }
        if let Some(deg) = self.theta_deg {
            t.remedy.strategy = Strategy::FixedTheta {
                theta: deg.to_radians(),
            };
        }
        if self.no_rescale {
            t.remedy.rescale_enabled = false;
        }
        if let Some(k) = self.k {
            t.remedy.k = k;
        }
        if let Some(rule) = self.ratio_rule {
            t.remedy.ratio_rule = rule;
        }
        if let Some(r) = self.r_min {
            t.remedy.r_min = r;
        }
        if let Some(l) = self.lambda {
            t.lambda = l;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batches_per_epoch {
            t.batches_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.warmup_steps {
            t.warmup_steps = v;
        }
        if let Some(o) = &self.optimizer {
            t.optimizer = match o.as_str() {
                "sgd" => Optimizer::Sgd,
                "adam" => Optimizer::adam(),
                other => {
                    return Err(ConfigError {
                        field: "optimizer",
                        message: format!("unknown optimizer `{other}`"),
                    })
                }
            };
        }
        if let Some(g) = &self.grouping {
            t.grouping = match g.as_str() {
                "combined" => LayerGrouping::Combined,
                "separate" => LayerGrouping::Separate,
                other => {
                    return Err(ConfigError {
                        field: "grouping",
                        message: format!("unknown grouping `{other}`"),
                    })
                }
            };
        }
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
        }
        if let Some(v) = self.dim {
            spec.data.dim = v;
        }
        if let Some(v) = self.classes {
            spec.data.num_classes = v;
        }
        if let Some(v) = self.snr_db {
            spec.data.snr_db = v;
        }
        if let Some(v) = self.eval_samples {
            spec.data.eval_samples = v;
        }
        if let Some(v) = &self.trunk {
            spec.arch.trunk = v.clone();
        }
        if let Some(out) = &self.out {
            spec.output_dir = Some(out.clone());
        }
        if self.no_layers_csv {
            spec.write_layers = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgery::RemedyConfig;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn defaults_validate() {
        let spec = ExperimentSpec::default();
        assert!(validate(&spec).is_empty());
        assert_eq!(spec.train.lambda, 0.7);
        assert_eq!(spec.train.remedy.k, 5.0);
        assert_eq!(spec.train.batch_size, 64);
    }

    #[test]
    fn validate_reports_every_problem() {
        let mut spec = ExperimentSpec::default();
        spec.train.remedy.k = 1.0;
        spec.train.lambda = 1.2;
        spec.seeds.clear();
        spec.name = String::new();
        let errors = validate(&spec);
        let fields: Vec<&str> = errors.iter().map(|e| e.field).collect();
        assert_eq!(fields, vec!["name", "seeds", "k", "lambda"]);
        assert_eq!(errors[2].message, "K must exceed 1");
    }

    #[test]
    fn theta_bounds() {
        let mut spec = ExperimentSpec::default();
        spec.train.remedy.strategy = Strategy::FixedTheta {
            theta: 90f64.to_radians(),
        };
        assert!(validate(&spec).is_empty());
        spec.train.remedy.strategy = Strategy::FixedTheta { theta: 0.0 };
        assert_eq!(validate(&spec)[0].field, "theta");
        spec.train.remedy.strategy = Strategy::FixedTheta {
            theta: 91f64.to_radians(),
        };
        assert_eq!(validate(&spec)[0].field, "theta");
    }

    #[test]
    fn strategy_variants_parse() {
        let v: StrategyVariant = "fixed-theta:36deg".parse().unwrap();
        assert_eq!(
            v.strategy,
            Strategy::FixedTheta {
                theta: 36f64.to_radians()
            }
        );
        assert_eq!(v.to_string(), "fixed-theta:36deg");
        let v: StrategyVariant = "fixed-theta:90".parse().unwrap();
        assert!(matches!(v.strategy, Strategy::FixedTheta { theta } if (theta - FRAC_PI_2).abs() < 1e-15));
        let v: StrategyVariant = "projection-only".parse().unwrap();
        assert!(!v.rescale);
        assert_eq!(v.to_string(), "projection-only");
        assert!("bogus".parse::<StrategyVariant>().is_err());
        assert!("fixed-theta:abc".parse::<StrategyVariant>().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = ExperimentSpec {
            name: "rt".into(),
            seeds: vec![1, 2, 3],
            ..ExperimentSpec::default()
        };
        spec.train.remedy.strategy = Strategy::FixedTheta {
            theta: 36f64.to_radians(),
        };
        spec.train.remedy.ratio_rule = RatioRule::Constant(1.0 / 3.0);
        spec.train.optimizer = Optimizer::Sgd;
        spec.output_dir = Some("/tmp/x".into());
        let text = spec.to_toml_string().unwrap();
        assert_eq!(ExperimentSpec::from_toml_str(&text).unwrap(), spec);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let spec = ExperimentSpec::from_toml_str("name = \"p\"\n[train]\nlambda = 0.5\n").unwrap();
        assert_eq!(spec.name, "p");
        assert_eq!(spec.train.lambda, 0.5);
        assert_eq!(spec.train.remedy, RemedyConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        let mut file_spec = ExperimentSpec::default();
        file_spec.train.remedy.k = 3.0;
        file_spec.train.lambda = 0.5;
        file_spec.save(&path).unwrap();
        let o = SpecOverrides {
            config: Some(path),
            k: Some(8.0),
            ratio_rule: Some(RatioRule::InvSqrtK),
            seeds: Some(vec![4, 5]),
            ..SpecOverrides::default()
        };
        let spec = o.resolve().unwrap();
        assert_eq!(spec.train.remedy.k, 8.0);
        assert_eq!(spec.train.lambda, 0.5);
        assert_eq!(spec.train.remedy.ratio_rule, RatioRule::InvSqrtK);
        assert_eq!(spec.seeds, vec![4, 5]);
    }

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
