//! Named experiments, the dataset × seed grid, and persisted artifacts.
//!
//! Layout under the output root:
//!
//! ```text
//! datasets/<hash>/{train,val,test,ood}.bin       shared, keyed by config content
//! <experiment>/cells/seed-<s>/<A|B>/cell.json     per-cell record
//! <experiment>/cells/seed-<s>/<A|B>/trace.json
//! <experiment>/cells/seed-<s>/<A|B>/backbone.ckpt
//! <experiment>/cells/seed-<s>/<A|B>/probe_{main,diag}.json
//! <experiment>/report.{json,csv}
//! <experiment>/charts/*.svg
//! <experiment>/manifest.json                      the only file holding wall times
//! ```

use crate::chart;
use crate::data::{gen_dataset, load_splits, save_splits, DatasetConfig, SplitSet, SplitSizes, Theta};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, compute_seed_report, ConfigReport, SeedScores};
use crate::model::BackboneConfig;
use crate::pretrain::{self, proxy_score, TrainConfig, TrainTrace};
use crate::probe::{fit_and_evaluate, ProbeConfig, ProbeRun, Protocol, SplitFeatures};
use crate::rng::StreamKey;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PROXYGAP_OUT";
pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];

/// Background-heavy dataset of the primary pair.
pub const PRIMARY_A: Theta = Theta::new(0.95, 0.10, 0.08, 0.95, 5);
/// Relevance-heavy dataset of the primary pair.
pub const PRIMARY_B: Theta = Theta::new(0.30, 0.95, 0.01, 0.35, 2);

/// Output root from [`OUT_ENV`], else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Primary,
    BackgroundOnly,
    RelevanceOnly,
    Custom,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::Primary,
        ExperimentName::BackgroundOnly,
        ExperimentName::RelevanceOnly,
        ExperimentName::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Primary => "primary",
            ExperimentName::BackgroundOnly => "background_only",
            ExperimentName::RelevanceOnly => "relevance_only",
            ExperimentName::Custom => "custom",
        }
    }

    /// The fixed θ pair, or `None` for custom experiments.
    pub fn thetas(self) -> Option<(Theta, Theta)> {
        let with_relevance = |t: Theta| Theta { rho: 0.60, eta: 0.03, ..t };
        let with_background = |t: Theta| Theta {
            b: 0.60,
            p: 0.65,
            d: 3,
            ..t
        };
        match self {
            ExperimentName::Primary => Some((PRIMARY_A, PRIMARY_B)),
            ExperimentName::BackgroundOnly => Some((with_relevance(PRIMARY_A), with_relevance(PRIMARY_B))),
            ExperimentName::RelevanceOnly => Some((with_background(PRIMARY_A), with_background(PRIMARY_B))),
            ExperimentName::Custom => None,
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|n| n.as_str()).collect();
            Error::Usage(format!("unknown experiment {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    /// 8k/1k splits, 2 layers of width 64, 4 pretraining and 30 probe epochs.
    Smoke,
}

impl Scale {
    pub fn settings(self) -> ScaleSettings {
        match self {
            Scale::Full => ScaleSettings {
                sizes: SplitSizes {
                    n_train: 50_000,
                    n_val: 5_000,
                    n_test: 5_000,
                    n_ood: 5_000,
                },
                backbone: BackboneConfig::full(),
                pretrain_epochs: 12,
                probe_epochs: 100,
            },
            Scale::Smoke => ScaleSettings {
                sizes: SplitSizes {
                    n_train: 8_000,
                    n_val: 1_000,
                    n_test: 1_000,
                    n_ood: 1_000,
                },
                backbone: BackboneConfig::smoke(),
                pretrain_epochs: 4,
                probe_epochs: 30,
            },
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "smoke" => Ok(Scale::Smoke),
            _ => Err(Error::Usage(format!("unknown scale {s:?}; expected full or smoke"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSettings {
    pub sizes: SplitSizes,
    pub backbone: BackboneConfig,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
}

impl ScaleSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            ..TrainConfig::full(seed)
        }
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            ..ProbeConfig::full(seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    A,
    B,
}

impl DatasetTag {
    pub fn name(self) -> &'static str {
        match self {
            DatasetTag::A => "A",
            DatasetTag::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub theta_a: Theta,
    pub theta_b: Theta,
    pub seeds: Vec<u64>,
    pub scale: Scale,
    /// Output root; the experiment writes under `out_dir/<name>`.
    pub out_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaOverride {
    b: Option<f64>,
    rho: Option<f64>,
    eta: Option<f64>,
    p: Option<f64>,
    d: Option<u32>,
}

impl ThetaOverride {
    fn apply(&self, t: Theta) -> Theta {
        Theta {
            b: self.b.unwrap_or(t.b),
            rho: self.rho.unwrap_or(t.rho),
            eta: self.eta.unwrap_or(t.eta),
            p: self.p.unwrap_or(t.p),
            d: self.d.unwrap_or(t.d),
        }
    }
}

/// Custom experiment file: a base θ pair plus per-coordinate overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomFile {
    base: Option<String>,
    seeds: Option<Vec<u64>>,
    scale: Option<Scale>,
    #[serde(default)]
    theta_a: ThetaOverride,
    #[serde(default)]
    theta_b: ThetaOverride,
}

impl ExperimentSpec {
    /// A fixed configuration with the default seeds and one worker.
    pub fn named(name: ExperimentName, scale: Scale, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let (theta_a, theta_b) = name
            .thetas()
            .ok_or_else(|| Error::Usage("the custom experiment needs a config file".into()))?;
        Ok(ExperimentSpec {
            name,
            theta_a,
            theta_b,
            seeds: DEFAULT_SEEDS.to_vec(),
            scale,
            out_dir: out_dir.into(),
            workers: 1,
        })
    }

    /// Parses a custom experiment file:
    ///
    /// ```toml
    /// base = "primary"        # optional named pair to start from
    /// seeds = [42]            # optional
    /// scale = "smoke"         # optional
    /// [theta_a]
    /// rho = 0.5               # any of b, rho, eta, p, d
    /// [theta_b]
    /// d = 3
    /// ```
    pub fn custom_from_toml(text: &str, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let file: CustomFile = toml::from_str(text).map_err(|e| Error::Malformed {
            what: "experiment config",
            detail: e.to_string(),
        })?;
        let base: ExperimentName = file.base.as_deref().unwrap_or("primary").parse()?;
        let (a, b) = base
            .thetas()
            .ok_or_else(|| Error::Usage("a custom experiment cannot use custom as its base".into()))?;
        let spec = ExperimentSpec {
            name: ExperimentName::Custom,
            theta_a: file.theta_a.apply(a),
            theta_b: file.theta_b.apply(b),
            seeds: file.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            scale: file.scale.unwrap_or(Scale::Smoke),
            out_dir: out_dir.into(),
            workers: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::validate_theta(&self.theta_a)?;
        crate::data::validate_theta(&self.theta_b)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(self.name.as_str())
    }

    pub fn theta(&self, tag: DatasetTag) -> Theta {
        match tag {
            DatasetTag::A => self.theta_a,
            DatasetTag::B => self.theta_b,
        }
    }

    /// Every (seed, dataset) cell in report order.
    pub fn plans(&self) -> Vec<CellPlan> {
        let settings = self.scale.settings();
        self.seeds
            .iter()
            .flat_map(|&seed| {
                [DatasetTag::A, DatasetTag::B].map(|tag| CellPlan {
                    seed,
                    tag,
                    theta: self.theta(tag),
                    settings: settings.clone(),
                })
            })
            .collect()
    }
}

/// One pretraining-and-probing unit of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub seed: u64,
    pub tag: DatasetTag,
    pub theta: Theta,
    pub settings: ScaleSettings,
}

impl CellPlan {
    /// The data seed depends on the run seed and the dataset tag; pretraining
    /// and probing streams depend on the run seed only, so A and B share an
    /// initialization.
    pub fn dataset_config(&self) -> DatasetConfig {
        let seed = StreamKey::root(self.seed).child("dataset").child(self.tag.name()).derive_seed();
        DatasetConfig::new(self.theta, self.settings.sizes, seed)
    }

    pub fn cell_dir(&self, experiment_dir: &Path) -> PathBuf {
        experiment_dir.join("cells").join(format!("seed-{}", self.seed)).join(self.tag.name())
    }
}

/// Hex digest naming a dataset's cache directory.
pub fn dataset_hash(config: &DatasetConfig) -> String {
    let digest = Sha256::digest(config.to_toml_string().as_bytes());
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Loads `config` from the cache under `root/datasets`, generating and
/// persisting it on a miss. Returns the splits and their directory.
pub fn cached_dataset(root: &Path, config: &DatasetConfig) -> Result<(SplitSet, PathBuf)> {
    let dir = root.join("datasets").join(dataset_hash(config));
    if dir.exists() {
        match load_splits(&dir) {
            Ok(set) if set.config == *config => return Ok((set, dir)),
            Ok(_) => log::warn!("{}: cached config differs, regenerating", dir.display()),
            Err(e) => log::warn!("{}: unreadable cache ({e}), regenerating", dir.display()),
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let set = gen_dataset(config)?;
    let tmp = root.join("datasets").join(format!(
        ".tmp-{}-{}-{}",
        dataset_hash(config),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    save_splits(&tmp, &set)?;
    if fs::rename(&tmp, &dir).is_err() {
        // another writer won the race with identical content
        let _ = fs::remove_dir_all(&tmp);
        if !dir.exists() {
            return Err(Error::Config(format!("could not publish dataset cache {}", dir.display())));
        }
    }
    Ok((set, dir))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum DiagOutcome {
    Ran { run: ProbeRun },
    Inapplicable { reason: String },
}

impl DiagOutcome {
    pub fn run(&self) -> Option<&ProbeRun> {
        match self {
            DiagOutcome::Ran { run } => Some(run),
            DiagOutcome::Inapplicable { .. } => None,
        }
    }
}

/// Everything the report needs from one cell. Holds no timing data, so it is
/// byte-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub tag: DatasetTag,
    pub dataset: DatasetConfig,
    pub dataset_hash: String,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub n_params: usize,
    pub best_val_loss: f64,
    pub proxy: f64,
    pub checkpoint_checksum: String,
    pub main: ProbeRun,
    pub diag: DiagOutcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Pretrain,
    Probe,
    Persist,
    Report,
    Charts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub seed: Option<u64>,
    pub tag: Option<DatasetTag>,
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.stage)?;
        if let Some(seed) = self.seed {
            write!(f, " seed {seed}")?;
        }
        if let Some(tag) = self.tag {
            write!(f, " dataset {}", tag.name())?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellArtifacts {
    pub seed: u64,
    pub tag: DatasetTag,
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub record: PathBuf,
    pub probe_main: PathBuf,
    pub probe_diag: PathBuf,
    pub wall_seconds: f64,
}

impl CellArtifacts {
    pub fn paths(&self) -> [&Path; 6] {
        [&self.dataset_dir, &self.checkpoint, &self.trace, &self.record, &self.probe_main, &self.probe_diag]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub harness_version: String,
    pub spec: ExperimentSpec,
    pub cells: Vec<CellArtifacts>,
    pub report_json: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
    pub charts: Vec<PathBuf>,
    pub errors: Vec<StageError>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty() && self.report_json.is_some()
    }

    pub fn load_report(&self) -> Result<ConfigReport> {
        let path = self
            .report_json
            .as_ref()
            .ok_or_else(|| Error::Config("run produced no report".into()))?;
        ConfigReport::from_json(&read_text(path)?)
    }

    pub fn load_cell(&self, seed: u64, tag: DatasetTag) -> Result<CellRecord> {
        let cell = self
            .cells
            .iter()
            .find(|c| c.seed == seed && c.tag == tag)
            .ok_or_else(|| Error::Config(format!("no cell for seed {seed}, dataset {}", tag.name())))?;
        Ok(serde_json::from_str(&read_text(&cell.record)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("record serializes");
    s.push('\n');
    s
}

/// Result of one successful cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub record: CellRecord,
    pub trace: TrainTrace,
    pub artifacts: CellArtifacts,
}

/// Generates (or loads) the data, pretrains, scores the proxy, runs both
/// probe protocols and persists every artifact of one cell.
pub fn run_cell(plan: &CellPlan, out_root: &Path, experiment_dir: &Path) -> std::result::Result<CellOutcome, StageError> {
    let started = Instant::now();
    let fail = |stage: Stage| {
        move |e: Error| StageError {
            seed: Some(plan.seed),
            tag: Some(plan.tag),
            stage,
            message: e.to_string(),
        }
    };
    let dataset = plan.dataset_config();
    let (splits, dataset_dir) = cached_dataset(out_root, &dataset).map_err(fail(Stage::Data))?;
    log::info!("seed {} dataset {}: pretraining", plan.seed, plan.tag.name());
    let train = plan.settings.train_config(plan.seed);
    let (params, trace) = pretrain::pretrain(&splits, &plan.settings.backbone, &train).map_err(fail(Stage::Pretrain))?;
    let n_params = params.param_count();
    let proxy = proxy_score(&trace, n_params).map_err(fail(Stage::Pretrain))?;

    log::info!("seed {} dataset {}: probing", plan.seed, plan.tag.name());
    let probe = plan.settings.probe_config(plan.seed);
    let features = SplitFeatures::extract(&params, &splits).map_err(fail(Stage::Probe))?;
    let (main, diag) = rayon::join(
        || fit_and_evaluate(Protocol::Main, &features, &probe),
        || fit_and_evaluate(Protocol::Diag, &features, &probe),
    );
    let main = main.map_err(fail(Stage::Probe))?;
    let diag = match diag {
        Ok(run) => DiagOutcome::Ran { run },
        Err(Error::ProtocolInapplicable(reason)) => DiagOutcome::Inapplicable { reason },
        Err(e) => return Err(fail(Stage::Probe)(e)),
    };

    let dir = plan.cell_dir(experiment_dir);
    let record = CellRecord {
        seed: plan.seed,
        tag: plan.tag,
        dataset_hash: dataset_hash(&dataset),
        dataset,
        backbone: plan.settings.backbone.clone(),
        train,
        n_params,
        best_val_loss: trace.best_val_loss().expect("at least one epoch"),
        proxy,
        checkpoint_checksum: trace.final_checksum.clone(),
        main,
        diag,
    };
    let artifacts = CellArtifacts {
        seed: plan.seed,
        tag: plan.tag,
        dataset_dir,
        checkpoint: dir.join("backbone.ckpt"),
        trace: dir.join("trace.json"),
        record: dir.join("cell.json"),
        probe_main: dir.join("probe_main.json"),
        probe_diag: dir.join("probe_diag.json"),
        wall_seconds: 0.0,
    };
    let persist = || -> Result<()> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        params.save(&artifacts.checkpoint)?;
        write_text(&artifacts.trace, &to_json(&trace))?;
        write_text(&artifacts.probe_main, &to_json(&record.main))?;
        write_text(&artifacts.probe_diag, &to_json(&record.diag))?;
        write_text(&artifacts.record, &to_json(&record))
    };
    persist().map_err(fail(Stage::Persist))?;
    Ok(CellOutcome {
        record,
        trace,
        artifacts: CellArtifacts {
            wall_seconds: started.elapsed().as_secs_f64(),
            ..artifacts
        },
    })
}

fn seed_scores(a: &CellRecord, b: &CellRecord) -> SeedScores {
    SeedScores {
        proxy_a: a.proxy,
        proxy_b: b.proxy,
        main_a: a.main.ood_acc,
        main_b: b.main.ood_acc,
        diag_a: a.diag.run().map(|r| r.ood_acc),
        diag_b: b.diag.run().map(|r| r.ood_acc),
    }
}

/// Builds the per-seed reports from cell records in `spec.seeds` order.
pub fn build_report(spec: &ExperimentSpec, records: &[CellRecord]) -> Result<ConfigReport> {
    let find = |seed: u64, tag: DatasetTag| {
        records
            .iter()
            .find(|r| r.seed == seed && r.tag == tag)
            .ok_or_else(|| Error::Config(format!("missing cell for seed {seed}, dataset {}", tag.name())))
    };
    let seeds = spec
        .seeds
        .iter()
        .map(|&s| compute_seed_report(s, seed_scores(find(s, DatasetTag::A)?, find(s, DatasetTag::B)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate(spec.name.as_str(), seeds)
}

/// Runs the whole grid on a pool of `spec.workers` threads, then aggregates
/// and writes the report, charts and manifest. Stage failures are recorded
/// in the manifest rather than returned; check [`RunManifest::is_complete`].
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunManifest> {
    spec.validate()?;
    let started = Instant::now();
    let exp_dir = spec.experiment_dir();
    fs::create_dir_all(&exp_dir).map_err(|e| Error::io(&exp_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let plans = spec.plans();
    let outcomes: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        plans.par_iter().map(|p| run_cell(p, &spec.out_dir, &exp_dir)).collect()
    });

    let mut manifest = RunManifest {
        harness_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        cells: Vec::new(),
        report_json: None,
        report_csv: None,
        charts: Vec::new(),
        errors: Vec::new(),
        wall_seconds: 0.0,
    };
    let mut records = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                manifest.cells.push(o.artifacts);
                records.push(o.record);
            }
            Err(e) => {
                log::error!("{e}");
                manifest.errors.push(e);
            }
        }
    }
    if manifest.errors.is_empty() {
        let report_error = |stage: Stage| {
            move |e: Error| StageError {
                seed: None,
                tag: None,
                stage,
                message: e.to_string(),
            }
        };
        match build_report(spec, &records) {
            Ok(report) => {
                let json = exp_dir.join("report.json");
                let csv = exp_dir.join("report.csv");
                let written = write_text(&json, &(report.to_json() + "\n")).and_then(|_| write_text(&csv, &report.to_csv_string()));
                match written {
                    Ok(()) => {
                        manifest.report_json = Some(json);
                        manifest.report_csv = Some(csv);
                    }
                    Err(e) => manifest.errors.push(report_error(Stage::Persist)(e)),
                }
                match chart::emit_charts(std::slice::from_ref(&report), &exp_dir.join("charts")) {
                    Ok(paths) => manifest.charts = paths,
                    Err(e) => manifest.errors.push(report_error(Stage::Charts)(e)),
                }
            }
            Err(e) => manifest.errors.push(report_error(Stage::Report)(e)),
        }
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    let path = exp_dir.join("manifest.json");
    write_text(&path, &manifest.to_json())?;
    Ok(manifest)
}
