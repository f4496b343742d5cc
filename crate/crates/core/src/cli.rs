//! Config-driven experiment commands behind the `rkip` binary.
//!
//! Every command reads one JSON [`ExperimentConfig`], runs inside a rayon
//! pool sized by `threads` (or `RD_THREADS`), and writes its outputs plus a
//! `manifest.json` into `output_dir`.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attacks::{adversarial_accuracy, Attack, Norm, Scorer};
use crate::data::{self, Dataset, SplitSpec};
use crate::distill::{self, DistillConfig, DistillOutcome};
use crate::error::Error;
use crate::eval::{self, ObfuscationVerdict, ReportFormat};
use crate::krr::KernelMachine;
use crate::mlp::{self, MlpConfig, MlpParams};
use crate::ntk::KernelSpec;
use crate::seed::{example_seed, stream_seed};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "RD_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingInput(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Run(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Run(Error::Io(_) | Error::Format(_) | Error::UnsupportedVersion { .. }) => {
                EXIT_MISSING_INPUT
            }
            CliError::Run(_) => EXIT_CONFIG,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_MISSING_INPUT => "input",
            _ => "numeric",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn missing(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::MissingInput(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX files, optionally gzip-compressed.
    Mnist { images: PathBuf, labels: PathBuf },
    /// CIFAR-10 binary batches, concatenated in order.
    Cifar10 { batches: Vec<PathBuf> },
    Synth {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Held-out test rows, split off first.
    pub test_count: usize,
    /// Validation rows, split from the remainder.
    pub validation_count: usize,
    /// Keep only the first `train_limit` shuffled training rows.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// PGD-minus-square gap (points) that flags obfuscated gradients.
    #[serde(default = "default_gap")]
    pub gap_threshold: f64,
    /// Evaluate on the first `limit` test rows only.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_bins() -> usize {
    eval::DEFAULT_BINS
}

fn default_gap() -> f64 {
    eval::DEFAULT_GAP_THRESHOLD
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            gap_threshold: default_gap(),
            limit: None,
        }
    }
}

/// One experiment. Module `seed` fields are derived from the root `seed`
/// (see [`ExperimentConfig::resolved`]); values written there are replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub kernel: KernelSpec,
    pub distill: DistillConfig,
    #[serde(default)]
    pub attacks: Vec<Attack>,
    #[serde(default)]
    pub mlp: Option<MlpConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Seeds every module from the root seed through named streams.
    pub fn resolved(mut self) -> Self {
        self.distill.seed = stream_seed(self.seed, "distill");
        let attack_stream = stream_seed(self.seed, "attacks");
        for (i, a) in self.attacks.iter_mut().enumerate() {
            match a {
                Attack::Clean => {}
                Attack::Fgsm { config }
                | Attack::Pgd { config }
                | Attack::Square { config, .. } => {
                    config.seed = example_seed(attack_stream, i);
                }
            }
        }
        if let Some(m) = &mut self.mlp {
            m.seed = stream_seed(self.seed, "mlp");
        }
        self
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: Error| CliError::Config(e.to_string());
        self.kernel.validate().map_err(bad)?;
        self.distill.inner.validate().map_err(bad)?;
        if let Some(v) = &self.distill.validation {
            v.validate().map_err(bad)?;
        }
        if self.distill.support_size == 0 {
            return Err(CliError::Config(
                "distill.support_size must be positive".into(),
            ));
        }
        for a in &self.attacks {
            if let Some(c) = a.config() {
                c.validate().map_err(bad)?;
            }
        }
        if let Some(m) = &self.mlp {
            m.validate().map_err(bad)?;
        }
        if self.eval.bins == 0 {
            return Err(CliError::Config("eval.bins must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        if self.data.test_count == 0 || self.data.validation_count == 0 {
            return Err(CliError::Config(
                "data.test_count and data.validation_count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sets the leaf at dotted `path` (array indices as numbers) to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects path=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| {
                    CliError::Config(format!("{path}: {key:?} is not an array index"))
                })?;
                let len = items.len();
                let slot = items.get_mut(i).ok_or_else(|| {
                    CliError::Config(format!("{path}: index {i} out of range ({len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "{path}: {key:?} is below a scalar"
                )))
            }
        };
    }
    Err(CliError::Config("--set path is empty".into()))
}

/// Reads, overrides, parses and validates a config. A run manifest is
/// accepted too; its embedded resolved config is used.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value
        .get("config")
        .filter(|_| value.get("command").is_some())
    {
        value = inner.clone();
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn thread_count(cfg: &ExperimentConfig) -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(cfg.threads.unwrap_or_else(rayon::current_num_threads)),
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
        .install(f)
}

/// Train, validation and test splits of the configured source.
pub fn load_splits(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset, Dataset)> {
    let all = match &cfg.data.source {
        DataSource::Mnist { images, labels } => {
            for p in [images, labels] {
                if !p.exists() {
                    return Err(missing(p, "not found"));
                }
            }
            data::load_mnist(images, labels)?
        }
        DataSource::Cifar10 { batches } => {
            if let Some(p) = batches.iter().find(|p| !p.exists()) {
                return Err(missing(p, "not found"));
            }
            data::load_cifar10(batches)?
        }
        DataSource::Synth {
            n_per_class,
            classes,
            dim,
            separation,
        } => data::synth_gaussians(
            *n_per_class,
            *classes,
            *dim,
            *separation,
            stream_seed(cfg.seed, "data"),
        )?,
    };
    let (rest, test) = SplitSpec {
        train_fraction: 1.0,
        validation_count: cfg.data.test_count,
        seed: stream_seed(cfg.seed, "split-test"),
    }
    .split(&all)?;
    let (mut train, val) = SplitSpec {
        train_fraction: 1.0,
        validation_count: cfg.data.validation_count,
        seed: stream_seed(cfg.seed, "split-validation"),
    }
    .split(&rest)?;
    if let Some(limit) = cfg.data.train_limit {
        if limit < train.len() {
            train = train.select(&(0..limit).collect::<Vec<_>>(), train.name().to_string())?;
        }
    }
    Ok((train, val, test))
}

fn limited(ds: Dataset, limit: Option<usize>) -> CliResult<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            Ok(ds.select(&(0..n).collect::<Vec<_>>(), ds.name().to_string())?)
        }
        _ => Ok(ds),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

pub fn file_record(path: &Path) -> CliResult<FileRecord> {
    let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    })
}

/// Everything needed to re-run a command: the resolved config (seeds
/// included), the command line shape and input hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub threads: usize,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_time_secs: f64,
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

struct Run<'a> {
    command: &'static str,
    cfg: &'a ExperimentConfig,
    threads: usize,
    started: Instant,
    inputs: Vec<FileRecord>,
    outputs: Vec<PathBuf>,
    sizes: Option<Vec<usize>>,
}

impl<'a> Run<'a> {
    fn start(command: &'static str, cfg: &'a ExperimentConfig) -> CliResult<Self> {
        std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
        Ok(Self {
            command,
            cfg,
            threads: thread_count(cfg)?,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            sizes: None,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn finish(self) -> CliResult<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| file_record(p))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = Manifest {
            command: self.command.to_string(),
            version: version(),
            config: self.cfg.clone(),
            threads: self.threads,
            sizes: self.sizes,
            inputs: self.inputs,
            outputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.cfg.output_dir.join("manifest.json");
        let mut f = std::fs::File::create(&path).map_err(Error::from)?;
        serde_json::to_writer_pretty(&mut f, &manifest).map_err(Error::from)?;
        writeln!(f).map_err(Error::from)?;
        Ok(path)
    }
}

/// `distill`: writes `distilled.rkds`, `history.csv` and `manifest.json`.
pub fn cmd_distill(cfg: &ExperimentConfig) -> CliResult<DistillOutcome> {
    let mut run = Run::start("distill", cfg)?;
    let out = with_pool(run.threads, || {
        let (train, val, _) = load_splits(cfg)?;
        cfg.distill
            .validate(&train)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(distill::distill(&train, &val, &cfg.kernel, &cfg.distill)?)
    })?;
    let rkds = run.path("distilled.rkds");
    data::save_distilled(&out.dataset, &rkds)?;
    run.wrote(rkds);
    let history = run.path("history.csv");
    distill::write_history_csv(&out.history, &history)?;
    run.wrote(history);
    run.finish()?;
    Ok(out)
}

pub const SWEEP_HEADER: &str = "size,clean,fgsm,pgd,best_epoch,status";

/// One line of the sweep table; metrics are test accuracies under the
/// distillation's validation attack.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub clean: f64,
    pub fgsm: f64,
    pub pgd: f64,
    pub best_epoch: Option<usize>,
    /// `"ok"` or the error message.
    pub status: String,
}

pub fn check_sizes(sizes: &[usize]) -> CliResult<()> {
    if sizes.is_empty() {
        return Err(CliError::Config("sweep needs at least one size".into()));
    }
    for w in sizes.windows(2) {
        if w[0] == w[1] {
            return Err(CliError::Config(format!("duplicate sweep size {}", w[0])));
        }
        if w[0] > w[1] {
            return Err(CliError::Config("sweep sizes must be ascending".into()));
        }
    }
    Ok(())
}

/// `sweep`: one distillation per support size under `size-<n>/`, then `sweep.csv`.
/// A failing size is recorded in the table and the sweep moves on.
pub fn cmd_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> CliResult<Vec<SweepRow>> {
    check_sizes(sizes)?;
    let mut run = Run::start("sweep", cfg)?;
    run.sizes = Some(sizes.to_vec());
    let rows = with_pool(run.threads, || {
        let (train, val, test) = load_splits(cfg)?;
        let test = limited(test, cfg.eval.limit)?;
        let mut rows = Vec::new();
        for &size in sizes {
            let mut d = cfg.distill.clone();
            d.support_size = size;
            let attempt = || -> crate::Result<(DistillOutcome, crate::distill::HistoryRecord)> {
                d.validate(&train)?;
                let out = distill::distill(&train, &val, &cfg.kernel, &d)?;
                let km = KernelMachine::fit(&cfg.kernel, &out.dataset, out.ridge)?;
                let rec =
                    distill::evaluate_machine(&km, &test, d.validation_attack(), out.best_epoch)?;
                Ok((out, rec))
            };
            rows.push(match attempt() {
                Ok((out, rec)) => {
                    let dir = cfg.output_dir.join(format!("size-{size}"));
                    std::fs::create_dir_all(&dir).map_err(Error::from)?;
                    data::save_distilled(&out.dataset, dir.join("distilled.rkds"))?;
                    distill::write_history_csv(&out.history, &dir.join("history.csv"))?;
                    run.outputs.push(dir.join("distilled.rkds"));
                    run.outputs.push(dir.join("history.csv"));
                    SweepRow {
                        size,
                        clean: rec.clean_acc,
                        fgsm: rec.fgsm_acc,
                        pgd: rec.pgd_acc,
                        best_epoch: Some(out.best_epoch),
                        status: "ok".into(),
                    }
                }
                Err(e) => SweepRow {
                    size,
                    clean: f64::NAN,
                    fgsm: f64::NAN,
                    pgd: f64::NAN,
                    best_epoch: None,
                    status: e.to_string(),
                },
            });
        }
        Ok(rows)
    })?;
    let path = run.path("sweep.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(Error::from)?);
    writeln!(f, "{SWEEP_HEADER}").map_err(Error::from)?;
    for r in &rows {
        let best = r.best_epoch.map(|e| e.to_string()).unwrap_or_default();
        let status = r.status.replace([',', '\n'], ";");
        writeln!(
            f,
            "{},{},{},{},{best},{status}",
            r.size, r.clean, r.fgsm, r.pgd
        )
        .map_err(Error::from)?;
    }
    f.flush().map_err(Error::from)?;
    drop(f);
    run.wrote(path);
    run.finish()?;
    Ok(rows)
}

/// A scorer restored from an artifact file.
pub enum Model {
    /// Kernel machine refit on an RKDS support set.
    Kernel(KernelMachine),
    Mlp(MlpParams),
}

impl Model {
    pub fn scorer(&self) -> &dyn Scorer {
        match self {
            Model::Kernel(k) => k,
            Model::Mlp(m) => m,
        }
    }
}

/// Loads RKDS (refit with the config's kernel and ridge) or RKMP, by magic.
pub fn load_model(cfg: &ExperimentConfig, artifact: &Path) -> CliResult<Model> {
    let bytes = std::fs::read(artifact).map_err(|e| missing(artifact, e))?;
    match bytes.get(..4) {
        Some(b"RKDS") => {
            let ds = data::decode_distilled(&bytes)?;
            let (km, _) = distill::fit_with_retries(&cfg.kernel, &ds, cfg.distill.ridge)?;
            Ok(Model::Kernel(km))
        }
        Some(b"RKMP") => Ok(Model::Mlp(mlp::decode_params(&bytes)?)),
        _ => Err(missing(artifact, "neither an RKDS nor an RKMP file")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub accuracy: f64,
    pub max_perturbation: f64,
}

/// `attack`: runs every configured attack on the test split, saving the
/// adversarial inputs as `adv-<name>.rkds` and a summary in `attacks.json`/`attacks.csv`.
pub fn cmd_attack(cfg: &ExperimentConfig, artifact: &Path) -> CliResult<Vec<AttackResult>> {
    let mut run = Run::start("attack", cfg)?;
    run.inputs.push(file_record(artifact)?);
    let (results, advs) = with_pool(run.threads, || {
        let model = load_model(cfg, artifact)?;
        let (_, _, test) = load_splits(cfg)?;
        let test = limited(test, cfg.eval.limit)?;
        let scorer = model.scorer();
        let (x, y) = (test.examples().view(), test.labels().view());
        let mut results = Vec::new();
        let mut advs = Vec::new();
        for a in &cfg.attacks {
            let adv = a.run(scorer, x, y)?;
            let norm = a.config().map_or(Norm::Linf, |c| c.norm);
            results.push(AttackResult {
                attack: a.name(),
                accuracy: adversarial_accuracy(scorer, adv.view(), y)?,
                max_perturbation: crate::attacks::max_perturbation(adv.view(), x, norm),
            });
            let name = format!("{}-{}", test.name(), a.name());
            advs.push(Dataset::new(
                adv,
                test.labels().clone(),
                test.bounds(),
                test.labels_free(),
                name,
            )?);
        }
        Ok((results, advs))
    })?;
    for (r, adv) in results.iter().zip(&advs) {
        let p = run.path(&format!("adv-{}.rkds", r.attack));
        data::save_distilled(adv, &p)?;
        run.wrote(p);
    }
    let json = run.path("attacks.json");
    std::fs::write(
        &json,
        serde_json::to_string_pretty(&results).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    run.wrote(json);
    let csv = run.path("attacks.csv");
    let mut text = String::from("attack,accuracy,max_perturbation\n");
    for r in &results {
        text.push_str(&format!(
            "{},{},{}\n",
            r.attack, r.accuracy, r.max_perturbation
        ));
    }
    std::fs::write(&csv, text).map_err(Error::from)?;
    run.wrote(csv);
    run.finish()?;
    Ok(results)
}

/// `eval`: full diagnostic report on the test split (`report.json`,
/// `report.csv`), plus `probe.json` when both a PGD and a square attack ran.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    artifact: &Path,
) -> CliResult<(eval::EvalReport, Option<ObfuscationVerdict>)> {
    let mut run = Run::start("eval", cfg)?;
    run.inputs.push(file_record(artifact)?);
    let report = with_pool(run.threads, || {
        let model = load_model(cfg, artifact)?;
        let (_, _, test) = load_splits(cfg)?;
        let test = limited(test, cfg.eval.limit)?;
        Ok(eval::diagnose(
            model.scorer(),
            &test,
            &cfg.attacks,
            cfg.eval.bins,
        )?)
    })?;
    for (name, format) in [
        ("report.json", ReportFormat::Json),
        ("report.csv", ReportFormat::Csv),
    ] {
        let p = run.path(name);
        eval::emit_report(&report, &p, format)?;
        run.wrote(p);
    }
    let find = |pred: fn(&Attack) -> bool| {
        cfg.attacks
            .iter()
            .find(|a| pred(a))
            .and_then(|a| report.robust.iter().find(|r| r.attack == a.name()))
            .map(|r| r.accuracy)
    };
    let verdict = match (
        find(|a| matches!(a, Attack::Pgd { .. })),
        find(|a| matches!(a, Attack::Square { .. })),
    ) {
        (Some(pgd), Some(square)) => Some(ObfuscationVerdict::from_accuracies(
            pgd,
            square,
            cfg.eval.gap_threshold,
        )),
        _ => None,
    };
    if let Some(v) = &verdict {
        let p = run.path("probe.json");
        std::fs::write(
            &p,
            serde_json::to_string_pretty(v).map_err(Error::from)? + "\n",
        )
        .map_err(Error::from)?;
        run.wrote(p);
    }
    run.finish()?;
    Ok((report, verdict))
}

pub const MLP_HISTORY_HEADER: &str = "epoch,train_loss,val_clean,val_robust";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub lr: f64,
    pub accuracies: Vec<eval::RobustEntry>,
}

/// `transfer`: trains the configured MLP on an RKDS artifact over the
/// learning-rate grid and evaluates the selected network on the test split.
pub fn cmd_transfer(cfg: &ExperimentConfig, artifact: &Path) -> CliResult<TransferSummary> {
    let mlp_cfg = cfg
        .mlp
        .as_ref()
        .ok_or_else(|| CliError::Config("transfer needs an `mlp` section".into()))?;
    let mut run = Run::start("transfer", cfg)?;
    run.inputs.push(file_record(artifact)?);
    let report = with_pool(run.threads, || {
        let distilled = data::load_distilled(artifact).map_err(|e| match e {
            Error::Io(io) => missing(artifact, io),
            other => other.into(),
        })?;
        let (_, val, test) = load_splits(cfg)?;
        let test = limited(test, cfg.eval.limit)?;
        Ok(mlp::transfer_eval(
            &distilled,
            mlp_cfg,
            &val,
            &test,
            &cfg.attacks,
        )?)
    })?;
    let params = run.path("mlp.rkmp");
    mlp::save_params(&report.params, &params)?;
    run.wrote(params);
    let hist = run.path("mlp_history.csv");
    let mut text = format!("{MLP_HISTORY_HEADER}\n");
    for h in &report.history {
        text.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_clean, h.val_robust
        ));
    }
    std::fs::write(&hist, text).map_err(Error::from)?;
    run.wrote(hist);
    let summary = TransferSummary {
        lr: report.lr,
        accuracies: report
            .accuracies
            .iter()
            .map(|(attack, accuracy)| eval::RobustEntry {
                attack: attack.clone(),
                accuracy: *accuracy,
            })
            .collect(),
    };
    let json = run.path("transfer.json");
    std::fs::write(
        &json,
        serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    run.wrote(json);
    run.finish()?;
    Ok(summary)
}

/// `report`: reads a JSON or CSV report; converts it when `out` is given,
/// otherwise renders a plain-text summary.
pub fn cmd_report(path: &Path, out: Option<&Path>) -> CliResult<String> {
    if !path.exists() {
        return Err(missing(path, "not found"));
    }
    let report = eval::read_report(path, ReportFormat::from_path(path))?;
    if let Some(o) = out {
        eval::emit_report(&report, o, ReportFormat::from_path(o))?;
        return Ok(format!("wrote {}\n", o.display()));
    }
    Ok(render_report(&report))
}

pub fn render_report(r: &eval::EvalReport) -> String {
    let pct = |v: f64| format!("{:6.2}%", 100.0 * v);
    let mut s = format!(
        "examples          {}\nclean accuracy    {}\n",
        r.n,
        pct(r.clean_accuracy)
    );
    for e in &r.robust {
        s.push_str(&format!("{:<18}{}\n", e.attack, pct(e.accuracy)));
    }
    s.push_str(&format!(
        "loss              {:.4} (correct {:.4}, incorrect {:.4})\n",
        r.loss.all.mean, r.loss.correct.mean, r.loss.incorrect.mean
    ));
    if let Some(g) = &r.grad_norm {
        s.push_str(&format!(
            "grad norm         {:.4} (correct {:.4}, incorrect {:.4})\n",
            g.all.mean, g.correct.mean, g.incorrect.mean
        ));
    }
    s.push_str(&format!(
        "mean confidence   {:.4}\nECE               {:.4}\n",
        r.mean_confidence, r.ece
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_reach_nested_leaves() {
        let mut v =
            json!({"distill": {"epochs": 3}, "attacks": [{"kind": "pgd", "config": {"steps": 1}}]});
        apply_override(&mut v, "distill.epochs=7").unwrap();
        apply_override(&mut v, "attacks.0.config.steps=40").unwrap();
        apply_override(&mut v, "output_dir=/tmp/x").unwrap();
        assert_eq!(v["distill"]["epochs"], 7);
        assert_eq!(v["attacks"][0]["config"]["steps"], 40);
        assert_eq!(v["output_dir"], "/tmp/x");
        assert!(apply_override(&mut v, "attacks.3.kind=clean").is_err());
        assert!(apply_override(&mut v, "nonsense").is_err());
    }

    #[test]
    fn sizes_must_be_distinct_and_ascending() {
        assert!(check_sizes(&[10, 20]).is_ok());
        assert_eq!(check_sizes(&[10, 10]).unwrap_err().exit_code(), EXIT_CONFIG);
        assert!(check_sizes(&[20, 10]).is_err());
        assert!(check_sizes(&[]).is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(
            CliError::Run(Error::NonFinite("x")).exit_code(),
            EXIT_NUMERIC
        );
        assert_eq!(
            CliError::Run(Error::format("bad")).exit_code(),
            EXIT_MISSING_INPUT
        );
        assert_eq!(CliError::Run(Error::config("bad")).exit_code(), EXIT_CONFIG);
    }
}
