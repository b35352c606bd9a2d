//! Experiment configs, their defaults, and the `defaults < file < flags` layering.

use std::path::{Path, PathBuf};

use factrfm::datasets::{CsvOptions, LabelEncoding, SeparationConfig};
use factrfm::nn::{Activation, Schedule, TrainConfig};
use factrfm::{Error, KernelSpec, Result, RfmConfig, ScalarFn, UpdateRule};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_OUT_DIR: &str = "factrfm-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Rfm,
    NnFact,
    Separation,
    DeepLinear,
    TauKprime,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Rfm => "rfm",
            Command::NnFact => "nn-fact",
            Command::Separation => "separation",
            Command::DeepLinear => "deep-linear",
            Command::TauKprime => "tau-kprime",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Data source for the kernel commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum RfmTask {
    #[serde(rename_all = "camelCase")]
    Parity {
        d: usize,
        k: usize,
        n: usize,
        n_test: usize,
        encoding: LabelEncoding,
    },
    #[serde(rename_all = "camelCase")]
    ModularAddition { modulus: usize, train_fraction: f64 },
    #[serde(rename_all = "camelCase")]
    Csv {
        path: PathBuf,
        options: CsvOptions,
        train_fraction: f64,
    },
}

impl RfmTask {
    pub fn kind(&self) -> &'static str {
        match self {
            RfmTask::Parity { .. } => "parity",
            RfmTask::ModularAddition { .. } => "modularAddition",
            RfmTask::Csv { .. } => "csv",
        }
    }

    pub fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            RfmTask::Csv { path, .. } => vec![path.clone()],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RfmExperiment {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub task: RfmTask,
    pub algorithm: RfmConfig,
}

impl RfmExperiment {
    pub fn default_for(kind: &str) -> Result<Self> {
        let (task, algorithm) = match kind {
            "parity" => (
                RfmTask::Parity {
                    d: 50,
                    k: 2,
                    n: 500,
                    n_test: 1000,
                    encoding: LabelEncoding::ZeroOne,
                },
                RfmConfig::new(UpdateRule::FactGeom, KernelSpec::gaussian(5.0), 5, 1e-6),
            ),
            "modularAddition" => (
                RfmTask::ModularAddition {
                    modulus: 61,
                    train_fraction: 0.5,
                },
                RfmConfig::new(UpdateRule::FactGeom, KernelSpec::inner_product(ScalarFn::Square), 75, 1e-3),
            ),
            "csv" => (
                RfmTask::Csv {
                    path: PathBuf::new(),
                    options: CsvOptions {
                        normalization: factrfm::datasets::Normalization::Zscore,
                        ..CsvOptions::default()
                    },
                    train_fraction: 0.8,
                },
                RfmConfig::new(UpdateRule::FactGeom, KernelSpec::laplace(10.0), 5, 1e-3),
            ),
            other => return Err(Error::InvalidConfig(format!("unknown task kind '{other}'"))),
        };
        Ok(RfmExperiment {
            out_dir: DEFAULT_OUT_DIR.into(),
            seed: 0,
            task,
            algorithm,
        })
    }

    fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        match &self.task {
            RfmTask::Parity { d, k, n, n_test, .. } => {
                if *k == 0 || k > d || *n == 0 || *n_test == 0 {
                    return Err(Error::InvalidConfig(format!("parity needs 1 ≤ k ≤ d and n, nTest > 0 (d={d}, k={k})")));
                }
            }
            RfmTask::ModularAddition { modulus, train_fraction } => {
                if *modulus < 2 {
                    return Err(Error::InvalidConfig("modulus must be at least 2".into()));
                }
                check_fraction(*train_fraction)?;
            }
            RfmTask::Csv { path, train_fraction, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::InvalidConfig("csv task needs a path".into()));
                }
                check_fraction(*train_fraction)?;
            }
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("train fraction must lie in (0, 1), got {f}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum NnData {
    #[serde(rename_all = "camelCase")]
    Teacher {
        n: usize,
        input_dim: usize,
        outputs: usize,
        teacher_hidden: usize,
    },
    #[serde(rename_all = "camelCase")]
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
    #[serde(rename_all = "camelCase")]
    Csv { path: PathBuf, options: CsvOptions },
}

impl NnData {
    pub fn kind(&self) -> &'static str {
        match self {
            NnData::Teacher { .. } => "teacher",
            NnData::Idx { .. } => "idx",
            NnData::Csv { .. } => "csv",
        }
    }

    pub fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            NnData::Teacher { .. } => Vec::new(),
            NnData::Idx { images, labels, .. } => vec![images.clone(), labels.clone()],
            NnData::Csv { path, .. } => vec![path.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NnFactExperiment {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub data: NnData,
    pub model: ModelSpec,
    pub algorithm: TrainConfig,
    /// Layers to report; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl NnFactExperiment {
    pub fn default_for(kind: &str) -> Result<Self> {
        let data = match kind {
            "teacher" => NnData::Teacher {
                n: 1000,
                input_dim: 50,
                outputs: 10,
                teacher_hidden: 64,
            },
            "idx" => NnData::Idx {
                images: PathBuf::new(),
                labels: PathBuf::new(),
                limit: Some(1000),
            },
            "csv" => NnData::Csv {
                path: PathBuf::new(),
                options: CsvOptions::default(),
            },
            other => return Err(Error::InvalidConfig(format!("unknown data kind '{other}'"))),
        };
        let mut algorithm = TrainConfig::sgd(0.1, 1e-4, 200);
        algorithm.schedule = Schedule::Cosine;
        algorithm.batch_size = Some(64);
        algorithm.loss_target = None;
        algorithm.grad_norm_target = None;
        algorithm.log_every = 10;
        Ok(NnFactExperiment {
            out_dir: DEFAULT_OUT_DIR.into(),
            seed: 0,
            data,
            model: ModelSpec {
                hidden: vec![256, 256, 256],
                activation: Activation::Relu,
                bias: false,
            },
            algorithm,
            layers: None,
        })
    }

    fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        if !(self.algorithm.weight_decay > 0.0) {
            return Err(Error::FactUndefined);
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        match &self.data {
            NnData::Teacher {
                n,
                input_dim,
                outputs,
                teacher_hidden,
            } => {
                if [*n, *input_dim, *outputs, *teacher_hidden].contains(&0) {
                    return Err(Error::InvalidConfig("teacher sizes must be positive".into()));
                }
            }
            NnData::Idx { images, labels, .. } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    return Err(Error::InvalidConfig("idx data needs images and labels paths".into()));
                }
            }
            NnData::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::InvalidConfig("csv data needs a path".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SeparationExperiment {
    pub out_dir: PathBuf,
    /// Initialization seed.
    pub seed: u64,
    pub task: SeparationConfig,
    pub width: usize,
    /// Power `s` in the `AGOP^s` comparison.
    pub nfa_power: f64,
    /// `weightDecay` is always taken from `task.weightDecay`.
    pub algorithm: TrainConfig,
}

impl Default for SeparationExperiment {
    fn default() -> Self {
        let task = SeparationConfig::default();
        let mut algorithm = TrainConfig::adam(0.01, task.weight_decay, 1_000_000);
        algorithm.schedule = Schedule::Cosine;
        algorithm.loss_target = None;
        algorithm.grad_norm_target = None;
        algorithm.log_every = 50_000;
        SeparationExperiment {
            out_dir: DEFAULT_OUT_DIR.into(),
            seed: 0,
            task,
            width: 10,
            nfa_power: 1.0,
            algorithm,
        }
    }
}

impl SeparationExperiment {
    fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.algorithm.validate()?;
        if self.width < 7 {
            return Err(Error::InvalidConfig(format!("width must be at least 7, got {}", self.width)));
        }
        if !(self.nfa_power > 0.0) {
            return Err(Error::InvalidConfig("nfaPower must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeepLinearTask {
    pub depths: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeepLinearExperiment {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub task: DeepLinearTask,
    pub algorithm: TrainConfig,
}

impl Default for DeepLinearExperiment {
    fn default() -> Self {
        let mut algorithm = TrainConfig::sgd(0.01, 1e-2, 3000);
        algorithm.loss_target = None;
        algorithm.log_every = 100;
        DeepLinearExperiment {
            out_dir: DEFAULT_OUT_DIR.into(),
            seed: 0,
            task: DeepLinearTask {
                depths: vec![2, 3, 4],
                input_dim: 10,
                output_dim: 5,
                hidden: 64,
                n: 2000,
            },
            algorithm,
        }
    }
}

impl DeepLinearExperiment {
    fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        let t = &self.task;
        if t.depths.is_empty() || t.depths.contains(&0) {
            return Err(Error::InvalidConfig("depths must be a non-empty list of positive integers".into()));
        }
        if [t.input_dim, t.output_dim, t.hidden, t.n].contains(&0) {
            return Err(Error::InvalidConfig("deep-linear sizes must be positive".into()));
        }
        if !(self.algorithm.weight_decay > 0.0) {
            return Err(Error::FactUndefined);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TauKprimeExperiment {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub task: RfmTask,
    pub algorithm: RfmConfig,
    /// Cap on the number of `(i, j)` pairs exported; `None` keeps all of them.
    pub max_pairs: Option<usize>,
}

impl TauKprimeExperiment {
    pub fn default_for(kind: &str) -> Result<Self> {
        let base = RfmExperiment::default_for(kind)?;
        let mut algorithm = base.algorithm;
        if !algorithm.kernel.is_inner_product() {
            algorithm.kernel = KernelSpec::inner_product(ScalarFn::Square);
        }
        Ok(TauKprimeExperiment {
            out_dir: base.out_dir,
            seed: base.seed,
            task: base.task,
            algorithm,
            max_pairs: Some(20_000),
        })
    }

    fn validate(&self) -> Result<()> {
        RfmExperiment {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            task: self.task.clone(),
            algorithm: self.algorithm.clone(),
        }
        .validate()?;
        if !self.algorithm.kernel.is_inner_product() {
            return Err(Error::UnsupportedKernel("tau-kprime needs an inner-product kernel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DiagnoseExperiment {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Feature matrix CSV to score.
    pub matrix: Option<PathBuf>,
    /// Block size for the circulant score.
    pub block: Option<usize>,
    /// Coordinates for the support concentration.
    pub support: Option<Vec<usize>>,
    pub baseline_trials: usize,
    /// Symmetric `Q` CSV to realize as a minimum-norm quadratic network.
    pub min_norm: Option<PathBuf>,
}

impl Default for DiagnoseExperiment {
    fn default() -> Self {
        DiagnoseExperiment {
            out_dir: DEFAULT_OUT_DIR.into(),
            seed: 0,
            matrix: None,
            block: None,
            support: None,
            baseline_trials: 20,
            min_norm: None,
        }
    }
}

impl DiagnoseExperiment {
    fn validate(&self) -> Result<()> {
        if self.matrix.is_none() && self.min_norm.is_none() {
            return Err(Error::InvalidConfig("diagnose needs --matrix and/or --min-norm".into()));
        }
        if self.matrix.is_none() && (self.block.is_some() || self.support.is_some()) {
            return Err(Error::InvalidConfig("--block and --support score a --matrix".into()));
        }
        if self.block == Some(0) {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        if self.baseline_trials == 0 {
            return Err(Error::InvalidConfig("baselineTrials must be positive".into()));
        }
        Ok(())
    }

    pub fn input_paths(&self) -> Vec<PathBuf> {
        self.matrix.iter().chain(self.min_norm.iter()).cloned().collect()
    }
}

/// A fully resolved experiment, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    Rfm(RfmExperiment),
    NnFact(NnFactExperiment),
    Separation(SeparationExperiment),
    DeepLinear(DeepLinearExperiment),
    TauKprime(TauKprimeExperiment),
    Diagnose(DiagnoseExperiment),
}

impl Experiment {
    pub fn command(&self) -> Command {
        match self {
            Experiment::Rfm(_) => Command::Rfm,
            Experiment::NnFact(_) => Command::NnFact,
            Experiment::Separation(_) => Command::Separation,
            Experiment::DeepLinear(_) => Command::DeepLinear,
            Experiment::TauKprime(_) => Command::TauKprime,
            Experiment::Diagnose(_) => Command::Diagnose,
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            Experiment::Rfm(e) => &e.out_dir,
            Experiment::NnFact(e) => &e.out_dir,
            Experiment::Separation(e) => &e.out_dir,
            Experiment::DeepLinear(e) => &e.out_dir,
            Experiment::TauKprime(e) => &e.out_dir,
            Experiment::Diagnose(e) => &e.out_dir,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Experiment::Rfm(e) => e.seed,
            Experiment::NnFact(e) => e.seed,
            Experiment::Separation(e) => e.seed,
            Experiment::DeepLinear(e) => e.seed,
            Experiment::TauKprime(e) => e.seed,
            Experiment::Diagnose(e) => e.seed,
        }
    }

    pub fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            Experiment::Rfm(e) => e.task.input_paths(),
            Experiment::NnFact(e) => e.data.input_paths(),
            Experiment::TauKprime(e) => e.task.input_paths(),
            Experiment::Diagnose(e) => e.input_paths(),
            Experiment::Separation(_) | Experiment::DeepLinear(_) => Vec::new(),
        }
    }

    pub fn to_json(&self) -> Value {
        let v = match self {
            Experiment::Rfm(e) => serde_json::to_value(e),
            Experiment::NnFact(e) => serde_json::to_value(e),
            Experiment::Separation(e) => serde_json::to_value(e),
            Experiment::DeepLinear(e) => serde_json::to_value(e),
            Experiment::TauKprime(e) => serde_json::to_value(e),
            Experiment::Diagnose(e) => serde_json::to_value(e),
        };
        v.expect("experiment configs serialize")
    }

    fn validate(&self) -> Result<()> {
        match self {
            Experiment::Rfm(e) => e.validate(),
            Experiment::NnFact(e) => e.validate(),
            Experiment::Separation(e) => e.validate(),
            Experiment::DeepLinear(e) => e.validate(),
            Experiment::TauKprime(e) => e.validate(),
            Experiment::Diagnose(e) => e.validate(),
        }
    }
}

/// Flag overrides as JSON-pointer-like paths, applied in order after the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Variant switch for the tagged block (`task` or `data`), if a flag selected one.
    pub variant: Option<String>,
    pub sets: Vec<(Vec<&'static str>, Value)>,
}

impl Overrides {
    pub fn set(&mut self, path: &[&'static str], value: impl Serialize) {
        let v = serde_json::to_value(value).expect("flag values serialize");
        self.sets.push((path.to_vec(), v));
    }

    pub fn set_opt<T: Serialize>(&mut self, path: &[&'static str], value: Option<T>) {
        if let Some(v) = value {
            self.set(path, v);
        }
    }
}

/// Reads a config file, accepting either a bare experiment config or a manifest
/// written by a previous run (its `resolvedConfig` is used).
pub fn read_config_file(path: &Path, command: Command) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {} is not valid JSON: {e}", path.display())))?;
    if let Some(resolved) = value.get("resolvedConfig") {
        let declared = value.get("command").cloned();
        value = resolved.clone();
        if let Some(c) = declared {
            value
                .as_object_mut()
                .ok_or_else(|| Error::InvalidConfig("resolvedConfig must be an object".into()))?
                .insert("command".into(), c);
        }
    }
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
    if let Some(c) = obj.remove("command") {
        if c != Value::String(command.name().into()) {
            return Err(Error::InvalidConfig(format!("config is for command {c}, not '{}'", command.name())));
        }
    }
    Ok(value)
}

fn tagged_kind(file: Option<&Value>, block: &str) -> Option<String> {
    file?.get(block)?.get("kind")?.as_str().map(str::to_owned)
}

/// Recursive merge: objects merge key by key, everything else is replaced.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn set_path(root: &mut Value, path: &[&str], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("just made an object")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut()
        .expect("just made an object")
        .insert(path[path.len() - 1].to_string(), value);
}

fn decode<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Builds and validates the experiment for `command` from defaults, an optional
/// config file and flag overrides.
pub fn resolve(command: Command, file: Option<Value>, overrides: &Overrides) -> Result<Experiment> {
    let tag_block = match command {
        Command::Rfm | Command::TauKprime => Some("task"),
        Command::NnFact => Some("data"),
        _ => None,
    };
    let kind = overrides
        .variant
        .clone()
        .or_else(|| tag_block.and_then(|b| tagged_kind(file.as_ref(), b)));
    let mut value = match command {
        Command::Rfm => serde_json::to_value(RfmExperiment::default_for(kind.as_deref().unwrap_or("parity"))?),
        Command::TauKprime => {
            serde_json::to_value(TauKprimeExperiment::default_for(kind.as_deref().unwrap_or("modularAddition"))?)
        }
        Command::NnFact => serde_json::to_value(NnFactExperiment::default_for(kind.as_deref().unwrap_or("teacher"))?),
        Command::Separation => serde_json::to_value(SeparationExperiment::default()),
        Command::DeepLinear => serde_json::to_value(DeepLinearExperiment::default()),
        Command::Diagnose => serde_json::to_value(DiagnoseExperiment::default()),
    }?;
    if let Some(mut f) = file {
        // A flag that switches the variant discards the file's block for the old one.
        if let (Some(block), Some(v)) = (tag_block, overrides.variant.as_ref()) {
            if tagged_kind(Some(&f), block).is_some_and(|k| &k != v) {
                f.as_object_mut().map(|o| o.remove(block));
            }
        }
        merge(&mut value, &f);
    }
    for (path, v) in &overrides.sets {
        set_path(&mut value, path, v.clone());
    }
    let experiment = match command {
        Command::Rfm => Experiment::Rfm(decode(value)?),
        Command::NnFact => Experiment::NnFact(decode(value)?),
        Command::Separation => {
            let mut e: SeparationExperiment = decode(value)?;
            e.algorithm.weight_decay = e.task.weight_decay;
            Experiment::Separation(e)
        }
        Command::DeepLinear => Experiment::DeepLinear(decode(value)?),
        Command::TauKprime => Experiment::TauKprime(decode(value)?),
        Command::Diagnose => Experiment::Diagnose(decode(value)?),
    };
    experiment.validate()?;
    Ok(experiment)
}

/// The kernel block for a `--kernel` flag, carrying over a bandwidth when one applies.
pub fn kernel_from_flag(name: &str, bandwidth: Option<f64>) -> Result<KernelSpec> {
    let bw = bandwidth.unwrap_or(5.0);
    let spec = match name {
        "gaussian" => KernelSpec::gaussian(bw),
        "laplace" => KernelSpec::laplace(bw),
        "exp" => KernelSpec::inner_product(ScalarFn::Exp),
        "square" => KernelSpec::inner_product(ScalarFn::Square),
        "identity" => KernelSpec::inner_product(ScalarFn::Identity),
        other => return Err(Error::InvalidConfig(format!("unknown kernel '{other}'"))),
    };
    if bandwidth.is_some() && spec.is_inner_product() {
        return Err(Error::InvalidConfig("--bandwidth does not apply to inner-product kernels".into()));
    }
    Ok(spec)
}
