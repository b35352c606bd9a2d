mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use factrfm::datasets::{LabelEncoding, Normalization, SeparationConfig};
use factrfm::nn::{Activation, Optimizer, Schedule};
use factrfm::{Error, UpdateRule};
use serde_json::Value;

use crate::config::{kernel_from_flag, Command, Overrides, DEFAULT_OUT_DIR};

#[derive(Parser)]
#[command(name = "factrfm", version, about = "Feature-learning experiments: FACT, AGOP and recursive feature machines")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Recursive feature machine on a synthetic task or a CSV file.
    #[command(allow_negative_numbers = true)]
    Rfm(RfmArgs),
    /// Train an MLP and compare FACT, AGOP and eNFA with each layer's feature matrix.
    #[command(allow_negative_numbers = true)]
    NnFact(NnFactArgs),
    /// Two-layer quadratic network on the mixture distribution where FACT and AGOP disagree.
    #[command(allow_negative_numbers = true)]
    Separation(SeparationArgs),
    /// Deep linear networks of several depths: FACT, AGOP powers and balancedness.
    #[command(allow_negative_numbers = true)]
    DeepLinear(DeepLinearArgs),
    /// Pairs (k′, τ) after an RFM run with an inner-product kernel.
    #[command(allow_negative_numbers = true)]
    TauKprime(TauKprimeArgs),
    /// Structure scores for a saved matrix, or a minimum-norm quadratic network for Q.
    #[command(allow_negative_numbers = true)]
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file (or a manifest.json from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sample loops (falls back to FACTRFM_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskFlag {
    Parity,
    Modadd,
    Csv,
}

impl TaskFlag {
    fn kind(self) -> &'static str {
        match self {
            TaskFlag::Parity => "parity",
            TaskFlag::Modadd => "modularAddition",
            TaskFlag::Csv => "csv",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleFlag {
    Nfa,
    FactPlain,
    FactGeom,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelFlag {
    Gaussian,
    Laplace,
    Exp,
    Square,
    Identity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelsFlag {
    /// {0, 1}
    ZeroOne,
    /// {−1, +1}
    PlusMinusOne,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormFlag {
    None,
    Zscore,
}

#[derive(Args, Debug, Default)]
struct TaskArgs {
    #[arg(long, value_enum)]
    task: Option<TaskFlag>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_enum)]
    labels: Option<LabelsFlag>,
    #[arg(long)]
    modulus: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// CSV file for `--task csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum)]
    normalize: Option<NormFlag>,
}

#[derive(Args, Debug, Default)]
struct RfmAlgArgs {
    #[arg(long, value_enum)]
    rule: Option<RuleFlag>,
    #[arg(long, value_enum)]
    kernel: Option<KernelFlag>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Power s in M ← AGOP^s.
    #[arg(long)]
    nfa_power: Option<f64>,
    #[arg(long)]
    early_stop: Option<f64>,
}

#[derive(Args, Debug)]
struct RfmArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    alg: RfmAlgArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerFlag {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleFlag {
    Constant,
    Cosine,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerFlag>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleFlag>,
    /// Minibatch size; 0 means full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    loss_target: Option<f64>,
    #[arg(long)]
    grad_norm_target: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataFlag {
    Teacher,
    Idx,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationFlag {
    Relu,
    Quadratic,
    Identity,
}

#[derive(Args, Debug)]
struct NnFactArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    data: Option<DataFlag>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    outputs: Option<usize>,
    #[arg(long)]
    teacher_hidden: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    activation: Option<ActivationFlag>,
    #[arg(long)]
    bias: Option<bool>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Layers to report, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct SeparationArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Preset τ = ε³, p = ε⁸, λ = ε³²p.
    #[arg(long, conflicts_with_all = ["tau", "p", "lambda"])]
    epsilon: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    nfa_power: Option<f64>,
    /// Alias for --epochs (every step is a full-population step).
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<usize>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct DeepLinearArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct TauKprimeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    alg: RfmAlgArgs,
    #[arg(long)]
    max_pairs: Option<usize>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    /// Feature matrix CSV to score.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Block size for the circulant score.
    #[arg(long)]
    block: Option<usize>,
    /// Support coordinates, comma separated.
    #[arg(long, value_delimiter = ',')]
    support: Option<Vec<usize>>,
    #[arg(long)]
    baseline_trials: Option<usize>,
    /// Symmetric Q (CSV) to realize as a minimum-norm quadratic network.
    #[arg(long)]
    min_norm: Option<PathBuf>,
}

fn common_overrides(c: &Common, o: &mut Overrides) {
    o.set_opt(&["outDir"], c.out.clone());
    o.set_opt(&["seed"], c.seed);
}

fn task_overrides(t: &TaskArgs, o: &mut Overrides) {
    o.variant = t.task.map(|t| t.kind().to_string());
    o.set_opt(&["task", "d"], t.d);
    o.set_opt(&["task", "k"], t.k);
    o.set_opt(&["task", "n"], t.n);
    o.set_opt(&["task", "nTest"], t.n_test);
    o.set_opt(
        &["task", "encoding"],
        t.labels.map(|l| match l {
            LabelsFlag::ZeroOne => LabelEncoding::ZeroOne,
            LabelsFlag::PlusMinusOne => LabelEncoding::PlusMinusOne,
        }),
    );
    o.set_opt(&["task", "modulus"], t.modulus);
    o.set_opt(&["task", "trainFraction"], t.train_fraction);
    o.set_opt(&["task", "path"], t.csv.clone());
    o.set_opt(&["task", "options", "normalization"], t.normalize.map(norm));
}

fn norm(n: NormFlag) -> Normalization {
    match n {
        NormFlag::None => Normalization::None,
        NormFlag::Zscore => Normalization::Zscore,
    }
}

fn rfm_overrides(a: &RfmAlgArgs, o: &mut Overrides) -> Result<(), Error> {
    o.set_opt(
        &["algorithm", "updateRule"],
        a.rule.map(|r| match r {
            RuleFlag::Nfa => UpdateRule::Nfa,
            RuleFlag::FactPlain => UpdateRule::FactPlain,
            RuleFlag::FactGeom => UpdateRule::FactGeom,
        }),
    );
    if let Some(k) = a.kernel {
        let name = match k {
            KernelFlag::Gaussian => "gaussian",
            KernelFlag::Laplace => "laplace",
            KernelFlag::Exp => "exp",
            KernelFlag::Square => "square",
            KernelFlag::Identity => "identity",
        };
        o.set(&["algorithm", "kernel"], kernel_from_flag(name, a.bandwidth)?);
    } else {
        o.set_opt(&["algorithm", "kernel", "bandwidth"], a.bandwidth);
    }
    o.set_opt(&["algorithm", "iterations"], a.iters);
    o.set_opt(&["algorithm", "ridge"], a.ridge);
    o.set_opt(&["algorithm", "nfaPower"], a.nfa_power);
    o.set_opt(&["algorithm", "earlyStopOnTestAcc"], a.early_stop);
    Ok(())
}

fn train_overrides(t: &TrainArgs, o: &mut Overrides) {
    o.set_opt(
        &["algorithm", "optimizer"],
        t.optimizer.map(|x| match x {
            OptimizerFlag::Sgd => Optimizer::SgdMomentum,
            OptimizerFlag::Adam => Optimizer::Adam,
        }),
    );
    o.set_opt(&["algorithm", "learningRate"], t.lr);
    o.set_opt(&["algorithm", "momentum"], t.momentum);
    o.set_opt(
        &["algorithm", "schedule"],
        t.schedule.map(|s| match s {
            ScheduleFlag::Constant => Schedule::Constant,
            ScheduleFlag::Cosine => Schedule::Cosine,
        }),
    );
    if let Some(b) = t.batch_size {
        o.set(&["algorithm", "batchSize"], if b == 0 { None } else { Some(b) });
    }
    o.set_opt(&["algorithm", "epochs"], t.epochs);
    o.set_opt(&["algorithm", "lossTarget"], t.loss_target);
    o.set_opt(&["algorithm", "gradNormTarget"], t.grad_norm_target);
    o.set_opt(&["algorithm", "logEvery"], t.log_every);
}

/// Command, common flags and the flag overlay for a parsed command line.
fn overrides(cmd: &Cmd) -> Result<(Command, &Common, Overrides), Error> {
    let mut o = Overrides::default();
    let (command, common) = match cmd {
        Cmd::Rfm(a) => {
            task_overrides(&a.task, &mut o);
            rfm_overrides(&a.alg, &mut o)?;
            (Command::Rfm, &a.common)
        }
        Cmd::TauKprime(a) => {
            task_overrides(&a.task, &mut o);
            rfm_overrides(&a.alg, &mut o)?;
            o.set_opt(&["maxPairs"], a.max_pairs);
            (Command::TauKprime, &a.common)
        }
        Cmd::NnFact(a) => {
            o.variant = a.data.map(|d| {
                match d {
                    DataFlag::Teacher => "teacher",
                    DataFlag::Idx => "idx",
                    DataFlag::Csv => "csv",
                }
                .to_string()
            });
            o.set_opt(&["data", "n"], a.n);
            o.set_opt(&["data", "inputDim"], a.input_dim);
            o.set_opt(&["data", "outputs"], a.outputs);
            o.set_opt(&["data", "teacherHidden"], a.teacher_hidden);
            o.set_opt(&["data", "images"], a.images.clone());
            o.set_opt(&["data", "labels"], a.idx_labels.clone());
            o.set_opt(&["data", "limit"], a.limit);
            o.set_opt(&["data", "path"], a.csv.clone());
            o.set_opt(&["model", "hidden"], a.hidden.clone());
            o.set_opt(
                &["model", "activation"],
                a.activation.map(|x| match x {
                    ActivationFlag::Relu => Activation::Relu,
                    ActivationFlag::Quadratic => Activation::Quadratic,
                    ActivationFlag::Identity => Activation::Identity,
                }),
            );
            o.set_opt(&["model", "bias"], a.bias);
            o.set_opt(&["algorithm", "weightDecay"], a.weight_decay);
            o.set_opt(&["layers"], a.layers.clone());
            train_overrides(&a.train, &mut o);
            (Command::NnFact, &a.common)
        }
        Cmd::Separation(a) => {
            if let Some(eps) = a.epsilon {
                o.set(&["task"], SeparationConfig::asymptotic(eps));
            }
            o.set_opt(&["task", "signalScale"], a.tau);
            o.set_opt(&["task", "mixtureWeight"], a.p);
            o.set_opt(&["task", "weightDecay"], a.lambda);
            o.set_opt(&["width"], a.width);
            o.set_opt(&["nfaPower"], a.nfa_power);
            train_overrides(&a.train, &mut o);
            o.set_opt(&["algorithm", "epochs"], a.steps);
            (Command::Separation, &a.common)
        }
        Cmd::DeepLinear(a) => {
            o.set_opt(&["task", "depths"], a.depths.clone());
            o.set_opt(&["task", "inputDim"], a.d);
            o.set_opt(&["task", "outputDim"], a.c);
            o.set_opt(&["task", "hidden"], a.hidden);
            o.set_opt(&["task", "n"], a.n);
            o.set_opt(&["algorithm", "weightDecay"], a.weight_decay);
            train_overrides(&a.train, &mut o);
            (Command::DeepLinear, &a.common)
        }
        Cmd::Diagnose(a) => {
            o.set_opt(&["matrix"], a.matrix.clone());
            o.set_opt(&["block"], a.block);
            o.set_opt(&["support"], a.support.clone());
            o.set_opt(&["baselineTrials"], a.baseline_trials);
            o.set_opt(&["minNorm"], a.min_norm.clone());
            (Command::Diagnose, &a.common)
        }
    };
    common_overrides(common, &mut o);
    Ok((command, common, o))
}

fn command_of(cmd: &Cmd) -> (Command, &Common) {
    match cmd {
        Cmd::Rfm(a) => (Command::Rfm, &a.common),
        Cmd::NnFact(a) => (Command::NnFact, &a.common),
        Cmd::Separation(a) => (Command::Separation, &a.common),
        Cmd::DeepLinear(a) => (Command::DeepLinear, &a.common),
        Cmd::TauKprime(a) => (Command::TauKprime, &a.common),
        Cmd::Diagnose(a) => (Command::Diagnose, &a.common),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::FactUndefined | Error::UnsupportedKernel(_) | Error::Json(_) => 2,
        Error::Diverged(_) => 3,
        _ => 1,
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Error> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FACTRFM_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("FACTRFM_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

/// Where to report an error that happened before the experiment resolved.
fn fallback_out_dir(common: &Common, file: Option<&Value>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| file.and_then(|f| f.get("outDir")).and_then(Value::as_str).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn fail(dir: &std::path::Path, command: Command, err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if let Err(e) = output::write_error(dir, command, err) {
        eprintln!("error: could not write results.json: {e}");
    }
    ExitCode::from(exit_code(err))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, flags) = match overrides(&cli.command) {
        Ok(v) => v,
        Err(e) => {
            let (command, common) = command_of(&cli.command);
            return fail(&fallback_out_dir(common, None), command, &e);
        }
    };
    let file = match common.config.as_deref().map(|p| config::read_config_file(p, command)).transpose() {
        Ok(f) => f,
        Err(e) => return fail(&fallback_out_dir(common, None), command, &e),
    };
    let out_dir = fallback_out_dir(common, file.as_ref());
    if let Err(e) = configure_threads(common.threads) {
        return fail(&out_dir, command, &e);
    }
    let experiment = match config::resolve(command, file, &flags) {
        Ok(x) => x,
        Err(e) => return fail(&out_dir, command, &e),
    };
    let dir = experiment.out_dir().to_path_buf();
    match run::run(&experiment).and_then(|outcome| output::write_outcome(&experiment, &outcome)) {
        Ok(()) => {
            println!("wrote {}", dir.join("results.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&dir, command, &e),
    }
}
