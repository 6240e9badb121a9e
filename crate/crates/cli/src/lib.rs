//! The `rfdn` command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or inputs, 2 when a
//! file cannot be read or written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rfdn_core::config::ExperimentConfig;
use rfdn_core::geometry::{
    divergence_axioms_check, dominance_check, lne_metric, ConvexPotential, ParamVector,
};
use rfdn_core::net::{config_hash, load_checkpoint};
use rfdn_core::quantize::QuantScheme;
use rfdn_core::ricci::{flow_sandbox, ricci_oracle, MetricField, TranslationSpec};
use rfdn_core::train::{evaluate, train_run, RunOutputs};
use rfdn_core::Error;

#[derive(Debug, Parser)]
#[command(name = "rfdn", version, about = "Low-bit dense network training with Ricci-flow gradient correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a config file.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on the test split of a config's dataset.
    Eval(EvalArgs),
    /// Check divergence axioms, metric dominance and the curvature oracle.
    GeomCheck(GeomArgs),
    /// Run the flow sandbox and write its decay trace as CSV.
    FlowSim(FlowArgs),
    /// Histogram of a checkpoint's quantized weights as CSV.
    QuantizeInspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config naming the dataset.
    #[arg(long)]
    config: PathBuf,
    /// Write the accuracy to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GeomArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0.01)]
    amplitude: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "1,2,1,2")]
    translations: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bit width; defaults to the checkpoint's own scheme.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code. Normal output goes to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GeomCheck(a) => cmd_geom(a),
        Command::FlowSim(a) => cmd_flow(a),
        Command::QuantizeInspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

type CmdResult = Result<String, Error>;

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `text` to `out` when given and returns what stdout should show.
fn emit(out: Option<&Path>, text: String) -> CmdResult {
    match out {
        Some(p) => {
            write_file(p, &text)?;
            Ok(format!("wrote {}\n", p.display()))
        }
        None => Ok(text),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    let cwd = Path::new(".");
    let mut overrides: Vec<(String, String)> = Vec::new();
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| {
            Error::Argument(format!("--set expects KEY=VALUE, got '{o}'"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    cfg.apply(overrides.iter().map(|(k, v)| (0, k.as_str(), v.as_str())), cwd)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;

    let (train, test) = cfg.data.load(cfg.train.seed, cfg.limit)?;
    let classes = train.num_classes().max(test.num_classes());
    let mut net = cfg.build_network(train.num_features(), classes)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| Error::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let outputs = RunOutputs {
        metrics: Some(cfg.output_dir.join("metrics.jsonl")),
        checkpoint: Some(cfg.output_dir.join("model.rfdn")),
        config_hash: config_hash(&cfg.canonical()),
    };
    let metrics = train_run(&mut net, &train, &test, &cfg.train, &outputs)?;
    let mut s = String::new();
    let _ = writeln!(s, "epochs: {}", metrics.epochs.len());
    if let (Some(mean), Some(std)) = (metrics.tail_mean(10), metrics.tail_std(10)) {
        let _ = writeln!(s, "last-10 test accuracy: mean {mean:.4} std {std:.4}");
    }
    let _ = writeln!(s, "metrics: {}", outputs.metrics.as_ref().expect("set").display());
    let _ = writeln!(s, "checkpoint: {}", outputs.checkpoint.as_ref().expect("set").display());
    Ok(s)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    let net = load_checkpoint(&a.checkpoint)?;
    let (_, test) = cfg.data.load(cfg.train.seed, cfg.limit)?;
    let acc = evaluate(&net, &test)?;
    emit(a.out.as_deref(), format!("accuracy = {acc:?}\n"))
}

fn cmd_geom(a: GeomArgs) -> CmdResult {
    if a.n == 0 || a.trials == 0 {
        return Err(Error::Argument("--n and --trials must be positive".into()));
    }
    let mut s = String::new();
    let mut total = 0;
    for potential in [
        ConvexPotential::LogCosh { tau: a.tau },
        ConvexPotential::HalfSquare,
        ConvexPotential::NegativeEntropy,
    ] {
        let report = divergence_axioms_check(potential, a.n, a.trials, a.seed)?;
        total += report.total_violations();
        let _ = writeln!(s, "{report}");
    }

    // Dominance of the metric at points drawn inside ‖τξ‖∞ ≤ 1/n, where
    // strict dominance is guaranteed.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut non_dominant = 0;
    let bound = 1.0 / (a.n as f64 * a.tau);
    for _ in 0..a.trials {
        let xi: Vec<f64> = (0..a.n).map(|_| rng.random_range(-bound..bound)).collect();
        let metric = lne_metric(&ParamVector::new(xi, 0)?, a.tau)?;
        if !dominance_check(&metric) {
            non_dominant += 1;
        }
    }
    total += non_dominant;
    let _ = writeln!(
        s,
        "dominance: {} metrics with |tau xi| < 1/n, {non_dominant} not dominant",
        a.trials
    );

    let sphere = MetricField::from_fn(9, 9, [1.0 - 4e-2, 0.0], 1e-2, |theta, _| {
        [[1.0, 0.0], [0.0, theta.sin().powi(2)]]
    })?;
    let ric = ricci_oracle(&sphere)?;
    let got = ric.at(4, 4).expect("interior point");
    let s2 = 1.0f64.sin().powi(2);
    let err = ((got[0][0] - 1.0).abs())
        .max(got[0][1].abs())
        .max((got[1][1] - s2).abs() / s2);
    let _ = writeln!(s, "curvature oracle: unit sphere at theta=1, max relative error {err:.3e}");
    let oracle_bad = usize::from(err.is_nan() || err >= 0.02);
    total += oracle_bad;
    let _ = writeln!(s, "violations: {total}");
    if total > 0 {
        log::warn!("geometry check found {total} violations");
    }
    emit(a.out.as_deref(), s)
}

fn cmd_flow(a: FlowArgs) -> CmdResult {
    let spec: TranslationSpec = a.translations.parse()?;
    let trace = flow_sandbox(a.n, a.amplitude, a.steps, a.seed, &spec)?;
    let mut s = String::from("step,relative_norm\n");
    for (step, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{step},{v:?}");
    }
    emit(a.out.as_deref(), s)
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let net = load_checkpoint(&a.checkpoint)?;
    let scheme = match a.bits {
        Some(b) => QuantScheme::new(b)?,
        None => net.quant().ok_or_else(|| {
            Error::Argument("checkpoint is full precision; pass --bits".into())
        })?,
    };
    let mut s = String::from("layer,value,count\n");
    for (l, layer) in net.layers().iter().enumerate() {
        let (prepared, _) = net.prepared_weights(l)?;
        let q = scheme.apply(prepared.as_slice().expect("standard layout"));
        let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for v in q {
            // Order by value; the sign-flipped bit pattern sorts like the float.
            let bits = v.to_bits();
            let key = if v.is_sign_negative() { !bits } else { bits | (1 << 63) };
            counts.entry(key).or_insert((v, 0)).1 += 1;
        }
        for (v, c) in counts.values() {
            let _ = writeln!(s, "{l},{v:?},{c}");
        }
        debug_assert_eq!(counts.values().map(|c| c.1).sum::<usize>(), layer.num_weights());
    }
    emit(a.out.as_deref(), s)
}
