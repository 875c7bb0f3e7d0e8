//! Command-line driver: synthetic data, training, evaluation, ablation,
//! gradient checks, latency benchmark and feature bank inspection.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 check
//! failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use artemis::datasets::{generate_synthetic, read_feature_bank, Dataset, SynthSpec};
use artemis::evaluation::evaluate;
use artemis::harness::{
    bench_latency, gradient_suite, run_ablation, BenchConfig, GradSuiteConfig, RunConfig,
    CONFIG_KEYS,
};
use artemis::head::{head_mac_count, head_param_count, load_checkpoint, save_checkpoint};
use artemis::training::{head_dims, train_with};
use artemis::{Error, Flavor, HeadParams};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn config_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::from(
            "Configuration keys (`key = value` lines in --config, `#` comments; --set and flags override the file):\n",
        );
        for (key, doc) in CONFIG_KEYS {
            out.push_str(&format!("  {key:<width$}  {doc}\n"));
        }
        out.push_str("\nExit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.");
        out
    })
}

#[derive(Parser)]
#[command(
    name = "artemis",
    version,
    about = "Attention-gated scoring head for composed image retrieval"
)]
#[command(after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attribute-flip dataset.
    Synth(SynthArgs),
    /// Train a head and write checkpoint, epoch log and final metrics.
    #[command(after_help = config_help())]
    Train(RunArgs),
    /// Evaluate a checkpoint (or a parameter-free flavor) on one split.
    #[command(after_help = config_help())]
    Eval(EvalArgs),
    /// Train and evaluate all six flavors with the same configuration.
    #[command(after_help = config_help())]
    Ablate(RunArgs),
    /// Finite-difference check of every analytic gradient of the head.
    Gradcheck(GradArgs),
    /// Time full-gallery scoring for late fusion and the full head.
    #[command(after_help = config_help())]
    Bench(BenchArgs),
    /// Print the header and summary statistics of a feature bank.
    InspectBank(InspectArgs),
}

/// Configuration shared by commands that read a dataset.
#[derive(Args)]
struct RunArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    flavor: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    convention: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    /// Drop each query's reference image from its candidates.
    #[arg(long)]
    exclude_ref: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also write the top-K candidates of every query to `rankings.jsonl`.
    #[arg(long, value_name = "K")]
    rankings: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Repetitions per flavor.
    #[arg(long)]
    repeats: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attributes: Option<usize>,
    /// Image and text width.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    /// Validation queries.
    #[arg(long)]
    val: Option<usize>,
    /// Test queries.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    gallery: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Candidate subset size per evaluation query; 0 writes none.
    #[arg(long)]
    subset_size: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    /// Width used for text, image and hidden layers.
    #[arg(long, default_value_t = 8)]
    dims: usize,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Triplets per loss batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check this many sampled coordinates per parameter block instead of all.
    #[arg(long)]
    per_block: Option<usize>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::SpecInvalid(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = self.set.clone();
        let flags = [
            ("data", &self.data),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("flavor", &self.flavor),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("split", &self.split),
            ("convention", &self.convention),
            ("threads", &self.threads),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        if self.exclude_ref {
            pairs.push(("exclude_ref".into(), "true".into()));
        }
        pairs
    }

    fn load(&self, extra: &[(String, String)]) -> CliResult<RunConfig> {
        let mut pairs = self.overrides();
        pairs.extend_from_slice(extra);
        Ok(RunConfig::load(self.config.as_deref(), &pairs)?)
    }
}

fn load_dataset(config: &RunConfig) -> CliResult<Dataset> {
    Ok(Dataset::load(&config.dataset_paths()?)?)
}

fn out_dir(config: &RunConfig) -> CliResult<Option<&Path>> {
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir)?;
    }
    Ok(config.out.as_deref())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn pretty(value: &serde_json::Value) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Head parameters for `flavor`: the configured checkpoint, or for the
/// parameter-free flavors a seeded initialization when none is given.
fn eval_params(config: &RunConfig, dataset: &Dataset, flavor: Flavor) -> CliResult<HeadParams> {
    match &config.checkpoint {
        Some(path) => Ok(load_checkpoint(path)?),
        None if !(flavor.uses_is() || flavor.uses_em()) => Ok(HeadParams::init(
            head_dims(dataset, &config.train),
            config.train.seed,
        )?),
        None => Err(Error::Config(format!("flavor {flavor} needs `checkpoint`")).into()),
    }
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid spec {}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.attributes {
        spec.n_attributes = v;
    }
    if let Some(v) = args.dims {
        spec.dim_image = v;
        spec.dim_text = v;
    }
    if let Some(v) = args.train {
        spec.n_train = v;
    }
    if let Some(v) = args.val {
        spec.n_eval = v;
    }
    if let Some(v) = args.test {
        spec.n_test = v;
    }
    if let Some(v) = args.gallery {
        spec.gallery = v;
    }
    if let Some(v) = args.noise {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.subset_size {
        spec.subset_size = v;
    }
    let data = generate_synthetic(&spec)?;
    data.write(&args.out)?;
    write_text(
        &args.out.join("spec.json"),
        &pretty(&serde_json::to_value(&spec)?)?,
    )?;
    println!(
        "wrote {} images, {} modifiers, {} triplets, gallery {} to {}",
        data.images.rows(),
        data.modifiers.rows(),
        data.triplets.len(),
        data.gallery.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs) -> CliResult {
    let config = args.load(&[])?;
    let dataset = load_dataset(&config)?;
    let out = out_dir(&config)?;
    let checkpoint = match (&config.checkpoint, out) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("checkpoint.ahp"),
        (None, None) => {
            return Err(Error::Config("train needs `checkpoint` or `out`".into()).into())
        }
    };
    let mut log = match out {
        Some(dir) => Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?)),
        None => None,
    };
    let mut log_error = None;
    let eval = config.eval_options();
    let outcome = train_with(&dataset, &config.train, &eval, |entry| {
        let monitored: Vec<String> = entry
            .metrics
            .iter()
            .map(|(split, m)| format!("{split} {:.2}", m.get("aggregate").unwrap_or(&f64::NAN)))
            .collect();
        eprintln!(
            "epoch {:>3}  loss {:.6}  lr {:.2e}  {}",
            entry.epoch,
            entry.loss,
            entry.lr,
            monitored.join("  ")
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(entry).map_err(std::io::Error::from);
            if let Err(e) = line.and_then(|l| writeln!(w, "{l}")) {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    save_checkpoint(&outcome.params, &checkpoint)?;
    if let Some(dir) = out {
        for best in &outcome.best {
            save_checkpoint(&best.params, &dir.join(format!("best_{}.ahp", best.split)))?;
        }
    }
    println!(
        "trained {} ({} parameters, {} MACs per query) -> {}",
        config.train.flavor,
        head_param_count(&outcome.params),
        head_mac_count(outcome.params.dims),
        checkpoint.display()
    );
    match evaluate(
        &dataset,
        config.split,
        &outcome.params,
        config.train.flavor,
        &eval,
    ) {
        Ok(result) => {
            print!("{}", result.report.to_table());
            if let Some(dir) = out {
                write_text(&dir.join("metrics.json"), &result.report.to_json_string())?;
            }
        }
        Err(Error::EmptySplit(split)) => eprintln!("split {split} is empty; no final metrics"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let config = args.run.load(&[])?;
    let dataset = load_dataset(&config)?;
    let out = out_dir(&config)?;
    let flavor = config.train.flavor;
    let params = eval_params(&config, &dataset, flavor)?;
    let result = evaluate(
        &dataset,
        config.split,
        &params,
        flavor,
        &config.eval_options(),
    )?;
    let table = result.report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        write_text(&dir.join("metrics.json"), &result.report.to_json_string())?;
        write_text(&dir.join("metrics.txt"), &table)?;
        if let Some(k) = args.rankings {
            let mut w = BufWriter::new(File::create(dir.join("rankings.jsonl"))?);
            result.write_rankings(k, &mut w)?;
            w.flush()?;
        }
    } else if args.rankings.is_some() {
        return Err(Error::Config("--rankings needs `out`".into()).into());
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> CliResult {
    let config = args.load(&[])?;
    let dataset = load_dataset(&config)?;
    let out = out_dir(&config)?;
    let report = run_ablation(
        &dataset,
        &config.train,
        &config.eval_options(),
        config.split,
        |flavor, r| {
            eprintln!("{flavor}: aggregate {:.2}", r.aggregate);
        },
    )?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        write_text(&dir.join("ablation.json"), &pretty(&report.to_json())?)?;
        write_text(&dir.join("ablation.txt"), &table)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradArgs) -> CliResult {
    let config = GradSuiteConfig {
        dims: args.dims,
        instances: args.instances,
        batch: args.batch,
        seed: args.seed,
        h: args.h,
        tol: args.tol,
        per_block: args.per_block,
    };
    if config.dims == 0
        || config.instances == 0
        || config.batch < 2
        || !(config.h > 0.0)
        || !(config.tol > 0.0)
    {
        return Err(Error::Config(
            "gradcheck needs dims, instances >= 1, batch >= 2, h > 0 and tol > 0".into(),
        )
        .into());
    }
    let report = gradient_suite(&config)?;
    for name in report.functions() {
        let entries: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.function == name)
            .collect();
        let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        let failed = entries.iter().filter(|e| !e.passed).count();
        println!(
            "{name:<20} instances {:>4}  max rel error {worst:.3e}  failed {failed}",
            entries.len()
        );
    }
    println!(
        "{} in {:.1}s ({} instances, dims {})",
        if report.passed { "PASS" } else { "FAIL" },
        report.seconds,
        report.instances,
        report.dims
    );
    if let Some(path) = &args.out {
        write_text(path, &pretty(&serde_json::to_value(&report)?)?)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            message: format!("{} gradient checks failed", report.failures().count()),
        })
    }
}

fn cmd_bench(args: &BenchArgs) -> CliResult {
    let extra: Vec<(String, String)> = args
        .repeats
        .iter()
        .map(|r| ("repeats".to_string(), r.clone()))
        .collect();
    let config = args.run.load(&extra)?;
    let dataset = load_dataset(&config)?;
    let out = out_dir(&config)?;
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("bench needs `checkpoint`".into()))?;
    let params = load_checkpoint(path)?;
    let bench = BenchConfig {
        split: config.split,
        repeats: config.repeats,
        threads: config.threads,
        ..BenchConfig::default()
    };
    let report = bench_latency(&dataset, &params, &bench)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        write_text(&dir.join("latency.json"), &pretty(&report.to_json())?)?;
        write_text(&dir.join("latency.txt"), &table)?;
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> CliResult {
    let bank = read_feature_bank(&args.path)?;
    let norms: Vec<f64> = (0..bank.rows())
        .map(|i| {
            bank.row(i)
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let non_finite = bank.data().iter().filter(|x| !x.is_finite()).count();
    let (min, max) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
            (lo.min(n), hi.max(n))
        });
    let mean = if norms.is_empty() {
        f64::NAN
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let head: Vec<&String> = bank.ids().iter().take(5).collect();
    let summary = json!({
        "path": args.path.display().to_string(),
        "rows": bank.rows(),
        "dim": bank.dim(),
        "first_ids": head,
        "norm_min": min,
        "norm_mean": mean,
        "norm_max": max,
        "non_finite": non_finite,
    });
    if args.json {
        print!("{}", pretty(&summary)?);
    } else {
        println!(
            "{}: {} rows x {} dims",
            args.path.display(),
            bank.rows(),
            bank.dim()
        );
        println!(
            "first ids: {}",
            head.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
        println!("row norms: min {min:.6}  mean {mean:.6}  max {max:.6}");
        println!("non-finite values: {non_finite}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::InspectBank(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
