mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use acpo_core::experiment::{compare_objectives, export_compare_csv};
use acpo_core::objectives::ObjectiveRegistry;
use acpo_core::policy::PolicyModel;
use acpo_core::synthdata::{gen_dataset, Corruption, Dataset, WorldSpec};
use acpo_core::trainer::{train, TelemetryRow, TELEMETRY_HEADER};
use acpo_core::verify::{self, VerifyOptions};
use acpo_core::Error;

use config::{load_config, resolve, settings_lines, Resolved, Settings};

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteEvaluation { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "acpo", version, about = "Preference optimisation on toy autoregressive policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    GenData(GenDataArgs),
    /// Train one objective and write telemetry, checkpoint and manifest.
    Train(TrainCmd),
    /// Train several objectives from the same initial model.
    Compare(CompareCmd),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    prompt_len: usize,
    #[arg(long, default_value_t = 10)]
    resp_len: usize,
    #[arg(long, default_value_t = 0.8)]
    overlap: f64,
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// suffix-replace or interleave
    #[arg(long, default_value = "suffix-replace")]
    corruption: String,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by `train` and `compare`. Unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha_lo: Option<f64>,
    #[arg(long)]
    alpha_hi: Option<f64>,
    /// pair, batch or static:<value>
    #[arg(long)]
    tau_mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// scale or offset
    #[arg(long)]
    shift_mode: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    simpo_beta: Option<f64>,
    #[arg(long)]
    beta_dpo_c: Option<f64>,
    #[arg(long)]
    beta_dpo_decay: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    /// mlp or bigram
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    /// dpo, ipo, simpo, beta-dpo, dpo-shift or acpo
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct CompareCmd {
    /// Comma-separated objective names.
    #[arg(long)]
    objectives: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

impl TrainFlags {
    fn settings(&self, extra: &[(&str, Option<String>)]) -> Result<Settings, Failure> {
        let mut s = match &self.config {
            Some(p) => load_config(p)?,
            None => Settings::new(),
        };
        let flags: Vec<(&str, Option<String>)> = vec![
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("delta", self.delta.map(|v| v.to_string())),
            ("epsilon", self.epsilon.map(|v| v.to_string())),
            ("alpha-lo", self.alpha_lo.map(|v| v.to_string())),
            ("alpha-hi", self.alpha_hi.map(|v| v.to_string())),
            ("tau-mode", self.tau_mode.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("shift-mode", self.shift_mode.clone()),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("simpo-beta", self.simpo_beta.map(|v| v.to_string())),
            ("beta-dpo-c", self.beta_dpo_c.map(|v| v.to_string())),
            ("beta-dpo-decay", self.beta_dpo_decay.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("optimizer", self.optimizer.clone()),
            ("model", self.model.clone()),
            ("embed", self.embed.map(|v| v.to_string())),
            ("window", self.window.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
        ];
        for (k, v) in flags.into_iter().chain(extra.iter().cloned()) {
            if let Some(v) = v {
                s.insert(k.to_string(), v);
            }
        }
        Ok(s)
    }
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(path: &Path, command: &str, r: &Resolved, extra: &[(&str, String)]) -> Result<(), Failure> {
    let mut text = String::from("# acpo run manifest\n");
    text.push_str(&format!("tool=acpo {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("command={command}\n"));
    text.push_str(&format!("data-sha256={}\n", sha256_file(&r.data)?));
    for (k, v) in settings_lines(r) {
        text.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let data = Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => io_failure(path, io),
        other => Failure::usage(format!("{}: {other}", path.display())),
    })?;
    if data.is_empty() {
        return Err(Failure::usage(format!("{}: dataset has no pairs", path.display())));
    }
    Ok(data)
}

/// Vocabulary size from the manifest, or one past the largest token.
fn dataset_vocab(data: &Dataset) -> Result<acpo_core::Vocab, Failure> {
    let v = match &data.manifest {
        Some(w) => w.vocab,
        None => {
            let max = data
                .pairs
                .iter()
                .flat_map(|p| p.prompt.iter().chain(&p.chosen).chain(&p.rejected))
                .copied()
                .max()
                .unwrap_or(0);
            (max as usize + 1).max(2)
        }
    };
    acpo_core::Vocab::new(v).map_err(Failure::from)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let world = WorldSpec {
        vocab: a.vocab,
        prompt_len: a.prompt_len,
        resp_len: a.resp_len,
        overlap: a.overlap,
        corruption: a.corruption.parse::<Corruption>()?,
        seed: a.seed,
    };
    if a.pairs == 0 {
        return Err(Failure::usage("--pairs must be at least 1"));
    }
    let data = gen_dataset(&world, a.pairs)?;
    data.save(&a.out).map_err(|e| match e {
        Error::Io(io) => io_failure(&a.out, io),
        other => other.into(),
    })?;
    println!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(c: TrainCmd) -> Result<(), Failure> {
    let settings = c.flags.settings(&[
        ("objective", c.objective.clone()),
        ("out-dir", c.out_dir.as_ref().map(|p| p.display().to_string())),
    ])?;
    let r = resolve(&settings)?;
    let out_dir = settings
        .get("out-dir")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::usage("missing --out-dir"))?;
    let registry = ObjectiveRegistry::with_builtins();
    registry.build(&r.train.objective, &r.train.objective_cfg)?;
    let data = load_dataset(&r.data)?;
    let vocab = dataset_vocab(&data)?;

    fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let telemetry_path = out_dir.join("telemetry.csv");
    let checkpoint_path = out_dir.join("model.ckpt");
    write_manifest(
        &out_dir.join("run_manifest.txt"),
        "train",
        &r,
        &[
            ("out-dir", out_dir.display().to_string()),
            ("telemetry", telemetry_path.display().to_string()),
            ("checkpoint", checkpoint_path.display().to_string()),
        ],
    )?;

    let init = PolicyModel::init(r.kind, vocab, r.train.seed);
    let reference = init.clone_as_reference();
    let file = fs::File::create(&telemetry_path).map_err(|e| io_failure(&telemetry_path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{TELEMETRY_HEADER}").map_err(|e| io_failure(&telemetry_path, e))?;
    let outcome = train(init, &reference, &data, &r.train, &registry, |row: &TelemetryRow| {
        writeln!(out, "{}", row.to_csv())?;
        out.flush()?;
        Ok(())
    });
    out.flush().map_err(|e| io_failure(&telemetry_path, e))?;
    let outcome = outcome?;
    outcome.model.save(&checkpoint_path).map_err(Failure::from)?;
    if let Some(last) = outcome.telemetry.last() {
        println!(
            "{}: {} steps, final loss {:.6}, mean_r_w {:.4}, mean_r_l {:.4}, margin {:.4}",
            r.train.objective,
            outcome.telemetry.len(),
            last.loss,
            last.mean_r_w,
            last.mean_r_l,
            last.mean_margin
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_compare(c: CompareCmd) -> Result<(), Failure> {
    let settings = c.flags.settings(&[
        ("objectives", c.objectives.clone()),
        ("out", c.out.as_ref().map(|p| p.display().to_string())),
    ])?;
    let r = resolve(&settings)?;
    let out = settings
        .get("out")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::usage("missing --out"))?;
    let names: Vec<String> = settings
        .get("objectives")
        .map(String::as_str)
        .unwrap_or("dpo,acpo")
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let registry = ObjectiveRegistry::with_builtins();
    for n in &names {
        registry.build(n, &r.train.objective_cfg)?;
    }
    let data = load_dataset(&r.data)?;
    let vocab = dataset_vocab(&data)?;

    let init = PolicyModel::init(r.kind, vocab, r.train.seed);
    let reference = init.clone_as_reference();
    let runs = compare_objectives(&init, &reference, &data, &r.train, &names, &registry)?;
    export_compare_csv(&runs, &out).map_err(|e| match e {
        Error::Io(io) => io_failure(&out, io),
        other => other.into(),
    })?;
    write_manifest(
        &out.with_extension("manifest.txt"),
        "compare",
        &r,
        &[("objectives", names.join(",")), ("out", out.display().to_string())],
    )?;
    for run in &runs {
        let last = run.telemetry.last();
        let delta = run.delta_r_w().last().copied().unwrap_or(0.0);
        println!(
            "{:<10} final delta_r_w {:>9.4}  margin {:>9.4}  mean_logp_w {:>10.4}",
            run.objective,
            delta,
            last.map_or(0.0, |r| r.mean_margin),
            last.map_or(0.0, |r| r.mean_logp_w)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let no_detach = match a.inject_fault.as_deref() {
        None => false,
        Some("no-detach") => true,
        Some(other) => return Err(Failure::usage(format!("unknown fault `{other}`"))),
    };
    let opts = VerifyOptions {
        seeds: a.seeds,
        no_detach,
        ..VerifyOptions::default()
    };
    let outcomes = verify::run_all(&opts)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        let list: Vec<String> = failed.iter().map(|o| format!("{} ({})", o.name, o.detail)).collect();
        Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("{} check(s) failed: {}", failed.len(), list.join("; ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(c) => cmd_train(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
