use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hleval_core::adapter::{check_conformance, serve_lines, Endpoint, HttpServer};
use hleval_core::config::RunConfig;
use hleval_core::dataset::load_dataset;
use hleval_core::pipeline::{builtin_model, evaluate, explain, with_jobs, REPORT};
use hleval_core::report::ReportSummary;
use hleval_core::selfcheck::{run_selfcheck, SelfcheckOptions};
use hleval_core::synth::{generate, SynthSpec};
use hleval_core::{Error, Instance, Result};

#[derive(Parser)]
#[command(name = "hleval", version, about = "Highlight explanations for two-part text classifiers, and their diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task with planted rules and two models that encode them.
    Synth(SynthArgs),
    /// Compute attributions and write one JSONL file per method and kind.
    Explain(RunArgs),
    /// Score existing attribution files and write the report.
    Eval(RunArgs),
    /// Explain, then evaluate.
    Run(RunArgs),
    /// Print a saved report.
    Report {
        /// report.json, or the output directory holding it.
        path: PathBuf,
    },
    /// Run the built-in sanity suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_kernel: bool,
    },
    /// Check that an external model adapter follows the protocol.
    AdapterCheck {
        /// `stdio:<command>` or `http:<url>`.
        endpoint: String,
        /// Instances to probe with; a few fixed ones when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
    },
    /// Serve a built-in model over the adapter protocol.
    #[command(hide = true)]
    Serve {
        /// linear, attention or constant.
        model: String,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Listen on this address instead of stdin/stdout.
        #[arg(long)]
        http: Option<String>,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives dataset.jsonl and models.json.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    rules: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override one key, `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set {o}: expected key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = std::env::current_dir()?.join(o);
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    spec.instances = a.instances.unwrap_or(spec.instances);
    spec.rules = a.rules.unwrap_or(spec.rules);
    spec.vocab_size = a.vocab.unwrap_or(spec.vocab_size);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let task = generate(&spec).map_err(|e| match e {
        Error::Contract(m) => Error::Config(m),
        e => e,
    })?;
    std::fs::create_dir_all(&a.out)?;
    task.save(&a.out.join("dataset.jsonl"), &a.out.join("models.json"))?;
    let planted = task.planted.iter().filter(|p| **p).count();
    println!(
        "{} instances ({planted} planted, {} rules) written to {}",
        task.examples.len(),
        task.rules.len(),
        a.out.display()
    );
    Ok(())
}

fn staged(a: &RunArgs, explain_stage: bool, eval_stage: bool) -> Result<()> {
    let cfg = a.load()?;
    let mut err = io::stderr();
    with_jobs(cfg.jobs, || -> Result<()> {
        if explain_stage {
            explain(&cfg, &mut err)?;
        }
        if eval_stage {
            let report = evaluate(&cfg, &mut err)?;
            let _ = writeln!(err, "report written to {}", cfg.out_path().join(REPORT).display());
            for n in &report.notes {
                let _ = writeln!(err, "note: {n}");
            }
        }
        Ok(())
    })?
}

fn report(path: &PathBuf) -> Result<()> {
    let file = if path.is_dir() { path.join(REPORT) } else { path.clone() };
    print!("{}", ReportSummary::load(file)?.render());
    Ok(())
}

fn default_probe() -> Vec<Instance> {
    let p = |id: &str, a: &[&str], b: &[&str]| Instance::from_strs(id, a, b, 0).expect("fixed probe");
    vec![
        p("probe-0", &["a", "man", "plays", "guitar"], &["someone", "makes", "music"]),
        p("probe-1", &["the", "cat", "sleeps"], &["a", "dog", "runs", "outside"]),
        p("probe-2", &["w1", "w2"], &["w3"]),
    ]
}

/// 0 when every check passes, 5 when the adapter could not be reached, 4
/// for any other failed check.
fn adapter_check(endpoint: &str, dataset: Option<&PathBuf>, seed: u64, timeout: u64) -> Result<u8> {
    let endpoint = Endpoint::parse(endpoint)?;
    let probe = match dataset {
        Some(p) => load_dataset(p)?.into_iter().map(|e| e.instance).take(16).collect(),
        None => default_probe(),
    };
    let transport = endpoint.open(Duration::from_secs(timeout), hleval_core::adapter::DEFAULT_WINDOW)?;
    let report = check_conformance(transport, &probe, seed);
    println!("endpoint {}", report.endpoint);
    if let Some(h) = &report.hello {
        println!("classes {}  mask {:?}  capabilities {}", h.classes, h.mask_token, h.capabilities.names().join(","));
    }
    for c in &report.checks {
        println!("{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(match report.check("handshake") {
        _ if report.passed() => 0,
        Some(h) if !h.passed => 5,
        _ => 4,
    })
}

fn serve(model: &str, params: Option<&PathBuf>, http: Option<&str>) -> Result<()> {
    let model = builtin_model(model, params.map(PathBuf::as_path))?;
    match http {
        Some(addr) => {
            let server = HttpServer::start(model, addr)?;
            eprintln!("listening on {}", server.url);
            server.join();
            Ok(())
        }
        None => serve_lines(model.as_ref(), io::stdin().lock(), io::stdout().lock()),
    }
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Explain(a) => staged(a, true, false)?,
        Command::Eval(a) => staged(a, false, true)?,
        Command::Run(a) => staged(a, true, true)?,
        Command::Report { path } => report(path)?,
        Command::Selfcheck { seed, corrupt_kernel } => {
            let r = run_selfcheck(&SelfcheckOptions { seed: *seed, corrupt_kernel: *corrupt_kernel });
            print!("{}", r.render());
            return Ok(if r.passed() { 0 } else { 4 });
        }
        Command::AdapterCheck { endpoint, dataset, seed, timeout } => {
            return adapter_check(endpoint, dataset.as_ref(), *seed, *timeout)
        }
        Command::Serve { model, params, http } => serve(model, params.as_ref(), http.as_deref())?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
