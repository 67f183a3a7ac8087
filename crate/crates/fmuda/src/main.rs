use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmuda::config::{Aggregation, GenConfig, RunConfig};
use fmuda::core::fednode::audit_check;
use fmuda::error::Error;
use fmuda::export;
use fmuda::pipeline::{self, SweepParam};

/// Federated multi-source unsupervised domain adaptation for segmentation.
#[derive(Parser)]
#[command(name = "fmuda", version)]
struct Cli {
    /// Master seed; overrides the seed from any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset (NDR files plus manifest).
    Gen(GenArgs),
    /// Train every source node, adapt to the target and build the ensemble.
    Run(RunArgs),
    /// Score a finished run's checkpoints against the target masks.
    Eval(EvalArgs),
    /// Sweep the confidence threshold or the projection count.
    Sweep(SweepArgs),
    /// Check an exported audit log against the federation's locality rules.
    Audit(AuditArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Generation config (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of domains, using the built-in shift for each.
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct RunSettings {
    /// Run config (TOML); flags below override it. `eval`, `sweep` and
    /// `run --add-source` default to the run.toml left in the output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tuned benchmark settings instead of the library defaults.
    #[arg(long)]
    benchmark: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated source domains (default: all but the target).
    #[arg(long, value_delimiter = ',')]
    sources: Option<Vec<String>>,
    /// Concurrent source nodes (default: one per source).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl RunSettings {
    /// With `reuse`, a bare invocation picks up the `run.toml` of the output directory.
    fn resolve(&self, seed: Option<u64>, reuse: bool) -> Result<RunConfig, Error> {
        let saved = self.out.clone().unwrap_or_else(|| RunConfig::default().output).join("run.toml");
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.benchmark => RunConfig::benchmark(),
            None if reuse && saved.is_file() => RunConfig::load(&saved)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            c.manifest = v.clone();
        }
        if let Some(v) = &self.out {
            c.output = v.clone();
        }
        if let Some(v) = &self.target {
            c.target = v.clone();
        }
        if let Some(v) = &self.sources {
            c.sources = v.clone();
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = self.lambda {
            c.train.lambda_conf = v;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    settings: RunSettings,
    /// Evaluate against target masks inside the run (reads target labels).
    #[arg(long)]
    oracle: bool,
    /// fmuda, pv, av or suda.
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Add a domain to a finished run; only that domain is trained.
    #[arg(long = "add-source")]
    add_source: Vec<String>,
    /// Also write latent embeddings as CSV.
    #[arg(long)]
    export_embeddings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    settings: RunSettings,
    #[arg(long, default_value = "fmuda")]
    aggregation: Aggregation,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    settings: RunSettings,
    /// `lambda` or `L`.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit log exported by `run`.
    log: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn gen(a: GenArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = match (&a.config, a.domains) {
        (Some(p), _) => GenConfig::load(p)?,
        (None, Some(n)) => GenConfig::with_domains(n),
        (None, None) => GenConfig::default(),
    };
    if let (Some(_), Some(n)) = (&a.config, a.domains) {
        cfg.domains.truncate(n);
        for k in cfg.domains.len()..n {
            cfg.domains.push(fmuda::config::ShiftSection::default_for(k));
        }
    }
    if cfg.domains.is_empty() {
        return Err(Failure::Usage("--domains must be at least 1".into()));
    }
    if let Some(n) = a.images {
        cfg.images_per_domain = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summary = pipeline::generate(&cfg, &a.out, a.force)?;
    for d in &summary {
        println!(
            "{}: {} images, mean intensity {:.4}, foreground {:.4}",
            d.id, d.images, d.mean_intensity, d.foreground_fraction
        );
    }
    println!("manifest: {}", a.out.join("manifest.toml").display());
    Ok(())
}

fn run(a: RunArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = a.settings.resolve(seed, !a.add_source.is_empty())?;
    cfg.oracle_mode |= a.oracle;
    cfg.export_embeddings |= a.export_embeddings;
    if let Some(m) = a.aggregation {
        cfg.aggregation = m;
    }
    let out = pipeline::run(&cfg, &a.add_source)?;
    let r = &out.report;
    println!("trained: {}", out.trained.join(","));
    if !out.adopted.is_empty() {
        println!("reused: {}", out.adopted.join(","));
    }
    for (i, id) in r.source_ids.iter().enumerate() {
        println!("{id}: weight {:.4} (count {})", r.weights[i], r.raw_counts[i]);
    }
    if let Some(ev) = &out.evaluation {
        println!("{} dice: {:.4}", cfg.aggregation, ev.dice(cfg.aggregation));
    }
    println!("audit: {} messages, {}", out.audit.checked, if out.audit.passed() { "pass" } else { "FAIL" });
    println!("target mask files read: {}", out.target_mask_files_read);
    println!("report: {}", out.report_path.display());
    Ok(())
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = a.settings.resolve(seed, true)?;
    let (_, ev) = pipeline::eval(&cfg, a.aggregation)?;
    for (id, d) in pipeline::source_ids(&cfg, &fmuda::manifest::Manifest::load(&cfg.manifest)?)?.iter().zip(&ev.per_model) {
        println!("{id}: dice {d:.4}");
    }
    println!("{} dice: {:.4}", a.aggregation, ev.dice(a.aggregation));
    Ok(())
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Result<(), Failure> {
    let param = SweepParam::parse(&a.param)
        .ok_or_else(|| Failure::Usage(format!("unknown sweep parameter `{}` (expected lambda or L)", a.param)))?;
    param.check(&a.values).map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = a.settings.resolve(seed, true)?;
    let (path, rows) = pipeline::sweep(&cfg, param, &a.values)?;
    print!("{}", export::sweep_csv(param.name(), &cfg.target, &rows));
    println!("written: {}", path.display());
    Ok(())
}

fn audit(a: AuditArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.log).map_err(|e| Error::Io { path: a.log.clone(), source: e })?;
    let log = export::parse_audit_lines(&text).map_err(|(line, reason)| Error::Format {
        module: "fednode",
        path: a.log.clone(),
        offset: line as u64,
        reason,
    })?;
    let r = audit_check(&log);
    println!("checked {} messages, {} source-to-source", r.checked, r.source_to_source);
    match r.failure {
        None => {
            println!("audit: pass");
            Ok(())
        }
        Some(f) => Err(Failure::Runtime(Error::Invalid {
            module: "fednode",
            message: format!(
                "audit: FAIL at record {} ({} -> {}, {}): {}",
                f.index,
                f.message.from,
                f.message.to,
                f.message.kind.as_str(),
                f.reason
            ),
        })),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let seed = cli.seed;
    let result = match cli.command {
        Command::Gen(a) => gen(a, seed),
        Command::Run(a) => run(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Sweep(a) => sweep(a, seed),
        Command::Audit(a) => audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
