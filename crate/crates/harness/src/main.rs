use clap::{Args, Parser, Subcommand};
use modnorm::sharpness::{
    loss_smoothness, tree_sharpness, BroadcastMode, CrossEntropyTau, SharpnessTable,
};
use modnorm_harness::records::{write_records, RecordFormat};
use modnorm_harness::sweep::{sweep, thread_limit, Grid};
use modnorm_harness::train::train_run;
use modnorm_harness::verify::{run_suite, Level};
use modnorm_harness::{HarnessError, Result, RunConfig};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "modnorm",
    version,
    about = "Modular-norm training, sweeps and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; keys match the run config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, applied after the config file.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Args, Default)]
struct OutputArgs {
    /// Record file; printed to stdout as CSV when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// `csv` or `json`; inferred from the output extension by default.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its loss records.
    Train {
        #[command(flatten)]
        out: OutputArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every cell of a width, depth, mass and learning-rate grid.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        masses: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        #[command(flatten)]
        out: OutputArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the property-verification suite.
    Verify {
        #[arg(long, conflicts_with = "full")]
        fast: bool,
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the per-atom scale factors of the modular norm.
    Norms {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the sharpness triple and loss smoothness constant.
    Sharpness {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        json: bool,
        /// Sharpness rule for multi-head broadcast.
        #[arg(long, default_value = "linf")]
        broadcast: String,
        /// Use the aligned cross-entropy constant of 1 instead of √d.
        #[arg(long)]
        ce_tau_aligned: bool,
        /// Loss value at which to evaluate the smoothness constant;
        /// defaults to the loss of a uniform (zero) prediction.
        #[arg(long)]
        loss_value: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| HarnessError::Config(format!("expected --key, found {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| HarnessError::Config(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn load(cfg: &ConfigArgs, arch: Option<&str>) -> Result<RunConfig> {
    load_with_output(cfg, arch, &mut OutputArgs::default())
}

/// Loads the config, moving any `--output` or `--format` found among the
/// trailing overrides into `out`.
fn load_with_output(
    cfg: &ConfigArgs,
    arch: Option<&str>,
    out: &mut OutputArgs,
) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for (k, v) in parse_overrides(&cfg.overrides)? {
        match k.as_str() {
            "output" => out.output = Some(PathBuf::from(v)),
            "format" => out.format = Some(v),
            _ => overrides.push((k, v)),
        }
    }
    if let Some(a) = arch {
        overrides.push(("arch".into(), a.into()));
    }
    RunConfig::load(cfg.config.as_deref(), &overrides)
}

fn emit(
    records: &[modnorm_harness::RunRecord],
    out: &OutputArgs,
    echo: &[(String, String)],
) -> Result<()> {
    match &out.output {
        Some(path) => {
            let format = match &out.format {
                Some(f) => RecordFormat::parse(f)?,
                None => RecordFormat::from_path(path),
            };
            write_records(records, path, format, echo)
        }
        None => {
            let dir = std::env::temp_dir().join(format!("modnorm-{}", std::process::id()));
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            let path = dir.join("records.csv");
            write_records(records, &path, RecordFormat::Csv, echo)?;
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            let _ = std::fs::remove_dir_all(&dir);
            print!("{text}");
            Ok(())
        }
    }
}

fn norms(config: &RunConfig, as_json: bool) -> Result<()> {
    let spec = config.model_spec()?;
    let m = spec.build()?;
    let scales = m.scales()?;
    if as_json {
        let rows: Vec<_> = scales
            .iter()
            .map(|s| {
                json!({
                    "leaf": s.leaf_index,
                    "atom": s.atom.to_string(),
                    "norm": s.norm_kind.name(),
                    "scale": s.scale,
                })
            })
            .collect();
        let doc = json!({ "arch": config.arch, "mass": m.mass(), "sensitivity": m.sensitivity(), "leaves": rows });
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Data(e.to_string()))?
        );
        return Ok(());
    }
    println!(
        "arch {}  mass {}  sensitivity {}",
        config.arch,
        m.mass(),
        m.sensitivity()
    );
    let names: Vec<String> = scales.iter().map(|s| s.atom.to_string()).collect();
    let wide = names.iter().map(String::len).max().unwrap_or(4).max(4);
    println!("{:>4}  {:<wide$}  {:<20}  scale", "leaf", "atom", "norm");
    for (s, name) in scales.iter().zip(&names) {
        let scale = s.scale.map_or("frozen".to_string(), |v| format!("{v:.6}"));
        println!(
            "{:>4}  {:<wide$}  {:<20}  {scale}",
            s.leaf_index,
            name,
            s.norm_kind.name()
        );
    }
    Ok(())
}

fn sharpness(
    config: &RunConfig,
    as_json: bool,
    broadcast: &str,
    aligned: bool,
    loss_value: Option<f64>,
) -> Result<()> {
    let spec = config.model_spec()?;
    let m = spec.build()?;
    let mode = BroadcastMode::parse(broadcast).map_err(|e| HarnessError::Config(e.to_string()))?;
    let t = tree_sharpness(&m, &SharpnessTable::default(), mode)?;
    let loss = config.loss_kind()?;
    let d = spec.d_out;
    let observed = loss_value.unwrap_or(match loss {
        modnorm::arch::LossKind::CrossEntropy => (d as f64).ln(),
        modnorm::arch::LossKind::Square => 0.5,
    });
    let tau = if aligned {
        CrossEntropyTau::Aligned
    } else {
        CrossEntropyTau::Conservative
    };
    let s = loss_smoothness(&t, loss, observed, d, tau)?;
    if as_json {
        let doc = json!({
            "arch": config.arch,
            "alpha": t.alpha, "beta": t.beta, "gamma": t.gamma,
            "mass": t.mass, "sensitivity": t.sensitivity,
            "loss": loss.name(), "loss_value": observed,
            "sigma": s.sigma, "tau": s.tau, "lipschitz": s.lipschitz,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Data(e.to_string()))?
        );
    } else {
        println!(
            "arch {}  mass {}  sensitivity {}",
            config.arch, t.mass, t.sensitivity
        );
        println!(
            "alpha {:.6}  beta {:.6}  gamma {:.6}",
            t.alpha, t.beta, t.gamma
        );
        println!(
            "{} loss {:.6}: sigma {:.6}  tau {:.6}  lipschitz {:.6}",
            loss.name(),
            observed,
            s.sigma,
            s.tau,
            s.lipschitz
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { mut out, cfg } => {
            let config = load_with_output(&cfg, None, &mut out)?;
            let data = config.load_data()?;
            let records = train_run(&config, &data)?;
            emit(&records, &out, &config.echo())?;
            Ok(true)
        }
        Command::Sweep {
            widths,
            depths,
            masses,
            lrs,
            mut out,
            cfg,
        } => {
            let config = load_with_output(&cfg, None, &mut out)?;
            let grid = Grid {
                widths,
                depths,
                masses,
                lrs,
            };
            grid.cells(&config)?;
            let data = config.load_data()?;
            let records = sweep(&grid, &config, &data, thread_limit()?)?;
            emit(&records, &out, &config.echo())?;
            Ok(true)
        }
        Command::Verify { full, seed, .. } => {
            let level = if full { Level::Full } else { Level::Fast };
            let results = run_suite(level, seed);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::Norms { arch, json, cfg } => {
            norms(&load(&cfg, arch.as_deref())?, json)?;
            Ok(true)
        }
        Command::Sharpness {
            arch,
            json,
            broadcast,
            ce_tau_aligned,
            loss_value,
            cfg,
        } => {
            sharpness(
                &load(&cfg, arch.as_deref())?,
                json,
                &broadcast,
                ce_tau_aligned,
                loss_value,
            )?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
