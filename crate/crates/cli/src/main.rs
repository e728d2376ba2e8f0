// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualspin::analysis::{AllanConvention, AllanOptions};
use dualspin::estimation::{four_point_estimate, slope_calibration, FourPointReading};
use dualspin_cli::config::{load, ExperimentConfig, Source};
use dualspin_cli::io;
use dualspin_cli::runner::{self, CliError};

#[derive(Parser)]
#[command(
    name = "dualspin",
    version,
    about = "Dual-spin gyroscope simulator and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Built-in preset: fig1e, fig2, fig3 or fig4.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML configuration, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a dotted key, e.g. `sequence.n_r=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment, predictor study or phase sweep.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; default $DUALSPIN_OUT/<name> or ./runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Allan deviation of one column of a CSV file.
    Allan {
        input: PathBuf,
        #[arg(long, default_value = "F")]
        column: String,
        /// Comma-separated averaging times in seconds.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Contrast per deg/s; adds a rotation column.
        #[arg(long)]
        scale_s: Option<f64>,
        /// Overlapping estimator instead of adjacent bins.
        #[arg(long)]
        overlapping: bool,
        /// Normalise every tau by itself instead of by the bin average.
        #[arg(long)]
        per_tau: bool,
        /// Output CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the Allan curves of run directories against the first one.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Writes the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute line-center estimates from a records CSV.
    Estimate {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the contrast slope per deg/s with a phase sweep.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the configured field trajectory.
    Field {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sample spacing, seconds.
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<(String, ExperimentConfig), CliError> {
    let (name, source) = match (&args.preset, &args.config) {
        (Some(p), _) => (p.clone(), Source::preset(p)?),
        (None, Some(path)) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            (stem, Source::file(path)?)
        }
        (None, None) => {
            return Err(CliError::Input(
                "one of --preset or --config is required".into(),
            ))
        }
    };
    let mut config = load(&source, &args.overrides)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok((name, config))
}

fn default_out(name: &str) -> PathBuf {
    match std::env::var_os("DUALSPIN_OUT") {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from("runs").join(name),
    }
}

fn write_or_print(
    out: Option<&Path>,
    write: impl Fn(&Path) -> Result<(), io::IoError>,
) -> Result<(), CliError> {
    match out {
        Some(path) => write(path)?,
        None => {
            let tmp = std::env::temp_dir().join(format!("dualspin-{}.csv", std::process::id()));
            write(&tmp)?;
            let text =
                std::fs::read_to_string(&tmp).map_err(|e| CliError::Runtime(e.to_string()))?;
            let _ = std::fs::remove_file(&tmp);
            use std::io::Write as _;
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn estimate(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let table = io::read_table(input)?;
    let block = table.column(input, "block")?;
    let esr: Vec<Vec<f64>> = (1..=4)
        .map(|i| table.column(input, &format!("esr_{i}")))
        .collect::<Result<_, _>>()?;
    let probes: Vec<Vec<f64>> = (1..=4)
        .map(|i| table.column(input, &format!("probe_{i}")))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(block.len());
    for (k, &b) in block.iter().enumerate() {
        let reading = FourPointReading::new(
            [probes[0][k], probes[1][k], probes[2][k], probes[3][k]],
            [esr[0][k], esr[1][k], esr[2][k], esr[3][k]],
        )
        .map_err(|e| CliError::Input(format!("{}: row {}: {e}", input.display(), k + 1)))?;
        let center = four_point_estimate(&reading).unwrap_or(f64::NAN);
        rows.push((b, center));
    }
    write_or_print(out, |p| {
        io::write_pairs(p, &["block", "esr_center[Hz]"], &rows)
    })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out } => {
            let (name, config) = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&name));
            runner::run(&config, &out)
        }
        Command::Allan {
            input,
            column,
            taus,
            scale_s,
            overlapping,
            per_tau,
            out,
        } => {
            let options = AllanOptions {
                overlapping,
                convention: if per_tau {
                    AllanConvention::PerTau
                } else {
                    AllanConvention::BinAverage
                },
            };
            let curve = runner::allan_from_csv(&input, &column, &taus, scale_s, options)?;
            write_or_print(out.as_deref(), |p| io::write_allan(p, &curve))
        }
        Command::Report { runs, out } => {
            let report = runner::report(&runs)?;
            runner::print_report(&report);
            if let Some(path) = out {
                io::write_json(&path, &report)?;
            }
            Ok(())
        }
        Command::Estimate { input, out } => estimate(&input, out.as_deref()),
        Command::Calibrate { config, out } => {
            let (_, config) = load_config(&config)?;
            let cal = slope_calibration(&config.params, &config.sequence)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            eprintln!(
                "amplitude {:.6}, phase {:.6} rad, slope {:.6e} per deg/s",
                cal.amplitude, cal.phase, cal.slope
            );
            let label = io::contrast_label(config.sequence.readout());
            write_or_print(out.as_deref(), |p| io::write_sweep(p, &cal.sweep, label))
        }
        Command::Field { config, dt, out } => {
            let (_, config) = load_config(&config)?;
            if !(dt > 0.0) {
                return Err(CliError::Input(format!("--dt must be positive, got {dt}")));
            }
            let traj = runner::trajectory(&config)?;
            let n = (config.duration / dt).floor() as usize + 1;
            let samples = traj.sample_grid(0.0, dt, n);
            write_or_print(out.as_deref(), |p| io::write_field(p, &samples))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
