//! Command-line front end for the demand-dispatch simulator.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demand_dispatch::signals::els_fit;
use demand_dispatch::sim::{
    analyze, build_setup, calibrate_reference, emit_results, parse_range, read_signal_csv,
    run_with_baseline, sweep, MetricKind, MetricSpec, SimConfig,
};
use demand_dispatch::DispatchError;

#[derive(Parser)]
#[command(
    name = "ddsim",
    about = "Demand-dispatch population simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an ARMA(2,1) regulation-signal model to a one-column CSV.
    FitArma {
        /// Signal CSV (one column; non-numeric header lines are skipped).
        csv: PathBuf,
        /// Output JSON path for the fitted model.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Find the largest trackable reference scale for a configuration.
    Calibrate {
        #[arg(short, long)]
        config: PathBuf,
        /// Optional JSON output; printed to stdout regardless.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the closed loop and write result files into a directory.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sweep reference scalings and opt-out intervals.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Scaling range start:end:count, e.g. 0.1:1:10.
        #[arg(long)]
        eps: String,
        /// Comma-separated symmetric half-widths for the first metric,
        /// e.g. 36,72,108,144.
        #[arg(long)]
        bounds: String,
        /// Optional comma-separated upper bounds adding a cycling metric.
        #[arg(long)]
        cycling_bounds: Option<String>,
        /// Output CSV path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compute analytic-versus-empirical statistics for a run directory.
    Analyze { outdir: PathBuf },
    /// Dump a configuration's model matrices as CSV files for debugging.
    ExportModel {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

fn classify(err: &DispatchError) -> u8 {
    match err {
        DispatchError::Config(_) | DispatchError::InvalidParameter(_) | DispatchError::Io(_) => 1,
        _ => 2,
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>, DispatchError> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| DispatchError::Config(format!("bad bound value {part}")))
        })
        .collect()
}

fn real_main() -> Result<(), DispatchError> {
    let cli = Cli::parse();
    match cli.command {
        Command::FitArma { csv, output } => {
            let series = read_signal_csv(&csv)?;
            let model = els_fit(&series)?;
            let text = serde_json::to_string_pretty(&model)
                .map_err(|e| DispatchError::Config(e.to_string()))?;
            fs::write(&output, text)?;
            println!(
                "fitted a1={:.4} a2={:.4} b1={:.4} sigma_w2={:.3e} from {} samples -> {}",
                model.a1,
                model.a2,
                model.b1,
                model.sigma_w2,
                series.len(),
                output.display()
            );
        }
        Command::Calibrate { config, output } => {
            let cfg = SimConfig::load(&config)?;
            let calibration = calibrate_reference(&cfg)?;
            let text = serde_json::to_string_pretty(&calibration)
                .map_err(|e| DispatchError::Config(e.to_string()))?;
            if let Some(path) = output {
                fs::write(&path, &text)?;
            }
            println!("{text}");
        }
        Command::Run { config, output } => {
            let cfg = SimConfig::load(&config)?;
            let (result, _baseline) = run_with_baseline(&cfg)?;
            emit_results(&result, &cfg, &output)?;
            println!(
                "ran {} loads for {} epochs: rms_e={:.5} nrmse={:.5} optout={} -> {}",
                cfg.population,
                cfg.horizon,
                result.summary.rms_error,
                result.summary.nrmse.unwrap_or(f64::NAN),
                result.summary.total_optout,
                output.display()
            );
        }
        Command::Sweep {
            config,
            eps,
            bounds,
            cycling_bounds,
            output,
        } => {
            let cfg = SimConfig::load(&config)?;
            let eps_values = parse_range(&eps)?;
            let halves = parse_list(&bounds)?;
            let cycling = cycling_bounds.as_deref().map(parse_list).transpose()?;
            let mut metric_sets = Vec::new();
            for &h in &halves {
                let cleaning = MetricSpec::symmetric(MetricKind::NormalizedPower, h);
                match &cycling {
                    None => metric_sets.push(vec![cleaning.clone()]),
                    Some(uppers) => {
                        for &u in uppers {
                            metric_sets.push(vec![
                                cleaning.clone(),
                                MetricSpec {
                                    kind: MetricKind::Cycling,
                                    lower: None,
                                    upper: Some(u),
                                },
                            ]);
                        }
                    }
                }
            }
            let rows = sweep(&cfg, &eps_values, &metric_sets)?;
            let mut csv = String::from(
                "epsilon,metric0_lower,metric0_upper,metric1_upper,nrmse,rms_error,total_optout,max_optout_fraction,error\n",
            );
            for row in &rows {
                let m0 = &row.metrics[0];
                let m1_upper = row
                    .metrics
                    .get(1)
                    .and_then(|m| m.upper)
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let mut line = String::new();
                let _ = writeln!(
                    line,
                    "{},{},{},{},{},{},{},{},{}",
                    row.epsilon,
                    m0.lower.map(|v| v.to_string()).unwrap_or_default(),
                    m0.upper.map(|v| v.to_string()).unwrap_or_default(),
                    m1_upper,
                    fmt_opt(row.nrmse),
                    fmt_opt(row.rms_error),
                    row.total_optout.map(|v| v.to_string()).unwrap_or_default(),
                    fmt_opt(row.max_optout_fraction),
                    row.error.clone().unwrap_or_default()
                );
                csv.push_str(&line);
            }
            fs::write(&output, csv)?;
            println!("swept {} cells -> {}", rows.len(), output.display());
        }
        Command::Analyze { outdir } => {
            let analysis = analyze(&outdir)?;
            let text = serde_json::to_string_pretty(&analysis)
                .map_err(|e| DispatchError::Config(e.to_string()))?;
            println!("{text}");
        }
        Command::ExportModel { config, output } => {
            let cfg = SimConfig::load(&config)?;
            let setup = build_setup(&cfg)?;
            fs::create_dir_all(&output)?;
            fs::write(output.join("p0.csv"), matrix_csv(setup.model.nominal()))?;
            let (first, second) = setup.model.derivative_matrices();
            fs::write(output.join("derivative1.csv"), matrix_csv(&first))?;
            fs::write(output.join("derivative2.csv"), matrix_csv(&second))?;
            let mut state_csv = String::from("index,on,sojourn,utility,stationary\n");
            for i in 0..setup.model.dim() {
                let s = setup.model.state_at(i);
                let _ = writeln!(
                    state_csv,
                    "{i},{},{},{},{}",
                    s.is_on() as u8,
                    s.sojourn,
                    setup.model.utility()[i],
                    setup.mfm.stationary.weights()[i]
                );
            }
            fs::write(output.join("states.csv"), state_csv)?;
            println!("exported model matrices -> {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(classify(&err))
        }
    }
}
