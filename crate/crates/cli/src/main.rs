//! Command-line pipeline: power flow, sensitivities, activation signals,
//! resource dispatch, gain tuning, and combined before/after reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 solver failure,
//! 3 infeasible dispatch. Failures print one machine-readable JSON line on
//! standard error. All CSV output is deterministic: fixed column orders,
//! rows ordered by step, bus id, then phase, floats at 9 significant
//! digits.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod config;
mod output;
mod pipeline;

use config::RunConfig;
use pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "fasgrid",
    about = "Flexibility activation for three-phase unbalanced LV feeders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Network description (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Device profiles (CSV: device_id,t,p_kw,q_kvar).
    #[arg(long)]
    profiles: PathBuf,
    /// Limits and solver parameters (JSON); defaults used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overridden by FASGRID_OUT_DIR).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct FlexArgs {
    /// Flexibility ranges (CSV: device_id,t,p_max_kw,p_min_kw,q_max_kvar,q_min_kvar).
    #[arg(long)]
    flex: PathBuf,
    /// Imbalance objective gain.
    #[arg(long)]
    gv: Option<f64>,
    /// Trust region as a fraction of each bound per iteration.
    #[arg(long)]
    trust: Option<f64>,
    /// Iteration cap for the successive linearization.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct FasFlags {
    /// Rating-weighted current projection instead of the plain signed sum.
    #[arg(long)]
    weighted_current: bool,
    /// Keep canonical channel signs for the current-imbalance terms.
    #[arg(long)]
    imb_sign_normalized: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the horizon power flow and scan incidents.
    Pf {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute nodal voltage sensitivities.
    Nvs {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Synthesize the flexibility activation signal field.
    Fas {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        flags: FasFlags,
    },
    /// Dispatch flexible and curtailable resources.
    Activate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        flex: FlexArgs,
        #[command(flatten)]
        flags: FasFlags,
    },
    /// Sweep the imbalance gain and pick the knee.
    Pareto {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        flex: FlexArgs,
        #[command(flatten)]
        flags: FasFlags,
        /// Ascending gain grid, e.g. "0,0.01,0.05,0.1".
        #[arg(long, default_value = "0,0.01,0.05,0.1")]
        gv_grid: String,
        /// Fraction of the best reduction the knee must reach.
        #[arg(long)]
        knee_threshold: Option<f64>,
    },
    /// Uncorrected vs corrected summary and temporal unbalance series.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        flex: FlexArgs,
        #[command(flatten)]
        flags: FasFlags,
    },
}

/// Failure category mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
    Infeasible(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Solver(_) => "solver",
            CliError::Infeasible(_) => "infeasible",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Solver(m) | CliError::Infeasible(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }
}

fn out_dir(requested: &Path) -> PathBuf {
    match std::env::var_os("FASGRID_OUT_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => requested.to_path_buf(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Bad usage is a configuration error: exit 1, usage on stderr.
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": e.kind(), "message": e.message()})
            );
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pf { common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let dir = out_dir(&common.out_dir);
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let state = p.uncorrected()?;
            output::write_voltages(&dir, "voltages.csv", &p.model, state)?;
            output::write_loadings(&dir, "loadings.csv", &p.model, state)?;
            let report = p.incidents(state);
            output::write_incidents(&dir, "incidents.csv", &cfg.limits(), &report)?;
            println!(
                "pf: {} steps, {} hard incidents ({} under, {} over, {} thermal)",
                state.t_len(),
                report.hard_total(),
                report.under_voltage.count,
                report.over_voltage.count,
                report.thermal_overload.count
            );
            Ok(())
        }
        Command::Nvs { common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let dir = out_dir(&common.out_dir);
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let (nvs, _) = p.sensitivities()?;
            output::write_nvs(&dir, "nvs.csv", &p.model, nvs)?;
            println!(
                "nvs: {} targets x {} observed phase-nodes",
                nvs.targets.len(),
                p.model.n_buses() * 3
            );
            Ok(())
        }
        Command::Fas { common, flags } => {
            let cfg = RunConfig::load(common.config.as_deref())?.with_fas_flags(&flags);
            let dir = out_dir(&common.out_dir);
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let fas = p.fas()?;
            output::write_fas(&dir, "fas.csv", &p.model, fas)?;
            println!("fas: field over {} steps, max |signal| {}", fas.t_len(), output::fmt9(fas.max_abs()));
            Ok(())
        }
        Command::Activate {
            common,
            flex,
            flags,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .with_fas_flags(&flags)
                .with_flex_args(&flex);
            let dir = out_dir(&common.out_dir);
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let outcome = p.activate(&flex.flex)?;
            output::write_activation(&dir, "activation.csv", &p.model, &outcome)?;
            output::write_voltages(&dir, "corrected_voltages.csv", &p.model, &outcome.state)?;
            let report = p.incidents(&outcome.state);
            output::write_incidents(&dir, "corrected_incidents.csv", &cfg.limits(), &report)?;
            println!(
                "activate: objective {}, hard incidents {}",
                output::fmt9(outcome.total_objective),
                report.hard_total()
            );
            Ok(())
        }
        Command::Pareto {
            common,
            flex,
            flags,
            gv_grid,
            knee_threshold,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .with_fas_flags(&flags)
                .with_flex_args(&flex);
            let dir = out_dir(&common.out_dir);
            let grid: Vec<f64> = gv_grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Config(format!("bad gv grid entry {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let points = p.pareto(&flex.flex, &grid)?;
            output::write_pareto(&dir, "pareto.csv", &points)?;
            let threshold = knee_threshold.unwrap_or(cfg.knee_threshold);
            let (chosen, status) = fasgrid::metrics::select_knee(&points, threshold)
                .map_err(|e| CliError::Config(e.to_string()))?;
            output::write_text(&dir, "chosen_gv.txt", &format!("{}\n", output::fmt9(chosen)))?;
            println!("pareto: chosen gv {} ({:?})", output::fmt9(chosen), status);
            Ok(())
        }
        Command::Report {
            common,
            flex,
            flags,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .with_fas_flags(&flags)
                .with_flex_args(&flex);
            let dir = out_dir(&common.out_dir);
            let p = Pipeline::load(&common.network, &common.profiles, &cfg)?;
            let state = p.uncorrected()?;
            let before = p.incidents(state);
            let vuf_before = fasgrid::metrics::compute_vuf(&p.model, state);
            let outcome = p.activate(&flex.flex)?;
            let after = p.incidents(&outcome.state);
            let vuf_after = fasgrid::metrics::compute_vuf(&p.model, &outcome.state);
            output::write_summary(
                &dir,
                "summary.csv",
                &cfg.limits(),
                &before,
                &after,
                &vuf_before,
                &vuf_after,
            )?;
            output::write_vuf_series(&dir, "vuf_series.csv", &vuf_before, &vuf_after)?;
            println!(
                "report: hard incidents {} -> {}; mean VUF {} -> {}",
                before.hard_total(),
                after.hard_total(),
                output::fmt9(vuf_before.mean),
                output::fmt9(vuf_after.mean)
            );
            Ok(())
        }
    }
}
