//! Command-line driver: runs problem configurations, rasterizes saved design
//! snapshots, and checks adjoint gradients against finite differences.
//!
//! Exit codes partition the failure classes: 2 configuration, 3 forward
//! nonconvergence, 4 adjoint, 5 I/O (and clap's own 2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swelltopo::config::load_config;
use swelltopo::driver::{fd_check_run, resample_design, run_with_progress, RunOutcome};
use swelltopo::opt::IterationRecord;
use swelltopo::Error;

/// Environment variable that re-roots every config-declared output directory.
const OUT_ROOT_VAR: &str = "SWELLTOPO_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "swelltopo",
    version,
    about = "Chemo-mechanical topology optimization of swelling gel composites",
    after_help = "Set SWELLTOPO_OUT_ROOT to re-root output directories declared in configs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a problem configuration (forward or optimize mode).
    Run {
        /// Problem configuration file.
        config: PathBuf,
        /// Print an optimizer progress line every N iterations (0 = silent).
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Rasterize a saved design snapshot at an arbitrary resolution.
    Resample {
        /// Design snapshot written by an optimize run.
        snapshot: PathBuf,
        /// Raster resolution as WIDTHxHEIGHT, e.g. 400x200.
        #[arg(long)]
        res: String,
        /// Output directory (defaults to the snapshot's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the adjoint design gradient of a config's objective against
    /// central finite differences at the initial design.
    Fdcheck {
        /// Problem configuration file (optimize mode).
        config: PathBuf,
        /// Number of network weight components to probe.
        #[arg(long, default_value_t = 20)]
        components: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from)
}

/// Directory anchoring relative paths referenced by a config file.
fn base_dir(config_path: &Path) -> &Path {
    match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, log_every } => {
            let cfg = load_config(&config)?;
            let root = out_root();
            let progress = |r: &IterationRecord| {
                if log_every > 0 && r.iteration % log_every == 0 {
                    println!(
                        "iter {:4}: loss {:.6e}  objective {:.6e}  grayness {:.4}  \
                         newton {}  {:.2} s",
                        r.iteration,
                        r.loss,
                        r.objective_raw,
                        r.grayness,
                        r.newton_iterations.iter().sum::<usize>(),
                        r.wall_time_s
                    );
                }
            };
            let summary = run_with_progress(&cfg, base_dir(&config), root.as_deref(), progress)?;
            match &summary.outcome {
                RunOutcome::Forward { cases } => {
                    for c in cases {
                        println!(
                            "case {}: converged in {} Newton iterations, \
                             max displacement {:.6e} m",
                            c.name, c.newton_iterations, c.max_displacement_m
                        );
                    }
                }
                RunOutcome::Optimize {
                    iterations,
                    stop,
                    objective,
                    grayness,
                    feasible,
                } => {
                    println!(
                        "optimize: {iterations} iterations ({stop:?}), final objective \
                         {objective:.6e}, grayness {grayness:.4}, feasible: {feasible}"
                    );
                }
            }
            println!("artifacts: {}", summary.output_dir.display());
            Ok(())
        }
        Command::Resample { snapshot, res, out } => {
            let (width, height) = parse_resolution(&res)?;
            let out_dir = match out {
                Some(dir) => dir,
                None => base_dir(&snapshot).to_path_buf(),
            };
            let report = resample_design(&snapshot, width, height, &out_dir)?;
            println!(
                "resampled {} phase field(s){} at {}x{}",
                report.n_phases,
                if report.has_theta {
                    " and the fiber angle"
                } else {
                    ""
                },
                report.width,
                report.height
            );
            for f in &report.files {
                println!("  {}", f.display());
            }
            Ok(())
        }
        Command::Fdcheck { config, components } => {
            let cfg = load_config(&config)?;
            let root = out_root();
            let summary = fd_check_run(&cfg, base_dir(&config), root.as_deref(), components)?;
            println!(
                "fd check: {} component(s), {} above the noise floor, \
                 max best relative error {:.3e}",
                summary.components, summary.checked_components, summary.max_best_rel_error
            );
            println!("report: {}", summary.report_path.display());
            Ok(())
        }
    }
}

/// Parses `WIDTHxHEIGHT`; zero values are rejected downstream so that the
/// error message names both offending numbers.
fn parse_resolution(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split('x').collect();
    if let [w, h] = parts[..] {
        if let (Ok(w), Ok(h)) = (w.trim().parse::<usize>(), h.trim().parse::<usize>()) {
            return Ok((w, h));
        }
    }
    Err(Error::Config(vec![format!(
        "--res must be WIDTHxHEIGHT with nonnegative integers, got '{s}'"
    )]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_strings_parse_or_reject() {
        assert_eq!(parse_resolution("400x200").unwrap(), (400, 200));
        assert_eq!(parse_resolution(" 8 x 4 ").unwrap(), (8, 4));
        // Zero passes the parser; the driver rejects it with a config error.
        assert_eq!(parse_resolution("0x5").unwrap(), (0, 5));
        for bad in ["400", "4x4x4", "x", "4x-2", "axb", ""] {
            let err = parse_resolution(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn base_dir_handles_bare_and_nested_paths() {
        assert_eq!(base_dir(Path::new("case.cfg")), Path::new("."));
        assert_eq!(base_dir(Path::new("dir/case.cfg")), Path::new("dir"));
        assert_eq!(base_dir(Path::new("/abs/case.cfg")), Path::new("/abs"));
    }
}
