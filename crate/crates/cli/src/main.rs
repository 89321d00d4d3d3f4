mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deep_ritz::artifacts;
use deep_ritz::error::Error;
use deep_ritz::experiment::{self, KernelSelfTest, NtkOptions, RunSpec, SweepAxis};

use crate::config::SpecArgs;

#[derive(Parser, Debug)]
#[command(
    name = "deep-ritz",
    version,
    about = "Deep Ritz training and NTK analysis for double-well energies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write its artifacts.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Output directory (default runs/<problem>_seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
        /// Print the resolved spec and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Kernel spectrum of freshly initialized networks, or a closed-form
    /// kernel self-test.
    Ntk {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Number of consecutive seeds to average, starting at --seed.
        #[arg(long, default_value_t = 8)]
        seeds: usize,
        /// Full jet-state kernel instead of the value-only kernel.
        #[arg(long)]
        jet: bool,
        #[arg(long, default_value_t = 4)]
        k_lo: usize,
        #[arg(long, default_value_t = 64)]
        k_hi: usize,
        /// Also report the spectrum of D·M for the spec's problem.
        #[arg(long)]
        hessian: bool,
        /// Compare gradient descent on the points with the linearized
        /// prediction for this many steps (uses --lr).
        #[arg(long)]
        dynamics: Option<usize>,
        /// Skip the network and check a kernel with known spectrum.
        #[arg(long, value_enum)]
        self_test: Option<SelfTestArg>,
        /// Grid sizes for --self-test.
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512])]
        sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one run per value of a single axis.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; `none` is allowed for frequency and
        /// quotients like 0.1/4 for eps.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// List the named presets.
    Presets,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelfTestArg {
    Constant,
    Brownian,
}

impl From<SelfTestArg> for KernelSelfTest {
    fn from(s: SelfTestArg) -> Self {
        match s {
            SelfTestArg::Constant => KernelSelfTest::Constant,
            SelfTestArg::Brownian => KernelSelfTest::Brownian,
        }
    }
}

fn resolve_out(spec: &RunSpec, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| spec.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", spec.problem, spec.seed)))
}

fn cmd_train(spec: RunSpec, out: Option<PathBuf>, force: bool, dry_run: bool) -> Result<()> {
    if dry_run {
        print!("{}", toml::to_string(&spec)?);
        return Ok(());
    }
    let dir = resolve_out(&spec, out);
    let res = experiment::run_to_dir(&spec, &dir, force);
    let res = match res {
        Err(Error::NonFiniteLoss { epoch, last_checkpoint }) => {
            let saved = match last_checkpoint {
                Some(c) => format!(
                    "; last finite checkpoint (epoch {}) saved in {}",
                    c.epoch,
                    dir.display()
                ),
                None => String::new(),
            };
            bail!("loss became non-finite at epoch {epoch}{saved}");
        }
        other => other?,
    };
    let m = &res.outcome.manifest;
    println!("wrote {}", dir.display());
    println!("parameters      {}", m.param_count);
    println!("wall clock      {:.1}s", m.wall_clock_seconds);
    println!("final loss      {:.6e}", m.final_loss.total);
    println!("grid energy     {:.6e}", res.energy.grid_energy);
    println!(
        "mc energy       {:.6e} ± {:.1e}",
        res.energy.mc_energy, res.energy.mc_std_error
    );
    println!("boundary        {:.6e}", res.energy.boundary_penalty);
    match &res.transitions {
        Ok(t) => println!("transitions     {}", t.count),
        Err(e) => println!("transitions     n/a ({e})"),
    }
    Ok(())
}

fn prepare(dir: Option<&Path>, force: bool) -> Result<()> {
    if let Some(d) = dir {
        if d.exists() && !force {
            return Err(Error::OutputExists(d.to_path_buf()).into());
        }
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn cmd_self_test(kind: KernelSelfTest, sizes: &[usize], k_max: usize, out: Option<&Path>, force: bool) -> Result<()> {
    prepare(out, force)?;
    let rows = experiment::kernel_self_test(kind, sizes, k_max)?;
    println!(
        "{:>6} {:>3} {:>14} {:>14} {:>10}",
        "n", "k", "lambda_k/n", "operator", "rel_err"
    );
    for r in &rows {
        println!(
            "{:>6} {:>3} {:>14.8} {:>14.8} {:>10.3e}",
            r.n, r.k, r.lambda_over_n, r.operator_eigenvalue, r.relative_error
        );
    }
    if let Some(d) = out {
        let header = ["n", "k", "lambda_over_n", "operator_eigenvalue", "relative_error"];
        artifacts::write_table(
            &d.join("self_test.csv"),
            &header,
            rows.iter().map(|r| {
                vec![
                    r.n.to_string(),
                    r.k.to_string(),
                    artifacts::fmt_f64(r.lambda_over_n),
                    artifacts::fmt_f64(r.operator_eigenvalue),
                    artifacts::fmt_f64(r.relative_error),
                ]
            }),
        )?;
    }
    Ok(())
}

fn cmd_ntk(spec: RunSpec, opts: NtkOptions, out: Option<&Path>, force: bool) -> Result<()> {
    spec.validate()?;
    prepare(out, force)?;
    let report = experiment::ntk_analysis(&spec, &opts)?;
    let m = &report.spectrum.mean;
    println!("points {}  seeds {:?}", m.len(), report.spectrum.seeds);
    for (k, l) in m.iter().take(8).enumerate() {
        println!("lambda_{:<3} {:.6e}", k + 1, l);
    }
    match (&report.fit, &report.fit_error) {
        (Some(f), _) => println!(
            "decay fit over k in [{}, {}]: slope {:.4}, intercept {:.4} ({} eigenvalues)",
            f.window.0, f.window.1, f.slope, f.intercept, f.used
        ),
        (None, Some(e)) => println!("decay fit unavailable: {e}"),
        _ => {}
    }
    if let Some(h) = &report.hessian_spectrum {
        println!(
            "D·M spectrum: max {:.6e}, min {:.6e}",
            h.first().unwrap_or(&0.0),
            h.last().unwrap_or(&0.0)
        );
    }
    if let Some(d) = &report.dynamics {
        let last = d.measured_norm.len() - 1;
        println!(
            "gradient norm after {last} steps: measured {:.6e}, linearized {:.6e}",
            d.measured_norm[last], d.predicted_norm[last]
        );
    }
    if let Some(dir) = out {
        artifacts::write_spectrum(&dir.join("spectrum.csv"), m)?;
        artifacts::write_json(&dir.join("fit.json"), &report)?;
        artifacts::write_json(&dir.join("spec.json"), &spec)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(spec: RunSpec, axis: SweepAxis, values: &[String], out: Option<&Path>, force: bool) -> Result<()> {
    let rows = experiment::sweep(&spec, axis, values, out, force)?;
    println!(
        "{:>10} {:>14} {:>11} {:>9}  error",
        axis.to_string(),
        "final_energy",
        "transitions",
        "seconds"
    );
    for r in &rows {
        println!(
            "{:>10} {:>14} {:>11} {:>9.1}  {}",
            r.value,
            r.final_energy.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "-".into()),
            r.transitions.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
            r.runtime_seconds,
            r.error.as_deref().unwrap_or("")
        );
    }
    if let Some(d) = out {
        println!("wrote {}", d.join("summary.csv").display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            spec,
            out,
            force,
            dry_run,
        } => cmd_train(spec.resolve()?, out, force, dry_run),
        Command::Ntk {
            spec,
            points,
            seeds,
            jet,
            k_lo,
            k_hi,
            hessian,
            dynamics,
            self_test,
            sizes,
            out,
            force,
        } => {
            if let Some(kind) = self_test {
                return cmd_self_test(kind.into(), &sizes, 4, out.as_deref(), force);
            }
            let opts = NtkOptions {
                points,
                seeds,
                scalar: !jet,
                fit_window: (k_lo, k_hi),
                with_hessian: hessian,
                dynamics_steps: dynamics,
            };
            cmd_ntk(spec.resolve()?, opts, out.as_deref(), force)
        }
        Command::Sweep {
            spec,
            axis,
            values,
            out,
            force,
        } => {
            let spec = spec.resolve()?;
            let out = out.or_else(|| spec.out.clone());
            cmd_sweep(spec, axis, &values, out.as_deref(), force)
        }
        Command::Presets => {
            for (name, desc) in experiment::preset_names() {
                println!("{name:<8} {desc}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
