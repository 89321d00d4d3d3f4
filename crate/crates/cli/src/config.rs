//! Layering of run settings: preset, then config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use deep_ritz::experiment::{self, ActivationKind, RunSpec, SamplingKind};
use deep_ritz::network::InitScheme;
use deep_ritz::problems::ProblemKind;
use deep_ritz::trainer::Schedule;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Cosine,
    Constant,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Cosine => Schedule::CosineToZero,
            ScheduleArg::Constant => Schedule::Constant,
        }
    }
}

/// Flags shared by every subcommand that builds a [`RunSpec`].
#[derive(Args, Clone, Debug, Default)]
pub struct SpecArgs {
    /// Named experiment preset (see `deep-ritz presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML file with run settings; keys match the run spec fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// DW1D, DW1D_Lower, Twin2D or Twin2D_Reg.
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    /// Hidden layers.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// relu or smooth_sqrt.
    #[arg(long)]
    pub activation: Option<ActivationKind>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// he_normal or uniform_fan_in.
    #[arg(long)]
    pub init: Option<InitScheme>,
    /// Fourier feature exponent i (frequency 2^i π).
    #[arg(long, conflicts_with = "no_fourier")]
    pub fourier_i: Option<u32>,
    /// Feed raw coordinates to the network.
    #[arg(long)]
    pub no_fourier: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Regularization strength; accepts quotients such as 0.1/16.
    #[arg(long, value_parser = experiment::parse_real)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// resample or pool.
    #[arg(long)]
    pub sampling: Option<SamplingKind>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub batch_interior: Option<usize>,
    #[arg(long)]
    pub batch_boundary: Option<usize>,
    #[arg(long)]
    pub history_stride: Option<usize>,
    #[arg(long)]
    pub grid_resolution: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Reads a config file into a TOML table. A `preset` key names the base.
pub fn read_config(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn base_spec(name: Option<&str>) -> Result<RunSpec> {
    match name {
        None => Ok(RunSpec::default()),
        Some(n) => {
            experiment::preset(n).ok_or_else(|| anyhow!("unknown preset {n:?}; run `deep-ritz presets` for the list"))
        }
    }
}

/// Applies `table` on top of `spec`. `fourier_i = "none"` clears the map.
pub fn overlay(spec: &RunSpec, mut table: toml::Table) -> Result<RunSpec> {
    table.remove("preset");
    let clear_fourier =
        matches!(table.get("fourier_i"), Some(toml::Value::String(s)) if s.eq_ignore_ascii_case("none"));
    if clear_fourier {
        table.remove("fourier_i");
    }
    let mut merged = toml::Table::try_from(spec).context("encoding base spec")?;
    if clear_fourier {
        merged.remove("fourier_i");
    }
    merged.extend(table);
    let out: RunSpec = toml::Value::Table(merged).try_into().context("invalid config")?;
    Ok(out)
}

impl SpecArgs {
    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<RunSpec> {
        let table = self.config.as_deref().map(read_config).transpose()?;
        let preset_name = match (&self.preset, table.as_ref().and_then(|t| t.get("preset"))) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(toml::Value::String(p))) => Some(p.clone()),
            (None, Some(other)) => bail!("config key `preset` must be a string, got {other}"),
            (None, None) => None,
        };
        let mut spec = base_spec(preset_name.as_deref())?;
        if let Some(t) = table {
            spec = overlay(&spec, t)?;
        }
        self.apply_flags(&mut spec);
        Ok(spec)
    }

    fn apply_flags(&self, s: &mut RunSpec) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    s.$f = v.into();
                }
            )*};
        }
        set!(
            problem,
            layers,
            width,
            activation,
            rho,
            init,
            epochs,
            lr,
            lambda,
            eps,
            seed,
            schedule,
            history_stride,
            grid_resolution,
            mc_samples,
            threshold
        );
        if let Some(i) = self.fourier_i {
            s.fourier_i = Some(i);
        }
        if self.no_fourier {
            s.fourier_i = None;
        }
        if let Some(m) = self.sampling {
            s.sampling = Some(m);
        }
        if let Some(n) = self.batch_interior {
            s.batch_interior = Some(n);
        }
        if let Some(n) = self.batch_boundary {
            s.batch_boundary = Some(n);
        }
    }
}
