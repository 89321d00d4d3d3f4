//! Validated run specifications, named presets, single runs, sweeps and
//! kernel analyses: the layer the command-line front end drives.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::diagnostics::{self, EnergyReport, FieldGrid, TransitionReport};
use crate::engine::DerivativeOrder;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::{Activation, InitScheme, Network, NetworkConfig};
use crate::ntk::{self, DecayFit, DynamicsComparison, SeedSpectrum};
use crate::points::PointSet;
use crate::problems::{ProblemKind, VariationalProblem, DEFAULT_LAMBDA, EPS_LARGE, EPS_SMALL};
use crate::trainer::{self, Sampling, Schedule, TrainConfig, TrainOutcome};

/// Upper bound on the number of runs in one sweep.
pub const MAX_SWEEP_RUNS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    SmoothSqrt,
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "smooth_sqrt" | "smooth" | "sqrt" => Ok(Self::SmoothSqrt),
            _ => Err(format!("unknown activation {s:?}; expected relu or smooth_sqrt")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    /// Fresh mini-batch every epoch.
    Resample,
    /// One fixed pool reused every epoch.
    Pool,
}

impl FromStr for SamplingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "resample" | "per_epoch" => Ok(Self::Resample),
            "pool" | "fixed" | "fixed_pool" => Ok(Self::Pool),
            _ => Err(format!("unknown sampling {s:?}; expected resample or pool")),
        }
    }
}

/// Everything needed to reproduce one training run. Unset optional fields
/// take the per-dimension defaults: 1D resamples 128 interior points and
/// both endpoints each epoch, 2D reuses a pool of 600 interior and 400
/// boundary points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub problem: ProblemKind,
    /// Hidden layers.
    pub layers: usize,
    pub width: usize,
    pub activation: ActivationKind,
    pub rho: f64,
    /// Defaults to [`InitScheme::UniformFanIn`]: under He init the Fourier
    /// inputs start with slopes of order `2ⁱπ` and training settles in far
    /// noisier, higher-energy states.
    pub init: InitScheme,
    /// Fourier exponent `i`; `None` feeds raw coordinates.
    pub fourier_i: Option<u32>,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub eps: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub sampling: Option<SamplingKind>,
    pub batch_interior: Option<usize>,
    pub batch_boundary: Option<usize>,
    pub history_stride: usize,
    pub grid_resolution: usize,
    pub mc_samples: usize,
    pub threshold: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            problem: ProblemKind::DoubleWell1D,
            layers: 5,
            width: 128,
            activation: ActivationKind::Relu,
            rho: 0.1,
            init: InitScheme::UniformFanIn,
            fourier_i: None,
            epochs: 20_000,
            lr: 1e-4,
            lambda: DEFAULT_LAMBDA,
            eps: 0.0,
            seed: 0,
            schedule: Schedule::CosineToZero,
            sampling: None,
            batch_interior: None,
            batch_boundary: None,
            history_stride: 10,
            grid_resolution: 1025,
            mc_samples: 100_000,
            threshold: diagnostics::DEFAULT_THRESHOLD,
            out: None,
        }
    }
}

impl RunSpec {
    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    /// Every constraint violation, so they can be reported together.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers == 0 {
            v.push("layers: must be at least 1".to_string());
        }
        if self.width == 0 {
            v.push("width: must be at least 1".to_string());
        }
        if self.activation == ActivationKind::SmoothSqrt && !(self.rho > 0.0 && self.rho.is_finite()) {
            v.push(format!("rho: must be positive for smooth_sqrt, got {}", self.rho));
        }
        if self.fourier_i.is_some_and(|i| i > 30) {
            v.push(format!(
                "fourier_i: exponent {} is too large (max 30)",
                self.fourier_i.unwrap()
            ));
        }
        if self.epochs == 0 {
            v.push("epochs: must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: must be positive, got {}", self.lr));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda: must be positive, got {}", self.lambda));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            v.push(format!("eps: must be nonnegative, got {}", self.eps));
        } else if self.eps != 0.0 && self.problem != ProblemKind::Twin2DReg {
            v.push(format!(
                "eps: only Twin2D_Reg has a regularization term, got eps={} for {}",
                self.eps, self.problem
            ));
        }
        if self.problem == ProblemKind::Twin2DReg && self.activation == ActivationKind::Relu {
            v.push("activation: Twin2D_Reg needs u_yy, which relu does not provide".to_string());
        }
        if self.batch_interior == Some(0) {
            v.push("batch_interior: must be positive".to_string());
        }
        if self.batch_boundary == Some(0) {
            v.push("batch_boundary: must be positive".to_string());
        }
        if self.history_stride == 0 {
            v.push("history_stride: must be positive".to_string());
        }
        if self.grid_resolution < 2 {
            v.push(format!(
                "grid_resolution: must be at least 2, got {}",
                self.grid_resolution
            ));
        }
        if self.mc_samples < 2 {
            v.push(format!("mc_samples: must be at least 2, got {}", self.mc_samples));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            v.push(format!("threshold: must lie in (0,1), got {}", self.threshold));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }

    pub fn variational_problem(&self) -> VariationalProblem {
        VariationalProblem::new(self.problem)
            .with_eps(self.eps)
            .with_lambda(self.lambda)
    }

    pub fn feature_map(&self) -> FeatureMap {
        match (self.fourier_i, self.dim()) {
            (None, dim) => FeatureMap::Identity { dim },
            (Some(i), 1) => FeatureMap::Fourier1D { i },
            (Some(i), _) => FeatureMap::Fourier2DPlusIdentity { i },
        }
    }

    pub fn activation(&self) -> Activation {
        match self.activation {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::SmoothSqrt => Activation::SmoothSqrt { rho: self.rho },
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig::new(
            self.feature_map().output_dim(),
            self.layers,
            self.width,
            self.activation(),
        )
        .with_init(self.init)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = match self.dim() {
            1 => TrainConfig::default_1d(self.epochs, self.seed),
            _ => TrainConfig::default_2d(self.epochs, self.seed),
        };
        tc.lr0 = self.lr;
        tc.schedule = self.schedule;
        tc.history_stride = self.history_stride;
        let pool_default = self.dim() == 2;
        let pool = match self.sampling {
            Some(SamplingKind::Pool) => true,
            Some(SamplingKind::Resample) => false,
            None => pool_default,
        };
        if let Some(n) = self.batch_interior {
            tc.batch_interior = n;
        }
        if let Some(n) = self.batch_boundary {
            tc.batch_boundary = n;
        }
        tc.sampling = if pool {
            Sampling::FixedPool {
                interior: tc.batch_interior,
                boundary: tc.batch_boundary,
            }
        } else {
            Sampling::PerEpochResample
        };
        tc
    }
}

struct PresetEntry {
    name: &'static str,
    description: &'static str,
    build: fn() -> RunSpec,
}

fn base_1d(problem: ProblemKind, layers: usize, fourier_i: Option<u32>, epochs: usize) -> RunSpec {
    RunSpec {
        problem,
        layers,
        fourier_i,
        epochs,
        ..RunSpec::default()
    }
}

fn base_2d(problem: ProblemKind, layers: usize, fourier_i: Option<u32>, eps: f64) -> RunSpec {
    RunSpec {
        problem,
        layers,
        fourier_i,
        eps,
        activation: ActivationKind::SmoothSqrt,
        epochs: 300_000,
        grid_resolution: 257,
        ..RunSpec::default()
    }
}

macro_rules! preset {
    ($name:expr, $desc:expr, $body:expr) => {
        PresetEntry {
            name: $name,
            description: $desc,
            build: || $body,
        }
    };
}

const DW: ProblemKind = ProblemKind::DoubleWell1D;
const DWL: ProblemKind = ProblemKind::DoubleWellLower1D;
const TW: ProblemKind = ProblemKind::Twin2D;
const TWR: ProblemKind = ProblemKind::Twin2DReg;

const PRESETS: &[PresetEntry] = &[
    preset!(
        "fig2",
        "DW1D, 5x128 ReLU, no Fourier map, 100k epochs",
        base_1d(DW, 5, None, 100_000)
    ),
    preset!(
        "fig2_d7",
        "DW1D, 7x128 ReLU, no Fourier map, 100k epochs",
        base_1d(DW, 7, None, 100_000)
    ),
    preset!(
        "fig2_d9",
        "DW1D, 9x128 ReLU, no Fourier map, 100k epochs",
        base_1d(DW, 9, None, 100_000)
    ),
    preset!(
        "fig3a",
        "DW1D, Fourier i=2, 5x128 ReLU, 100k epochs",
        base_1d(DW, 5, Some(2), 100_000)
    ),
    preset!(
        "fig3b",
        "DW1D, Fourier i=3, 5x128 ReLU, 100k epochs",
        base_1d(DW, 5, Some(3), 100_000)
    ),
    preset!(
        "fig3c",
        "DW1D, Fourier i=4, 5x128 ReLU, 100k epochs",
        base_1d(DW, 5, Some(4), 100_000)
    ),
    preset!(
        "fig4a",
        "DW1D_Lower, 3x128 ReLU, no Fourier map, 200k epochs",
        base_1d(DWL, 3, None, 200_000)
    ),
    preset!(
        "fig4b",
        "DW1D_Lower, 5x128 ReLU, no Fourier map, 200k epochs",
        base_1d(DWL, 5, None, 200_000)
    ),
    preset!(
        "fig4c",
        "DW1D_Lower, 7x128 ReLU, no Fourier map, 200k epochs",
        base_1d(DWL, 7, None, 200_000)
    ),
    preset!(
        "fig4d",
        "DW1D_Lower, 3x128 ReLU, no Fourier map, 500k epochs",
        base_1d(DWL, 3, None, 500_000)
    ),
    preset!(
        "fig4e",
        "DW1D_Lower, 5x128 ReLU, no Fourier map, 500k epochs",
        base_1d(DWL, 5, None, 500_000)
    ),
    preset!(
        "fig4f",
        "DW1D_Lower, 7x128 ReLU, no Fourier map, 500k epochs",
        base_1d(DWL, 7, None, 500_000)
    ),
    preset!(
        "fig5a",
        "DW1D_Lower, Fourier i=1, 3x128 ReLU, 200k epochs",
        base_1d(DWL, 3, Some(1), 200_000)
    ),
    preset!(
        "fig5b",
        "DW1D_Lower, Fourier i=2, 3x128 ReLU, 200k epochs",
        base_1d(DWL, 3, Some(2), 200_000)
    ),
    preset!(
        "fig5c",
        "DW1D_Lower, Fourier i=3, 3x128 ReLU, 200k epochs",
        base_1d(DWL, 3, Some(3), 200_000)
    ),
    preset!(
        "fig5d",
        "DW1D_Lower, Fourier i=1, 3x128 ReLU, 500k epochs",
        base_1d(DWL, 3, Some(1), 500_000)
    ),
    preset!(
        "fig5e",
        "DW1D_Lower, Fourier i=2, 3x128 ReLU, 500k epochs",
        base_1d(DWL, 3, Some(2), 500_000)
    ),
    preset!(
        "fig5f",
        "DW1D_Lower, Fourier i=3, 3x128 ReLU, 500k epochs",
        base_1d(DWL, 3, Some(3), 500_000)
    ),
    preset!(
        "fig6a",
        "Twin2D, 3x128 smooth, no Fourier map, 300k epochs",
        base_2d(TW, 3, None, 0.0)
    ),
    preset!(
        "fig6b",
        "Twin2D, 5x128 smooth, no Fourier map, 300k epochs",
        base_2d(TW, 5, None, 0.0)
    ),
    preset!(
        "fig6c",
        "Twin2D, 7x128 smooth, no Fourier map, 300k epochs",
        base_2d(TW, 7, None, 0.0)
    ),
    preset!(
        "fig7a",
        "Twin2D, Fourier i=1, 3x128 smooth, 300k epochs",
        base_2d(TW, 3, Some(1), 0.0)
    ),
    preset!(
        "fig7b",
        "Twin2D, Fourier i=2, 3x128 smooth, 300k epochs",
        base_2d(TW, 3, Some(2), 0.0)
    ),
    preset!(
        "fig7c",
        "Twin2D, Fourier i=3, 3x128 smooth, 300k epochs",
        base_2d(TW, 3, Some(3), 0.0)
    ),
    preset!(
        "fig7d",
        "Twin2D, Fourier i=4, 3x128 smooth, 300k epochs",
        base_2d(TW, 3, Some(4), 0.0)
    ),
    preset!(
        "fig8a",
        "Twin2D_Reg eps=0.1/16, no Fourier map, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, None, EPS_SMALL)
    ),
    preset!(
        "fig8b",
        "Twin2D_Reg eps=0.1/16, Fourier i=1, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(1), EPS_SMALL)
    ),
    preset!(
        "fig8c",
        "Twin2D_Reg eps=0.1/16, Fourier i=2, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(2), EPS_SMALL)
    ),
    preset!(
        "fig8d",
        "Twin2D_Reg eps=0.1/16, Fourier i=3, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(3), EPS_SMALL)
    ),
    preset!(
        "fig8e",
        "Twin2D_Reg eps=0.1/16, Fourier i=4, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(4), EPS_SMALL)
    ),
    preset!(
        "fig9a",
        "Twin2D_Reg eps=0.1/4, no Fourier map, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, None, EPS_LARGE)
    ),
    preset!(
        "fig9b",
        "Twin2D_Reg eps=0.1/4, Fourier i=1, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(1), EPS_LARGE)
    ),
    preset!(
        "fig9c",
        "Twin2D_Reg eps=0.1/4, Fourier i=2, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(2), EPS_LARGE)
    ),
    preset!(
        "fig9d",
        "Twin2D_Reg eps=0.1/4, Fourier i=3, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(3), EPS_LARGE)
    ),
    preset!(
        "fig9e",
        "Twin2D_Reg eps=0.1/4, Fourier i=4, 3x128 smooth, 300k epochs",
        base_2d(TWR, 3, Some(4), EPS_LARGE)
    ),
];

pub fn preset(name: &str) -> Option<RunSpec> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .map(|p| (p.build)())
}

/// `(name, description)` of every preset.
pub fn preset_names() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|p| (p.name, p.description)).collect()
}

/// Parses a real number, also accepting a quotient such as `0.1/16`.
pub fn parse_real(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let bad = || format!("not a number: {s:?}");
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(format!("division by zero in {s:?}"));
            }
            Ok(a / b)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

/// Results of one training run, before anything is written.
pub struct RunResult {
    pub spec: RunSpec,
    pub outcome: TrainOutcome,
    pub energy: EnergyReport,
    /// `Err` text when every slope sample fell in the dead zone.
    pub transitions: std::result::Result<TransitionReport, String>,
    pub fields: FieldGrid,
}

impl RunResult {
    pub fn transition_count(&self) -> Option<usize> {
        self.transitions.as_ref().ok().map(|r| r.count)
    }
}

/// Trains and measures a run without touching the filesystem.
pub fn execute(spec: &RunSpec) -> Result<RunResult> {
    spec.validate()?;
    let prob = spec.variational_problem();
    let fmap = spec.feature_map();
    let outcome = trainer::train_problem(&prob, &spec.network_config(), &fmap, &spec.train_config())?;
    measure(spec, outcome)
}

fn measure(spec: &RunSpec, outcome: TrainOutcome) -> Result<RunResult> {
    let prob = spec.variational_problem();
    let fmap = spec.feature_map();
    let net = &outcome.network;
    let energy = diagnostics::energy_report(&prob, net, &fmap, spec.grid_resolution, spec.mc_samples, spec.seed)?;
    let transitions = match diagnostics::transition_report(net, &fmap, spec.dim(), spec.grid_resolution, spec.threshold)
    {
        Ok(r) => Ok(r),
        Err(Error::AllUnclassified) => Err(Error::AllUnclassified.to_string()),
        Err(e) => return Err(e),
    };
    let fields = diagnostics::evaluate_grid(net, &fmap, &prob, spec.grid_resolution.min(257))?;
    Ok(RunResult {
        spec: spec.clone(),
        outcome,
        energy,
        transitions,
        fields,
    })
}

/// Creates `dir`, refusing an existing one unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    report: Option<TransitionReport>,
    error: Option<String>,
}

/// Writes the artifacts of a finished run into `dir`.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    artifacts::write_json(&dir.join("manifest.json"), &result.outcome.manifest)?;
    artifacts::write_json(&dir.join("spec.json"), &result.spec)?;
    artifacts::write_loss_history(&dir.join("loss_history.csv"), &result.outcome.history)?;
    artifacts::write_field_grid(&dir.join("fields.csv"), &result.fields)?;
    let record = match &result.transitions {
        Ok(r) => TransitionRecord {
            report: Some(r.clone()),
            error: None,
        },
        Err(e) => TransitionRecord {
            report: None,
            error: Some(e.clone()),
        },
    };
    artifacts::write_json(&dir.join("transitions.json"), &record)?;
    artifacts::write_json(&dir.join("energy.json"), &result.energy)?;
    for ckpt in &result.outcome.checkpoints {
        artifacts::write_checkpoint_binary(
            &dir.join("checkpoints").join(format!("epoch_{:09}.bin", ckpt.epoch)),
            ckpt,
        )?;
    }
    if let Some(last) = result.outcome.checkpoints.last() {
        artifacts::write_checkpoint_binary(&dir.join("checkpoint_final.bin"), last)?;
    }
    Ok(())
}

/// Validates, trains, measures and writes a run to `dir`. On a non-finite
/// loss the last finite checkpoint is saved before the error is returned.
pub fn run_to_dir(spec: &RunSpec, dir: &Path, force: bool) -> Result<RunResult> {
    spec.validate()?;
    prepare_output(dir, force)?;
    match execute(spec) {
        Ok(result) => {
            write_run(dir, &result)?;
            Ok(result)
        }
        Err(Error::NonFiniteLoss { epoch, last_checkpoint }) => {
            if let Some(ckpt) = &last_checkpoint {
                artifacts::write_checkpoint_binary(&dir.join("checkpoint_last_finite.bin"), ckpt)?;
            }
            Err(Error::NonFiniteLoss { epoch, last_checkpoint })
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Depth,
    Frequency,
    Eps,
    Seed,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "depth" | "layers" => Ok(Self::Depth),
            "frequency" | "fourier" | "fourier_i" => Ok(Self::Frequency),
            "eps" => Ok(Self::Eps),
            "seed" => Ok(Self::Seed),
            _ => Err(format!(
                "unknown sweep axis {s:?}; expected depth, frequency, eps or seed"
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Depth => "depth",
            SweepAxis::Frequency => "frequency",
            SweepAxis::Eps => "eps",
            SweepAxis::Seed => "seed",
        })
    }
}

impl SweepAxis {
    /// `base` with the axis set to `value`; frequency accepts `none`.
    pub fn apply(self, base: &RunSpec, value: &str) -> std::result::Result<RunSpec, String> {
        let mut spec = base.clone();
        let int = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| format!("{self}: not an integer: {s:?}"))
        };
        match self {
            SweepAxis::Depth => spec.layers = int(value)? as usize,
            SweepAxis::Frequency => {
                spec.fourier_i = if value.trim().eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(u32::try_from(int(value)?).map_err(|_| format!("frequency: {value:?} out of range"))?)
                }
            }
            SweepAxis::Eps => spec.eps = parse_real(value).map_err(|e| format!("eps: {e}"))?,
            SweepAxis::Seed => spec.seed = int(value)?,
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub final_energy: Option<f64>,
    pub transitions: Option<usize>,
    pub runtime_seconds: f64,
    pub error: Option<String>,
}

/// Builds and validates every run of a sweep up front.
pub fn plan_sweep(base: &RunSpec, axis: SweepAxis, values: &[String]) -> Result<Vec<RunSpec>> {
    let mut problems = Vec::new();
    if values.is_empty() {
        problems.push("sweep: value list is empty".to_string());
    }
    if values.len() > MAX_SWEEP_RUNS {
        problems.push(format!(
            "sweep: {} runs requested, at most {MAX_SWEEP_RUNS} allowed",
            values.len()
        ));
    }
    let mut specs = Vec::with_capacity(values.len());
    for value in values {
        match axis.apply(base, value) {
            Ok(spec) => {
                problems.extend(spec.violations().into_iter().map(|v| format!("{axis}={value}: {v}")));
                specs.push(spec);
            }
            Err(e) => problems.push(e),
        }
    }
    if problems.is_empty() {
        Ok(specs)
    } else {
        Err(Error::InvalidSpec(problems))
    }
}

/// Runs every value of the axis in order. Failures of individual runs are
/// recorded in their row and do not stop the sweep. With `out`, each run
/// writes into `out/<axis>_<value>/` and a `summary.csv` is written.
pub fn sweep(
    base: &RunSpec,
    axis: SweepAxis,
    values: &[String],
    out: Option<&Path>,
    force: bool,
) -> Result<Vec<SweepRow>> {
    let specs = plan_sweep(base, axis, values)?;
    if let Some(dir) = out {
        if dir.exists() && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, value) in specs.iter().zip(values) {
        let start = Instant::now();
        let res = match out {
            Some(dir) => {
                let name = format!("{axis}_{}", value.trim().replace('/', "over"));
                run_to_dir(spec, &dir.join(name), true)
            }
            None => execute(spec),
        };
        let runtime_seconds = start.elapsed().as_secs_f64();
        rows.push(match res {
            Ok(r) => SweepRow {
                axis,
                value: value.trim().to_string(),
                final_energy: Some(r.energy.total()),
                transitions: r.transition_count(),
                runtime_seconds,
                error: None,
            },
            Err(e) => SweepRow {
                axis,
                value: value.trim().to_string(),
                final_energy: None,
                transitions: None,
                runtime_seconds,
                error: Some(e.to_string()),
            },
        });
    }
    if let Some(dir) = out {
        write_sweep_summary(&dir.join("summary.csv"), &rows)?;
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 6] = [
    "axis",
    "value",
    "final_energy",
    "transitions",
    "runtime_seconds",
    "error",
];

pub fn write_sweep_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let clean = |s: &str| s.replace([',', '\n'], ";");
    artifacts::write_table(
        path,
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.axis.to_string(),
                clean(&r.value),
                r.final_energy.map(artifacts::fmt_f64).unwrap_or_default(),
                r.transitions.map(|c| c.to_string()).unwrap_or_default(),
                artifacts::fmt_f64(r.runtime_seconds),
                r.error.as_deref().map(clean).unwrap_or_default(),
            ]
        }),
    )
}

pub fn read_sweep_summary(path: &Path) -> Result<Vec<SweepRow>> {
    let (header, rows) = artifacts::read_table(path)?;
    if header.iter().map(String::as_str).ne(SWEEP_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    rows.iter()
        .map(|r| {
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("bad number {s:?}")))
                }
            };
            Ok(SweepRow {
                axis: r[0].parse().map_err(Error::Format)?,
                value: r[1].clone(),
                final_energy: num(&r[2])?,
                transitions: if r[3].is_empty() {
                    None
                } else {
                    Some(
                        r[3].parse()
                            .map_err(|_| Error::Format(format!("bad count {:?}", r[3])))?,
                    )
                },
                runtime_seconds: num(&r[4])?.unwrap_or(0.0),
                error: (!r[5].is_empty()).then(|| r[5].clone()),
            })
        })
        .collect()
}

/// Closed-form kernels with known operator spectra.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSelfTest {
    /// `K ≡ 1`: a single operator eigenvalue 1.
    Constant,
    /// `K = min(x, x′)`: eigenvalues `4/((2k−1)²π²)`.
    Brownian,
}

impl FromStr for KernelSelfTest {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "brownian" => Ok(Self::Brownian),
            _ => Err(format!("unknown self-test {s:?}; expected constant or brownian")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTestRow {
    pub n: usize,
    pub k: usize,
    pub lambda_over_n: f64,
    pub operator_eigenvalue: f64,
    pub relative_error: f64,
}

/// `λ_k(n)/n` against the operator eigenvalue for `k = 1..=k_max`.
pub fn kernel_self_test(kind: KernelSelfTest, sizes: &[usize], k_max: usize) -> Result<Vec<SelfTestRow>> {
    type Kernel = fn(f64, f64) -> f64;
    let (kernel, exact): (Kernel, fn(usize) -> f64) = match kind {
        KernelSelfTest::Constant => (|_, _| 1.0, |k| if k == 1 { 1.0 } else { 0.0 }),
        KernelSelfTest::Brownian => (|x, y| x.min(y), ntk::brownian_eigenvalue),
    };
    let table = ntk::operator_eigenvalue_relation(&kernel, sizes, k_max)?;
    let mut rows = Vec::new();
    for (n, values) in table {
        for (k0, v) in values.iter().enumerate() {
            let e = exact(k0 + 1);
            rows.push(SelfTestRow {
                n,
                k: k0 + 1,
                lambda_over_n: *v,
                operator_eigenvalue: e,
                relative_error: if e == 0.0 { v.abs() } else { (v - e).abs() / e },
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkOptions {
    /// Collocation points; in 2D rounded to a square grid.
    pub points: usize,
    /// Seeds `spec.seed .. spec.seed + seeds` are averaged.
    pub seeds: usize,
    /// Use the `û`-only kernel instead of the full jet-state kernel.
    pub scalar: bool,
    pub fit_window: (usize, usize),
    /// Attach Hessian blocks of the spec's problem (first seed only).
    pub with_hessian: bool,
    /// Gradient-descent steps for a linearized-dynamics comparison.
    pub dynamics_steps: Option<usize>,
}

impl Default for NtkOptions {
    fn default() -> Self {
        Self {
            points: 256,
            seeds: 8,
            scalar: true,
            fit_window: (4, 64),
            with_hessian: false,
            dynamics_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkReport {
    pub spectrum: SeedSpectrum,
    pub fit: Option<DecayFit>,
    pub fit_error: Option<String>,
    /// Spectrum of `D_X M_X` for the first seed, when requested.
    pub hessian_spectrum: Option<Vec<f64>>,
    pub dynamics: Option<DynamicsComparison>,
}

pub fn ntk_points(dim: usize, n: usize) -> PointSet {
    match dim {
        1 => PointSet::uniform_grid(1, n.max(2)),
        _ => PointSet::uniform_grid(2, ((n as f64).sqrt().round() as usize).max(2)),
    }
}

/// Kernel spectra of freshly initialized networks described by `spec`.
pub fn ntk_analysis(spec: &RunSpec, opts: &NtkOptions) -> Result<NtkReport> {
    let mut v = spec.violations();
    if opts.seeds == 0 {
        v.push("seeds: must be at least 1".into());
    }
    if opts.points == 0 {
        v.push("points: must be at least 1".into());
    }
    if !v.is_empty() {
        return Err(Error::InvalidSpec(v));
    }
    let fmap = spec.feature_map();
    let cfg = spec.network_config();
    let points = ntk_points(spec.dim(), opts.points);
    let prob = spec.variational_problem();
    let order = if opts.scalar {
        DerivativeOrder::Value
    } else {
        spec.problem.order()
    };
    let seeds: Vec<u64> = (0..opts.seeds as u64).map(|s| spec.seed + s).collect();
    let spectrum = ntk::seed_averaged_spectrum(&cfg, &fmap, &points, order, &seeds)?;
    let (fit, fit_error) = match ntk::eigendecay_fit(&spectrum.mean, opts.fit_window.0, opts.fit_window.1) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let net = Network::init(&cfg, spec.seed)?;
    let hessian_spectrum = if opts.with_hessian {
        Some(ntk::linearize(&prob, &net, &fmap, &points)?.0.eigenvalues)
    } else {
        None
    };
    let dynamics = match opts.dynamics_steps {
        Some(steps) => Some(ntk::compare_dynamics(&prob, &net, &fmap, &points, spec.lr, steps, 5)?.0),
        None => None,
    };
    Ok(NtkReport {
        spectrum,
        fit,
        fit_error,
        hessian_spectrum,
        dynamics,
    })
}
