//! Stochastic training of the penalized energy with Adam.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::ParameterGradient;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::{Network, NetworkConfig};
use crate::points::PointSet;
use crate::problems::{penalized_loss_gradient, Lagrangian, LossParts, VariationalProblem};

/// Version tag stamped into manifests and checkpoints.
pub const ARTIFACT_VERSION: &str = concat!("deep-ritz/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr(t) = lr0 (1 + cos(πt/T)) / 2`.
    CosineToZero,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Fresh uniform batches every epoch.
    PerEpochResample,
    /// One pool drawn up front and reused as the full batch every epoch.
    FixedPool { interior: usize, boundary: usize },
}

impl Sampling {
    /// 600 interior and 100 points per edge.
    pub const POOL_2D: Sampling = Sampling::FixedPool {
        interior: 600,
        boundary: 400,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_interior: usize,
    pub batch_boundary: usize,
    pub lr0: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub sampling: Sampling,
    /// Loss is recorded every `history_stride` epochs and at the last one.
    pub history_stride: usize,
}

impl TrainConfig {
    /// Mini-batches of 128 interior points and both endpoints.
    pub fn default_1d(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_interior: 128,
            batch_boundary: 2,
            lr0: 1e-4,
            seed,
            schedule: Schedule::CosineToZero,
            sampling: Sampling::PerEpochResample,
            history_stride: 10,
        }
    }

    /// Fixed pool of 600 interior and 400 boundary points.
    pub fn default_2d(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_interior: 600,
            batch_boundary: 400,
            lr0: 1e-4,
            seed,
            schedule: Schedule::CosineToZero,
            sampling: Sampling::POOL_2D,
            history_stride: 10,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be positive".to_string());
        }
        if self.batch_interior == 0 {
            v.push("batch_interior must be positive".to_string());
        }
        if self.batch_boundary == 0 {
            v.push("batch_boundary must be positive".to_string());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            v.push(format!("lr must be positive and finite, got {}", self.lr0));
        }
        if self.history_stride == 0 {
            v.push("history_stride must be positive".to_string());
        }
        if let Sampling::FixedPool { interior, boundary } = self.sampling {
            if interior == 0 || boundary == 0 {
                v.push("fixed pool sizes must be positive".to_string());
            }
        }
        v
    }
}

pub fn lr_at(schedule: Schedule, lr0: f64, epoch: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::CosineToZero => {
            if epoch >= total {
                return 0.0;
            }
            lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
        }
    }
}

/// Uniform interior points and uniform boundary points of `[0,1]^dim`.
///
/// In 1D the boundary batch alternates `0, 1, 0, …`, so any batch of two or
/// more contains both endpoints. In 2D points cycle through the bottom,
/// top, left and right edges, giving equal per-edge counts when the batch
/// size is a multiple of four.
pub fn sample_batch<R: Rng>(dim: usize, n_interior: usize, n_boundary: usize, rng: &mut R) -> (PointSet, PointSet) {
    let mut interior = PointSet::with_capacity(dim, n_interior);
    let mut p = vec![0.0; dim];
    for _ in 0..n_interior {
        for c in p.iter_mut() {
            *c = rng.random::<f64>();
        }
        interior.push(&p);
    }
    let mut boundary = PointSet::with_capacity(dim, n_boundary);
    for k in 0..n_boundary {
        match dim {
            1 => boundary.push(&[(k % 2) as f64]),
            2 => {
                let t = rng.random::<f64>();
                let q = match k % 4 {
                    0 => [t, 0.0],
                    1 => [t, 1.0],
                    2 => [0.0, t],
                    _ => [1.0, t],
                };
                boundary.push(&q);
            }
            d => panic!("unsupported dimension {d}"),
        }
    }
    (interior, boundary)
}

/// Source of per-epoch batches; seeded on stream 1 of the run seed so it is
/// independent of the initialization stream.
pub struct Sampler {
    dim: usize,
    config: TrainConfig,
    rng: ChaCha8Rng,
    pool: Option<(PointSet, PointSet)>,
}

impl Sampler {
    pub fn new(dim: usize, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let pool = match config.sampling {
            Sampling::FixedPool { interior, boundary } => Some(sample_batch(dim, interior, boundary, &mut rng)),
            Sampling::PerEpochResample => None,
        };
        Self {
            dim,
            config: config.clone(),
            rng,
            pool,
        }
    }

    pub fn pool(&self) -> Option<&(PointSet, PointSet)> {
        self.pool.as_ref()
    }

    /// Runs `f` on the batch for the next epoch.
    pub fn with_batch<T>(&mut self, f: impl FnOnce(&PointSet, &PointSet) -> T) -> T {
        match &self.pool {
            Some((i, b)) => f(i, b),
            None => {
                let (i, b) = sample_batch(
                    self.dim,
                    self.config.batch_interior,
                    self.config.batch_boundary,
                    &mut self.rng,
                );
                f(&i, &b)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step(state: &mut AdamState, net: &mut Network, grad: &ParameterGradient, lr: f64) -> Result<()> {
    if grad.len() != state.m.len() || net.param_count() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: state.m.len(),
            got: grad.len(),
        });
    }
    if let Some(index) = grad.first_non_finite() {
        return Err(Error::NonFiniteGradient { index });
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut offset = 0;
    for (layer, glayer) in net.layers_mut().iter_mut().zip(grad.layers()) {
        for (p, g) in layer.buffers_mut().into_iter().zip(glayer.buffers()) {
            let m = &mut state.m[offset..offset + p.len()];
            let v = &mut state.v[offset..offset + p.len()];
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            offset += p.len();
        }
    }
    Ok(())
}

/// Snapshot of a run's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub feature_map: FeatureMap,
    pub seed: u64,
    /// Number of completed updates.
    pub epoch: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(net: &Network, config: &NetworkConfig, fmap: &FeatureMap, seed: u64, epoch: usize) -> Self {
        Self {
            network: *config,
            feature_map: *fmap,
            seed,
            epoch,
            params: net.to_flat(),
        }
    }

    pub fn restore(&self) -> Result<Network> {
        Network::from_flat(&self.network, &self.params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
    pub energy: f64,
    pub penalty: f64,
}

/// What a run did, serialized next to its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub problem: String,
    /// Problem parameters when the run used a [`VariationalProblem`].
    pub variational: Option<VariationalProblem>,
    pub network: NetworkConfig,
    pub feature_map: FeatureMap,
    pub train: TrainConfig,
    pub param_count: usize,
    pub wall_clock_seconds: f64,
    pub final_loss: LossParts,
    pub history_stride: usize,
}

pub struct TrainOutcome {
    pub network: Network,
    pub manifest: RunManifest,
    pub history: Vec<LossRecord>,
    /// Every 10% of the epochs and the final state.
    pub checkpoints: Vec<Checkpoint>,
    /// Learning rate applied at each epoch.
    pub lr_trace: Vec<f64>,
}

pub fn train(
    prob: &dyn Lagrangian,
    netcfg: &NetworkConfig,
    fmap: &FeatureMap,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(prob, netcfg, fmap, config, None)
}

/// Like [`train`], starting from `init` instead of a fresh initialization.
pub fn train_from(
    prob: &dyn Lagrangian,
    netcfg: &NetworkConfig,
    fmap: &FeatureMap,
    config: &TrainConfig,
    init: Option<Network>,
) -> Result<TrainOutcome> {
    let mut violations = netcfg.violations();
    violations.extend(config.violations());
    if fmap.output_dim() != netcfg.input_dim {
        violations.push(format!(
            "feature map outputs {} coordinates but the network expects {}",
            fmap.output_dim(),
            netcfg.input_dim
        ));
    }
    if fmap.input_dim() != prob.dim() {
        violations.push(format!(
            "problem {} is {}-dimensional but the feature map takes {} coordinates",
            prob.id(),
            prob.dim(),
            fmap.input_dim()
        ));
    }
    if prob.order().as_usize() > netcfg.activation.max_input_order() {
        violations.push(format!(
            "problem {} needs derivative order {} which activation {} does not support",
            prob.id(),
            prob.order().as_usize(),
            netcfg.activation.name()
        ));
    }
    if !violations.is_empty() {
        return Err(Error::InvalidSpec(violations));
    }

    let start = Instant::now();
    let mut net = match init {
        Some(net) => net,
        None => Network::init(netcfg, config.seed)?,
    };
    let mut sampler = Sampler::new(prob.dim(), config);
    let mut adam = AdamState::new(net.param_count());
    let mut grad = ParameterGradient::zeros_like(&net);
    let mut history = Vec::with_capacity(config.epochs / config.history_stride + 2);
    let mut checkpoints = Vec::new();
    let mut lr_trace = Vec::with_capacity(config.epochs);
    let mut last_good = Checkpoint::capture(&net, netcfg, fmap, config.seed, 0);
    let cadence = (config.epochs / 10).max(1);
    let mut last = LossParts {
        energy: f64::NAN,
        penalty: f64::NAN,
        total: f64::NAN,
    };

    for epoch in 0..config.epochs {
        let parts = sampler
            .with_batch(|interior, boundary| penalized_loss_gradient(prob, &net, fmap, interior, boundary, &mut grad));
        let parts = match parts {
            Ok(p) => p,
            Err(Error::NonFiniteValue(_)) => {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_checkpoint: Some(Box::new(last_good)),
                })
            }
            Err(e) => return Err(e),
        };
        if epoch % config.history_stride == 0 || epoch + 1 == config.epochs {
            history.push(LossRecord {
                epoch,
                loss: parts.total,
                energy: parts.energy,
                penalty: parts.penalty,
            });
        }
        last = parts;
        let lr = lr_at(config.schedule, config.lr0, epoch, config.epochs);
        lr_trace.push(lr);
        match adam_step(&mut adam, &mut net, &grad, lr) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_checkpoint: Some(Box::new(last_good)),
                })
            }
            Err(e) => return Err(e),
        }
        let done = epoch + 1;
        if done % cadence == 0 || done == config.epochs {
            last_good = Checkpoint::capture(&net, netcfg, fmap, config.seed, done);
            checkpoints.push(last_good.clone());
        }
    }

    let manifest = RunManifest {
        version: ARTIFACT_VERSION.to_string(),
        problem: prob.id(),
        variational: None,
        network: *netcfg,
        feature_map: *fmap,
        train: config.clone(),
        param_count: net.param_count(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        final_loss: last,
        history_stride: config.history_stride,
    };
    Ok(TrainOutcome {
        network: net,
        manifest,
        history,
        checkpoints,
        lr_trace,
    })
}

/// [`train`] for one of the named problems; the manifest records its
/// parameters.
pub fn train_problem(
    prob: &VariationalProblem,
    netcfg: &NetworkConfig,
    fmap: &FeatureMap,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let violations = prob.violations();
    if !violations.is_empty() {
        return Err(Error::InvalidSpec(violations));
    }
    let mut out = train(prob, netcfg, fmap, config)?;
    out.manifest.variational = Some(*prob);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DerivativeOrder;
    use crate::network::Activation;
    use crate::problems::{ConvexSurrogate, ProblemKind};

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::CosineToZero;
        assert_eq!(lr_at(s, 1e-4, 0, 100), 1e-4);
        assert_eq!(lr_at(s, 1e-4, 100, 100), 0.0);
        assert!((lr_at(s, 1e-4, 50, 100) - 5e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = lr_at(s, 1e-4, e, 100);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(lr_at(Schedule::Constant, 1e-3, 77, 100), 1e-3);
    }

    #[test]
    fn one_d_boundary_is_both_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, b) = sample_batch(1, 4, 2, &mut rng);
        assert_eq!(b.as_flat(), &[0.0, 1.0]);
    }

    #[test]
    fn two_d_pool_layout() {
        let cfg = TrainConfig::default_2d(1, 4);
        let sampler = Sampler::new(2, &cfg);
        let (i, b) = sampler.pool().unwrap();
        assert_eq!(i.len(), 600);
        assert_eq!(b.len(), 400);
        assert!(i.as_flat().iter().chain(b.as_flat()).all(|v| (0.0..=1.0).contains(v)));
        let on_edge = |p: &[f64], e: usize| match e {
            0 => p[1] == 0.0,
            1 => p[1] == 1.0,
            2 => p[0] == 0.0,
            _ => p[0] == 1.0,
        };
        for e in 0..4 {
            assert_eq!(b.iter().filter(|p| on_edge(p, e)).count(), 100);
        }
    }

    #[test]
    fn interior_mean_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (i, _) = sample_batch(1, 1_000_000, 2, &mut rng);
        let mean = i.as_flat().iter().sum::<f64>() / 1e6;
        assert!((mean - 0.5).abs() < 0.002);
    }

    fn scalar_net(theta: f64) -> Network {
        let cfg = NetworkConfig::new(1, 1, 1, Activation::Relu);
        Network::from_flat(&cfg, &[0.0, 0.0, 0.0, theta]).unwrap()
    }

    fn scalar_grad(net: &Network, g: f64) -> ParameterGradient {
        ParameterGradient::from_flat(net, &[0.0, 0.0, 0.0, g]).unwrap()
    }

    #[test]
    fn adam_first_step() {
        let mut net = scalar_net(0.5);
        let mut st = AdamState::new(4);
        {
            let g = scalar_grad(&net, 1.0);
            adam_step(&mut st, &mut net, &g, 1e-4)
        }
        .unwrap();
        let delta = net.to_flat()[3] - 0.5;
        assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-16);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = scalar_net(0.5);
        let before = net.to_flat();
        let mut st = AdamState::new(4);
        {
            let g = scalar_grad(&net, 0.0);
            adam_step(&mut st, &mut net, &g, 1e-2)
        }
        .unwrap();
        assert_eq!(net.to_flat(), before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_matches_reference() {
        let mut net = scalar_net(0.5);
        let mut st = AdamState::new(4);
        for _ in 0..2 {
            {
                let g = scalar_grad(&net, 1.0);
                adam_step(&mut st, &mut net, &g, 1e-3)
            }
            .unwrap();
        }
        // Independent scalar Adam.
        let (mut th, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((net.to_flat()[3] - th).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = scalar_net(0.5);
        let mut st = AdamState::new(4);
        let res = {
            let g = scalar_grad(&net, f64::NAN);
            adam_step(&mut st, &mut net, &g, 1e-3)
        };
        assert!(matches!(res, Err(Error::NonFiniteGradient { index: 3 })));
        assert_eq!(st.t, 0);
    }

    struct Flat;

    impl Lagrangian for Flat {
        fn id(&self) -> String {
            "W=1".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn order(&self) -> DerivativeOrder {
            DerivativeOrder::Gradient
        }
        fn lambda(&self) -> f64 {
            500.0
        }
        fn value(&self, _x: &[f64], _s: &[f64]) -> f64 {
            1.0
        }
        fn partials(&self, _x: &[f64], _s: &[f64], out: &mut [f64]) -> f64 {
            out.fill(0.0);
            1.0
        }
        fn hessian(&self, _x: &[f64], _s: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn constant_density_leaves_zero_network_unchanged() {
        let cfg = NetworkConfig::new(1, 2, 8, Activation::Relu);
        let zero = Network::from_flat(&cfg, &vec![0.0; cfg.param_count()]).unwrap();
        let tc = TrainConfig {
            history_stride: 1,
            ..TrainConfig::default_1d(50, 1)
        };
        let out = train_from(&Flat, &cfg, &FeatureMap::Identity { dim: 1 }, &tc, Some(zero.clone())).unwrap();
        assert_eq!(out.network.to_flat(), zero.to_flat());
        assert_eq!(out.history.len(), 50);
        assert!(out.history.iter().all(|r| r.loss == 1.0 && r.penalty == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let prob = VariationalProblem::new(ProblemKind::DoubleWell1D);
        let cfg = NetworkConfig::new(2, 2, 16, Activation::Relu);
        let fmap = FeatureMap::Fourier1D { i: 1 };
        let tc = TrainConfig::default_1d(200, 5);
        let a = train_problem(&prob, &cfg, &fmap, &tc).unwrap();
        let b = train_problem(&prob, &cfg, &fmap, &tc).unwrap();
        let bits = |n: &Network| n.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.network), bits(&b.network));
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoints.len(), 10);
        assert_eq!(a.checkpoints.last().unwrap().epoch, 200);
        assert!(a.lr_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn inconsistent_setup_is_rejected_with_all_reasons() {
        let prob = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(0.01);
        let cfg = NetworkConfig::new(3, 2, 16, Activation::Relu);
        let tc = TrainConfig {
            lr0: -1.0,
            ..TrainConfig::default_2d(10, 0)
        };
        match train_problem(&prob, &cfg, &FeatureMap::Identity { dim: 2 }, &tc) {
            Err(Error::InvalidSpec(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn convex_surrogate_fits() {
        let cfg = NetworkConfig::new(1, 3, 64, Activation::SmoothSqrt { rho: 0.1 });
        let tc = TrainConfig {
            lr0: 3e-3,
            ..TrainConfig::default_1d(20_000, 2)
        };
        let out = train(&ConvexSurrogate::default(), &cfg, &FeatureMap::Identity { dim: 1 }, &tc).unwrap();
        let tail = &out.history[out.history.len() - 100..];
        let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        assert!(mean < 1e-3, "final loss {mean}");
    }
}
