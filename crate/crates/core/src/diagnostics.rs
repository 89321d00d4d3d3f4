//! Measurements of a trained solution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{DerivativeOrder, JetTape};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::Network;
use crate::points::PointSet;
use crate::problems::{trapezoid_factors, trapezoid_weights, Lagrangian};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Jets on a uniform grid of `resolution` points per axis, including the
/// boundary. Points are ordered with `x` varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub dim: usize,
    pub resolution: usize,
    pub points: PointSet,
    pub u: Vec<f64>,
    /// `grad[i][p]` is `∂u/∂x_i` at point `p`.
    pub grad: Vec<Vec<f64>>,
    pub u_yy: Option<Vec<f64>>,
}

fn evaluate_points(net: &Network, fmap: &FeatureMap, points: &PointSet, order: DerivativeOrder) -> Result<JetTape> {
    JetTape::forward(net, fmap, points, order)
}

pub fn evaluate_grid(net: &Network, fmap: &FeatureMap, lag: &dyn Lagrangian, resolution: usize) -> Result<FieldGrid> {
    if resolution < 2 {
        return Err(Error::InvalidSpec(vec![format!(
            "grid resolution must be at least 2, got {resolution}"
        )]));
    }
    let dim = lag.dim();
    let order = lag.order().max(DerivativeOrder::Gradient);
    let points = PointSet::uniform_grid(dim, resolution);
    let tape = evaluate_points(net, fmap, &points, order)?;
    let n = points.len();
    Ok(FieldGrid {
        dim,
        resolution,
        u: (0..n).map(|p| tape.value(p)).collect(),
        grad: (0..dim).map(|i| (0..n).map(|p| tape.d_input(p, i)).collect()).collect(),
        u_yy: (order == DerivativeOrder::SecondY).then(|| (0..n).map(|p| tape.d2_yy(p)).collect()),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub count: usize,
    /// Sign of each classified run, in order.
    pub states: Vec<i8>,
    pub unclassified_fraction: f64,
    pub threshold: f64,
    pub samples: usize,
}

/// Counts sign changes between slope states.
///
/// Samples are first scaled so that `max |s| = 1`, then classified as `+1`
/// above `threshold`, `−1` below `−threshold`, and dropped otherwise.
/// Consecutive equal classes collapse into one run; the count is the
/// number of adjacent runs with opposite signs.
pub fn count_transitions(samples: &[f64], threshold: f64) -> Result<TransitionReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidSpec(vec![format!(
            "transition counting needs at least 2 samples, got {}",
            samples.len()
        )]));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidSpec(vec![format!(
            "threshold must lie in (0,1), got {threshold}"
        )]));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteValue("slope samples"));
    }
    let scale = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if scale == 0.0 {
        return Err(Error::AllUnclassified);
    }
    let mut states: Vec<i8> = Vec::new();
    let mut unclassified = 0usize;
    for s in samples {
        let v = s / scale;
        let class = if v > threshold {
            1
        } else if v < -threshold {
            -1
        } else {
            unclassified += 1;
            continue;
        };
        if states.last() != Some(&class) {
            states.push(class);
        }
    }
    if states.is_empty() {
        return Err(Error::AllUnclassified);
    }
    Ok(TransitionReport {
        count: states.len() - 1,
        states,
        unclassified_fraction: unclassified as f64 / samples.len() as f64,
        threshold,
        samples: samples.len(),
    })
}

/// The slope whose sign defines the phases: `u_x` on `[0,1]` in 1D, `u_y`
/// along the vertical line `x = line_x` in 2D. Returns sample positions
/// along the line and the slopes.
pub fn slope_profile(
    net: &Network,
    fmap: &FeatureMap,
    dim: usize,
    resolution: usize,
    line_x: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ts: Vec<f64> = (0..resolution).map(|k| k as f64 / (resolution - 1) as f64).collect();
    let points = match dim {
        1 => PointSet::from_scalars(&ts),
        2 => PointSet::from_flat(2, ts.iter().flat_map(|&t| [line_x, t]).collect())?,
        d => {
            return Err(Error::DimensionMismatch { expected: 2, got: d });
        }
    };
    let tape = evaluate_points(net, fmap, &points, DerivativeOrder::Gradient)?;
    let slopes = (0..resolution).map(|p| tape.d_input(p, dim - 1)).collect();
    Ok((ts, slopes))
}

/// Transition count of a trained field with the default slice (`x = 0.5`
/// in 2D).
pub fn transition_report(
    net: &Network,
    fmap: &FeatureMap,
    dim: usize,
    resolution: usize,
    threshold: f64,
) -> Result<TransitionReport> {
    let (_, slopes) = slope_profile(net, fmap, dim, resolution, 0.5)?;
    count_transitions(&slopes, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Trapezoid rule of `∫ W` on the grid.
    pub grid_energy: f64,
    /// Monte Carlo mean of `W` at uniform points, and its standard error.
    pub mc_energy: f64,
    pub mc_std_error: f64,
    pub mc_samples: usize,
    /// `λ · E_b[û²]` by the trapezoid rule along each edge.
    pub boundary_penalty: f64,
    pub resolution: usize,
}

impl EnergyReport {
    pub fn total(&self) -> f64 {
        self.grid_energy + self.boundary_penalty
    }
}

fn densities(lag: &dyn Lagrangian, net: &Network, fmap: &FeatureMap, points: &PointSet) -> Result<Vec<f64>> {
    let tape = evaluate_points(net, fmap, points, lag.order())?;
    let mut state = vec![0.0; lag.channels()];
    Ok(points
        .iter()
        .enumerate()
        .map(|(p, x)| {
            tape.state_into(p, &mut state);
            lag.value(x, &state)
        })
        .collect())
}

/// Trapezoid-rule interior energy on an `R`-point (per axis) grid.
pub fn grid_energy(lag: &dyn Lagrangian, net: &Network, fmap: &FeatureMap, resolution: usize) -> Result<f64> {
    let c = trapezoid_factors(resolution);
    let dim = lag.dim();
    let mut total = 0.0;
    // Row by row keeps the tape small for fine 2D grids.
    let rows = if dim == 1 { 1 } else { resolution };
    let h = 1.0 / (resolution - 1) as f64;
    for r in 0..rows {
        let pts = if dim == 1 {
            PointSet::uniform_grid(1, resolution)
        } else {
            let y = r as f64 * h;
            PointSet::from_flat(2, (0..resolution).flat_map(|i| [i as f64 * h, y]).collect())?
        };
        let cy = if dim == 1 { 1.0 } else { c[r] };
        let dens = densities(lag, net, fmap, &pts)?;
        total += cy * dens.iter().zip(&c).map(|(d, cx)| d * cx).sum::<f64>();
    }
    Ok(total / ((resolution - 1) as f64).powi(dim as i32))
}

/// `λ · E_b[û²]`: the two endpoints in 1D, equal-weight edges in 2D.
pub fn boundary_penalty(lag: &dyn Lagrangian, net: &Network, fmap: &FeatureMap, resolution: usize) -> Result<f64> {
    let lambda = lag.lambda();
    match lag.dim() {
        1 => {
            let tape = evaluate_points(net, fmap, &PointSet::from_scalars(&[0.0, 1.0]), DerivativeOrder::Value)?;
            let (a, b) = (tape.value(0), tape.value(1));
            Ok(lambda * (a * a + b * b) / 2.0)
        }
        2 => {
            let w = trapezoid_weights(resolution);
            let h = 1.0 / (resolution - 1) as f64;
            let mut pts = PointSet::with_capacity(2, 4 * resolution);
            for k in 0..resolution {
                let t = k as f64 * h;
                for p in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                    pts.push(&p);
                }
            }
            let tape = evaluate_points(net, fmap, &pts, DerivativeOrder::Value)?;
            let sum: f64 = (0..pts.len()).map(|p| w[p / 4] * tape.value(p).powi(2)).sum();
            Ok(lambda * sum / 4.0)
        }
        d => Err(Error::DimensionMismatch { expected: 2, got: d }),
    }
}

/// Monte Carlo mean of `W` and its standard error from `samples` uniform
/// points drawn with `seed`.
pub fn mc_energy(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::EmptyBatch("monte carlo"));
    }
    const CHUNK: usize = 8192;
    let dim = lag.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    let mut left = samples;
    while left > 0 {
        let n = left.min(CHUNK);
        let pts = PointSet::from_flat(dim, (0..n * dim).map(|_| rng.random::<f64>()).collect())?;
        for d in densities(lag, net, fmap, &pts)? {
            sum += d;
            sumsq += d * d;
        }
        left -= n;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

pub fn energy_report(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    resolution: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<EnergyReport> {
    if resolution < 2 {
        return Err(Error::InvalidSpec(vec![format!(
            "grid resolution must be at least 2, got {resolution}"
        )]));
    }
    let (mc_energy, mc_std_error) = mc_energy(lag, net, fmap, mc_samples, seed)?;
    Ok(EnergyReport {
        grid_energy: grid_energy(lag, net, fmap, resolution)?,
        mc_energy,
        mc_std_error,
        mc_samples,
        boundary_penalty: boundary_penalty(lag, net, fmap, resolution)?,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer, NetworkConfig};
    use crate::problems::{AnalyticField, ProblemKind, Sawtooth1D, VariationalProblem};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    fn dw() -> VariationalProblem {
        VariationalProblem::new(ProblemKind::DoubleWell1D)
    }

    fn zero_net(dim: usize) -> Network {
        let cfg = NetworkConfig::new(dim, 2, 8, Activation::SmoothSqrt { rho: 0.1 });
        Network::from_flat(&cfg, &vec![0.0; cfg.param_count()]).unwrap()
    }

    /// `û = relu(x) − 2·relu(x − ½)`, the hat `min(x, 1−x)` on `[0,1]`.
    fn hat_net() -> Network {
        let hidden = Layer {
            weights: Array2::from_shape_vec((2, 1), vec![1.0, 1.0]).unwrap(),
            bias: Array1::from(vec![0.0, -0.5]),
        };
        let out = Layer {
            weights: Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap(),
            bias: Array1::zeros(1),
        };
        Network::from_layers(Activation::Relu, vec![hidden, out]).unwrap()
    }

    fn sawtooth_slopes(teeth: usize, n: usize) -> Vec<f64> {
        let f = Sawtooth1D { teeth };
        (0..n)
            .map(|k| f.eval(&[(k as f64 + 0.5) / n as f64]).d_input[0])
            .collect()
    }

    #[test]
    fn grid_examples() {
        let g = evaluate_grid(&zero_net(1), &FeatureMap::Identity { dim: 1 }, &dw(), 2).unwrap();
        assert_eq!(g.points.as_flat(), &[0.0, 1.0]);
        let g = evaluate_grid(&hat_net(), &FeatureMap::Identity { dim: 1 }, &dw(), 11).unwrap();
        for (x, s) in g.points.iter().zip(&g.grad[0]) {
            if x[0] != 0.5 && x[0] != 0.0 {
                assert_eq!(s.abs(), 1.0, "x={}", x[0]);
            }
        }
        let prob = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(0.01);
        let g = evaluate_grid(&zero_net(2), &FeatureMap::Identity { dim: 2 }, &prob, 101).unwrap();
        assert_eq!(g.u.len(), 101 * 101);
        assert!(g
            .u
            .iter()
            .chain(g.grad.iter().flatten())
            .chain(g.u_yy.as_ref().unwrap())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn sawtooth_transition_counts() {
        for teeth in [1, 2, 4, 8] {
            let r = count_transitions(&sawtooth_slopes(teeth, 1024), 0.5).unwrap();
            assert_eq!(r.count, 2 * teeth - 1);
            assert_eq!(r.states.first(), Some(&1));
            assert_eq!(r.states.last(), Some(&-1));
        }
    }

    #[test]
    fn trivial_counts() {
        assert_eq!(count_transitions(&[1.0; 50], 0.5).unwrap().count, 0);
        let alt: Vec<f64> = (0..31).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(count_transitions(&alt, 0.5).unwrap().count, 30);
        assert!(matches!(
            count_transitions(&[0.0, 0.0], 0.5),
            Err(Error::AllUnclassified)
        ));
        assert!(count_transitions(&[1.0], 0.5).is_err());
    }

    #[test]
    fn dead_zone_is_skipped() {
        let r = count_transitions(&[1.0, 0.1, -0.2, 0.9, -1.0, 0.0], 0.5).unwrap();
        assert_eq!(r.count, 1);
        assert!((r.unclassified_fraction - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn counting_ignores_scale_and_sign(
            samples in proptest::collection::vec(-3.0f64..3.0, 2..200),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(samples.iter().any(|s| s.abs() > 1e-6));
            let base = count_transitions(&samples, 0.5);
            let scaled: Vec<f64> = samples.iter().map(|s| s * scale).collect();
            let flipped: Vec<f64> = samples.iter().map(|s| -s).collect();
            let a = base.map(|r| r.count).ok();
            prop_assert_eq!(a, count_transitions(&scaled, 0.5).map(|r| r.count).ok());
            prop_assert_eq!(a, count_transitions(&flipped, 0.5).map(|r| r.count).ok());
        }
    }

    #[test]
    fn energy_examples() {
        let fmap = FeatureMap::Identity { dim: 1 };
        let r = energy_report(&dw(), &zero_net(1), &fmap, 101, 1000, 1).unwrap();
        assert_eq!(r.grid_energy, 1.0);
        assert_eq!(r.boundary_penalty, 0.0);
        let r = energy_report(&dw(), &hat_net(), &fmap, 101, 1000, 1).unwrap();
        // The kink of the first unit sits on x = 0, where the subgradient
        // gives u_x = 0 and W = 1 under the endpoint weight 1/(2·100).
        assert!((r.grid_energy - 0.005).abs() < 1e-12, "{}", r.grid_energy);
        assert!(r.boundary_penalty < 1e-20);
    }

    #[test]
    fn grid_energy_converges_monotonically() {
        // Smooth field: SmoothSqrt net without a feature map.
        let cfg = NetworkConfig::new(1, 2, 16, Activation::SmoothSqrt { rho: 0.5 });
        let net = Network::init(&cfg, 6).unwrap();
        let fmap = FeatureMap::Identity { dim: 1 };
        let lower = VariationalProblem::new(ProblemKind::DoubleWellLower1D);
        let e: Vec<f64> = [64, 128, 256, 512]
            .iter()
            .map(|&r| grid_energy(&lower, &net, &fmap, r).unwrap())
            .collect();
        let diffs: Vec<f64> = e.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
        assert!(diffs.windows(2).all(|d| d[1] < d[0]), "{diffs:?}");
    }

    #[test]
    fn mc_agrees_with_grid() {
        let cfg = NetworkConfig::new(2, 2, 16, Activation::SmoothSqrt { rho: 0.1 });
        let net = Network::init(&cfg, 10).unwrap();
        let fmap = FeatureMap::Fourier1D { i: 1 };
        let r = energy_report(&dw(), &net, &fmap, 4001, 100_000, 3).unwrap();
        assert!((r.grid_energy - r.mc_energy).abs() < 3.0 * r.mc_std_error, "{r:?}");
    }
}
