//! Energy densities, the penalized Monte Carlo loss and quadrature oracles.
//!
//! A density `W` sees the jet state `[u, ∇u…, u_yy?]` at a point. Every
//! problem here has the homogeneous Dirichlet condition `u = 0` on `∂D`,
//! imposed softly through `λ · E_b[û²]` with `E_b` the uniform probability
//! measure on the boundary.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{DerivativeOrder, JetTape, JetValue, ParameterGradient};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::Network;
use crate::points::PointSet;

/// Penalty weight used throughout unless overridden.
pub const DEFAULT_LAMBDA: f64 = 500.0;
/// The two nonzero regularization strengths studied for the 2D problem.
pub const EPS_SMALL: f64 = 0.1 / 16.0;
pub const EPS_LARGE: f64 = 0.1 / 4.0;

/// An energy density `W(x, state)` together with its penalty weight.
pub trait Lagrangian: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn order(&self) -> DerivativeOrder;
    fn lambda(&self) -> f64;

    fn channels(&self) -> usize {
        self.order().channels(self.dim())
    }

    fn value(&self, x: &[f64], state: &[f64]) -> f64;

    /// Writes `∂W/∂state` into `out` and returns `W`.
    fn partials(&self, x: &[f64], state: &[f64], out: &mut [f64]) -> f64;

    /// Writes `∂²W/∂state²` row-major into `out` (`channels²` entries).
    fn hessian(&self, x: &[f64], state: &[f64], out: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemKind {
    /// `(u_x² − 1)²` on `[0,1]`.
    #[serde(rename = "DW1D")]
    DoubleWell1D,
    /// `(u_x² − 1)² + u²` on `[0,1]`.
    #[serde(rename = "DW1D_Lower")]
    DoubleWellLower1D,
    /// `u_x² + (u_y² − 1)²` on `[0,1]²`.
    #[serde(rename = "Twin2D")]
    Twin2D,
    /// `u_x² + (u_y² − 1)² + ε² u_yy²` on `[0,1]²`.
    #[serde(rename = "Twin2D_Reg")]
    Twin2DReg,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::DoubleWell1D,
        ProblemKind::DoubleWellLower1D,
        ProblemKind::Twin2D,
        ProblemKind::Twin2DReg,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ProblemKind::DoubleWell1D => "DW1D",
            ProblemKind::DoubleWellLower1D => "DW1D_Lower",
            ProblemKind::Twin2D => "Twin2D",
            ProblemKind::Twin2DReg => "Twin2D_Reg",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ProblemKind::DoubleWell1D | ProblemKind::DoubleWellLower1D => 1,
            ProblemKind::Twin2D | ProblemKind::Twin2DReg => 2,
        }
    }

    pub fn order(self) -> DerivativeOrder {
        match self {
            ProblemKind::Twin2DReg => DerivativeOrder::SecondY,
            _ => DerivativeOrder::Gradient,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown problem {s:?}; expected one of DW1D, DW1D_Lower, Twin2D, Twin2D_Reg"))
    }
}

/// Partial derivatives of `W` split by argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LagrangianPartials {
    pub du: f64,
    pub dgrad: Vec<f64>,
    pub du_yy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalProblem {
    pub kind: ProblemKind,
    /// Only read by [`ProblemKind::Twin2DReg`].
    pub eps: f64,
    pub lambda: f64,
}

impl VariationalProblem {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            eps: 0.0,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be positive and finite, got {}", self.lambda));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            v.push(format!("eps must be nonnegative and finite, got {}", self.eps));
        }
        if self.eps != 0.0 && self.kind != ProblemKind::Twin2DReg {
            v.push(format!(
                "eps is only meaningful for Twin2D_Reg, got eps={} with {}",
                self.eps, self.kind
            ));
        }
        v
    }

    fn state_of(&self, u: f64, grad: &[f64], u_yy: Option<f64>) -> Result<Vec<f64>> {
        let d = self.kind.dim();
        if grad.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: grad.len(),
            });
        }
        let mut state = Vec::with_capacity(d + 2);
        state.push(u);
        state.extend_from_slice(grad);
        if self.kind.order() == DerivativeOrder::SecondY {
            state.push(u_yy.ok_or(Error::MissingSecondDerivative)?);
        }
        Ok(state)
    }

    /// `W(x, u, ∇u[, u_yy])`.
    pub fn lagrangian(&self, x: &[f64], u: f64, grad: &[f64], u_yy: Option<f64>) -> Result<f64> {
        let state = self.state_of(u, grad, u_yy)?;
        Ok(self.value(x, &state))
    }

    pub fn lagrangian_partials(
        &self,
        x: &[f64],
        u: f64,
        grad: &[f64],
        u_yy: Option<f64>,
    ) -> Result<LagrangianPartials> {
        let state = self.state_of(u, grad, u_yy)?;
        let mut out = vec![0.0; state.len()];
        self.partials(x, &state, &mut out);
        let d = self.kind.dim();
        Ok(LagrangianPartials {
            du: out[0],
            dgrad: out[1..=d].to_vec(),
            du_yy: out.get(d + 1).copied(),
        })
    }
}

#[inline]
fn well(s: f64) -> f64 {
    let t = s * s - 1.0;
    t * t
}

impl Lagrangian for VariationalProblem {
    fn id(&self) -> String {
        self.kind.id().to_string()
    }

    fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn order(&self) -> DerivativeOrder {
        self.kind.order()
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn value(&self, _x: &[f64], s: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::DoubleWell1D => well(s[1]),
            ProblemKind::DoubleWellLower1D => well(s[1]) + s[0] * s[0],
            ProblemKind::Twin2D => s[1] * s[1] + well(s[2]),
            ProblemKind::Twin2DReg => {
                let e = self.eps * s[3];
                s[1] * s[1] + well(s[2]) + e * e
            }
        }
    }

    fn partials(&self, x: &[f64], s: &[f64], out: &mut [f64]) -> f64 {
        out.fill(0.0);
        match self.kind {
            ProblemKind::DoubleWell1D => {
                out[1] = 4.0 * s[1] * (s[1] * s[1] - 1.0);
            }
            ProblemKind::DoubleWellLower1D => {
                out[0] = 2.0 * s[0];
                out[1] = 4.0 * s[1] * (s[1] * s[1] - 1.0);
            }
            ProblemKind::Twin2D | ProblemKind::Twin2DReg => {
                out[1] = 2.0 * s[1];
                out[2] = 4.0 * s[2] * (s[2] * s[2] - 1.0);
                if self.kind == ProblemKind::Twin2DReg {
                    out[3] = 2.0 * self.eps * self.eps * s[3];
                }
            }
        }
        self.value(x, s)
    }

    fn hessian(&self, _x: &[f64], s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let c = self.channels();
        match self.kind {
            ProblemKind::DoubleWell1D => {
                out[c + 1] = 12.0 * s[1] * s[1] - 4.0;
            }
            ProblemKind::DoubleWellLower1D => {
                out[0] = 2.0;
                out[c + 1] = 12.0 * s[1] * s[1] - 4.0;
            }
            ProblemKind::Twin2D | ProblemKind::Twin2DReg => {
                out[c + 1] = 2.0;
                out[2 * c + 2] = 12.0 * s[2] * s[2] - 4.0;
                if self.kind == ProblemKind::Twin2DReg {
                    out[3 * c + 3] = 2.0 * self.eps * self.eps;
                }
            }
        }
    }
}

/// `W = (u − sin 2πx)²` on `[0,1]`: strictly convex in `u`, used as the
/// sanity case for training and for the linearized NTK dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexSurrogate {
    pub lambda: f64,
}

impl Default for ConvexSurrogate {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

impl ConvexSurrogate {
    pub fn target(x: f64) -> f64 {
        (2.0 * PI * x).sin()
    }
}

impl Lagrangian for ConvexSurrogate {
    fn id(&self) -> String {
        "ConvexSurrogate".to_string()
    }

    fn dim(&self) -> usize {
        1
    }

    fn order(&self) -> DerivativeOrder {
        DerivativeOrder::Gradient
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn value(&self, x: &[f64], s: &[f64]) -> f64 {
        let r = s[0] - Self::target(x[0]);
        r * r
    }

    fn partials(&self, x: &[f64], s: &[f64], out: &mut [f64]) -> f64 {
        let r = s[0] - Self::target(x[0]);
        out[0] = 2.0 * r;
        out[1] = 0.0;
        r * r
    }

    fn hessian(&self, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
    }
}

/// Interior energy, boundary penalty and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub energy: f64,
    pub penalty: f64,
    pub total: f64,
}

fn check_inputs(lag: &dyn Lagrangian, fmap: &FeatureMap, interior: &PointSet, boundary: &PointSet) -> Result<()> {
    if fmap.input_dim() != lag.dim() {
        return Err(Error::DimensionMismatch {
            expected: lag.dim(),
            got: fmap.input_dim(),
        });
    }
    if interior.is_empty() {
        return Err(Error::EmptyBatch("interior"));
    }
    if boundary.is_empty() {
        return Err(Error::EmptyBatch("boundary"));
    }
    Ok(())
}

/// `mean_X W + λ · mean_{X_b} û²`, the Monte Carlo estimate of the penalized
/// energy.
pub fn penalized_loss_estimate(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    interior: &PointSet,
    boundary: &PointSet,
) -> Result<LossParts> {
    check_inputs(lag, fmap, interior, boundary)?;
    let tape = JetTape::forward(net, fmap, interior, lag.order())?;
    let mut state = vec![0.0; lag.channels()];
    let mut energy = 0.0;
    for (p, x) in interior.iter().enumerate() {
        tape.state_into(p, &mut state);
        energy += lag.value(x, &state);
    }
    energy /= interior.len() as f64;
    let btape = JetTape::forward(net, fmap, boundary, DerivativeOrder::Value)?;
    let penalty = lag.lambda() * btape.outputs().iter().map(|u| u * u).sum::<f64>() / boundary.len() as f64;
    Ok(LossParts {
        energy,
        penalty,
        total: energy + penalty,
    })
}

/// [`penalized_loss_estimate`] together with its exact parameter gradient,
/// written into `grad` (overwritten, not accumulated).
pub fn penalized_loss_gradient(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    interior: &PointSet,
    boundary: &PointSet,
    grad: &mut ParameterGradient,
) -> Result<LossParts> {
    check_inputs(lag, fmap, interior, boundary)?;
    let b = interior.len();
    let channels = lag.channels();
    let tape = JetTape::forward(net, fmap, interior, lag.order())?;
    let mut state = vec![0.0; channels];
    let mut partials = vec![0.0; channels];
    let mut adjoint = vec![0.0; channels * b];
    let scale = 1.0 / b as f64;
    let mut energy = 0.0;
    for (p, x) in interior.iter().enumerate() {
        tape.state_into(p, &mut state);
        energy += lag.partials(x, &state, &mut partials);
        for c in 0..channels {
            adjoint[c * b + p] = partials[c] * scale;
        }
    }
    energy *= scale;

    let nb = boundary.len() as f64;
    let btape = JetTape::forward(net, fmap, boundary, DerivativeOrder::Value)?;
    let lambda = lag.lambda();
    let penalty = lambda * btape.outputs().iter().map(|u| u * u).sum::<f64>() / nb;
    let badjoint: Vec<f64> = btape.outputs().iter().map(|u| 2.0 * lambda * u / nb).collect();

    grad.fill_zero();
    tape.accumulate_gradient(net, &adjoint, grad)?;
    btape.accumulate_gradient(net, &badjoint, grad)?;
    let total = energy + penalty;
    if !total.is_finite() {
        return Err(Error::NonFiniteValue("loss"));
    }
    Ok(LossParts { energy, penalty, total })
}

/// `d/dx [û_x (û_x² − 1)] = (3û_x² − 1) û_xx`, the strong-form residual of
/// the 1D double well.
pub fn euler_lagrange_residual_dw1d(net: &Network, fmap: &FeatureMap, x: f64) -> Result<f64> {
    let jet = crate::engine::evaluate_jet(net, fmap, &[x], DerivativeOrder::SecondY)?;
    let ux = jet.d_input[0];
    Ok((3.0 * ux * ux - 1.0) * jet.d2_yy.expect("order 2 jet carries u_yy"))
}

/// Closed-form trial function used by quadrature oracles.
pub trait AnalyticField {
    fn dim(&self) -> usize;
    /// Value, gradient and second derivative in the last coordinate.
    fn eval(&self, x: &[f64]) -> JetValue;
}

#[derive(Clone, Copy, Debug)]
pub struct ZeroField {
    pub dim: usize,
}

impl AnalyticField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[f64]) -> JetValue {
        JetValue {
            value: 0.0,
            d_input: vec![0.0; self.dim],
            d2_yy: Some(0.0),
        }
    }
}

/// Triangular wave in `t ∈ [0,1]` with `teeth` teeth of amplitude
/// `1/(2·teeth)`, vanishing at both ends; slope `+1` then `−1` per tooth.
fn sawtooth(t: f64, teeth: usize) -> (f64, f64) {
    let k = teeth as f64;
    let s = (k * t).fract();
    if s < 0.5 {
        (s / k, 1.0)
    } else {
        ((1.0 - s) / k, -1.0)
    }
}

/// 1D sawtooth with `teeth` teeth; `teeth = 1` is the hat `min(x, 1−x)`.
#[derive(Clone, Copy, Debug)]
pub struct Sawtooth1D {
    pub teeth: usize,
}

impl Sawtooth1D {
    pub fn hat() -> Self {
        Self { teeth: 1 }
    }
}

impl AnalyticField for Sawtooth1D {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64]) -> JetValue {
        let (value, slope) = sawtooth(x[0], self.teeth);
        JetValue {
            value,
            d_input: vec![slope],
            d2_yy: Some(0.0),
        }
    }
}

/// `u(x, y) = sawtooth(y)`: `u_x = 0`, `u_y = ±1`.
#[derive(Clone, Copy, Debug)]
pub struct SawtoothY {
    pub teeth: usize,
}

impl AnalyticField for SawtoothY {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64]) -> JetValue {
        let (value, slope) = sawtooth(x[1], self.teeth);
        JetValue {
            value,
            d_input: vec![0.0, slope],
            d2_yy: Some(0.0),
        }
    }
}

/// Composite trapezoid weights on `n` uniform nodes of `[0,1]`.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    assert!(n >= 2, "trapezoid rule needs two nodes");
    let h = 1.0 / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] = h / 2.0;
    w[n - 1] = h / 2.0;
    w
}

/// Trapezoid weights scaled by `n − 1`: one inside, one half at the ends.
/// Summing with these and dividing once keeps constant densities exact.
pub fn trapezoid_factors(n: usize) -> Vec<f64> {
    assert!(n >= 2, "trapezoid rule needs two nodes");
    let mut c = vec![1.0; n];
    c[0] = 0.5;
    c[n - 1] = 0.5;
    c
}

/// `∫_D W(x, u, ∇u) dx` for a closed-form field by the tensor trapezoid rule
/// with `n` nodes per axis.
pub fn oracle_energy(lag: &dyn Lagrangian, field: &dyn AnalyticField, n: usize) -> f64 {
    assert_eq!(lag.dim(), field.dim(), "field and problem dimensions differ");
    let c = trapezoid_factors(n);
    let grid = PointSet::uniform_grid(lag.dim(), n);
    let mut state = vec![0.0; lag.channels()];
    let mut total = 0.0;
    for (idx, x) in grid.iter().enumerate() {
        let jet = field.eval(x);
        state[0] = jet.value;
        state[1..=lag.dim()].copy_from_slice(&jet.d_input);
        if lag.order() == DerivativeOrder::SecondY {
            state[lag.dim() + 1] = jet.d2_yy.unwrap_or(0.0);
        }
        let weight = if lag.dim() == 1 {
            c[idx]
        } else {
            c[idx % n] * c[idx / n]
        };
        total += weight * lag.value(x, &state);
    }
    total / ((n - 1) as f64).powi(lag.dim() as i32)
}

/// `λ · E_b[u²]` for a closed-form field under the uniform boundary measure
/// (both endpoints in 1D; equal weight per edge in 2D, trapezoid along each).
pub fn oracle_boundary_penalty(lambda: f64, field: &dyn AnalyticField, n: usize) -> f64 {
    match field.dim() {
        1 => {
            let a = field.eval(&[0.0]).value;
            let b = field.eval(&[1.0]).value;
            lambda * (a * a + b * b) / 2.0
        }
        2 => {
            let w = trapezoid_weights(n);
            let h = 1.0 / (n - 1) as f64;
            let mut sum = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let t = k as f64 * h;
                for p in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                    let u = field.eval(&p).value;
                    sum += wk * u * u;
                }
            }
            lambda * sum / 4.0
        }
        d => panic!("unsupported dimension {d}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer, NetworkConfig};
    use ndarray::{Array1, Array2};

    fn dw() -> VariationalProblem {
        VariationalProblem::new(ProblemKind::DoubleWell1D)
    }

    #[test]
    fn lagrangian_examples() {
        assert_eq!(dw().lagrangian(&[0.2], 0.0, &[1.0], None).unwrap(), 0.0);
        assert_eq!(dw().lagrangian(&[0.2], 0.0, &[0.0], None).unwrap(), 1.0);
        let reg = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(EPS_LARGE);
        let w = reg.lagrangian(&[0.5, 0.5], 0.0, &[0.0, 1.0], Some(4.0)).unwrap();
        assert!((w - 0.01).abs() < 1e-15);
    }

    #[test]
    fn missing_second_derivative() {
        let reg = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(EPS_SMALL);
        assert!(matches!(
            reg.lagrangian(&[0.5, 0.5], 0.0, &[0.0, 1.0], None),
            Err(Error::MissingSecondDerivative)
        ));
    }

    #[test]
    fn partial_examples() {
        let p = dw().lagrangian_partials(&[0.1], 0.0, &[1.0], None).unwrap();
        assert_eq!(p.dgrad, vec![0.0]);
        let lower = VariationalProblem::new(ProblemKind::DoubleWellLower1D);
        let p = lower.lagrangian_partials(&[0.1], 0.5, &[0.3], None).unwrap();
        assert_eq!(p.du, 1.0);
        assert_eq!(p.du_yy, None);
    }

    fn fd_check(lag: &dyn Lagrangian, x: &[f64], state: &[f64]) {
        let c = lag.channels();
        let mut p = vec![0.0; c];
        lag.partials(x, state, &mut p);
        let mut hess = vec![0.0; c * c];
        lag.hessian(x, state, &mut hess);
        let h = 1e-6;
        for k in 0..c {
            let mut sp = state.to_vec();
            let mut sm = state.to_vec();
            sp[k] += h;
            sm[k] -= h;
            let fd = (lag.value(x, &sp) - lag.value(x, &sm)) / (2.0 * h);
            assert!((fd - p[k]).abs() < 1e-7, "{} partial {k}: {fd} vs {}", lag.id(), p[k]);
            let mut gp = vec![0.0; c];
            let mut gm = vec![0.0; c];
            lag.partials(x, &sp, &mut gp);
            lag.partials(x, &sm, &mut gm);
            for r in 0..c {
                let fd = (gp[r] - gm[r]) / (2.0 * h);
                assert!((fd - hess[r * c + k]).abs() < 1e-6, "{} hessian ({r},{k})", lag.id());
            }
        }
    }

    #[test]
    fn partials_and_hessians_match_differences() {
        fd_check(&dw(), &[0.3], &[0.2, 0.7]);
        fd_check(
            &VariationalProblem::new(ProblemKind::DoubleWellLower1D),
            &[0.3],
            &[0.2, -1.3],
        );
        fd_check(
            &VariationalProblem::new(ProblemKind::Twin2D),
            &[0.3, 0.4],
            &[0.1, 0.3, 0.8],
        );
        fd_check(
            &VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(EPS_LARGE),
            &[0.3, 0.4],
            &[0.1, 0.3, 0.8, -2.5],
        );
        fd_check(&ConvexSurrogate::default(), &[0.3], &[0.4, 1.1]);
    }

    #[test]
    fn hessian_examples() {
        let mut h = [0.0; 4];
        dw().hessian(&[0.0], &[0.0, 1.0], &mut h);
        assert_eq!(h, [0.0, 0.0, 0.0, 8.0]);
        dw().hessian(&[0.0], &[0.0, 0.0], &mut h);
        assert_eq!(h, [0.0, 0.0, 0.0, -4.0]);
        VariationalProblem::new(ProblemKind::DoubleWellLower1D).hessian(&[0.0], &[3.0, 0.5], &mut h);
        assert_eq!(h[0], 2.0);
    }

    #[test]
    fn problem_ids_round_trip() {
        for k in ProblemKind::ALL {
            assert_eq!(k.id().parse::<ProblemKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.id()));
        }
        assert!("DW3D".parse::<ProblemKind>().is_err());
    }

    fn zero_net(dim: usize) -> Network {
        let cfg = NetworkConfig::new(dim, 2, 8, Activation::SmoothSqrt { rho: 0.1 });
        let mut net = Network::init(&cfg, 0).unwrap();
        let n = net.param_count();
        net.set_flat(&vec![0.0; n]).unwrap();
        net
    }

    #[test]
    fn zero_network_loss_is_one() {
        let net = zero_net(1);
        let fmap = FeatureMap::Identity { dim: 1 };
        let loss = penalized_loss_estimate(
            &dw(),
            &net,
            &fmap,
            &PointSet::from_scalars(&[0.1, 0.5, 0.9]),
            &PointSet::from_scalars(&[0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(loss.total, 1.0);
        assert_eq!(loss.penalty, 0.0);
    }

    #[test]
    fn boundary_term_arithmetic() {
        // û ≡ 0.1 from a lone output bias.
        let layers = vec![Layer {
            weights: Array2::zeros((1, 1)),
            bias: Array1::from_elem(1, 0.1),
        }];
        let net = Network::from_layers(Activation::Relu, layers).unwrap();
        let loss = penalized_loss_estimate(
            &dw(),
            &net,
            &FeatureMap::Identity { dim: 1 },
            &PointSet::from_scalars(&[0.5]),
            &PointSet::from_scalars(&[0.0, 1.0]),
        )
        .unwrap();
        assert!((loss.penalty - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let net = zero_net(1);
        let fmap = FeatureMap::Identity { dim: 1 };
        let res = penalized_loss_estimate(&dw(), &net, &fmap, &PointSet::new(1), &PointSet::from_scalars(&[0.0]));
        assert!(matches!(res, Err(Error::EmptyBatch("interior"))));
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let prob = VariationalProblem::new(ProblemKind::Twin2DReg).with_eps(EPS_LARGE);
        let cfg = NetworkConfig::new(6, 2, 10, Activation::SmoothSqrt { rho: 0.1 });
        let net = Network::init(&cfg, 8).unwrap();
        let fmap = FeatureMap::Fourier2DPlusIdentity { i: 1 };
        let interior = PointSet::from_flat(2, vec![0.2, 0.3, 0.7, 0.6, 0.5, 0.9]).unwrap();
        let boundary = PointSet::from_flat(2, vec![0.0, 0.4, 0.3, 1.0]).unwrap();
        let mut grad = ParameterGradient::zeros_like(&net);
        penalized_loss_gradient(&prob, &net, &fmap, &interior, &boundary, &mut grad).unwrap();
        let g = grad.to_flat();
        let theta = net.to_flat();
        let h = 1e-6;
        for k in (0..theta.len()).step_by(7) {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let np = Network::from_flat(&cfg, &tp).unwrap();
            let nm = Network::from_flat(&cfg, &tm).unwrap();
            let lp = penalized_loss_estimate(&prob, &np, &fmap, &interior, &boundary)
                .unwrap()
                .total;
            let lm = penalized_loss_estimate(&prob, &nm, &fmap, &interior, &boundary)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0),
                "k={k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn oracle_energies() {
        assert!(oracle_energy(&dw(), &Sawtooth1D::hat(), 1001) < 1e-12);
        assert_eq!(oracle_energy(&dw(), &ZeroField { dim: 1 }, 101), 1.0);
        let lower = VariationalProblem::new(ProblemKind::DoubleWellLower1D);
        let e = oracle_energy(&lower, &Sawtooth1D { teeth: 4 }, 8001);
        assert!((e - 1.0 / 192.0).abs() < 1e-7, "{e}");
    }

    #[test]
    fn hat_energy_vanishes_at_every_resolution() {
        for n in [2, 3, 10, 64, 257, 1000] {
            assert!(oracle_energy(&dw(), &Sawtooth1D::hat(), n) < 1e-12);
        }
    }

    #[test]
    fn twin_fields_cannot_satisfy_both_terms() {
        let prob = VariationalProblem::new(ProblemKind::Twin2D);
        for teeth in [1, 2, 4, 8] {
            let f = SawtoothY { teeth };
            assert!(oracle_energy(&prob, &f, 201) < 1e-10);
            assert!(oracle_boundary_penalty(prob.lambda, &f, 201) > 0.0);
        }
    }

    #[test]
    fn trivial_solution_solves_strong_form() {
        let net = zero_net(1);
        let fmap = FeatureMap::Identity { dim: 1 };
        for k in 0..=10 {
            let r = euler_lagrange_residual_dw1d(&net, &fmap, k as f64 / 10.0).unwrap();
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn residual_matches_difference_of_flux() {
        let cfg = NetworkConfig::new(1, 2, 12, Activation::SmoothSqrt { rho: 0.1 });
        let net = Network::init(&cfg, 3).unwrap();
        let fmap = FeatureMap::Identity { dim: 1 };
        let flux = |x: f64| {
            let ux = crate::engine::evaluate_jet(&net, &fmap, &[x], DerivativeOrder::Gradient)
                .unwrap()
                .d_input[0];
            ux * (ux * ux - 1.0)
        };
        let x = 0.25;
        let h = 1e-5;
        let fd = (flux(x + h) - flux(x - h)) / (2.0 * h);
        let r = euler_lagrange_residual_dw1d(&net, &fmap, x).unwrap();
        assert!((fd - r).abs() < 1e-6 * r.abs().max(1.0));
    }

    #[test]
    fn residual_of_parabola() {
        // u = x(1−x): u_x = 1−2x, u_xx = −2.
        let x: f64 = 0.25;
        let flux = |x: f64| {
            let ux = 1.0 - 2.0 * x;
            ux * (ux * ux - 1.0)
        };
        let ux = 1.0 - 2.0 * x;
        let analytic = (3.0 * ux * ux - 1.0) * -2.0;
        let fd = (flux(x + 1e-5) - flux(x - 1e-5)) / 2e-5;
        assert!((analytic - fd).abs() < 1e-8);
    }

    #[test]
    fn relu_residual_is_unsupported() {
        let cfg = NetworkConfig::new(1, 1, 4, Activation::Relu);
        let net = Network::init(&cfg, 0).unwrap();
        assert!(matches!(
            euler_lagrange_residual_dw1d(&net, &FeatureMap::Identity { dim: 1 }, 0.5),
            Err(Error::OrderUnsupported { .. })
        ));
    }
}
