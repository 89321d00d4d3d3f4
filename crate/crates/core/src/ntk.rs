//! Empirical neural tangent kernel of the penalized energy.
//!
//! For a problem with jet state `U = [û, ∇û…, û_yy?]` the kernel between
//! two points is the `C × C` block `K(x_m, x_n) = ∇_θU_m (∇_θU_n)ᵀ`. Blocks
//! over a point set `X` form the Gram matrix `M_X` (point-major: row
//! `m·C + c` is channel `c` at point `m`). Under gradient flow on
//! `I_X = mean W` with rate `η`, the stacked state gradient `g = ∇_U W̄_X`
//! evolves as `ġ = −(η/|X|) D_X M_X g`, where `D_X` is block diagonal with
//! the Hessians of `W` in the state.
//!
//! `D_X M_X` is not symmetric, but with `D_X` symmetric and `M_X` positive
//! semidefinite it is similar on its range to `S = M^{1/2} D M^{1/2}`, so
//! its spectrum is real and is computed from the symmetric matrix `S`.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::engine::{state_jacobian, DerivativeOrder, JetTape, ParameterGradient};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::{Network, NetworkConfig};
use crate::points::PointSet;
use crate::problems::Lagrangian;

/// Relative size below which an imaginary part from the general solver is
/// treated as rounding.
pub const IMAG_TOLERANCE: f64 = 1e-8;

/// One `C × C` kernel block, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkBlock {
    pub channels: usize,
    pub entries: Vec<f64>,
}

impl NtkBlock {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a * self.channels + b]
    }

    pub fn transpose(&self) -> Self {
        let c = self.channels;
        let mut entries = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                entries[b * c + a] = self.entries[a * c + b];
            }
        }
        Self { channels: c, entries }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn block_from_rows(rm: &[Vec<f64>], rn: &[Vec<f64>]) -> NtkBlock {
    let c = rm.len();
    let mut entries = Vec::with_capacity(c * c);
    for a in rm {
        for b in rn {
            entries.push(dot(a, b));
        }
    }
    NtkBlock { channels: c, entries }
}

/// Kernel block between two points for jets of the given order;
/// [`DerivativeOrder::Value`] gives the scalar `û`-only kernel.
pub fn ntk_block(net: &Network, fmap: &FeatureMap, xm: &[f64], xn: &[f64], order: DerivativeOrder) -> Result<NtkBlock> {
    let rm = state_jacobian(net, fmap, xm, order)?;
    let rn = state_jacobian(net, fmap, xn, order)?;
    Ok(block_from_rows(&rm, &rn))
}

/// Stacked parameter Jacobian of the jet state over `points`, one row per
/// (point, channel) in point-major order.
pub fn state_jacobians(
    net: &Network,
    fmap: &FeatureMap,
    points: &PointSet,
    order: DerivativeOrder,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(points.len() * order.channels(points.dim()));
    for x in points.iter() {
        rows.extend(state_jacobian(net, fmap, x, order)?);
    }
    Ok(rows)
}

/// Gram matrix of explicit row dot products; the upper triangle is
/// mirrored so the result is exactly symmetric.
pub fn gram_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(&rows[i], &rows[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn assemble_gram(
    net: &Network,
    fmap: &FeatureMap,
    points: &PointSet,
    order: DerivativeOrder,
) -> Result<GramSpectrum> {
    if points.is_empty() {
        return Err(Error::EmptyBatch("gram"));
    }
    let rows = state_jacobians(net, fmap, points, order)?;
    GramSpectrum::from_gram(gram_from_rows(&rows), order.channels(points.dim()))
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenFailure("symmetric solver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    Ok((values, vectors))
}

/// Eigenvalues of a general square matrix by real Schur decomposition, as
/// `(re, im)` pairs sorted by descending real part.
pub fn general_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenFailure("Schur iteration did not converge".into()))?;
    let mut ev: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    ev.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(ev)
}

/// Gram matrix, optional Hessian blocks and the spectrum of `D_X M_X`
/// (of `M_X` alone when no Hessian is attached).
#[derive(Clone, Debug)]
pub struct GramSpectrum {
    pub channels: usize,
    pub gram: DMatrix<f64>,
    pub hessian: Option<DMatrix<f64>>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors (columns, same order) of `M_X`, or of
    /// `S = M^{1/2} D M^{1/2}` when a Hessian is attached.
    pub basis: DMatrix<f64>,
    gram_eigenvalues: Vec<f64>,
    sqrt_gram: DMatrix<f64>,
}

impl GramSpectrum {
    pub fn from_gram(gram: DMatrix<f64>, channels: usize) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::DimensionMismatch {
                expected: gram.nrows(),
                got: gram.ncols(),
            });
        }
        let (values, vectors) = symmetric_eigen(gram.clone())?;
        let sqrt_diag = DVector::from_iterator(values.len(), values.iter().map(|v| v.max(0.0).sqrt()));
        let sqrt_gram = &vectors * DMatrix::from_diagonal(&sqrt_diag) * vectors.transpose();
        Ok(Self {
            channels,
            gram,
            hessian: None,
            eigenvalues: values.clone(),
            basis: vectors,
            gram_eigenvalues: values,
            sqrt_gram,
        })
    }

    /// Attaches `D_X` and recomputes the spectrum for `D_X M_X`.
    pub fn with_hessian(mut self, hessian: DMatrix<f64>) -> Result<Self> {
        let n = self.gram.nrows();
        if hessian.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: hessian.nrows(),
            });
        }
        let scale = hessian.amax().max(f64::MIN_POSITIVE);
        if (&hessian - hessian.transpose()).amax() > 1e-12 * scale {
            let product = &hessian * &self.gram;
            for (re, im) in general_eigenvalues(&product)? {
                if im.abs() > IMAG_TOLERANCE * re.hypot(im) {
                    return Err(Error::ComplexSpectrum { re, im });
                }
            }
            return Err(Error::EigenFailure(
                "non-symmetric Hessian blocks are not supported".into(),
            ));
        }
        let s = &self.sqrt_gram * &hessian * &self.sqrt_gram;
        let s = (&s + s.transpose()) * 0.5;
        let (values, vectors) = symmetric_eigen(s)?;
        self.eigenvalues = values;
        self.basis = vectors;
        self.hessian = Some(hessian);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.gram.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Eigenvalues of `M_X` alone, descending.
    pub fn gram_eigenvalues(&self) -> &[f64] {
        &self.gram_eigenvalues
    }

    /// `D_X M_X`, or `M_X` without a Hessian.
    pub fn operator(&self) -> DMatrix<f64> {
        match &self.hessian {
            Some(d) => d * &self.gram,
            None => self.gram.clone(),
        }
    }

    /// Spectrum of [`operator`](Self::operator) from the general solver;
    /// fails with [`Error::ComplexSpectrum`] if an eigenvalue has an
    /// imaginary part that is not rounding-sized.
    ///
    /// Rounding-sized means below `IMAG_TOLERANCE·|λ|`, or below `1e-10`
    /// of the spectral radius: near-zero eigenvalues of a rank-deficient
    /// product come out of the Schur iteration as tiny complex pairs.
    pub fn general_spectrum(&self) -> Result<Vec<f64>> {
        let ev = general_eigenvalues(&self.operator())?;
        let radius = ev.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
        let mut out = Vec::with_capacity(ev.len());
        for (re, im) in ev {
            if im.abs() > IMAG_TOLERANCE * re.hypot(im) && im.abs() > 1e-10 * radius {
                return Err(Error::ComplexSpectrum { re, im });
            }
            out.push(re);
        }
        Ok(out)
    }

    /// Modal coordinates `Vᵀ M^{1/2} g`; under the linearized flow the `k`th
    /// coordinate decays exactly as `exp(−η λ_k t / |X|)`.
    pub fn modal_coordinates(&self, g: &[f64]) -> Vec<f64> {
        let g = DVector::from_column_slice(g);
        let q = self.basis.transpose() * (&self.sqrt_gram * g);
        q.iter().copied().collect()
    }

    /// Closed-form solution of `ġ = −(η/n) D M g` at each time in `times`.
    ///
    /// Uses `exp(−tAB) = I − A φ(BA) B` with `A = D M^{1/2}`, `B = M^{1/2}`
    /// and `φ(λ) = (1 − e^{−cλt})/λ`, which stays finite on the null space.
    pub fn linearized_dynamics(&self, g0: &[f64], eta: f64, n_points: usize, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        if g0.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: g0.len(),
            });
        }
        let c = eta / n_points as f64;
        let g = DVector::from_column_slice(g0);
        let a = match &self.hessian {
            Some(d) => d * &self.sqrt_gram,
            None => self.sqrt_gram.clone(),
        };
        let projected = self.basis.transpose() * (&self.sqrt_gram * &g);
        let lifted = &a * &self.basis;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let weights = DVector::from_iterator(
                projected.len(),
                self.eigenvalues.iter().zip(projected.iter()).map(|(&lam, &p)| {
                    let x = c * lam * t;
                    let phi = if x.abs() < 1e-12 { c * t } else { -(-x).exp_m1() / lam };
                    phi * p
                }),
            );
            let gt = &g - &lifted * weights;
            out.push(gt.iter().copied().collect());
        }
        Ok(out)
    }
}

/// Per-point Hessians of `W` and the stacked state gradient `∇_U W̄_X`.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Block diagonal `D_X`.
    pub hessian: DMatrix<f64>,
    /// `∂W/∂U` at every point, point-major.
    pub state_gradient: Vec<f64>,
}

pub fn hessian_blocks(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    points: &PointSet,
) -> Result<Linearization> {
    if points.is_empty() {
        return Err(Error::EmptyBatch("hessian"));
    }
    let c = lag.channels();
    let n = points.len();
    let tape = JetTape::forward(net, fmap, points, lag.order())?;
    let mut hessian = DMatrix::zeros(n * c, n * c);
    let mut state_gradient = vec![0.0; n * c];
    let mut state = vec![0.0; c];
    let mut block = vec![0.0; c * c];
    for (p, x) in points.iter().enumerate() {
        tape.state_into(p, &mut state);
        lag.hessian(x, &state, &mut block);
        lag.partials(x, &state, &mut state_gradient[p * c..(p + 1) * c]);
        for a in 0..c {
            for b in 0..c {
                hessian[(p * c + a, p * c + b)] = block[a * c + b];
            }
        }
    }
    Ok(Linearization {
        hessian,
        state_gradient,
    })
}

/// Gram matrix with Hessian blocks attached, plus the initial state
/// gradient: everything the linearized dynamics need.
pub fn linearize(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    points: &PointSet,
) -> Result<(GramSpectrum, Vec<f64>)> {
    let lin = hessian_blocks(lag, net, fmap, points)?;
    let spectrum = assemble_gram(net, fmap, points, lag.order())?.with_hessian(lin.hessian)?;
    Ok((spectrum, lin.state_gradient))
}

/// Full-batch gradient descent on `I_X = mean_X W` (no boundary term).
/// Returns `∇_U W̄_X` before every step and after the last one.
pub fn full_batch_descent(
    lag: &dyn Lagrangian,
    net: &mut Network,
    fmap: &FeatureMap,
    points: &PointSet,
    lr: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let c = lag.channels();
    let n = points.len();
    let mut grad = ParameterGradient::zeros_like(net);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut partials = vec![0.0; c];
    let mut state = vec![0.0; c];
    for step in 0..=steps {
        let tape = JetTape::forward(net, fmap, points, lag.order())?;
        let mut g = vec![0.0; n * c];
        let mut adjoint = vec![0.0; n * c];
        for (p, x) in points.iter().enumerate() {
            tape.state_into(p, &mut state);
            lag.partials(x, &state, &mut partials);
            for k in 0..c {
                g[p * c + k] = partials[k];
                adjoint[k * n + p] = partials[k] / n as f64;
            }
        }
        trace.push(g);
        if step == steps {
            break;
        }
        grad.fill_zero();
        tape.accumulate_gradient(net, &adjoint, &mut grad)?;
        if let Some(index) = grad.first_non_finite() {
            return Err(Error::NonFiniteGradient { index });
        }
        for (layer, gl) in net.layers_mut().iter_mut().zip(grad.layers()) {
            layer.weights.scaled_add(-lr, &gl.weights);
            layer.bias.scaled_add(-lr, &gl.bias);
        }
    }
    Ok(trace)
}

/// Measured gradient-descent trajectory of `∇_U W̄_X` next to the
/// closed-form linearized prediction from the initial spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsComparison {
    pub lr: f64,
    pub points: usize,
    /// Leading eigenvalues of `D_X M_X` at initialization.
    pub eigenvalues: Vec<f64>,
    /// `‖g‖` before each step and after the last, measured and predicted.
    pub measured_norm: Vec<f64>,
    pub predicted_norm: Vec<f64>,
    /// Modal coordinates on the leading eigendirections, `[step][mode]`.
    pub measured_modes: Vec<Vec<f64>>,
    pub predicted_modes: Vec<Vec<f64>>,
}

/// Trains a copy of `net` by [`full_batch_descent`] and compares the state
/// gradient against the linearized flow at `t = step`. Returns the trained
/// network alongside.
pub fn compare_dynamics(
    lag: &dyn Lagrangian,
    net: &Network,
    fmap: &FeatureMap,
    points: &PointSet,
    lr: f64,
    steps: usize,
    modes: usize,
) -> Result<(DynamicsComparison, Network)> {
    let (spectrum, g0) = linearize(lag, net, fmap, points)?;
    let mut trained = net.clone();
    let trace = full_batch_descent(lag, &mut trained, fmap, points, lr, steps)?;
    let times: Vec<f64> = (0..=steps).map(|s| s as f64).collect();
    let predicted = spectrum.linearized_dynamics(&g0, lr, points.len(), &times)?;
    let modes = modes.min(spectrum.len());
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let leading = |g: &[f64]| spectrum.modal_coordinates(g)[..modes].to_vec();
    let q0 = leading(&g0);
    let c = lr / points.len() as f64;
    let predicted_modes = times
        .iter()
        .map(|&t| {
            (0..modes)
                .map(|k| q0[k] * (-c * spectrum.eigenvalues[k] * t).exp())
                .collect()
        })
        .collect();
    let cmp = DynamicsComparison {
        lr,
        points: points.len(),
        eigenvalues: spectrum.eigenvalues[..modes].to_vec(),
        measured_norm: trace.iter().map(|g| norm(g)).collect(),
        predicted_norm: predicted.iter().map(|g| norm(g)).collect(),
        measured_modes: trace.iter().map(|g| leading(g)).collect(),
        predicted_modes,
    };
    Ok((cmp, trained))
}

/// Least-squares fit of `ln λ_k = slope·ln k + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    /// Inclusive 1-based index window requested.
    pub window: (usize, usize),
    /// Eigenvalues in the window that entered the fit.
    pub used: usize,
}

/// Fits the power-law decay of `eigenvalues` (descending, `λ_1` first) over
/// indices `k_lo..=k_hi`; eigenvalues below `1e-12·λ_1` are skipped.
pub fn eigendecay_fit(eigenvalues: &[f64], k_lo: usize, k_hi: usize) -> Result<DecayFit> {
    let lambda1 = eigenvalues.first().copied().unwrap_or(0.0);
    let floor = 1e-12 * lambda1;
    let pts: Vec<(f64, f64)> = (k_lo.max(1)..=k_hi.min(eigenvalues.len()))
        .filter(|&k| eigenvalues[k - 1] > floor && eigenvalues[k - 1] > 0.0)
        .map(|k| ((k as f64).ln(), eigenvalues[k - 1].ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::InsufficientSpectrum {
            found: pts.len(),
            needed: 10,
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    Ok(DecayFit {
        slope,
        intercept: my - slope * mx,
        window: (k_lo, k_hi),
        used: pts.len(),
    })
}

/// Eigenvalues of the scalar `û`-only kernel averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSpectrum {
    pub seeds: Vec<u64>,
    /// Mean over seeds of the `k`th largest eigenvalue.
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn seed_averaged_spectrum(
    config: &NetworkConfig,
    fmap: &FeatureMap,
    points: &PointSet,
    order: DerivativeOrder,
    seeds: &[u64],
) -> Result<SeedSpectrum> {
    let mut all = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let net = Network::init(config, seed)?;
        all.push(assemble_gram(&net, fmap, points, order)?.eigenvalues);
    }
    let n = all.first().map_or(0, Vec::len);
    let fold = |f: fn(f64, f64) -> f64, init: f64| -> Vec<f64> {
        (0..n).map(|k| all.iter().map(|e| e[k]).fold(init, f)).collect()
    };
    let sum = fold(|a, b| a + b, 0.0);
    Ok(SeedSpectrum {
        seeds: seeds.to_vec(),
        mean: sum.iter().map(|s| s / seeds.len() as f64).collect(),
        min: fold(f64::min, f64::INFINITY),
        max: fold(f64::max, f64::NEG_INFINITY),
    })
}

/// `λ_k(n)/n` for the kernel matrix `K(x_i, x_j)` on the grid
/// `x_i = i/n, i = 1..=n`, for each `n`; row `k` of each entry holds the
/// `k`th largest eigenvalue. These converge to the integral-operator
/// eigenvalues on `[0,1]`.
pub fn operator_eigenvalue_relation(
    kernel: &dyn Fn(f64, f64) -> f64,
    sizes: &[usize],
    k_max: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let xs: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = kernel(xs[i], xs[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let (values, _) = symmetric_eigen(m)?;
        out.push((n, values.iter().take(k_max).map(|v| v / n as f64).collect()));
    }
    Ok(out)
}

/// `4/((2k−1)²π²)`: eigenvalues of `min(x, x′)` on `[0,1]`.
pub fn brownian_eigenvalue(k: usize) -> f64 {
    let a = (2 * k - 1) as f64 * std::f64::consts::PI;
    4.0 / (a * a)
}
