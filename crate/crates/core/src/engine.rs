//! Derivatives of the composed map `x ↦ û(δ(x); θ)`.
//!
//! Input derivatives are carried forward as jets: alongside each layer's
//! activations the tape holds one tangent per spatial coordinate and,
//! when requested, the second derivative along the last coordinate `y`.
//! Parameter gradients of any linear combination of those jet channels are
//! then obtained by a single reverse sweep over the tape.
//!
//! A batch of `B` points with `C` channels is stored as a `(C·B) × width`
//! matrix, channel-major: rows `c·B .. (c+1)·B` hold channel `c`. Channel
//! `0` is the value, channels `1..=d` the input tangents and channel `d+1`
//! the `y`-curvature. The same layout is used for output adjoints.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::network::{Activation, Layer, Network};
use crate::points::PointSet;

/// How many input derivatives a jet carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeOrder {
    /// `u` only.
    Value,
    /// `u` and `∇u`.
    Gradient,
    /// `u`, `∇u` and `∂²u/∂y²`.
    SecondY,
}

impl DerivativeOrder {
    pub fn from_usize(order: usize) -> Option<Self> {
        match order {
            0 => Some(Self::Value),
            1 => Some(Self::Gradient),
            2 => Some(Self::SecondY),
            _ => None,
        }
    }

    pub fn as_usize(self) -> usize {
        match self {
            Self::Value => 0,
            Self::Gradient => 1,
            Self::SecondY => 2,
        }
    }

    /// Jet channels for a `dim`-dimensional input.
    pub fn channels(self, dim: usize) -> usize {
        match self {
            Self::Value => 1,
            Self::Gradient => 1 + dim,
            Self::SecondY => 2 + dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetValue {
    pub value: f64,
    /// `∂u/∂x_i`; empty for [`DerivativeOrder::Value`].
    pub d_input: Vec<f64>,
    pub d2_yy: Option<f64>,
}

impl JetValue {
    /// Channel-ordered state `[u, ∇u…, u_yy?]`.
    pub fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 + self.d_input.len());
        s.push(self.value);
        s.extend_from_slice(&self.d_input);
        s.extend(self.d2_yy);
        s
    }
}

/// Gradient with respect to every network parameter, laid out exactly like
/// the network itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradient {
    layers: Vec<Layer>,
}

impl ParameterGradient {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.fan_out(), l.fan_in()))
                .collect(),
        }
    }

    /// Gradient with the flat layout of `net` filled from `flat`.
    pub fn from_flat(net: &Network, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(net);
        if flat.len() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: g.len(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut g.layers {
            for buf in layer.buffers_mut() {
                buf.copy_from_slice(&flat[offset..offset + buf.len()]);
                offset += buf.len();
            }
        }
        Ok(g)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same flattening as [`Network::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.len());
        for buf in self.buffers() {
            flat.extend_from_slice(buf);
        }
        flat
    }

    pub fn buffers(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.layers.iter().flat_map(|l| l.buffers())
    }

    pub fn fill_zero(&mut self) {
        for layer in &mut self.layers {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &ParameterGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weights *= factor;
            layer.bias *= factor;
        }
    }

    pub fn dot(&self, other: &ParameterGradient) -> f64 {
        self.buffers()
            .zip(other.buffers())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Flat index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        let mut offset = 0;
        for buf in self.buffers() {
            if let Some(i) = buf.iter().position(|v| !v.is_finite()) {
                return Some(offset + i);
            }
            offset += buf.len();
        }
        None
    }
}

/// Which scalar of the jet to differentiate with respect to θ.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputSelector {
    Value,
    /// `∂u/∂x_i`.
    Input(usize),
    SecondY,
    /// `Σ_c seeds[c]·state[c]`; seeding with `∂L/∂state` differentiates a
    /// scalar loss node `L(state)`.
    Seeds(Vec<f64>),
}

/// Recorded forward pass over a batch of points.
#[derive(Clone, Debug)]
pub struct JetTape {
    order: DerivativeOrder,
    dim: usize,
    points: usize,
    activation: Activation,
    /// Input to every layer, `(C·B) × fan_in`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers, `(C·B) × width`.
    pre: Vec<Array2<f64>>,
    /// Network output channels, length `C·B`.
    output: Vec<f64>,
}

impl JetTape {
    pub fn forward(net: &Network, fmap: &FeatureMap, points: &PointSet, order: DerivativeOrder) -> Result<Self> {
        let dim = fmap.input_dim();
        if points.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.dim(),
            });
        }
        if net.input_dim() != fmap.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: fmap.output_dim(),
                got: net.input_dim(),
            });
        }
        if order.as_usize() > net.activation().max_input_order() {
            return Err(Error::OrderUnsupported {
                order: order.as_usize(),
                activation: net.activation().name(),
            });
        }
        let b = points.len();
        if b == 0 {
            return Err(Error::EmptyBatch("evaluation"));
        }
        let channels = order.channels(dim);
        let feat = fmap.output_dim();

        let mut h = Array2::<f64>::zeros((channels * b, feat));
        {
            let buf = h.as_slice_mut().expect("fresh array is contiguous");
            let mut jac = vec![0.0; feat * dim];
            let mut second = vec![0.0; feat];
            for (p, x) in points.iter().enumerate() {
                fmap.map_into(x, &mut buf[p * feat..(p + 1) * feat]);
                if order == DerivativeOrder::Value {
                    continue;
                }
                fmap.jacobian_into(x, &mut jac, &mut second);
                for i in 0..dim {
                    let row = ((1 + i) * b + p) * feat;
                    for r in 0..feat {
                        buf[row + r] = jac[r * dim + i];
                    }
                }
                if order == DerivativeOrder::SecondY {
                    let row = ((1 + dim) * b + p) * feat;
                    buf[row..row + feat].copy_from_slice(&second);
                }
            }
        }

        let activation = net.activation();
        let last = net.layers().len() - 1;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last);
        let mut output = Vec::new();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut z = standard(h.dot(&layer.weights.t()));
            {
                let mut zv = z.slice_mut(s![0..b, ..]);
                zv += &layer.bias;
            }
            inputs.push(h);
            if l == last {
                output = z.column(0).to_vec();
                break;
            }
            h = activate(activation, &z, b, dim, order);
            pre.push(z);
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("network output"));
        }
        Ok(Self {
            order,
            dim,
            points: b,
            activation,
            inputs,
            pre,
            output,
        })
    }

    pub fn order(&self) -> DerivativeOrder {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    pub fn channels(&self) -> usize {
        self.order.channels(self.dim)
    }

    /// Raw output channels in channel-major layout.
    pub fn outputs(&self) -> &[f64] {
        &self.output
    }

    pub fn value(&self, p: usize) -> f64 {
        self.output[p]
    }

    /// `∂u/∂x_i` at point `p`; requires order ≥ 1.
    pub fn d_input(&self, p: usize, i: usize) -> f64 {
        assert!(self.order >= DerivativeOrder::Gradient && i < self.dim);
        self.output[(1 + i) * self.points + p]
    }

    /// `∂²u/∂y²` at point `p`; requires order 2.
    pub fn d2_yy(&self, p: usize) -> f64 {
        assert!(self.order == DerivativeOrder::SecondY);
        self.output[(1 + self.dim) * self.points + p]
    }

    /// Writes the channel-ordered state of point `p` into `out`.
    pub fn state_into(&self, p: usize, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.channels()) {
            *o = self.output[c * self.points + p];
        }
    }

    pub fn jet(&self, p: usize) -> JetValue {
        let d_input = if self.order >= DerivativeOrder::Gradient {
            (0..self.dim).map(|i| self.d_input(p, i)).collect()
        } else {
            Vec::new()
        };
        JetValue {
            value: self.value(p),
            d_input,
            d2_yy: (self.order == DerivativeOrder::SecondY).then(|| self.d2_yy(p)),
        }
    }

    /// Adds `∂/∂θ Σ adjoint[k]·output[k]` into `grad`.
    pub fn accumulate_gradient(&self, net: &Network, adjoint: &[f64], grad: &mut ParameterGradient) -> Result<()> {
        if adjoint.len() != self.output.len() {
            return Err(Error::DimensionMismatch {
                expected: self.output.len(),
                got: adjoint.len(),
            });
        }
        let b = self.points;
        let last = net.layers().len() - 1;
        let mut zbar =
            Array2::from_shape_vec((adjoint.len(), 1), adjoint.to_vec()).expect("column shape matches length");
        for l in (0..=last).rev() {
            let layer = &net.layers()[l];
            let target = &mut grad.layers[l];
            general_mat_mul(1.0, &zbar.t(), &self.inputs[l], 1.0, &mut target.weights);
            target.bias += &zbar.slice(s![0..b, ..]).sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let hbar = standard(zbar.dot(&layer.weights));
            zbar = activate_backward(self.activation, self.pre[l - 1].view(), &hbar, b, self.dim, self.order);
        }
        Ok(())
    }

    /// Gradient of `Σ adjoint[k]·output[k]`.
    pub fn gradient(&self, net: &Network, adjoint: &[f64]) -> Result<ParameterGradient> {
        let mut grad = ParameterGradient::zeros_like(net);
        self.accumulate_gradient(net, adjoint, &mut grad)?;
        Ok(grad)
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Pushes a jet batch through `σ`.
fn activate(act: Activation, z: &Array2<f64>, b: usize, dim: usize, order: DerivativeOrder) -> Array2<f64> {
    let width = z.ncols();
    let mut out = Array2::<f64>::zeros(z.raw_dim());
    let zs = z.as_slice().expect("matmul output is contiguous");
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    let tangents = if order >= DerivativeOrder::Gradient { dim } else { 0 };
    let curv_row = (1 + dim) * b;
    let ty_row = dim * b;
    for p in 0..b {
        for j in 0..width {
            let k = p * width + j;
            let jet = act.jet(zs[k]);
            os[k] = jet.value;
            for i in 0..tangents {
                let kt = ((1 + i) * b + p) * width + j;
                os[kt] = jet.d1 * zs[kt];
            }
            if order == DerivativeOrder::SecondY {
                let ky = (ty_row + p) * width + j;
                let kc = (curv_row + p) * width + j;
                os[kc] = jet.d2 * zs[ky] * zs[ky] + jet.d1 * zs[kc];
            }
        }
    }
    out
}

/// Adjoint of [`activate`]: maps `∂L/∂h` to `∂L/∂z`.
fn activate_backward(
    act: Activation,
    z: ArrayView2<'_, f64>,
    hbar: &Array2<f64>,
    b: usize,
    dim: usize,
    order: DerivativeOrder,
) -> Array2<f64> {
    let width = z.ncols();
    let mut zbar = Array2::<f64>::zeros(z.raw_dim());
    let zs = z.to_slice().expect("tape arrays are contiguous");
    let hs = hbar.as_slice().expect("matmul output is contiguous");
    let out = zbar.as_slice_mut().expect("fresh array is contiguous");
    let tangents = if order >= DerivativeOrder::Gradient { dim } else { 0 };
    let curv_row = (1 + dim) * b;
    let ty_row = dim * b;
    for p in 0..b {
        for j in 0..width {
            let k = p * width + j;
            let jet = act.jet(zs[k]);
            let mut acc = jet.d1 * hs[k];
            for i in 0..tangents {
                let kt = ((1 + i) * b + p) * width + j;
                acc += jet.d2 * zs[kt] * hs[kt];
                out[kt] = jet.d1 * hs[kt];
            }
            if order == DerivativeOrder::SecondY {
                let ky = (ty_row + p) * width + j;
                let kc = (curv_row + p) * width + j;
                let ty = zs[ky];
                acc += (jet.d3 * ty * ty + jet.d2 * zs[kc]) * hs[kc];
                out[ky] += 2.0 * jet.d2 * ty * hs[kc];
                out[kc] = jet.d1 * hs[kc];
            }
            out[k] = acc;
        }
    }
    zbar
}

/// Value and requested input derivatives of `net∘δ` at one point.
pub fn evaluate_jet(net: &Network, fmap: &FeatureMap, x: &[f64], order: DerivativeOrder) -> Result<JetValue> {
    if x.len() != fmap.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: fmap.input_dim(),
            got: x.len(),
        });
    }
    let tape = JetTape::forward(net, fmap, &PointSet::from_flat(x.len(), x.to_vec())?, order)?;
    Ok(tape.jet(0))
}

/// Exact gradient with respect to θ of the selected jet scalar at `x`.
pub fn parameter_gradient_of(
    selector: &OutputSelector,
    net: &Network,
    fmap: &FeatureMap,
    x: &[f64],
) -> Result<ParameterGradient> {
    let dim = fmap.input_dim();
    let (order, seeds) = match selector {
        OutputSelector::Value => (DerivativeOrder::Value, vec![1.0]),
        OutputSelector::Input(i) => {
            if *i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i + 1,
                });
            }
            let mut s = vec![0.0; 1 + dim];
            s[1 + i] = 1.0;
            (DerivativeOrder::Gradient, s)
        }
        OutputSelector::SecondY => {
            let mut s = vec![0.0; 2 + dim];
            s[1 + dim] = 1.0;
            (DerivativeOrder::SecondY, s)
        }
        OutputSelector::Seeds(s) => {
            let order = match s.len() {
                1 => DerivativeOrder::Value,
                n if n == 1 + dim => DerivativeOrder::Gradient,
                n if n == 2 + dim => DerivativeOrder::SecondY,
                n => {
                    return Err(Error::DimensionMismatch {
                        expected: 1 + dim,
                        got: n,
                    })
                }
            };
            (order, s.clone())
        }
    };
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    let tape = JetTape::forward(net, fmap, &PointSet::from_flat(dim, x.to_vec())?, order)?;
    let grad = tape.gradient(net, &seeds)?;
    if grad.first_non_finite().is_some() {
        return Err(Error::NonFiniteValue("parameter gradient"));
    }
    Ok(grad)
}

/// Flat parameter gradients of every jet channel at `x`: row `c` is
/// `∇_θ state[c]`.
pub fn state_jacobian(net: &Network, fmap: &FeatureMap, x: &[f64], order: DerivativeOrder) -> Result<Vec<Vec<f64>>> {
    let tape = JetTape::forward(net, fmap, &PointSet::from_flat(x.len(), x.to_vec())?, order)?;
    let channels = tape.channels();
    let mut rows = Vec::with_capacity(channels);
    let mut seed = vec![0.0; channels];
    let mut grad = ParameterGradient::zeros_like(net);
    for c in 0..channels {
        seed.fill(0.0);
        seed[c] = 1.0;
        grad.fill_zero();
        tape.accumulate_gradient(net, &seed, &mut grad)?;
        rows.push(grad.to_flat());
    }
    Ok(rows)
}
