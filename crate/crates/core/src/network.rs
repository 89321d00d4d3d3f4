//! The fully connected ansatz `û = L⁽ⁿ⁾ ∘ … ∘ L⁽¹⁾`.
//!
//! Hidden layers apply `σ(A h + b)`; the output layer is affine. Parameters
//! flatten layer by layer, each layer contributing its weight matrix in
//! row-major order followed by its bias vector.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `σ(z) = √(z² + ρ²)`, a smooth surrogate of `|z|`.
    SmoothSqrt {
        rho: f64,
    },
}

/// `σ` and its first three derivatives at one pre-activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationJet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::SmoothSqrt { rho } => (z * z + rho * rho).sqrt(),
        }
    }

    /// Derivatives up to third order. ReLU uses the subgradient 0 at the
    /// kink and zero curvature everywhere.
    #[inline]
    pub fn jet(self, z: f64) -> ActivationJet {
        match self {
            Activation::Relu => ActivationJet {
                value: z.max(0.0),
                d1: if z > 0.0 { 1.0 } else { 0.0 },
                d2: 0.0,
                d3: 0.0,
            },
            Activation::SmoothSqrt { rho } => {
                let r2 = rho * rho;
                let s = (z * z + r2).sqrt();
                let s3 = s * s * s;
                ActivationJet {
                    value: s,
                    d1: z / s,
                    d2: r2 / s3,
                    d3: -3.0 * r2 * z / (s3 * s * s),
                }
            }
        }
    }

    /// Highest input-derivative order for which the composed network is
    /// twice differentiable almost everywhere with nonzero curvature.
    pub fn max_input_order(self) -> usize {
        match self {
            Activation::Relu => 1,
            Activation::SmoothSqrt { .. } => 2,
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Relu => "relu".to_string(),
            Activation::SmoothSqrt { rho } => format!("smooth_sqrt(rho={rho})"),
        }
    }
}

/// How [`Network::init`] draws the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights `N(0, 2/fan_in)`, biases zero.
    #[default]
    HeNormal,
    /// Weights and biases `U(−1/√fan_in, 1/√fan_in)`, the usual default of
    /// deep learning frameworks for linear layers.
    UniformFanIn,
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "he_normal" | "he" => Ok(Self::HeNormal),
            "uniform_fan_in" | "uniform" => Ok(Self::UniformFanIn),
            _ => Err(format!("unknown init {s:?}; expected he_normal or uniform_fan_in")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input width after the feature map.
    pub input_dim: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub init: InitScheme,
}

fn one() -> usize {
    1
}

impl NetworkConfig {
    pub fn new(input_dim: usize, hidden_layers: usize, width: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_layers,
            width,
            activation,
            output_dim: 1,
            init: InitScheme::HeNormal,
        }
    }

    pub fn with_init(self, init: InitScheme) -> Self {
        Self { init, ..self }
    }

    /// Every constraint violation, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_dim == 0 {
            out.push("input_dim must be at least 1".to_string());
        }
        if self.hidden_layers == 0 {
            out.push("hidden_layers must be at least 1".to_string());
        }
        if self.width == 0 {
            out.push("width must be at least 1".to_string());
        }
        if let Activation::SmoothSqrt { rho } = self.activation {
            if !(rho > 0.0 && rho.is_finite()) {
                out.push(format!("rho must be positive and finite, got {rho}"));
            }
        }
        if self.output_dim != 1 {
            out.push(format!("output_dim must be 1, got {}", self.output_dim));
        }
        out
    }

    /// `(fan_out, fan_in)` of each layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((self.width, fan_in));
            fan_in = self.width;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// One affine map `z = A h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weight entries (row-major) then bias entries.
    pub fn buffers(&self) -> [&[f64]; 2] {
        [
            self.weights.as_slice().expect("standard layout weights"),
            self.bias.as_slice().expect("contiguous bias"),
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weights.as_slice_mut().expect("standard layout weights"),
            self.bias.as_slice_mut().expect("contiguous bias"),
        ]
    }
}

/// The network parameters θ together with the activation they are used with.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    activation: Activation,
    layers: Vec<Layer>,
}

impl Network {
    /// Draws the parameters with `config.init` from a ChaCha8 stream seeded
    /// with `seed`, layer by layer: weights row-major, then biases (biases
    /// only for [`InitScheme::UniformFanIn`]; He biases are zero).
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let violations = config.violations();
        if !violations.is_empty() {
            return Err(Error::InvalidSpec(violations));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_out, fan_in)| match config.init {
                InitScheme::HeNormal => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    });
                    Layer {
                        weights,
                        bias: Array1::zeros(fan_out),
                    }
                }
                InitScheme::UniformFanIn => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new(-bound, bound).expect("bound is positive");
                    let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
                    let bias = Array1::from_shape_simple_fn(fan_out, || dist.sample(&mut rng));
                    Layer { weights, bias }
                }
            })
            .collect();
        Ok(Self {
            activation: config.activation,
            layers,
        })
    }

    /// Builds a network from explicit layers; any chain of at least one
    /// layer ending in a single output is accepted.
    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidSpec(vec!["network needs at least one layer".into()]));
        };
        if last.fan_out() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: last.fan_out(),
            });
        }
        for pair in layers.windows(2) {
            if pair[1].fan_in() != pair[0].fan_out() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].fan_out(),
                    got: pair[1].fan_in(),
                });
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::DimensionMismatch {
                    expected: layer.fan_out(),
                    got: layer.bias.len(),
                });
            }
        }
        Ok(Self { activation, layers })
    }

    pub fn from_flat(config: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        let violations = config.violations();
        if !violations.is_empty() {
            return Err(Error::InvalidSpec(violations));
        }
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| Layer::zeros(r, c))
            .collect();
        let mut net = Self {
            activation: config.activation,
            layers,
        };
        net.set_flat(flat)?;
        Ok(net)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// The config this network matches, if its hidden layers share a width.
    pub fn config(&self) -> Option<NetworkConfig> {
        let hidden = &self.layers[..self.layers.len() - 1];
        let width = hidden.first()?.fan_out();
        if hidden.iter().any(|l| l.fan_out() != width) {
            return None;
        }
        Some(NetworkConfig::new(
            self.input_dim(),
            hidden.len(),
            width,
            self.activation,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for buf in layer.buffers() {
                flat.extend_from_slice(buf);
            }
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for buf in layer.buffers_mut() {
                buf.copy_from_slice(&flat[offset..offset + buf.len()]);
                offset += buf.len();
            }
        }
        Ok(())
    }

    /// Evaluates `û` at one (already feature-mapped) input.
    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let mut h = Array1::from(z.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weights.dot(&h) + &layer.bias;
            if l < last {
                next.mapv_inplace(|v| self.activation.apply(v));
            }
            h = next;
        }
        Ok(h[0])
    }
}
