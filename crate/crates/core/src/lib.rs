//! Deep Ritz minimization of non-convex variational energies.
//!
//! A fully connected network `û(x; θ)` is trained to minimize a penalized
//! energy functional `∫ W(x, u, ∇u) dx + λ ∫ u² ds` by stochastic gradient
//! descent over uniformly sampled collocation points. Inputs may first pass
//! through a Fourier feature map, which lets the network represent the
//! fine oscillatory minimizing sequences of multi-well energies.
//!
//! The crate also assembles the empirical neural tangent kernel of the
//! method, so the spectral bias of training can be measured directly.
//!
//! Module map:
//! - [`engine`]: value, input derivatives and parameter gradients of `net∘δ`
//! - [`network`]: the feed-forward ansatz and its initialization
//! - [`features`]: input feature maps
//! - [`problems`]: energy densities, penalized loss and quadrature oracles
//! - [`trainer`]: sampling, Adam, learning-rate schedule, training loop
//! - [`ntk`]: Gram matrices, Hessian blocks, spectra and linearized dynamics
//! - [`diagnostics`]: grid evaluation, transition counting, energy reports
//! - [`artifacts`]: on-disk tables, manifests and checkpoints
//! - [`experiment`]: validated run specs, presets and sweeps

pub mod artifacts;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod features;
pub mod network;
pub mod ntk;
pub mod points;
pub mod problems;
pub mod trainer;

pub use engine::{DerivativeOrder, JetValue, ParameterGradient};
pub use error::{Error, Result};
pub use features::FeatureMap;
pub use network::{Activation, Network, NetworkConfig};
pub use points::PointSet;
pub use problems::{Lagrangian, ProblemKind, VariationalProblem};
