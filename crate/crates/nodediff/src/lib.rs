//! Graph generation by diffusing latent node vectors.
//!
//! A graph is encoded into one latent vector per node by a GNN encoder, a
//! score-based diffusion prior is learned over those vectors, and a GNN
//! decoder maps sampled vectors back to node- and edge-labeled graphs. The
//! diffusion state is `N x d` instead of `N x N x K`, which is what makes
//! sampling cheap for large graphs; a direct node-plus-edge diffusion variant
//! is included for the scaling comparison.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`graph`]: graph data model, permutations, synthetic corpora, corpus files
//! - [`sde`]: variance-preserving SDE coefficients and transition kernel
//! - [`tape`]: reverse-mode automatic differentiation over `f64` matrices
//! - [`nn`]: parameter store, MLPs, attention blocks, Adam
//! - [`score_net`]: permutation-equivariant attention score network
//! - [`vae`]: encoder and decoder GNNs with factorized likelihood heads
//! - [`ena`]: edge-node attention variant diffusing the full edge tensor
//! - [`training`]: alternating VAE / prior optimization, checkpoints
//! - [`sampling`]: reverse-SDE and probability-flow ODE samplers
//! - [`eval`]: MMD metrics, isomorphism counting, contextual-vector probes
//! - [`config`]: experiment presets and JSON configuration
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `nodediff` binary for the equivalent command-line surface.

pub mod config;
pub mod ena;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod sampling;
pub mod score_net;
pub mod sde;
pub mod tape;
pub mod training;
pub mod vae;

pub mod cli;

pub use error::{Error, Result};
