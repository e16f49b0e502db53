//! Heterogeneous hidden Markov models for sleep activity recognition.
//!
//! The model couples a discrete latent state chain with a per-state emission
//! model that factorizes into a multivariate Gaussian over the continuous
//! sensor features and independent categorical distributions over the
//! discrete ones. Missing cells are handled exactly: the emission likelihood
//! marginalizes unobserved dimensions, and the EM updates complete missing
//! continuous values with their per-state conditional means.
//!
//! Modules:
//! - [`data`] / [`model`]: sequences, labels, parameters, validation.
//! - [`sim`]: exact sampling from the generative model.
//! - [`inference`]: emission likelihoods, forward-backward, Viterbi.
//! - [`learning`]: Baum-Welch with missing data and clamped emissions.
//! - [`selection`]: parameter counting and BIC/AIC state-count sweeps.
//! - [`baselines`]: imputers, K-means/GMM sleep clustering, dummy
//!   classifiers, and evaluation metrics.
//! - [`pipeline`]: CSV/JSON ingestion, model files, reports, plot data.
//! - [`cli`]: the `hhmm` command-line entry points.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod learning;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod selection;
pub mod sim;

mod cluster;

pub use data::{ObservationSequence, SleepLabels};
pub use error::{Error, Result};
pub use model::{Constraints, ModelParameters, Posteriors};
