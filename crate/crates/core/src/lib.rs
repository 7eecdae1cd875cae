//! Peer-effect estimation with misclassified network links.
//!
//! Two noisy reports of each group's network identify the misclassification
//! rates in closed form. The adjusted network `W`, unbiased for the true
//! network, then feeds a 2SLS estimator whose clustered covariance accounts
//! for the estimated rates.

pub mod error;
pub mod estimators;
pub mod io;
pub mod lim;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod rates;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use estimators::{fit, s2sls, EstimatorSpec, FixedEffectsMode, InstrumentSource, PeerEffectsFit, PeerForm, Variant};
pub use montecarlo::{run_mc, McConfig, McReport};
pub use model::{Adjacency, Dataset, GroupSample, Theta};
pub use rates::{estimate_rates, RatesEstimate, RatesMode};
pub use simulate::{simulate_dataset, simulate_replication, SimConfig};
