//! Bayesian neighbourhood component analysis.
//!
//! A Mahalanobis metric is approximated as a weighted sum of the leading
//! eigen-directions of the data scatter. A Gaussian posterior over the
//! weights is fitted in closed form with a Bohning bound on the NCA
//! likelihood, and used for distance beliefs and Monte Carlo class
//! predictions. Point-estimate NCA and PCA baselines plus a seeded
//! experiment harness are included.

pub mod dataset;
pub mod eigenbasis;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod nca;
pub mod neighbors;
pub mod posterior;
pub mod report;
pub mod variational;

pub use dataset::{Dataset, NoiseSpec};
pub use eigenbasis::{gamma_distance, EigenBasis, GammaVector, PairFeature};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use nca::{LinearTransform, MahalanobisMetric};
pub use neighbors::NeighborGraph;
pub use posterior::{DistanceBelief, PredictiveDistribution};
pub use variational::{BncaFit, GaussianBelief};
