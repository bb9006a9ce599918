//! Plausible-fatality distributions for reported conflict events.
//!
//! Elicited coder beliefs over binned fatality ranges are fitted by
//! reported-value-inflated parametric families (stage one, a genetic
//! algorithm minimising the binned absolute difference), then generalised to
//! any reported count through per-parameter regressions (stage two). The
//! resulting conditional distributions can be queried, sampled, and summed
//! over event sets.
//!
//! All numerical code is generic over a [`Real`] scalar; the aliases at the
//! crate root fix it to `f64`, which is what the CLI and file formats use.

pub mod cli;
pub mod crossval;
pub mod distributions;
pub mod error;
pub mod fitting;
pub mod numeric;
pub mod predictor;
pub mod regression;
pub mod rng;
pub mod simulate;
pub mod survey;

pub use error::{Error, Result};
pub use numeric::Real;

pub use distributions::{BaseFamily, FamilyId};
pub use survey::{Context, FatalityBin, SurveyDesign, ViolenceType};

/// Scalar used by the CLI and all file formats.
pub type Scalar = f64;

pub type DistributionSpec = distributions::DistributionSpec<Scalar>;
pub type TruncatedDiscreteView = distributions::TruncatedDiscreteView<Scalar>;
pub type CoderDistribution = survey::CoderDistribution<Scalar>;
pub type BadScore = fitting::BadScore<Scalar>;
pub type GaConfig = fitting::GaConfig<Scalar>;
pub type FittedTheta = fitting::FittedTheta<Scalar>;
pub type CoefficientBundle = regression::CoefficientBundle<Scalar>;
pub type LocoResult = crossval::LocoResult<Scalar>;
pub type AggregateResult = simulate::AggregateResult<Scalar>;
pub type Predictor = predictor::Predictor<Scalar>;
