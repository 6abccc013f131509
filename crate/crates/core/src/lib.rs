//! Debiased data-driven computerized adaptive testing.
//!
//! A frozen cognitive diagnosis model ([`cdm`]) scores responses; a learned
//! selection policy ([`selector`]) picks questions; the bi-level trainer
//! ([`trainer`]) fits proficiencies in the inner loop and updates the policy
//! in the outer loop on a meta-set objective shaped by a debiasing strategy
//! ([`debias`]). [`eval`] reports worst-group and average accuracy.

pub mod cdm;
pub mod dataset;
pub mod debias;
pub mod eval;
pub mod io;
pub mod math;
pub mod rng;
pub mod selector;
pub mod sim;
pub mod trainer;

pub use cdm::{CdmBundle, CdmKind, ItemParams, ProficiencyState};
pub use dataset::{Attribute, Corpus, EpisodeSplit, GroupKey, Interaction};
pub use debias::{StrategyKind, SyntheticSample};
pub use eval::{EvalReport, GroupMetrics};
pub use selector::{SelectionMask, SelectionPolicy, StateVector};
pub use trainer::{EpisodeTrace, TrainConfig};
