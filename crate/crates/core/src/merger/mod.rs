//! Fusion of several models: weight averages, Fisher merging, permutation
//! and transport alignment, REPAIR, prediction ensembles and NCM.

pub mod align;
pub mod average;
pub mod ensemble;
pub mod fisher;
pub mod ot;
pub mod repair;

pub use align::{linear_assignment, permute_model, weight_match, MlpWeights, Permutation, WeightMatch};
pub use average::{greedy_soup, uniform_soup, weighted_average, wise_ft, GreedySoup, SoupStep};
pub use ensemble::{combine, ensemble, EnsembleMode, EnsembleOutput, Metric, Ncm};
pub use fisher::{fisher_estimate, fisher_merge, FisherDiag, DEFAULT_EPS_FLOOR};
pub use ot::{ot_fuse, sinkhorn, Coupling, OtFusion};
pub use repair::{repair, unit_stats, RepairReport};
