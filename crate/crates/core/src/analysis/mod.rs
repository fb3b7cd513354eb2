//! Cost accounting and receptive-field probes.

pub mod cost;
pub mod erf;

pub use cost::{conv_macs, count_flops, count_params, FlopReport, LayerCost, ParamCount};
pub use erf::{compute_erf, dependency_set, erf_ladder, BlocksProbe, ErfMap, ErfProbe, StageProbe};
