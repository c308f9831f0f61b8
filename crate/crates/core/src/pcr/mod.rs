//! Pathology recalibration: the PRM and EPGA blocks and the residual network
//! built from them.

mod epga;
mod expert;
mod network;
mod prm;

pub use epga::{epga_forward, nearest_rank, percentile_index, qss, qss_op, recalibrate, EpgaSettings, Gate, QssGrad, Theta, DEFAULT_THETA};
pub use expert::{init_expert_map, InitMode, Midline};
pub use network::{AttentionTrace, Forward, Network, NetworkConfig, Param, PcrSettings};
pub use prm::prm_forward;
