//! Target selection by Sinkhorn divergence, optimal-transport color
//! transfer, and the two-path diffusion purifier built on them.

mod purify;
pub mod sinkhorn;
mod transfer;

pub use purify::{ideal_oracle_purify, DualPathConfig, DualPathDefense, DualPathTrace, TargetBank};
pub use sinkhorn::{
    barycentric_map, entropic_ot, self_ot, sinkhorn_divergence, transport_plan, Divergence, OtSolution, PixelCloud,
    SinkhornConfig,
};
pub use transfer::{color_transfer, select_in, select_target, ImageCloud, Selection, TargetIndex, Transfer};
