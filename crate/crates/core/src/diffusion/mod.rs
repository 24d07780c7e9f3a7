//! Forward diffusion and (optionally guided) reverse purification.

mod defense;
pub mod process;
pub mod schedule;

pub use defense::{diffpure_purify, oap_guided_purify, DiffusionDefense};
pub use process::{forward_diffuse, reverse_step, ChainNoise, Guidance, ScoreFn};
pub use schedule::DiffusionSchedule;
