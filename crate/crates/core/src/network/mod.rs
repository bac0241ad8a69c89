//! Generator and discriminator networks with hand-composed backward passes.

pub mod discriminator;
pub mod sr;

pub use discriminator::{discriminator_forward, DiscArch, DiscCache, Discriminator, PROB_MARGIN};
pub use sr::{affine_project, sr_forward, Cache, SrArch, SrModel};
