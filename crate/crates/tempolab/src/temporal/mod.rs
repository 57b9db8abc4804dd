//! Temporal meta-information over a sequence of yearly snapshots: presence
//! bitmasks, multiplicity, unions, intersections, forget sets, replay
//! weights, and sequence-identity analyses.

mod align;
mod index;

pub use align::{
    filter_by_identity, identity_density_delta, nearest_identity, pairwise_identity,
    IdentityReport, DEFAULT_IDENTITY_BINS,
};
pub use index::{ReplayDistribution, TemporalIndex};
