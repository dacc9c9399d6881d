//! Synthetic acquisitions: analytic phantoms, ideal cone-beam projections and
//! raw frames degraded by the sensor aging model. Serves as the oracle for the
//! preprocessing and reconstruction tests.

mod acquisition;
mod degradation;
mod edge;
mod phantom;
mod projector;

pub use acquisition::{
    simulate_acquisition, simulate_end_references, simulate_references, simulate_start_references, FrameStack, GroundTruth, RawReferences, Simulator,
};
pub use degradation::{simulate_frame, DegradationModel, DegradationParams, Noise, HOT_PIXEL_LEVEL};
pub use edge::{apply_edge_enhancement, edge_alpha_for_distance, laplacian, MIN_TRANSMISSION};
pub use phantom::{Phantom, PhantomKind, Primitive, Support, NESTED_INNER_OFFSET, NESTED_INNER_RADIUS};
pub use projector::{check_field_of_view, forward_project, project_view, ProjectorConfig, Sampling};

/// Convenience wrapper over [`Phantom::analytic`].
pub fn make_phantom(
    kind: PhantomKind,
    grid_size: usize,
    mu: f64,
    radius_fraction: f64,
    grid_spacing_mm: f64,
) -> crate::Result<Phantom> {
    Phantom::analytic(kind, grid_size, mu, radius_fraction, grid_spacing_mm)
}
