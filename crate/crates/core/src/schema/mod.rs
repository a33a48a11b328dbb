//! Unified trajectory-frame data model.
//!
//! Every other module exchanges [`Frame`]s serialized as one JSON object per
//! line. Matrices are nested row-major arrays and absent optional targets are
//! omitted rather than written as `null`.

mod element;
mod frame;
mod trajectory;
mod validate;

pub use element::{ElementSymbol, UnknownElement, N_ELEMENTS};
pub use frame::{
    canonical_frame_id, canonical_trajectory_id, det3, invert3, Composition, Frame, Functional,
    Mat3, SourceId, Vec3,
};
pub use trajectory::{assemble_trajectories, assemble_trajectories_lenient, AssemblyError, Trajectory};
pub use validate::{validate_frame, RuleId, ValidationReport, Violation};
