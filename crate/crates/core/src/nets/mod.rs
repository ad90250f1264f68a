//! Stage-partitioned networks and the student-side feature transform.

pub mod layers;
pub mod registry;
mod stagenet;
mod transform;

pub use layers::{apply_norm_updates, BatchNorm2d, Conv2d, Linear, Mode, NormUpdate, Session};
pub use registry::{arch, arch_names, build_pair, summarize, ArchSummary};
pub use stagenet::{ArchSpec, StageNet, StageVars};
pub use transform::{review_pairs, same_stage_pairs, StudentTransform, TransformBank};
