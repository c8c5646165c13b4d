//! Best-track parsing, IR frame stacks and storm-centred samples.

pub mod frames;
pub mod hurdat2;
pub mod regrid;
pub mod samples;

pub use frames::{read_ir_stack, write_ir_stack, IrFrame, Manifest, ManifestFrame};
pub use hurdat2::{parse_hurdat2, write_hurdat2, Hurdat2Parse, StormTrack, TrackFix};
pub use regrid::{regrid_to_storm, CenteredImage, GridSpec, KM_PER_DEG};
pub use samples::{build_samples, interpolate_center, Sample, SampleConfig, SampleSummary};
