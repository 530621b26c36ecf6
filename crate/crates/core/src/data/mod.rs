//! Manifests, patch extraction, chronological splits and synthetic data.
pub mod crop;
pub mod manifest;
pub mod split;
pub mod synth;

pub use crop::{extract_patches, rectify_crop, Homography, Patch, PATCH_SIZE};
pub use manifest::{parse_manifest, DatasetManifest, ImageRecord, Label, ParsedManifest, Quad, SpotAnnotation};
pub use split::{leave_one_angle_out, partition_chronological, take_days, DayStream, DayWindow, Split};
pub use synth::{synth_generate, SynthSpec, SynthStyle};
