//! Click-centered VOI extraction, lesion-shift augmentation and
//! click-robustness evaluation for 3D CT lesion segmentation.
//!
//! Volumes are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

pub mod clicks;
pub mod lesions;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod segmenter;
pub mod stats;
pub mod voi;
pub mod volume;

pub use clicks::{generate_shifted_samples, sample_click_points, ClickPlan, ShiftParams};
pub use lesions::{extract_instances, label_components, lesion_center, ClickOrigin, ClickPoint, LesionInstance};
pub use metrics::{dice, mean_pairwise_dice, robustness, RobustnessTriple};
pub use neighborhood::Connectivity;
pub use segmenter::{ExternalSegmenter, RegionGrower, Segmenter, SegmenterRef};
pub use stats::{bonferroni, paired_ttest, TestResult};
pub use voi::{crop_voi, isolate_central_lesion, place_back, VoiConfig, VoiSample};
pub use volume::{read_volume, write_volume, Dims, Volume3D, VolumeKind};
