//! Dice, Hausdorff distance and mean surface distance in microns.

pub mod evaluate;
pub mod mask;
pub mod oracle;
pub mod overlap;
pub mod surface;

pub use evaluate::{aggregate, evaluate_model, Evaluation, MetricRecord, MetricTriple, PatchMetrics, AVERAGE_LABEL};
pub use mask::BinaryMask;
pub use overlap::dice;
pub use surface::{extract_surface, hausdorff, mean_surface_distance};
