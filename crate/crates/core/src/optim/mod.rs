//! Losses, Adam, densification and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod losses;
pub mod model;
pub mod train;

pub use adam::{AdamState, LearningRates};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use losses::{loss_color, loss_depth, loss_smooth, loss_total, ssim, LossBreakdown, LossWeights};
pub use model::{Attributes, ColorMode, Heads, Model, ModelConfig};
pub use train::{train, DensifyConfig, DensifyReport, MetricsRow, TrainConfig, TrainData, TrainView, Trainer};
