//! U-Net feature learning against fuzzy membership targets.

pub mod loss;
mod train;
mod unet;

pub use loss::{combo_loss, combo_loss_value, dice_per_class};
pub use train::{evaluate_loss, train_unet, EpochStats, Sample, StopReason, TrainConfig, TrainReport, UNetModel};
pub use unet::{UNet, UNetConfig, UNetOutput};
