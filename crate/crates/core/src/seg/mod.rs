//! UperNet decoder, losses, optimizer, schedule, and the shared
//! fine-tuning loop.

pub mod model;
pub mod optim;
pub mod train;
pub mod upernet;

pub use model::{predict_whole, seg_loss, BackboneKind, SegModel, SegModelConfig};
pub use train::{finetune_loop, load_model, restore_backbone, save_model, FinetuneSummary};
