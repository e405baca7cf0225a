//! Vector-quantized autoencoder.
//!
//! One instance compresses MRI slices (shared by pre and post), a second one
//! compresses GTV masks into a latent space of identical shape so the three
//! latents can be concatenated on the channel axis.

mod latent;
mod loss;
mod model;
mod quantize;
mod train;

pub use latent::LatentGrid;
pub use loss::{straight_through, vqvae_loss, VqLoss};
pub use model::{CodebookInit, CodebookUpdate, VqTarget, VqVae, VqVaeConfig};
pub use quantize::{nearest_code, quantize, quantize_tensor};
pub use train::{train_vqvae, VqEpochMetrics, VqTrainReport};

pub const CHECKPOINT_KIND: &str = "vqvae";
