//! Proprioceptive side: stream synchronization, framing, the score VAE,
//! its four training losses and the base/online training loops.

pub mod losses;
pub mod sync;
pub mod train;
pub mod vae;

pub use losses::{
    loss_inc, loss_kl, loss_rec, loss_total, loss_vic, AnchorSet, LossComponents, LossWeights,
    VicTerms,
};
pub use sync::{partition, synchronize, AlignedTickTable, SensorFrame};
pub use train::{
    dataset_loss, grad_check, online_batches, pair_references, record_anchors, vae_train_base,
    vae_train_online, TrainConfig, TrainReport, VaeOptimizer,
};
pub use vae::{decode, encode, encode_batch, LatentEmbedding, VaeConfig, VaeParams};
