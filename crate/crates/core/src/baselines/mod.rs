//! Comparison models: a joint box-and-mask VAE, a box-then-shape LSTM with
//! mixture box heads, and a Gumbel-softmax conditional GAN.

mod bmvae;
mod bslstm;
mod cggan;
mod gumbel;

pub use bmvae::{BmVae, BmVaeConfig, BmVaeLoss, BmVaeOutput};
pub use bslstm::{
    gmm_nll_tensor, sample_box_from_gmm, BsLstm, BsLstmConfig, BsLstmLoss, GMMBoxParams, GmmHeads, BSLSTM_HIDDEN,
    GMM_COMPONENTS, LOG_SCALE_MAX, LOG_SCALE_MIN,
};
pub use cggan::{
    cggan_train_step, discriminator_loss, discriminator_probs, generator_loss, train_cggan, CgGan, CgGanConfig,
    Discriminator, GanBatch, GanLosses, GanMetricRecord, GanOptimizers, GanTrainReport, Generator, GAN_CANVAS,
    NOISE_DIM,
};
pub use gumbel::{
    gumbel_argmax, gumbel_noise, gumbel_noise_tensor, gumbel_softmax, gumbel_softmax_tensor, one_hot_argmax,
    GumbelConfig,
};
