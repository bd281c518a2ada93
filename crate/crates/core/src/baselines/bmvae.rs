//! Joint box-and-mask VAE: one latent shared by both decoders.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxvae::{
    boxvae_recon_loss, reparameterize, BoxDecodeOutput, BoxDecoder, BoxEncoder, BoxVaeConfig, GaussianParams,
    GraphBatch, ReconLoss,
};
use crate::dataset::PartGraph;
use crate::labelmapvae::{mask_recon_loss, paste_orders, LabelMapConfig, MaskBatch, MaskDecoder, MaskEncoder, PART_FEATURE};
use crate::nn::{normal_tensor, Linear, ParamStore};
use crate::training::{kl_gaussian, CheckpointMeta, CheckpointPaths, Stage, StageModel, TrainData};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmVaeConfig {
    pub boxes: BoxVaeConfig,
    pub masks: LabelMapConfig,
}

impl BmVaeConfig {
    pub fn new(p_max: usize, num_categories: usize) -> Self {
        BmVaeConfig {
            boxes: BoxVaeConfig::new(p_max, num_categories),
            masks: LabelMapConfig::new(p_max, num_categories),
        }
    }
}

pub struct BmVae {
    pub config: BmVaeConfig,
    pub store: ParamStore,
    pub box_encoder: BoxEncoder,
    pub mask_encoder: MaskEncoder,
    pub mu: Linear,
    pub log_var: Linear,
    pub box_decoder: BoxDecoder,
    pub mask_decoder: MaskDecoder,
}

/// Joint decode of one latent batch.
#[derive(Clone, Debug)]
pub struct BmVaeOutput {
    pub boxes: BoxDecodeOutput,
    /// `(B, p, 2, 64, 64)`
    pub mask_logits: Tensor,
}

/// Per-sample loss parts, each `(B,)`.
#[derive(Clone, Debug)]
pub struct BmVaeLoss {
    pub boxes: ReconLoss,
    pub masks: Tensor,
    pub kl: Tensor,
}

impl BmVaeLoss {
    pub fn recon(&self) -> Result<Tensor> {
        Ok((&self.boxes.total + &self.masks)?)
    }
}

impl BmVae {
    pub fn new(config: BmVaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let joint = config.boxes.hidden + PART_FEATURE;
        Ok(BmVae {
            box_encoder: BoxEncoder::new(&root.pp("box_enc"), &config.boxes)?,
            mask_encoder: MaskEncoder::new(&root.pp("mask_enc"), &config.masks)?,
            mu: Linear::new(&root.pp("mu"), joint, config.boxes.latent)?,
            log_var: Linear::new(&root.pp("log_var"), joint, config.boxes.latent)?,
            box_decoder: BoxDecoder::new(&root.pp("box_dec"), &config.boxes)?,
            mask_decoder: MaskDecoder::new(&root.pp("mask_dec"), &config.masks)?,
            config,
            store,
        })
    }

    pub fn encode(&self, graphs: &GraphBatch, masks: &MaskBatch) -> Result<GaussianParams> {
        let h = Tensor::cat(&[self.box_encoder.features(graphs)?, self.mask_encoder.features(masks)?], 1)?;
        Ok(GaussianParams {
            mu: self.mu.forward(&h)?,
            log_var: self.log_var.forward(&h)?,
        })
    }

    /// The mask decoder is conditioned on the boxes decoded from the same `z`.
    pub fn decode(&self, z: &Tensor, cond: &Tensor, presence: &Tensor, category: &Tensor) -> Result<BmVaeOutput> {
        let boxes = self.box_decoder.forward(z, cond)?;
        let rows = Tensor::cat(&[&presence.unsqueeze(2)?, &boxes.boxes], 2)?;
        let mask_logits = self.mask_decoder.forward(z, &rows, category)?;
        Ok(BmVaeOutput { boxes, mask_logits })
    }

    pub fn forward(&self, graphs: &GraphBatch, masks: &MaskBatch, eps: &Tensor) -> Result<(GaussianParams, BmVaeOutput)> {
        let g = self.encode(graphs, masks)?;
        let z = reparameterize(&g, eps)?;
        let out = self.decode(&z, &graphs.cond, &graphs.presence, &graphs.category)?;
        Ok((g, out))
    }

    pub fn loss(&self, graphs: &GraphBatch, masks: &MaskBatch, eps: &Tensor) -> Result<BmVaeLoss> {
        let (g, out) = self.forward(graphs, masks, eps)?;
        Ok(BmVaeLoss {
            boxes: boxvae_recon_loss(&out.boxes, graphs)?,
            masks: mask_recon_loss(&out.mask_logits, &masks.masks, &masks.presence)?,
            kl: kl_gaussian(&g)?,
        })
    }

    pub fn batches(&self, data: &TrainData, idx: &[usize]) -> Result<(GraphBatch, MaskBatch)> {
        let graphs: Vec<&PartGraph> = idx.iter().map(|&i| &data.graphs[i]).collect();
        let insts: Vec<_> = idx.iter().map(|&i| &data.corpus.instances[i]).collect();
        let m = self.config.boxes.num_categories;
        Ok((
            GraphBatch::new(&graphs, m, self.store.dtype())?,
            MaskBatch::new(&insts, m, self.store.dtype())?,
        ))
    }

    pub fn load(paths: &CheckpointPaths) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(paths)?;
        meta.expect_stage(Stage::BmVae)?;
        let model = BmVae::new(meta.dims_as()?, 0, DType::F32)?;
        model.store.load(&paths.weights)?;
        Ok((model, meta))
    }
}

impl StageModel for BmVae {
    fn stage(&self) -> Stage {
        Stage::BmVae
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn checkpoint_meta(&self, data: &TrainData) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(Stage::BmVae, &data.corpus.schemas, serde_json::to_value(&self.config).unwrap());
        meta.paste_orders = paste_orders(data.corpus);
        meta
    }

    fn losses(&self, data: &TrainData, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let (gb, mb) = self.batches(data, batch)?;
        let eps = normal_tensor(rng, &[batch.len(), self.config.boxes.latent], self.store.dtype())?;
        let l = self.loss(&gb, &mb, &eps)?;
        Ok((l.recon()?, l.kl))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::tests::tiny_corpus;
    use crate::nn::rng_stream;
    use crate::training::elbo_loss;

    #[test]
    fn loss_is_exact_sum_of_parts_and_deterministic() {
        let corpus = tiny_corpus(2, 2);
        let data = TrainData::new(&corpus).unwrap();
        let cfg = BmVaeConfig::new(corpus.schemas.p_max, corpus.schemas.num_categories());
        let m = BmVae::new(cfg, 4, DType::F64).unwrap();
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let (gb, mb) = m.batches(&data, &idx).unwrap();
        let eps = normal_tensor(&mut rng_stream(0, 0), &[idx.len(), 128], DType::F64).unwrap();
        let l = m.loss(&gb, &mb, &eps).unwrap();
        let again = m.loss(&gb, &mb, &eps).unwrap();
        let v = |t: &Tensor| t.to_vec1::<f64>().unwrap();
        assert_eq!(v(&l.recon().unwrap()), v(&again.recon().unwrap()));
        let lambda = 0.3;
        let total = elbo_loss(&l.recon().unwrap(), &l.kl, lambda).unwrap().to_scalar::<f64>().unwrap();
        let (b, mk, k) = (v(&l.boxes.total), v(&l.masks), v(&l.kl));
        let manual: f64 = (0..idx.len()).map(|i| b[i] + mk[i] + lambda * k[i]).sum::<f64>() / idx.len() as f64;
        assert!((total - manual).abs() < 1e-12);
        assert!(total.is_finite());
    }
}
