use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use super::{kl_gaussian, CheckpointMeta, CheckpointPaths, Stage, StageModel, TrainData};
use crate::boxvae::{boxvae_recon_loss, reparameterize, BoxVae, BoxVaeConfig};
use crate::dataset::PartGraph;
use crate::labelmapvae::{mask_recon_loss, paste_orders, LabelMapConfig, LabelMapVae};
use crate::nn::{normal_tensor, ParamStore};
use crate::Result;

impl StageModel for BoxVae {
    fn stage(&self) -> Stage {
        Stage::BoxVae
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn checkpoint_meta(&self, data: &TrainData) -> CheckpointMeta {
        CheckpointMeta::new(Stage::BoxVae, &data.corpus.schemas, serde_json::to_value(&self.config).unwrap())
    }

    fn losses(&self, data: &TrainData, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let graphs: Vec<&PartGraph> = batch.iter().map(|&i| &data.graphs[i]).collect();
        let gb = self.batch(&graphs)?;
        let eps = normal_tensor(rng, &[batch.len(), self.config.latent], self.dtype())?;
        let (g, out) = self.forward(&gb, &eps)?;
        Ok((boxvae_recon_loss(&out, &gb)?.total, kl_gaussian(&g)?))
    }
}

impl StageModel for LabelMapVae {
    fn stage(&self) -> Stage {
        Stage::LabelMapVae
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn checkpoint_meta(&self, data: &TrainData) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(
            Stage::LabelMapVae,
            &data.corpus.schemas,
            serde_json::to_value(&self.config).unwrap(),
        );
        meta.paste_orders = paste_orders(data.corpus);
        meta
    }

    /// Teacher-forced on ground-truth boxes.
    fn losses(&self, data: &TrainData, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let insts: Vec<_> = batch.iter().map(|&i| &data.corpus.instances[i]).collect();
        let mb = self.batch(&insts)?;
        let g = self.encode(&mb)?;
        let eps = normal_tensor(rng, &[batch.len(), self.config.latent], self.dtype())?;
        let z = reparameterize(&g, &eps)?;
        let logits = self.decode(&z, &mb)?;
        Ok((mask_recon_loss(&logits, &mb.masks, &mb.presence)?, kl_gaussian(&g)?))
    }
}

impl BoxVae {
    pub fn load(paths: &CheckpointPaths) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(paths)?;
        meta.expect_stage(Stage::BoxVae)?;
        let model = BoxVae::new(meta.dims_as::<BoxVaeConfig>()?, 0, DType::F32)?;
        model.store.load(&paths.weights)?;
        Ok((model, meta))
    }
}

impl LabelMapVae {
    pub fn load(paths: &CheckpointPaths) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(paths)?;
        meta.expect_stage(Stage::LabelMapVae)?;
        let model = LabelMapVae::new(meta.dims_as::<LabelMapConfig>()?, 0, DType::F32)?;
        model.store.load(&paths.weights)?;
        Ok((model, meta))
    }
}
