//! Conditional GAN that maps noise straight to a per-pixel part label map,
//! sampled through a Gumbel-softmax relaxation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gumbel::{gumbel_noise_tensor, gumbel_softmax_tensor, GumbelConfig};
use crate::boxvae::ConditioningVector;
use crate::dataset::NormalizedInstance;
use crate::labelmapvae::{compose_layout, paste_orders, ObjectLayout};
use crate::nn::{normal_tensor, rng_stream, sigmoid, Adagrad, Conv2d, ConvTranspose2d, Linear, ParamStore, Scope};
use crate::training::{write_divergence_dump, CheckpointMeta, CheckpointPaths, Stage, TrainConfig, TrainData};
use crate::{Error, Result};

/// Side length of the generated label map.
pub const GAN_CANVAS: usize = 64;
pub const NOISE_DIM: usize = 64;

const SHUFFLE_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;
const EVAL_STREAM: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgGanConfig {
    pub p_max: usize,
    pub num_categories: usize,
    pub noise_dim: usize,
    #[serde(default)]
    pub gumbel: GumbelConfig,
}

impl CgGanConfig {
    pub fn new(p_max: usize, num_categories: usize) -> Self {
        CgGanConfig {
            p_max,
            num_categories,
            noise_dim: NOISE_DIM,
            gumbel: GumbelConfig::default(),
        }
    }

    /// Background plus one class per part slot.
    pub fn classes(&self) -> usize {
        self.p_max + 1
    }

    pub fn cond_dim(&self) -> usize {
        self.num_categories + self.p_max
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub fc: Linear,
    pub deconvs: [ConvTranspose2d; 3],
}

impl Generator {
    pub fn new(scope: &Scope, cfg: &CgGanConfig) -> Result<Self> {
        Ok(Generator {
            fc: Linear::new(&scope.pp("fc"), cfg.noise_dim + cfg.cond_dim(), 64 * 8 * 8)?,
            deconvs: [
                ConvTranspose2d::new(&scope.pp("deconv0"), 64, 32, 4, 2, 1)?,
                ConvTranspose2d::new(&scope.pp("deconv1"), 32, 16, 4, 2, 1)?,
                ConvTranspose2d::new(&scope.pp("deconv2"), 16, cfg.classes(), 4, 2, 1)?,
            ],
        })
    }

    /// Per-pixel class logits `(B, C, 64, 64)`.
    pub fn logits(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        let mut x = self.fc.forward(&Tensor::cat(&[z, cond], 1)?)?.relu()?.reshape((b, 64, 8, 8))?;
        for (i, d) in self.deconvs.iter().enumerate() {
            x = d.forward(&x)?;
            if i + 1 < self.deconvs.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: [Conv2d; 3],
    pub fc: Linear,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(scope: &Scope, cfg: &CgGanConfig) -> Result<Self> {
        Ok(Discriminator {
            convs: [
                Conv2d::new(&scope.pp("conv0"), cfg.classes(), 16, 4, 2, 1)?,
                Conv2d::new(&scope.pp("conv1"), 16, 32, 4, 2, 1)?,
                Conv2d::new(&scope.pp("conv2"), 32, 64, 4, 2, 1)?,
            ],
            fc: Linear::new(&scope.pp("fc"), 64 * 8 * 8, 128)?,
            out: Linear::new(&scope.pp("out"), 128 + cfg.cond_dim(), 1)?,
        })
    }

    /// Real-probability logits `(B,)` for soft label maps `(B, C, 64, 64)`.
    pub fn logits(&self, maps: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut x = maps.clone();
        for c in &self.convs {
            x = candle_nn::ops::leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        let h = candle_nn::ops::leaky_relu(&self.fc.forward(&x.flatten_from(1)?)?, 0.2)?;
        Ok(self.out.forward(&Tensor::cat(&[&h, cond], 1)?)?.squeeze(1)?)
    }
}

/// Mean binary cross-entropy of logits against a constant target.
fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    // -[t ln s(x) + (1-t) ln(1-s(x))] = softplus(x) - t x
    let sp = crate::nn::softplus(logits)?;
    Ok((sp - (logits * target)?)?.mean_all()?)
}

/// `0.5 (BCE(real, 1) + BCE(fake, 0))`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok(((bce_with_logits(real_logits, 1.0)? + bce_with_logits(fake_logits, 0.0)?)? * 0.5)?)
}

/// Non-saturating generator loss `BCE(fake, 1)`.
pub fn generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    bce_with_logits(fake_logits, 1.0)
}

pub struct CgGan {
    pub config: CgGanConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

/// One alternating update's losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub generator: f64,
    pub discriminator: f64,
}

/// One JSON line of the adversarial metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanMetricRecord {
    pub epoch: usize,
    pub generator: f64,
    pub discriminator: f64,
    pub val_generator: f64,
    pub val_discriminator: f64,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct GanTrainReport {
    pub metrics: Vec<GanMetricRecord>,
    pub last: Option<CheckpointPaths>,
}

/// Ground-truth label maps and conditioning for a batch.
pub struct GanBatch {
    /// `(B, C, 64, 64)` one-hot
    pub real: Tensor,
    /// `(B, M + p)`
    pub cond: Tensor,
}

fn one_hot_maps(layouts: &[ObjectLayout], classes: usize, dtype: DType) -> Result<Tensor> {
    let n = GAN_CANVAS * GAN_CANVAS;
    let mut v = vec![0f32; layouts.len() * classes * n];
    for (i, l) in layouts.iter().enumerate() {
        for (px, &lab) in l.labels.iter().enumerate() {
            let c = lab as usize;
            if c >= classes {
                return Err(Error::Shape(format!("label {c} outside {classes} classes")));
            }
            v[(i * classes + c) * n + px] = 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (layouts.len(), classes, GAN_CANVAS, GAN_CANVAS), &Device::Cpu)?.to_dtype(dtype)?)
}

impl CgGan {
    pub fn new(config: CgGanConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.gumbel.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        Ok(CgGan {
            generator: Generator::new(&root.pp("gen"), &config)?,
            discriminator: Discriminator::new(&root.pp("disc"), &config)?,
            config,
            store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.store
            .named_vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("gen.")
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("disc.")
    }

    pub fn batch(&self, instances: &[&NormalizedInstance], orders: &BTreeMap<usize, Vec<usize>>) -> Result<GanBatch> {
        let layouts: Vec<ObjectLayout> = instances
            .iter()
            .map(|inst| {
                let order = orders.get(&inst.category_id).map_or(&[][..], Vec::as_slice);
                compose_layout(inst.category_id, &inst.part_masks, &inst.part_boxes, order, GAN_CANVAS, GAN_CANVAS)
            })
            .collect();
        let conds: Vec<ConditioningVector> = instances
            .iter()
            .map(|i| ConditioningVector::new(i.category_id, (0..i.p_max()).map(|k| i.is_present(k) as u8).collect()))
            .collect();
        Ok(GanBatch {
            real: one_hot_maps(&layouts, self.config.classes(), self.dtype())?,
            cond: crate::boxvae::cond_tensor(&conds, self.config.num_categories, self.dtype())?,
        })
    }

    /// Soft samples `(B, C, 64, 64)`; each pixel is a simplex point.
    pub fn sample_soft(&self, z: &Tensor, cond: &Tensor, noise: &Tensor, tau: f64) -> Result<Tensor> {
        gumbel_softmax_tensor(&self.generator.logits(z, cond)?, noise, tau, 1)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, b: usize) -> Result<(Tensor, Tensor)> {
        let z = normal_tensor(rng, &[b, self.config.noise_dim], self.dtype())?;
        let shape = [b, self.config.classes(), GAN_CANVAS, GAN_CANVAS];
        let g = gumbel_noise_tensor(rng, &shape, self.dtype())?;
        Ok((z, g))
    }

    /// Losses without any update.
    pub fn losses(&self, batch: &GanBatch, rng: &mut ChaCha8Rng, tau: f64) -> Result<(Tensor, Tensor)> {
        let (z, g) = self.draw(rng, batch.cond.dim(0)?)?;
        let fake = self.sample_soft(&z, &batch.cond, &g, tau)?;
        let d_real = self.discriminator.logits(&batch.real, &batch.cond)?;
        let d_fake = self.discriminator.logits(&fake, &batch.cond)?;
        Ok((generator_loss(&d_fake)?, discriminator_loss(&d_real, &d_fake)?))
    }

    /// Hard sample: per-pixel argmax of the Gumbel-perturbed logits.
    pub fn generate(&self, cond: &ConditioningVector, rng: &mut ChaCha8Rng) -> Result<ObjectLayout> {
        let c = crate::boxvae::cond_tensor(std::slice::from_ref(cond), self.config.num_categories, self.dtype())?;
        let (z, g) = self.draw(rng, 1)?;
        let logits = (self.generator.logits(&z, &c)? + g)?;
        let labels = logits.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
        let mut layout = ObjectLayout::blank(cond.category_id, GAN_CANVAS, GAN_CANVAS);
        layout.labels = labels.into_iter().map(|l| l as u8).collect();
        Ok(layout)
    }

    pub fn load(paths: &CheckpointPaths) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(paths)?;
        meta.expect_stage(Stage::CgGan)?;
        let model = CgGan::new(meta.dims_as()?, 0, DType::F32)?;
        model.store.load(&paths.weights)?;
        Ok((model, meta))
    }
}

/// Adagrad states for both players.
pub struct GanOptimizers {
    pub generator: Adagrad,
    pub discriminator: Adagrad,
}

impl GanOptimizers {
    pub fn new(model: &CgGan, lr: f64) -> Result<Self> {
        Ok(GanOptimizers {
            generator: Adagrad::new(model.generator_vars(), lr)?,
            discriminator: Adagrad::new(model.discriminator_vars(), lr)?,
        })
    }
}

/// One discriminator update on a detached fake batch, then one generator
/// update on a fresh fake batch.
pub fn cggan_train_step(
    model: &CgGan,
    batch: &GanBatch,
    opt: &mut GanOptimizers,
    rng: &mut ChaCha8Rng,
    tau: f64,
) -> Result<GanLosses> {
    let b = batch.cond.dim(0)?;
    let (z, g) = model.draw(rng, b)?;
    let fake = model.sample_soft(&z, &batch.cond, &g, tau)?.detach();
    let d_real = model.discriminator.logits(&batch.real, &batch.cond)?;
    let d_fake = model.discriminator.logits(&fake, &batch.cond)?;
    let d_loss = discriminator_loss(&d_real, &d_fake)?;
    let discriminator = d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    opt.discriminator.backward_step(&d_loss)?;

    let (z, g) = model.draw(rng, b)?;
    let fake = model.sample_soft(&z, &batch.cond, &g, tau)?;
    let g_loss = generator_loss(&model.discriminator.logits(&fake, &batch.cond)?)?;
    let generator = g_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    opt.generator.backward_step(&g_loss)?;
    Ok(GanLosses { generator, discriminator })
}

/// Adversarial training loop with the same seeding, metric-log and
/// checkpoint layout as the VAE stages.
pub fn train_cggan(model: &CgGan, data: &TrainData, config: &TrainConfig, out_dir: Option<&Path>) -> Result<GanTrainReport> {
    config.validate()?;
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Config("no training instances".into()));
    }
    let val = data.val_indices();
    let orders = paste_orders(data.corpus);
    let mut opt = GanOptimizers::new(model, config.learning_rate)?;
    let mut shuffle_rng = rng_stream(config.seed, SHUFFLE_STREAM);
    let mut noise_rng = rng_stream(config.seed, NOISE_STREAM);
    let mut meta = CheckpointMeta::new(Stage::CgGan, &data.corpus.schemas, serde_json::to_value(&model.config)?);
    meta.paste_orders = orders.clone();

    let metrics_path = out_dir.map(|d| d.join(format!("{}-metrics.jsonl", Stage::CgGan.name())));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut metrics_file = match &metrics_path {
        Some(p) => Some(std::fs::File::create(p).map_err(Error::io(p))?),
        None => None,
    };
    let instances = |idx: &[usize]| -> Vec<&NormalizedInstance> { idx.iter().map(|&i| &data.corpus.instances[i]).collect() };

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order = train.clone();
    for epoch in 0..config.epochs {
        let tau = model.config.gumbel.tau_at(epoch, config.epochs);
        order.shuffle(&mut shuffle_rng);
        let (mut g_sum, mut d_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = model.batch(&instances(chunk), &orders)?;
            let l = cggan_train_step(model, &batch, &mut opt, &mut noise_rng, tau)?;
            if !l.generator.is_finite() || !l.discriminator.is_finite() {
                return Err(write_divergence_dump(
                    out_dir,
                    Stage::CgGan,
                    epoch,
                    b,
                    chunk,
                    serde_json::json!({"generator": l.generator.to_string(), "discriminator": l.discriminator.to_string(), "tau": tau}),
                ));
            }
            g_sum += l.generator * chunk.len() as f64;
            d_sum += l.discriminator * chunk.len() as f64;
        }
        let n = train.len() as f64;
        let (mut vg, mut vd) = (0.0, 0.0);
        if !val.is_empty() {
            let mut rng = rng_stream(config.seed, EVAL_STREAM);
            for chunk in val.chunks(config.batch_size) {
                let batch = model.batch(&instances(chunk), &orders)?;
                let (g, d) = model.losses(&batch, &mut rng, tau)?;
                vg += g.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
                vd += d.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            }
            vg /= val.len() as f64;
            vd /= val.len() as f64;
        }
        let record = GanMetricRecord {
            epoch,
            generator: g_sum / n,
            discriminator: d_sum / n,
            val_generator: vg,
            val_discriminator: vd,
            tau,
        };
        log::info!(
            "cggan epoch {epoch}: generator {:.5} discriminator {:.5} tau {tau:.3}",
            record.generator,
            record.discriminator
        );
        if let Some(f) = metrics_file.as_mut() {
            let path = metrics_path.as_ref().unwrap();
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(Error::io(path))?;
        }
        metrics.push(record);
        meta.epoch = epoch;
    }
    let last = match out_dir {
        Some(dir) => {
            let paths = CheckpointPaths::new(dir, Stage::CgGan, "last");
            meta.save(&model.store, &paths)?;
            Some(paths)
        }
        None => None,
    };
    Ok(GanTrainReport { metrics, last })
}

/// Sigmoid of discriminator logits, for inspection.
pub fn discriminator_probs(logits: &Tensor) -> Result<Tensor> {
    sigmoid(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::tests::tiny_corpus;

    #[test]
    fn half_confidence_costs_ln2() {
        let zeros = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let d = discriminator_loss(&zeros, &zeros).unwrap().to_scalar::<f64>().unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-12);
        let p = discriminator_probs(&zeros).unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| *v == 0.5));
        let x = Tensor::new(&[2.0f64, -3.0], &Device::Cpu).unwrap();
        let g = generator_loss(&x).unwrap().to_scalar::<f64>().unwrap();
        let want = ((1.0 + (-2f64).exp()).ln() + (1.0 + 3f64.exp()).ln()) / 2.0;
        assert!((g - want).abs() < 1e-12);
    }

    #[test]
    fn soft_samples_are_pixel_simplices() {
        let m = CgGan::new(CgGanConfig::new(3, 2), 1, DType::F32).unwrap();
        let mut rng = rng_stream(2, 0);
        let (z, g) = m.draw(&mut rng, 2).unwrap();
        let cond = Tensor::new(&[[1f32, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        let s = m.sample_soft(&z, &cond, &g, 1.0).unwrap();
        assert_eq!(s.dims(), &[2, 4, 64, 64]);
        let dev = (s.sum(1).unwrap() - 1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(dev < 1e-6);
        assert!(s.min_all().unwrap().to_scalar::<f32>().unwrap() >= 0.0);
        let again = m.sample_soft(&z, &cond, &g, 1.0).unwrap();
        assert_eq!(
            (s - again).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(),
            0.0
        );
    }

    #[test]
    fn train_step_is_finite_and_seeded() {
        let corpus = tiny_corpus(2, 2);
        let data = TrainData::new(&corpus).unwrap();
        let run = || {
            let m = CgGan::new(CgGanConfig::new(corpus.schemas.p_max, 2), 3, DType::F32).unwrap();
            let tc = TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..TrainConfig::preset(Stage::CgGan)
            };
            train_cggan(&m, &data, &tc, None).unwrap().metrics
        };
        let a = run();
        assert!(a[0].generator.is_finite() && a[0].discriminator.is_finite());
        assert_eq!(a, run());
    }
}
