use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{elbo_loss, freeze_gate, AnnealState, CheckpointMeta, CheckpointPaths, OptimizerKind, Stage, TrainConfig};
use crate::dataset::{Corpus, PartGraph, Split};
use crate::nn::{adam, rng_stream, Adagrad, Adam, ParamStore};
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;
const EVAL_STREAM: u64 = 6;

/// A corpus with its part graphs built once up front.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub graphs: Vec<PartGraph>,
}

impl<'a> TrainData<'a> {
    pub fn new(corpus: &'a Corpus) -> Result<Self> {
        let graphs = (0..corpus.len()).map(|i| corpus.graph(i)).collect::<Result<_>>()?;
        Ok(TrainData { corpus, graphs })
    }

    /// Training indices; an unsplit corpus trains on everything.
    pub fn train_indices(&self) -> Vec<usize> {
        if self.corpus.splits.iter().all(Option::is_none) {
            (0..self.corpus.len()).collect()
        } else {
            self.corpus.indices(Split::Train)
        }
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.corpus.indices(Split::Val)
    }
}

/// A model trainable by [`train_stage`].
pub trait StageModel {
    fn stage(&self) -> Stage;
    fn store(&self) -> &ParamStore;
    fn checkpoint_meta(&self, data: &TrainData) -> CheckpointMeta;
    /// Per-sample reconstruction and KL terms for `batch`, each `(B,)`.
    /// Models without a latent return zeros for the KL term.
    fn losses(&self, data: &TrainData, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)>;
}

/// One JSON line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub train_recon: f64,
    pub val_recon: f64,
    pub kl: f64,
    pub lambda: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best: Option<CheckpointPaths>,
    pub last: Option<CheckpointPaths>,
    pub anneal: AnnealState,
}

enum Opt {
    Adam(Adam),
    Adagrad(Adagrad),
}

impl Opt {
    fn new(kind: OptimizerKind, store: &ParamStore, lr: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Adam => Opt::Adam(adam(store.vars(), lr)?),
            OptimizerKind::Adagrad => Opt::Adagrad(Adagrad::new(store.vars(), lr)?),
        })
    }

    fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        match self {
            Opt::Adam(o) => o.backward_step(loss)?,
            Opt::Adagrad(o) => o.backward_step(loss)?,
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn mean(t: &Tensor) -> Result<f64> {
    scalar(&t.mean_all()?)
}

#[derive(Default)]
struct Running {
    recon: f64,
    kl: f64,
    n: usize,
}

impl Running {
    fn add(&mut self, recon: f64, kl: f64, n: usize) {
        self.recon += recon * n as f64;
        self.kl += kl * n as f64;
        self.n += n;
    }

    fn means(&self) -> (f64, f64) {
        let n = self.n.max(1) as f64;
        (self.recon / n, self.kl / n)
    }
}

pub(crate) fn write_divergence_dump(
    out_dir: Option<&Path>,
    stage: Stage,
    epoch: usize,
    batch_no: usize,
    indices: &[usize],
    details: serde_json::Value,
) -> Error {
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let dump: PathBuf = dir.join(format!("{}-divergence-e{epoch}-b{batch_no}.json", stage.name()));
    let body = serde_json::json!({
        "stage": stage.name(),
        "epoch": epoch,
        "batch": batch_no,
        "instances": indices,
        "details": details,
    });
    if let Err(e) = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&dump, body.to_string())) {
        log::error!("could not write divergence dump {}: {e}", dump.display());
    }
    Error::Divergence {
        epoch,
        batch: batch_no,
        dump,
    }
}

fn evaluate<M: StageModel + ?Sized>(
    model: &M,
    data: &TrainData,
    idx: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = rng_stream(seed, EVAL_STREAM);
    let mut run = Running::default();
    for chunk in idx.chunks(batch_size) {
        let (recon, kl) = model.losses(data, chunk, &mut rng)?;
        run.add(mean(&recon)?, mean(&kl)?, chunk.len());
    }
    Ok(run.means())
}

/// Trains `model` in place.
///
/// Batches follow a seeded shuffle per epoch, and the KL weight follows
/// [`super::cyclic_beta`] per optimizer step. Once per epoch the gap between
/// the validation and training objectives drives [`freeze_gate`]. When
/// `out_dir` is given, a JSON-lines metric log and `best` and `last`
/// checkpoints are written there.
pub fn train_stage<M: StageModel + ?Sized>(
    model: &M,
    data: &TrainData,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let stage = model.stage();
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Config("no training instances".into()));
    }
    let val = data.val_indices();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let cycle_length = (total_steps / config.anneal.cycles).max(1);
    let mut anneal = AnnealState::new(cycle_length, config.anneal.lambda_max, config.anneal.threshold);
    let mut opt = Opt::new(config.optimizer, model.store(), config.learning_rate)?;
    let mut shuffle_rng = rng_stream(config.seed, SHUFFLE_STREAM);
    let mut noise_rng = rng_stream(config.seed, NOISE_STREAM);

    let mut meta = model.checkpoint_meta(data);
    let metrics_path = out_dir.map(|d| d.join(format!("{}-metrics.jsonl", stage.name())));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut metrics_file = match &metrics_path {
        Some(p) => Some(std::fs::File::create(p).map_err(Error::io(p))?),
        None => None,
    };

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best = None;
    let mut order = train.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut run = Running::default();
        let mut objective = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let lambda = anneal.lambda;
            let (recon, kl) = model.losses(data, chunk, &mut noise_rng)?;
            let loss = elbo_loss(&recon, &kl, lambda)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(write_divergence_dump(
                    out_dir,
                    stage,
                    epoch,
                    b,
                    chunk,
                    serde_json::json!({"loss": value.to_string(), "lambda": lambda}),
                ));
            }
            let (r, k) = (mean(&recon)?, mean(&kl)?);
            run.add(r, k, chunk.len());
            objective += value * chunk.len() as f64;
            opt.backward_step(&loss)?;
            anneal.tick();
        }
        let (train_recon, train_kl) = run.means();
        let train_total = objective / run.n as f64;
        let (val_recon, val_total) = if val.is_empty() {
            (train_recon, train_total)
        } else {
            let (vr, vk) = evaluate(model, data, &val, config.batch_size, config.seed)?;
            (vr, vr + anneal.lambda * vk)
        };
        anneal = freeze_gate(train_total, val_total, anneal);
        let record = MetricRecord {
            epoch,
            train_recon,
            val_recon,
            kl: train_kl,
            lambda: anneal.lambda,
            frozen: anneal.frozen,
        };
        log::info!(
            "{stage} epoch {epoch}: train {train_recon:.5} val {val_recon:.5} kl {train_kl:.4} lambda {:.3}{}",
            anneal.lambda,
            if anneal.frozen { " (frozen)" } else { "" }
        );
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            let path = metrics_path.as_ref().unwrap();
            writeln!(f, "{line}").map_err(Error::io(path))?;
        }
        metrics.push(record);
        meta.epoch = epoch;
        if val_recon < best_val {
            best_val = val_recon;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                let paths = CheckpointPaths::new(dir, stage, "best");
                meta.save(model.store(), &paths)?;
                best = Some(paths);
            }
        }
    }
    let last = match out_dir {
        Some(dir) => {
            let paths = CheckpointPaths::new(dir, stage, "last");
            meta.save(model.store(), &paths)?;
            Some(paths)
        }
        None => None,
    };
    Ok(TrainReport {
        metrics,
        best_epoch,
        best,
        last,
        anneal,
    })
}
