//! Reconstruction and generation metrics.

use serde::{Deserialize, Serialize};

use crate::boxvae::BoxVae;
use crate::dataset::{Corpus, PartGraph};
use crate::geometry::BBox;
use crate::pipeline::{generate_layout, GenerationRequest, LayoutModel};
use crate::{Execution, Result};

/// Reconstruction quality of the box stage from posterior means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// Fraction of schema part slots whose thresholded presence is correct.
    pub presence_accuracy: f64,
    /// Mean IoU over ground-truth present parts.
    pub mean_iou: f64,
    pub instances: usize,
}

#[derive(Default)]
struct ReconCounts {
    slots: usize,
    correct: usize,
    iou_sum: f64,
    iou_n: usize,
}

fn recon_chunk(model: &BoxVae, corpus: &Corpus, graphs: &[PartGraph], idx: &[usize]) -> Result<ReconCounts> {
    let refs: Vec<&PartGraph> = idx.iter().map(|&i| &graphs[i]).collect();
    let out = model.reconstruct(&model.batch(&refs)?)?;
    let mut c = ReconCounts::default();
    for (row, &i) in idx.iter().enumerate() {
        let d = out.sample(row)?;
        let g = &graphs[i];
        let n = corpus.schemas.get(g.category_id)?.num_parts();
        for k in 0..n {
            c.slots += 1;
            c.correct += ((d.presence[k] >= 0.5) == g.is_present(k)) as usize;
            if g.is_present(k) {
                c.iou_sum += g.bbox(k).iou(&BBox::from_decoded(d.boxes[k]));
                c.iou_n += 1;
            }
        }
    }
    Ok(c)
}

/// Encodes and decodes the instances `idx` of `corpus` in batches of
/// `batch_size`, spreading batches over `exec`.
pub fn reconstruction_metrics(
    model: &BoxVae,
    corpus: &Corpus,
    idx: &[usize],
    batch_size: usize,
    exec: Execution,
) -> Result<ReconMetrics> {
    let graphs = (0..corpus.len()).map(|i| corpus.graph(i)).collect::<Result<Vec<_>>>()?;
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let parts = exec.map(&chunks, |_, ch| recon_chunk(model, corpus, &graphs, ch));
    let mut total = ReconCounts::default();
    for p in parts {
        let p = p?;
        total.slots += p.slots;
        total.correct += p.correct;
        total.iou_sum += p.iou_sum;
        total.iou_n += p.iou_n;
    }
    Ok(ReconMetrics {
        presence_accuracy: total.correct as f64 / total.slots.max(1) as f64,
        mean_iou: total.iou_sum / total.iou_n.max(1) as f64,
        instances: idx.len(),
    })
}

/// Requested-part coverage and containment of prior generations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub requested: usize,
    /// Requested parts with at least one labelled pixel.
    pub present: usize,
    pub requested_present_rate: f64,
    pub containment_rate: f64,
    pub layouts: usize,
}

pub fn generation_metrics(model: &LayoutModel, requests: &[GenerationRequest], exec: Execution) -> Result<GenerationMetrics> {
    let results = exec.map(requests, |_, req| -> Result<(usize, usize, bool)> {
        let g = generate_layout(model, req)?;
        let (_, parts) = req.validated_parts(&model.schemas)?;
        let present = parts.iter().filter(|&&k| g.layout.part_pixels(k) > 0).count();
        Ok((parts.len(), present, g.layout.satisfies_containment()))
    });
    let (mut requested, mut present, mut contained) = (0, 0, 0);
    for r in results {
        let (a, b, c) = r?;
        requested += a;
        present += b;
        contained += c as usize;
    }
    Ok(GenerationMetrics {
        requested,
        present,
        requested_present_rate: present as f64 / requested.max(1) as f64,
        containment_rate: contained as f64 / requests.len().max(1) as f64,
        layouts: requests.len(),
    })
}
