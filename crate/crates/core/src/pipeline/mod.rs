//! End-to-end generation and the interactive editing operations.
//!
//! Random streams per seed: the box latent uses stream 0, the mask latent
//! stream 1, and the two posterior samples of [`add_part`] streams 2 and 3.
//! Every operation is a pure function of its inputs and the loaded weights.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::boxvae::{cond_tensor, sample_latent, BoxVae, ConditioningVector};
use crate::dataset::{build_part_graph, DilatedOverlap, NormalizedInstance, PartGraph, PartSchema, SchemaSet};
use crate::geometry::BBox;
use crate::labelmapvae::{compose_layout, BoxCondition, LabelMapVae, ObjectLayout, CANVAS_SIZE};
use crate::nn::{normal_tensor, rng_stream};
use crate::raster::Raster;
use crate::training::CheckpointPaths;
use crate::{Error, Result};

const BOX_STREAM: u64 = 0;
const MASK_STREAM: u64 = 1;
const ADD_BOX_STREAM: u64 = 2;
const ADD_MASK_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub category_id: usize,
    /// Requested canonical part indices.
    pub parts: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Boxes that replace the decoded ones.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fixed_boxes: BTreeMap<usize, BBox>,
}

impl GenerationRequest {
    pub fn new(category_id: usize, parts: Vec<usize>, seed: u64) -> Self {
        GenerationRequest {
            category_id,
            parts,
            seed,
            fixed_boxes: BTreeMap::new(),
        }
    }

    /// Builds a request from a category key (name or id) and part names.
    pub fn from_names(schemas: &SchemaSet, category: &str, parts: &[&str], seed: u64) -> Result<Self> {
        let schema = schemas.resolve(category)?;
        let parts = parts
            .iter()
            .map(|name| {
                schema
                    .part_index(name)
                    .ok_or_else(|| Error::Config(format!("category {} has no part {name:?}", schema.category_name)))
            })
            .collect::<Result<_>>()?;
        Ok(GenerationRequest::new(schema.category_id, parts, seed))
    }

    /// Sorted, deduplicated part list after checking it against the schema.
    pub fn validated_parts<'s>(&self, schemas: &'s SchemaSet) -> Result<(&'s PartSchema, Vec<usize>)> {
        let schema = schemas.get(self.category_id)?;
        let mut parts = self.parts.clone();
        parts.sort_unstable();
        parts.dedup();
        if let Some(k) = parts.iter().find(|&&k| k >= schema.num_parts()) {
            return Err(Error::Config(format!("category {} has no part {k}", schema.category_name)));
        }
        if let Some(k) = self.fixed_boxes.keys().find(|k| !parts.contains(k)) {
            return Err(Error::Config(format!("fixed box for unrequested part {k}")));
        }
        Ok((schema, parts))
    }
}

/// A user edit on a generated layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditCommand {
    SetBox { part: usize, bbox: BBox },
    AddPart { part: usize },
    RemovePart { part: usize },
}

/// Output of every pipeline operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub category_id: usize,
    pub seed: u64,
    pub boxes: BTreeMap<usize, BBox>,
    /// Box-local masks.
    pub masks: BTreeMap<usize, Raster>,
    pub layout: ObjectLayout,
    /// Requested parts whose decoded presence fell below 0.5.
    #[serde(default)]
    pub forced: Vec<usize>,
    #[serde(default)]
    pub notices: Vec<String>,
}

impl Generation {
    pub fn parts(&self) -> Vec<usize> {
        self.boxes.keys().copied().collect()
    }

    pub fn instance(&self, p_max: usize) -> NormalizedInstance {
        let mut presence = vec![0u8; p_max];
        for &k in self.boxes.keys() {
            presence[k] = 1;
        }
        NormalizedInstance {
            category_id: self.category_id,
            part_boxes: self.boxes.clone(),
            part_masks: self.masks.clone(),
            presence,
        }
    }

    /// The part graph of the current boxes.
    pub fn graph(&self, schemas: &SchemaSet) -> Result<PartGraph> {
        build_part_graph(
            &self.instance(schemas.p_max),
            schemas.get(self.category_id)?,
            &DilatedOverlap::default(),
        )
    }
}

/// Both stages plus what is needed to compose their output.
pub struct LayoutModel {
    pub boxvae: BoxVae,
    pub labelmap: LabelMapVae,
    pub schemas: SchemaSet,
    pub paste_orders: BTreeMap<usize, Vec<usize>>,
    pub canvas: usize,
}

impl LayoutModel {
    pub fn from_parts(
        boxvae: BoxVae,
        labelmap: LabelMapVae,
        schemas: SchemaSet,
        paste_orders: BTreeMap<usize, Vec<usize>>,
    ) -> Result<Self> {
        let (p, m) = (schemas.p_max, schemas.num_categories());
        if (boxvae.config.p_max, boxvae.config.num_categories) != (p, m)
            || (labelmap.config.p_max, labelmap.config.num_categories) != (p, m)
        {
            return Err(Error::Checkpoint(format!(
                "model dimensions do not match a schema with {m} categories and {p} parts"
            )));
        }
        Ok(LayoutModel {
            boxvae,
            labelmap,
            schemas,
            paste_orders,
            canvas: CANVAS_SIZE,
        })
    }

    /// Loads both stages; their schemas must agree.
    pub fn load(box_ckpt: &Path, mask_ckpt: &Path) -> Result<Self> {
        let (boxvae, bm) = BoxVae::load(&CheckpointPaths::from_any(box_ckpt))?;
        let (labelmap, lm) = LabelMapVae::load(&CheckpointPaths::from_any(mask_ckpt))?;
        if bm.schema_hash != lm.schema_hash {
            return Err(Error::Checkpoint(format!(
                "box checkpoint schema {} differs from mask checkpoint schema {}",
                &bm.schema_hash[..12.min(bm.schema_hash.len())],
                &lm.schema_hash[..12.min(lm.schema_hash.len())]
            )));
        }
        LayoutModel::from_parts(boxvae, labelmap, lm.schemas, lm.paste_orders)
    }

    fn dtype(&self) -> DType {
        self.boxvae.dtype()
    }

    fn presence_vec(&self, parts: &[usize]) -> Vec<u8> {
        let mut v = vec![0u8; self.schemas.p_max];
        for &k in parts {
            v[k] = 1;
        }
        v
    }

    fn order(&self, category_id: usize) -> &[usize] {
        self.paste_orders.get(&category_id).map_or(&[], Vec::as_slice)
    }

    fn compose(&self, category_id: usize, masks: &BTreeMap<usize, Raster>, boxes: &BTreeMap<usize, BBox>) -> ObjectLayout {
        compose_layout(category_id, masks, boxes, self.order(category_id), self.canvas, self.canvas)
    }

    /// Masks for `boxes` from a prior sample on the mask stream of `seed`.
    fn prior_masks(&self, category_id: usize, boxes: &BTreeMap<usize, BBox>, seed: u64) -> Result<BTreeMap<usize, Raster>> {
        if boxes.is_empty() {
            return Ok(BTreeMap::new());
        }
        let cond = BoxCondition {
            category_id,
            p_max: self.schemas.p_max,
            boxes: boxes.clone(),
        };
        let batch = self.labelmap.condition_batch(&[&cond])?;
        let z = normal_tensor(&mut rng_stream(seed, MASK_STREAM), &[1, self.labelmap.config.latent], self.dtype())?;
        let logits = self.labelmap.decode(&z, &batch)?;
        let present: Vec<usize> = boxes.keys().copied().collect();
        LabelMapVae::masks_from_logits(&logits, 0, &present)
    }

    fn finish(
        &self,
        category_id: usize,
        seed: u64,
        boxes: BTreeMap<usize, BBox>,
        masks: BTreeMap<usize, Raster>,
    ) -> Generation {
        let layout = self.compose(category_id, &masks, &boxes);
        Generation {
            category_id,
            seed,
            boxes,
            masks,
            layout,
            forced: Vec::new(),
            notices: Vec::new(),
        }
    }
}

/// Samples boxes from the prior under the requested part list, then masks
/// conditioned on those boxes, and composes the label map.
///
/// The requested list is authoritative: every requested part appears with
/// its decoded box even when its decoded presence is below 0.5.
pub fn generate_layout(model: &LayoutModel, req: &GenerationRequest) -> Result<Generation> {
    let (_, parts) = req.validated_parts(&model.schemas)?;
    if parts.is_empty() {
        return Ok(model.finish(req.category_id, req.seed, BTreeMap::new(), BTreeMap::new()));
    }
    let cv = ConditioningVector::new(req.category_id, model.presence_vec(&parts));
    let cond = cond_tensor(&[cv], model.schemas.num_categories(), model.dtype())?;
    let z = normal_tensor(&mut rng_stream(req.seed, BOX_STREAM), &[1, model.boxvae.config.latent], model.dtype())?;
    let decoded = model.boxvae.decode(&z, &cond)?.sample(0)?;
    let mut forced = Vec::new();
    let mut boxes = BTreeMap::new();
    for &k in &parts {
        if decoded.presence[k] < 0.5 {
            log::debug!("part {k} decoded with presence {:.3}; kept because it was requested", decoded.presence[k]);
            forced.push(k);
        }
        let b = req
            .fixed_boxes
            .get(&k)
            .copied()
            .unwrap_or_else(|| BBox::from_decoded(decoded.boxes[k]));
        boxes.insert(k, b);
    }
    let masks = model.prior_masks(req.category_id, &boxes, req.seed)?;
    let mut out = model.finish(req.category_id, req.seed, boxes, masks);
    out.forced = forced;
    Ok(out)
}

fn check_part(schemas: &SchemaSet, category_id: usize, part: usize) -> Result<()> {
    let schema = schemas.get(category_id)?;
    if part >= schema.num_parts() {
        return Err(Error::InvalidEdit(format!("category {} has no part {part}", schema.category_name)));
    }
    Ok(())
}

/// A replacement box must be finite, non-degenerate and overlap the canvas.
pub fn validate_edit_box(b: &BBox, canvas: usize) -> Result<()> {
    if !b.is_finite() || !b.is_proper() {
        return Err(Error::InvalidEdit(format!("box {:?} is degenerate", b.to_array())));
    }
    if b.x_max <= -1.0 || b.y_max <= -1.0 || b.x_min >= 1.0 || b.y_min >= 1.0 || b.pixel_rect(canvas, canvas).is_none() {
        return Err(Error::InvalidEdit(format!("box {:?} lies outside the canvas", b.to_array())));
    }
    Ok(())
}

/// Decoded box for `part` from a posterior sample of the current graph,
/// decoded under the augmented part list.
fn hallucinate_box(model: &LayoutModel, prev: &Generation, part: usize, seed: u64) -> Result<BBox> {
    let graph = prev.graph(&model.schemas)?;
    let batch = model.boxvae.batch(&[&graph])?;
    let post = model.boxvae.encode(&batch)?;
    let z_d = sample_latent(&post, &mut rng_stream(seed, ADD_BOX_STREAM))?;
    let mut parts = prev.parts();
    parts.push(part);
    let cv = ConditioningVector::new(prev.category_id, model.presence_vec(&parts));
    let cond = cond_tensor(&[cv], model.schemas.num_categories(), model.dtype())?;
    let decoded = model.boxvae.decode(&z_d, &cond)?.sample(0)?;
    Ok(BBox::from_decoded(decoded.boxes[part]))
}

/// Applies `edits` to the boxes of `prev` and regenerates every mask
/// conditioned on the edited boxes with the mask stream of `prev.seed`.
/// Unedited boxes are kept verbatim; added parts get a hallucinated box.
pub fn edit_and_regenerate(model: &LayoutModel, prev: &Generation, edits: &[EditCommand]) -> Result<Generation> {
    let mut current = prev.clone();
    let mut notices = Vec::new();
    for e in edits {
        match *e {
            EditCommand::SetBox { part, bbox } => {
                check_part(&model.schemas, prev.category_id, part)?;
                if !current.boxes.contains_key(&part) {
                    return Err(Error::InvalidEdit(format!("part {part} is not in the layout")));
                }
                validate_edit_box(&bbox, model.canvas)?;
                current.boxes.insert(part, bbox);
            }
            EditCommand::RemovePart { part } => {
                check_part(&model.schemas, prev.category_id, part)?;
                if current.boxes.remove(&part).is_none() {
                    notices.push(format!("part {part} was not present"));
                }
                current.masks.remove(&part);
            }
            EditCommand::AddPart { part } => {
                check_part(&model.schemas, prev.category_id, part)?;
                if current.boxes.contains_key(&part) {
                    notices.push(format!("part {part} is already present"));
                    continue;
                }
                let b = hallucinate_box(model, &current, part, prev.seed)?;
                current.boxes.insert(part, b);
            }
        }
    }
    let masks = model.prior_masks(prev.category_id, &current.boxes, prev.seed)?;
    let mut out = model.finish(prev.category_id, prev.seed, current.boxes, masks);
    out.notices = notices;
    Ok(out)
}

/// Adds `part` to an existing instance. Only the new part's box and mask
/// come from the models; all original boxes and masks are retained.
pub fn add_part(model: &LayoutModel, inst: &NormalizedInstance, part: usize, seed: u64) -> Result<Generation> {
    check_part(&model.schemas, inst.category_id, part)?;
    let mut base = model.finish(inst.category_id, seed, inst.part_boxes.clone(), inst.part_masks.clone());
    if inst.part_boxes.contains_key(&part) {
        base.notices.push(format!("part {part} is already present"));
        return Ok(base);
    }
    let new_box = hallucinate_box(model, &base, part, seed)?;
    let mut boxes = inst.part_boxes.clone();
    boxes.insert(part, new_box);

    let mut mask_inst = inst.clone();
    mask_inst.presence.resize(model.schemas.p_max, 0);
    let post = model.labelmap.encode(&model.labelmap.batch(&[&mask_inst])?)?;
    let z_d = sample_latent(&post, &mut rng_stream(seed, ADD_MASK_STREAM))?;
    let cond = BoxCondition {
        category_id: inst.category_id,
        p_max: model.schemas.p_max,
        boxes: boxes.clone(),
    };
    let logits = model.labelmap.decode(&z_d, &model.labelmap.condition_batch(&[&cond])?)?;
    let new_mask = LabelMapVae::masks_from_logits(&logits, 0, &[part])?;
    let mut masks = inst.part_masks.clone();
    masks.extend(new_mask);
    Ok(model.finish(inst.category_id, seed, boxes, masks))
}

/// Drops a part and recomposes without touching the other masks.
pub fn remove_part(model: &LayoutModel, prev: &Generation, part: usize) -> Generation {
    let mut boxes = prev.boxes.clone();
    let mut masks = prev.masks.clone();
    boxes.remove(&part);
    masks.remove(&part);
    model.finish(prev.category_id, prev.seed, boxes, masks)
}
