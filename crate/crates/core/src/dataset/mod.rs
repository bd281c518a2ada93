//! Corpus ingestion, normalization, augmentation, graph construction,
//! splitting, and the synthetic corpus generator.

mod augment;
mod graph;
mod instance;
mod loader;
mod schema;
mod split;
pub mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{apply_draw, augment, AugmentDraw, AugmentPolicy, Augmented};
pub use graph::{build_part_graph, AdjacencyRule, DilatedOverlap, PartGraph, FEATURE_COLS};
pub use instance::{normalize_instance, renormalize, NormalizedInstance, ObjectInstance};
pub use loader::{load_corpus, load_corpus_dir, read_mask, write_mask, AnnotationManifest, LoadError, LoadReport, ManifestEntry};
pub use schema::{PartSchema, SchemaSet};
pub use split::{split_corpus, Split, SplitRatios};
pub use synth::{synth_generate, synth_generate_with, SynthConfig};

use crate::{Error, Result};

/// Normalized instances with their schemas and optional split tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schemas: SchemaSet,
    pub instances: Vec<NormalizedInstance>,
    pub splits: Vec<Option<Split>>,
}

impl Corpus {
    pub fn new(schemas: SchemaSet) -> Self {
        Corpus {
            schemas,
            instances: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Part graph of instance `i` under the default adjacency rule.
    pub fn graph(&self, i: usize) -> Result<PartGraph> {
        let inst = &self.instances[i];
        build_part_graph(inst, self.schemas.get(inst.category_id)?, &DilatedOverlap::default())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(Error::io(path))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        let corpus: Corpus = serde_json::from_reader(std::io::BufReader::new(file))?;
        corpus.schemas.validate()?;
        if corpus.splits.len() != corpus.instances.len() {
            return Err(Error::Config("corpus split tags do not match instance count".into()));
        }
        Ok(corpus)
    }
}
