use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::instance::{normalize_instance, ObjectInstance};
use super::schema::SchemaSet;
use super::Corpus;
use crate::raster::Raster;
use crate::{Error, Execution, Result};

/// One annotated object: its category name and one mask file per part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub category: String,
    /// Part name to mask path, relative to the corpus root.
    pub parts: BTreeMap<String, PathBuf>,
}

/// Annotation manifest: a JSON array of [`ManifestEntry`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationManifest {
    pub entries: Vec<ManifestEntry>,
}

impl AnnotationManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::io(path))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadError {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub errors: Vec<LoadError>,
    /// Entries whose category is not in the schema set.
    pub skipped_categories: usize,
}

/// Loads every manifest entry below `root`.
///
/// Entries with unknown categories are skipped and counted. Entries with
/// unreadable or inconsistent rasters are skipped and listed in
/// [`LoadReport::errors`]. Output order follows the manifest.
pub fn load_corpus(
    root: &Path,
    manifest: &AnnotationManifest,
    schemas: &SchemaSet,
    exec: Execution,
) -> Result<LoadReport> {
    schemas.validate()?;
    enum Outcome {
        Loaded(Box<super::NormalizedInstance>),
        Skipped,
        Failed(LoadError),
    }
    let outcomes = exec.map(&manifest.entries, |_, entry| {
        let Some(schema) = schemas.by_name(&entry.category) else {
            return Outcome::Skipped;
        };
        let fail = |reason: String| {
            Outcome::Failed(LoadError {
                image_id: entry.image_id.clone(),
                reason,
            })
        };
        let mut part_masks = BTreeMap::new();
        let mut size = None;
        for (name, file) in &entry.parts {
            let Some(k) = schema.part_index(name) else {
                return fail(format!("unknown part {name} for {}", entry.category));
            };
            let mask = match read_mask(&root.join(file)) {
                Ok(m) => m,
                Err(e) => return fail(e.to_string()),
            };
            let dims = (mask.height(), mask.width());
            if *size.get_or_insert(dims) != dims {
                return fail(format!("mask {} has size {dims:?}, expected {size:?}", file.display()));
            }
            part_masks.insert(k, mask);
        }
        let Some(image_size) = size else {
            return fail("entry lists no part masks".into());
        };
        let obj = ObjectInstance {
            category_id: schema.category_id,
            part_masks,
            image_size,
        };
        match normalize_instance(&obj, schemas.p_max) {
            Ok(n) => Outcome::Loaded(Box::new(n)),
            Err(e) => fail(e.to_string()),
        }
    });

    let mut corpus = Corpus::new(schemas.clone());
    let mut errors = Vec::new();
    let mut skipped_categories = 0;
    for o in outcomes {
        match o {
            Outcome::Loaded(inst) => corpus.instances.push(*inst),
            Outcome::Skipped => skipped_categories += 1,
            Outcome::Failed(e) => errors.push(e),
        }
    }
    corpus.splits = vec![None; corpus.instances.len()];
    if skipped_categories > 0 {
        log::warn!("skipped {skipped_categories} entries with categories outside the schema");
    }
    Ok(LoadReport {
        corpus,
        errors,
        skipped_categories,
    })
}

/// Loads `root/manifest.json`. An empty directory yields an empty corpus; a
/// non-empty directory without a manifest is a configuration error.
pub fn load_corpus_dir(root: &Path, schemas: &SchemaSet, exec: Execution) -> Result<LoadReport> {
    let manifest_path = root.join("manifest.json");
    let is_empty = std::fs::read_dir(root).map_err(Error::io(root))?.next().is_none();
    let manifest = if is_empty {
        AnnotationManifest::default()
    } else {
        AnnotationManifest::read(&manifest_path)?
    };
    load_corpus(root, &manifest, schemas, exec)
}

/// Reads a PNG mask; any nonzero luminance is foreground.
pub fn read_mask(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Raster::from_values(w as usize, h as usize, luma.as_raw())
}

pub fn write_mask(path: &Path, mask: &Raster) -> Result<()> {
    let values: Vec<u8> = mask.as_slice().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, values)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{instance_rng, render_object, SynthConfig};

    fn schemas() -> SchemaSet {
        SynthConfig::default().schemas().unwrap()
    }

    /// Writes `n` rendered objects as PNG masks plus a manifest.
    fn fixture(root: &Path, n: usize) -> AnnotationManifest {
        let cfg = SynthConfig {
            image_size: 48,
            ..SynthConfig::default()
        };
        let schemas = cfg.schemas().unwrap();
        let mut manifest = AnnotationManifest::default();
        for i in 0..n {
            let obj = render_object(&cfg, i % 2, &mut instance_rng(1, i));
            let schema = schemas.get(obj.category_id).unwrap();
            let mut parts = BTreeMap::new();
            for (k, m) in &obj.part_masks {
                let file = PathBuf::from(format!("{i}_{k}.png"));
                write_mask(&root.join(&file), m).unwrap();
                parts.insert(schema.part_names[*k].clone(), file);
            }
            manifest.entries.push(ManifestEntry {
                image_id: format!("img{i}"),
                category: schema.category_name.clone(),
                parts,
            });
        }
        manifest.write(&root.join("manifest.json")).unwrap();
        manifest
    }

    #[test]
    fn empty_directory_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_corpus_dir(dir.path(), &schemas(), Execution::default()).unwrap();
        assert_eq!(r.corpus.len(), 0);
        assert!(r.errors.is_empty());
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stray.txt"), "x").unwrap();
        let r = load_corpus_dir(dir.path(), &schemas(), Execution::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn single_valid_instance() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 1);
        let r = load_corpus_dir(dir.path(), &schemas(), Execution::default()).unwrap();
        assert_eq!(r.corpus.len(), 1);
        assert_eq!(r.corpus.splits, vec![None]);
        assert_eq!(r.corpus.instances[0].category_id, 1);
    }

    #[test]
    fn corrupt_rasters_are_skipped_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fixture(dir.path(), 10);
        for entry in [&manifest.entries[3], &manifest.entries[7]] {
            let file = entry.parts.values().next().unwrap();
            std::fs::write(dir.path().join(file), b"not a png").unwrap();
        }
        for exec in [Execution::Sequential, Execution::Parallel] {
            let r = load_corpus(dir.path(), &manifest, &schemas(), exec).unwrap();
            assert_eq!(r.corpus.len(), 8);
            assert_eq!(r.errors.len(), 2);
            assert_eq!(r.errors[0].image_id, "img3");
        }
    }

    #[test]
    fn unknown_categories_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = fixture(dir.path(), 3);
        manifest.entries[1].category = "teapot".into();
        let r = load_corpus(dir.path(), &manifest, &schemas(), Execution::default()).unwrap();
        assert_eq!(r.corpus.len(), 2);
        assert_eq!(r.skipped_categories, 1);
    }

    #[test]
    fn loaded_masks_match_rendered_instances() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 2);
        let r = load_corpus_dir(dir.path(), &schemas(), Execution::default()).unwrap();
        let cfg = SynthConfig {
            image_size: 48,
            ..SynthConfig::default()
        };
        let direct = normalize_instance(&render_object(&cfg, 1, &mut instance_rng(1, 1)), 5).unwrap();
        assert_eq!(r.corpus.instances[1], direct);
    }
}
