use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// One object category and its canonical part order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSchema {
    #[serde(rename = "id")]
    pub category_id: usize,
    #[serde(rename = "name")]
    pub category_name: String,
    #[serde(rename = "parts")]
    pub part_names: Vec<String>,
}

impl PartSchema {
    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.part_names.iter().position(|p| p == name)
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }
}

/// All categories known to a model, plus the global part count `p_max`.
///
/// Serialized as the schema file: `{categories: [{id, name, parts}], p_max}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSet {
    pub categories: Vec<PartSchema>,
    pub p_max: usize,
}

impl SchemaSet {
    /// Builds a validated set; `p_max` is derived from the categories.
    pub fn new(categories: Vec<PartSchema>) -> Result<Self> {
        let p_max = categories.iter().map(PartSchema::num_parts).max().unwrap_or(0);
        let set = SchemaSet { categories, p_max };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.categories.len();
        if m == 0 {
            return Err(Error::Config("schema has no categories".into()));
        }
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for c in &self.categories {
            if c.category_id == 0 || c.category_id > m {
                return Err(Error::Config(format!(
                    "category id {} outside 1..={m}",
                    c.category_id
                )));
            }
            if !ids.insert(c.category_id) {
                return Err(Error::Config(format!("duplicate category id {}", c.category_id)));
            }
            if !names.insert(c.category_name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate category name {}",
                    c.category_name
                )));
            }
            let mut parts = BTreeSet::new();
            for p in &c.part_names {
                if !parts.insert(p.as_str()) {
                    return Err(Error::Config(format!(
                        "category {} lists part {p} twice",
                        c.category_name
                    )));
                }
            }
            if c.part_names.is_empty() {
                return Err(Error::Config(format!("category {} has no parts", c.category_name)));
            }
        }
        let expected = self.categories.iter().map(PartSchema::num_parts).max().unwrap_or(0);
        if self.p_max != expected {
            return Err(Error::Config(format!(
                "p_max is {} but the largest category has {expected} parts",
                self.p_max
            )));
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn by_id(&self, id: usize) -> Option<&PartSchema> {
        self.categories.iter().find(|c| c.category_id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&PartSchema> {
        self.categories.iter().find(|c| c.category_name == name)
    }

    pub fn get(&self, id: usize) -> Result<&PartSchema> {
        self.by_id(id)
            .ok_or_else(|| Error::Config(format!("unknown category id {id}")))
    }

    /// Resolves a category given either its name or its numeric id.
    pub fn resolve(&self, key: &str) -> Result<&PartSchema> {
        self.by_name(key)
            .or_else(|| key.parse().ok().and_then(|id| self.by_id(id)))
            .ok_or_else(|| Error::Config(format!("unknown category {key}")))
    }

    /// Stable content hash used to check checkpoint compatibility.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let set: SchemaSet = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::io(path))
    }
}
