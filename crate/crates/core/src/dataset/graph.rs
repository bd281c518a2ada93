use serde::{Deserialize, Serialize};

use super::instance::NormalizedInstance;
use super::schema::PartSchema;
use crate::geometry::BBox;
use crate::{Error, Result};

/// Number of feature columns per part row: presence bit plus four box coordinates.
pub const FEATURE_COLS: usize = 5;

/// Decides whether two present parts are connected.
pub trait AdjacencyRule: Send + Sync {
    fn adjacent(&self, a: &BBox, b: &BBox) -> bool;
}

/// Parts are adjacent when their boxes, each grown by `eps`, touch or overlap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilatedOverlap {
    pub eps: f64,
}

impl Default for DilatedOverlap {
    fn default() -> Self {
        DilatedOverlap { eps: 0.02 }
    }
}

impl AdjacencyRule for DilatedOverlap {
    fn adjacent(&self, a: &BBox, b: &BBox) -> bool {
        a.touches(b, self.eps)
    }
}

/// Graph view of one object: `features` is `p_max x 5` row-major and
/// `adjacency` is a `p_max x p_max` binary matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartGraph {
    pub category_id: usize,
    pub p_max: usize,
    pub features: Vec<f64>,
    pub adjacency: Vec<u8>,
}

impl PartGraph {
    pub fn empty(category_id: usize, p_max: usize) -> Self {
        PartGraph {
            category_id,
            p_max,
            features: vec![0.0; p_max * FEATURE_COLS],
            adjacency: vec![0; p_max * p_max],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * FEATURE_COLS..(r + 1) * FEATURE_COLS]
    }

    pub fn presence(&self) -> Vec<u8> {
        (0..self.p_max).map(|r| self.row(r)[0] as u8).collect()
    }

    pub fn is_present(&self, r: usize) -> bool {
        self.row(r)[0] == 1.0
    }

    pub fn bbox(&self, r: usize) -> BBox {
        let row = self.row(r);
        BBox::new(row[1], row[2], row[3], row[4])
    }

    pub fn adj(&self, m: usize, n: usize) -> bool {
        self.adjacency[m * self.p_max + n] == 1
    }

    pub fn set_part(&mut self, r: usize, b: BBox) {
        let row = &mut self.features[r * FEATURE_COLS..(r + 1) * FEATURE_COLS];
        row[0] = 1.0;
        row[1..].copy_from_slice(&b.to_array());
    }

    pub fn set_adj(&mut self, m: usize, n: usize, on: bool) {
        self.adjacency[m * self.p_max + n] = on as u8;
        self.adjacency[n * self.p_max + m] = on as u8;
    }

    /// Structural invariants: binary presence, zero absent rows, symmetric
    /// adjacency with empty diagonal linking only present parts.
    pub fn check_invariants(&self) -> Result<()> {
        let p = self.p_max;
        if self.features.len() != p * FEATURE_COLS || self.adjacency.len() != p * p {
            return Err(Error::Shape("part graph buffers do not match p_max".into()));
        }
        for r in 0..p {
            let row = self.row(r);
            if row[0] != 0.0 && row[0] != 1.0 {
                return Err(Error::Shape(format!("presence of row {r} is {}", row[0])));
            }
            if row[0] == 0.0 && row.iter().any(|&v| v != 0.0) {
                return Err(Error::Shape(format!("absent row {r} is not zero")));
            }
        }
        for m in 0..p {
            if self.adj(m, m) {
                return Err(Error::Shape(format!("self loop on {m}")));
            }
            for n in 0..p {
                if self.adj(m, n) != self.adj(n, m) {
                    return Err(Error::Shape(format!("asymmetric adjacency at ({m}, {n})")));
                }
                if self.adj(m, n) && !(self.is_present(m) && self.is_present(n)) {
                    return Err(Error::Shape(format!("edge ({m}, {n}) touches an absent part")));
                }
            }
        }
        Ok(())
    }
}

pub fn build_part_graph(
    inst: &NormalizedInstance,
    schema: &PartSchema,
    rule: &dyn AdjacencyRule,
) -> Result<PartGraph> {
    if inst.category_id != schema.category_id {
        return Err(Error::Config(format!(
            "instance category {} built against schema {}",
            inst.category_id, schema.category_id
        )));
    }
    if let Some(&k) = inst.part_boxes.keys().find(|&&k| k >= schema.num_parts()) {
        return Err(Error::Shape(format!(
            "part {k} not in category {}",
            schema.category_name
        )));
    }
    let mut g = PartGraph::empty(inst.category_id, inst.p_max());
    for (&k, b) in &inst.part_boxes {
        g.set_part(k, *b);
    }
    let present: Vec<(usize, BBox)> = inst.part_boxes.iter().map(|(&k, &b)| (k, b)).collect();
    for (i, (m, a)) in present.iter().enumerate() {
        for (n, b) in &present[i + 1..] {
            if rule.adjacent(a, b) {
                g.set_adj(*m, *n, true);
            }
        }
    }
    Ok(g)
}
