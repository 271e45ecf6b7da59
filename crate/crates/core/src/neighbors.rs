//! Exact k-nearest-neighbor search under Euclidean distance.
//!
//! The scan is brute force: desk-scale vocabularies make exactness cheap and
//! the tests trustworthy. Ties are broken by table load order so results are
//! identical across runs and platforms.

use thiserror::Error;

use crate::embedding::{EmbeddingTable, EntityId};

#[derive(Debug, Error)]
pub enum NeighborError {
    #[error("unknown anchor `{id}`")]
    UnknownAnchor { id: String },
    #[error("k={k} exceeds the eligible pool of {pool} entities")]
    InsufficientPool { k: usize, pool: usize },
}

/// A kNN request. With `strict` set, asking for more neighbors than the
/// eligible pool holds is an error; otherwise the result is truncated.
#[derive(Debug, Clone)]
pub struct NeighborQuery {
    pub anchor: EntityId,
    pub k: usize,
    pub type_filter: Option<String>,
    pub strict: bool,
}

impl NeighborQuery {
    pub fn new(anchor: EntityId, k: usize) -> Self {
        Self {
            anchor,
            k,
            type_filter: None,
            strict: false,
        }
    }
}

/// Neighbors of an anchor, closest first. The anchor itself is excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub anchor: EntityId,
    pub neighbors: Vec<(EntityId, f64)>,
}

impl NeighborSet {
    /// One `rank<TAB>name<TAB>type<TAB>distance` line per neighbor.
    pub fn to_tsv(&self, table: &EmbeddingTable) -> String {
        let mut out = String::from("rank\tentity\ttype\tdistance\n");
        for (rank, (id, dist)) in self.neighbors.iter().enumerate() {
            let etype = table
                .get(id)
                .map(|r| r.etype.clone())
                .unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", rank + 1, id, etype, dist));
        }
        out
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Exact kNN: the k closest distinct entities by Euclidean distance, anchor
/// excluded, optionally restricted to one type tag.
pub fn knn(table: &EmbeddingTable, query: &NeighborQuery) -> Result<NeighborSet, NeighborError> {
    let anchor = table
        .get(&query.anchor)
        .map_err(|_| NeighborError::UnknownAnchor {
            id: query.anchor.to_string(),
        })?;
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (pos, record) in table.iter().enumerate() {
        if record.id == query.anchor {
            continue;
        }
        if let Some(filter) = &query.type_filter {
            if &record.etype != filter {
                continue;
            }
        }
        candidates.push((squared_distance(&anchor.vector, &record.vector), pos));
    }
    if query.strict && candidates.len() < query.k {
        return Err(NeighborError::InsufficientPool {
            k: query.k,
            pool: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(query.k);
    let neighbors = candidates
        .into_iter()
        .map(|(d2, pos)| (table.records()[pos].id.clone(), d2.sqrt()))
        .collect();
    Ok(NeighborSet {
        anchor: query.anchor.clone(),
        neighbors,
    })
}
