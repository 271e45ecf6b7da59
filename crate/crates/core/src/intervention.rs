//! Convex-hull causal intervention and baseline entity transforms.
//!
//! The intervention replaces an entity embedding with a point inside the
//! convex hull spanned by the entity and its k nearest neighbors: a random
//! interior point during training, the vertex centroid at inference. Blending
//! an entity with its neighbors keeps the predictive information they share
//! (type-level structure) while diluting the entity-specific signal that
//! feeds memorized shortcuts.
//!
//! Baselines live here too: per-role learnable mask vectors and random
//! same-type entity substitution.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingTable, EntityId};
use crate::neighbors::{knn, NeighborError, NeighborQuery};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error("no other `{etype}` entity available to substitute for `{id}`")]
    NoSameTypeAlternative { id: String, etype: String },
    #[error("convex weights must be non-negative and sum to 1 (got sum {sum})")]
    BadWeights { sum: f64 },
    #[error("weight count {got} does not match vertex count {expected}")]
    WeightCount { got: usize, expected: usize },
}

/// How entity embeddings are transformed at the input layer.
///
/// `HullSample` is the full intervention: random interior point while
/// training, hull center at inference. `HullCenter` uses the center in both
/// phases. `Substitute` swaps in a random same-type entity each training
/// epoch and leaves inference untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    HullSample,
    HullCenter,
    Mask,
    Substitute,
    None,
}

impl InterventionMode {
    pub fn uses_hull(self) -> bool {
        matches!(self, Self::HullSample | Self::HullCenter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionConfig {
    /// Number of neighbors spanning the hull.
    pub k: usize,
    pub mode: InterventionMode,
    pub seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            k: 3,
            mode: InterventionMode::None,
            seed: 0,
        }
    }
}

impl InterventionConfig {
    /// Hull modes with k=0 degenerate to `None`: the hull is the lone
    /// original vertex, so sample and center are both the identity.
    pub fn effective_mode(&self) -> InterventionMode {
        if self.mode.uses_hull() && self.k == 0 {
            InterventionMode::None
        } else {
            self.mode
        }
    }
}

/// Convex hull given by its vertices. The first vertex is the original
/// entity's embedding; the rest follow neighbor order.
#[derive(Debug, Clone, PartialEq)]
pub struct HullSpec {
    vertices: Vec<Vec<f64>>,
}

impl HullSpec {
    pub fn new(vertices: Vec<Vec<f64>>) -> Self {
        assert!(!vertices.is_empty(), "hull needs at least one vertex");
        let dim = vertices[0].len();
        assert!(
            vertices.iter().all(|v| v.len() == dim),
            "hull vertices must share one dimension"
        );
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Largest pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max(crate::neighbors::squared_distance(a, b).sqrt());
            }
        }
        best
    }
}

/// Barycentric weights over hull vertices: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexWeights(Vec<f64>);

impl ConvexWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, InterventionError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(InterventionError::BadWeights { sum });
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Hull over `anchor` and its k nearest neighbors, anchor first.
pub fn build_hull(
    table: &EmbeddingTable,
    anchor: &EntityId,
    k: usize,
) -> Result<HullSpec, InterventionError> {
    let anchor_record = table.get(anchor).map_err(|_| NeighborError::UnknownAnchor {
        id: anchor.to_string(),
    })?;
    let set = knn(table, &NeighborQuery::new(anchor.clone(), k))?;
    let mut vertices = Vec::with_capacity(set.neighbors.len() + 1);
    vertices.push(anchor_record.vector.clone());
    for (id, _) in &set.neighbors {
        vertices.push(table.get(id).expect("neighbor came from table").vector.clone());
    }
    Ok(HullSpec::new(vertices))
}

/// Flat Dirichlet draw over `n` vertices: normalized independent
/// unit-exponential variates. Covers the hull with full support.
pub fn sample_weights(n: usize, rng: &mut ChaCha8Rng) -> ConvexWeights {
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            // 1 - U is in (0, 1], so the log is finite
            -(1.0 - rng.random::<f64>()).ln()
        })
        .collect();
    let total: f64 = draws.iter().sum();
    ConvexWeights(draws.into_iter().map(|e| e / total).collect())
}

/// Convex combination of the hull vertices. Test hook for explicit weights.
pub fn combine(hull: &HullSpec, weights: &ConvexWeights) -> Result<Vec<f64>, InterventionError> {
    let w = weights.as_slice();
    if w.len() != hull.vertices.len() {
        return Err(InterventionError::WeightCount {
            got: w.len(),
            expected: hull.vertices.len(),
        });
    }
    let mut out = vec![0.0; hull.dim()];
    for (wi, v) in w.iter().zip(&hull.vertices) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Random point inside the hull (training-time perturbation).
pub fn sample_in_hull(hull: &HullSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let weights = sample_weights(hull.vertices.len(), rng);
    combine(hull, &weights).expect("weight count matches by construction")
}

/// Centroid of the vertices, original entity included (inference-time
/// replacement). Components are summed in sorted order so the result is
/// bit-identical under any vertex permutation.
pub fn hull_center(hull: &HullSpec) -> Vec<f64> {
    let n = hull.vertices.len() as f64;
    (0..hull.dim())
        .map(|j| {
            let mut column: Vec<f64> = hull.vertices.iter().map(|v| v[j]).collect();
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect()
}

/// Entity slot being transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityRole {
    Subject,
    Object,
}

/// The role's mask vector at initialization. The vectors become model
/// parameters and drift from zero once training starts.
pub fn mask_vector(dim: usize, _role: EntityRole) -> Vec<f64> {
    vec![0.0; dim]
}

/// Uniformly random distinct entity with the anchor's type tag.
pub fn substitute_entity(
    table: &EmbeddingTable,
    anchor: &EntityId,
    rng: &mut ChaCha8Rng,
) -> Result<EntityId, InterventionError> {
    let anchor_record = table.get(anchor).map_err(|_| NeighborError::UnknownAnchor {
        id: anchor.to_string(),
    })?;
    let candidates: Vec<&EntityId> = table
        .iter()
        .filter(|r| r.etype == anchor_record.etype && r.id != *anchor)
        .map(|r| &r.id)
        .collect();
    if candidates.is_empty() {
        return Err(InterventionError::NoSameTypeAlternative {
            id: anchor.to_string(),
            etype: anchor_record.etype.clone(),
        });
    }
    let pick = rng.random_range(0..candidates.len());
    Ok(candidates[pick].clone())
}

/// Hulls for every entity in a table, computed once from the frozen
/// embeddings. Immutable after construction; shared freely across threads.
#[derive(Debug, Clone)]
pub struct HullCache {
    k: usize,
    hulls: HashMap<EntityId, HullSpec>,
}

impl HullCache {
    pub fn build(table: &EmbeddingTable, k: usize) -> Self {
        let mut hulls = HashMap::with_capacity(table.len());
        for record in table.iter() {
            let hull = build_hull(table, &record.id, k).expect("anchor is in the table");
            hulls.insert(record.id.clone(), hull);
        }
        Self { k, hulls }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, id: &EntityId) -> Option<&HullSpec> {
        self.hulls.get(id)
    }
}
