//! Desk-scale relation classifier over fixed embeddings.
//!
//! A single softmax layer reads `[mean(context tokens) | subject | object]`
//! and predicts a relation label. The entity slots pass through the
//! configured intervention at the input layer: hull sampling while training,
//! hull centering at inference, mask vectors, or fresh same-type
//! substitution each epoch. This is the smallest model that can exploit
//! entity shortcuts, which is exactly the failure mode under study.
//!
//! The simplified CoRE baseline is also here: subtract λ-weighted
//! entity-only logits from full-input logits at inference.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingTable, EntityId};
use crate::intervention::{
    hull_center, mask_vector, sample_in_hull, substitute_entity, EntityRole, HullCache,
    InterventionConfig, InterventionError, InterventionMode,
};
use crate::metrics;
use crate::seeds;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate dataset: fewer than two distinct labels present")]
    DegenerateDataset,
    #[error("label set must contain exactly one negative label")]
    BadLabelSet,
    #[error("duplicate label `{name}` in label set")]
    DuplicateLabel { name: String },
    #[error("unknown label `{label}`")]
    UnknownLabel { label: String },
    #[error("subject and object must differ (both `{id}`)")]
    SubjectEqualsObject { id: String },
    #[error("feature length {got} does not match model input {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("lambda must be non-negative (got {lambda})")]
    InvalidLambda { lambda: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: bad checkpoint: {reason}")]
    BadCheckpoint {
        path: String,
        line: usize,
        reason: String,
    },
}

/// A relation label. Exactly one label per set is negative (`no_relation`);
/// it earns no credit under micro-F1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub name: String,
    pub is_negative: bool,
}

/// Ordered label vocabulary. Order matters: prediction ties break toward
/// the earliest label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RelationLabel>", into = "Vec<RelationLabel>")]
pub struct LabelSet {
    labels: Vec<RelationLabel>,
}

impl LabelSet {
    pub fn new(labels: Vec<RelationLabel>) -> Result<Self, ClassifierError> {
        if labels.iter().filter(|l| l.is_negative).count() != 1 {
            return Err(ClassifierError::BadLabelSet);
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].iter().any(|other| other.name == label.name) {
                return Err(ClassifierError::DuplicateLabel {
                    name: label.name.clone(),
                });
            }
        }
        Ok(Self { labels })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn get(&self, index: usize) -> &RelationLabel {
        &self.labels[index]
    }

    pub fn negative(&self) -> &RelationLabel {
        self.labels
            .iter()
            .find(|l| l.is_negative)
            .expect("validated at construction")
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationLabel> {
        self.labels.iter()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl TryFrom<Vec<RelationLabel>> for LabelSet {
    type Error = String;

    fn try_from(labels: Vec<RelationLabel>) -> Result<Self, String> {
        Self::new(labels).map_err(|e| e.to_string())
    }
}

impl From<LabelSet> for Vec<RelationLabel> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

/// One labeled example: context tokens plus a subject/object entity pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub context_tokens: Vec<String>,
    pub subject: EntityId,
    pub object: EntityId,
    pub label: String,
}

impl Instance {
    pub fn new(
        context_tokens: Vec<String>,
        subject: EntityId,
        object: EntityId,
        label: String,
    ) -> Result<Self, ClassifierError> {
        if subject == object {
            return Err(ClassifierError::SubjectEqualsObject {
                id: subject.to_string(),
            });
        }
        Ok(Self {
            context_tokens,
            subject,
            object,
            label,
        })
    }
}

/// Learnable per-role mask vectors, zero before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
}

impl MaskParams {
    pub fn zeroed(dim: usize) -> Self {
        Self {
            subject: mask_vector(dim, EntityRole::Subject),
            object: mask_vector(dim, EntityRole::Object),
        }
    }

    fn get(&self, role: EntityRole) -> &[f64] {
        match role {
            EntityRole::Subject => &self.subject,
            EntityRole::Object => &self.object,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Builds feature vectors `[context mean | subject slot | object slot]`,
/// applying the configured intervention to the entity slots.
///
/// Unknown context tokens map to a zero vector; unknown entities are errors.
pub struct Featurizer<'a> {
    entities: &'a EmbeddingTable,
    tokens: &'a EmbeddingTable,
    config: InterventionConfig,
    mode: InterventionMode,
    hulls: Option<HullCache>,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        entities: &'a EmbeddingTable,
        tokens: &'a EmbeddingTable,
        config: InterventionConfig,
    ) -> Self {
        let mode = config.effective_mode();
        let hulls = mode
            .uses_hull()
            .then(|| HullCache::build(entities, config.k));
        Self {
            entities,
            tokens,
            config,
            mode,
            hulls,
        }
    }

    pub fn config(&self) -> &InterventionConfig {
        &self.config
    }

    pub fn feature_len(&self) -> usize {
        self.tokens.dim() + 2 * self.entities.dim()
    }

    pub fn entity_dim(&self) -> usize {
        self.entities.dim()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.dim()
    }

    fn context_mean(&self, context_tokens: &[String]) -> Vec<f64> {
        let dim = self.tokens.dim();
        let mut mean = vec![0.0; dim];
        if context_tokens.is_empty() {
            return mean;
        }
        for token in context_tokens {
            if let Ok(record) = self.tokens.get_str(token) {
                for (m, x) in mean.iter_mut().zip(&record.vector) {
                    *m += x;
                }
            }
            // unknown tokens contribute a zero vector but still count
        }
        let n = context_tokens.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    fn entity_slot(
        &self,
        id: &EntityId,
        role: EntityRole,
        masks: &MaskParams,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ClassifierError> {
        let original = || -> Result<Vec<f64>, ClassifierError> {
            Ok(self.entities.get(id)?.vector.clone())
        };
        match (self.mode, phase) {
            (InterventionMode::None, _) | (InterventionMode::Substitute, Phase::Infer) => {
                original()
            }
            (InterventionMode::HullSample, Phase::Train) => {
                self.entities.get(id)?;
                let hull = self
                    .hulls
                    .as_ref()
                    .and_then(|c| c.get(id))
                    .expect("cache covers all entities");
                Ok(sample_in_hull(hull, rng))
            }
            (InterventionMode::HullSample, Phase::Infer)
            | (InterventionMode::HullCenter, _) => {
                self.entities.get(id)?;
                let hull = self
                    .hulls
                    .as_ref()
                    .and_then(|c| c.get(id))
                    .expect("cache covers all entities");
                Ok(hull_center(hull))
            }
            (InterventionMode::Mask, _) => Ok(masks.get(role).to_vec()),
            (InterventionMode::Substitute, Phase::Train) => {
                let substitute = substitute_entity(self.entities, id, rng)?;
                Ok(self.entities.get(&substitute)?.vector.clone())
            }
        }
    }

    /// Feature vector for one instance. `rng` is consumed only by the
    /// stochastic training-phase interventions.
    pub fn features(
        &self,
        instance: &Instance,
        masks: &MaskParams,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ClassifierError> {
        let mut out = self.context_mean(&instance.context_tokens);
        out.extend(self.entity_slot(&instance.subject, EntityRole::Subject, masks, phase, rng)?);
        out.extend(self.entity_slot(&instance.object, EntityRole::Object, masks, phase, rng)?);
        Ok(out)
    }

    /// Inference features; no randomness involved.
    pub fn features_infer(
        &self,
        instance: &Instance,
        masks: &MaskParams,
    ) -> Result<Vec<f64>, ClassifierError> {
        let mut rng = seeds::rng(0); // untouched by inference paths
        self.features(instance, masks, Phase::Infer, &mut rng)
    }

    /// Inference features with the context-mean slot zeroed, for the CoRE
    /// entity-only pass.
    pub fn entity_only_features(
        &self,
        instance: &Instance,
        masks: &MaskParams,
    ) -> Result<Vec<f64>, ClassifierError> {
        let mut out = self.features_infer(instance, masks)?;
        for x in out.iter_mut().take(self.tokens.dim()) {
            *x = 0.0;
        }
        Ok(out)
    }
}

/// Training hyperparameters. Deterministic given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 7,
        }
    }
}

/// Softmax classifier: `logits = W f + b` with per-role mask parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    /// Row-major `num_labels x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub masks: MaskParams,
    pub label_set: LabelSet,
    pub token_dim: usize,
    pub entity_dim: usize,
    pub train_config: TrainConfig,
}

impl SoftmaxModel {
    pub fn zeroed(label_set: LabelSet, token_dim: usize, entity_dim: usize) -> Self {
        let in_dim = token_dim + 2 * entity_dim;
        let num_labels = label_set.len();
        Self {
            weights: vec![0.0; num_labels * in_dim],
            bias: vec![0.0; num_labels],
            masks: MaskParams::zeroed(entity_dim),
            label_set,
            token_dim,
            entity_dim,
            train_config: TrainConfig::default(),
        }
    }

    /// Small random weights, zero bias and masks. Training starts here:
    /// zero weights would pin the mask parameters at a saddle point (their
    /// gradient is `W^T delta` over entity columns that never move while
    /// the mask features are zero).
    pub fn init_random(
        label_set: LabelSet,
        token_dim: usize,
        entity_dim: usize,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        let mut model = Self::zeroed(label_set, token_dim, entity_dim);
        let mut rng = seeds::rng(seed);
        for w in &mut model.weights {
            *w = rng.random_range(-0.05..0.05);
        }
        model
    }

    pub fn in_dim(&self) -> usize {
        self.token_dim + 2 * self.entity_dim
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        let in_dim = self.in_dim();
        if features.len() != in_dim {
            return Err(ClassifierError::DimensionMismatch {
                got: features.len(),
                expected: in_dim,
            });
        }
        let mut out = self.bias.clone();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * in_dim..(c + 1) * in_dim];
            *o += row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
        }
        Ok(out)
    }

    /// First index of the maximum: ties break toward earlier labels.
    pub fn argmax(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Mean cross-entropy over a feature batch.
    pub fn loss_on(
        &self,
        features: &[Vec<f64>],
        targets: &[usize],
    ) -> Result<f64, ClassifierError> {
        let mut total = 0.0;
        for (f, &y) in features.iter().zip(targets) {
            let probs = Self::softmax(&self.logits(f)?);
            total += -(probs[y].max(f64::MIN_POSITIVE)).ln();
        }
        Ok(total / features.len().max(1) as f64)
    }

    /// Mean analytic gradient of the cross-entropy over a batch, as
    /// `(d_weights, d_bias)` with the weight part flattened row-major.
    pub fn grad_on(
        &self,
        features: &[Vec<f64>],
        targets: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>), ClassifierError> {
        let in_dim = self.in_dim();
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.bias.len()];
        for (f, &y) in features.iter().zip(targets) {
            let mut delta = Self::softmax(&self.logits(f)?);
            delta[y] -= 1.0;
            for (c, d) in delta.iter().enumerate() {
                gb[c] += d;
                let row = &mut gw[c * in_dim..(c + 1) * in_dim];
                for (g, x) in row.iter_mut().zip(f) {
                    *g += d * x;
                }
            }
        }
        let scale = 1.0 / features.len().max(1) as f64;
        for g in gw.iter_mut().chain(gb.iter_mut()) {
            *g *= scale;
        }
        Ok((gw, gb))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from("format\tentint-model-v1\n");
        out.push_str(&format!("token_dim\t{}\n", self.token_dim));
        out.push_str(&format!("entity_dim\t{}\n", self.entity_dim));
        out.push_str(&format!(
            "train\t{} {} {} {}\n",
            self.train_config.learning_rate,
            self.train_config.epochs,
            self.train_config.batch_size,
            self.train_config.seed
        ));
        for label in self.label_set.iter() {
            let kind = if label.is_negative { "neg" } else { "pos" };
            out.push_str(&format!("label\t{}\t{}\n", label.name, kind));
        }
        let join = |values: &[f64]| {
            values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let in_dim = self.in_dim();
        for c in 0..self.num_labels() {
            out.push_str(&format!(
                "w\t{}\n",
                join(&self.weights[c * in_dim..(c + 1) * in_dim])
            ));
        }
        out.push_str(&format!("b\t{}\n", join(&self.bias)));
        out.push_str(&format!("mask_subject\t{}\n", join(&self.masks.subject)));
        out.push_str(&format!("mask_object\t{}\n", join(&self.masks.object)));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint_string(&text, &path.display().to_string())
    }

    pub fn from_checkpoint_string(text: &str, origin: &str) -> Result<Self, ClassifierError> {
        let bad = |line: usize, reason: &str| ClassifierError::BadCheckpoint {
            path: origin.to_string(),
            line,
            reason: reason.to_string(),
        };
        let parse_row = |line: usize, value: &str| -> Result<Vec<f64>, ClassifierError> {
            value
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(line, "bad float")))
                .collect()
        };
        let mut token_dim = None;
        let mut entity_dim = None;
        let mut train_config = TrainConfig::default();
        let mut labels = Vec::new();
        let mut weight_rows: Vec<Vec<f64>> = Vec::new();
        let mut bias = None;
        let mut mask_subject = None;
        let mut mask_object = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw.split_once('\t').ok_or_else(|| bad(line, "missing tab"))?;
            match key {
                "format" => {
                    if value != "entint-model-v1" {
                        return Err(bad(line, "unknown format"));
                    }
                }
                "token_dim" => {
                    token_dim = Some(value.parse().map_err(|_| bad(line, "bad token_dim"))?)
                }
                "entity_dim" => {
                    entity_dim = Some(value.parse().map_err(|_| bad(line, "bad entity_dim"))?)
                }
                "train" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 4 {
                        return Err(bad(line, "train expects 4 fields"));
                    }
                    train_config = TrainConfig {
                        learning_rate: parts[0].parse().map_err(|_| bad(line, "bad lr"))?,
                        epochs: parts[1].parse().map_err(|_| bad(line, "bad epochs"))?,
                        batch_size: parts[2].parse().map_err(|_| bad(line, "bad batch"))?,
                        seed: parts[3].parse().map_err(|_| bad(line, "bad seed"))?,
                    };
                }
                "label" => {
                    let (name, kind) = value
                        .split_once('\t')
                        .ok_or_else(|| bad(line, "label expects name and kind"))?;
                    labels.push(RelationLabel {
                        name: name.to_string(),
                        is_negative: kind == "neg",
                    });
                }
                "w" => weight_rows.push(parse_row(line, value)?),
                "b" => bias = Some(parse_row(line, value)?),
                "mask_subject" => mask_subject = Some(parse_row(line, value)?),
                "mask_object" => mask_object = Some(parse_row(line, value)?),
                _ => return Err(bad(line, "unknown key")),
            }
        }
        let token_dim = token_dim.ok_or_else(|| bad(0, "missing token_dim"))?;
        let entity_dim = entity_dim.ok_or_else(|| bad(0, "missing entity_dim"))?;
        let label_set =
            LabelSet::new(labels).map_err(|e| bad(0, &format!("bad label set: {e}")))?;
        let in_dim = token_dim + 2 * entity_dim;
        if weight_rows.len() != label_set.len()
            || weight_rows.iter().any(|r| r.len() != in_dim)
        {
            return Err(bad(0, "weight shape does not match dims and labels"));
        }
        let bias = bias.ok_or_else(|| bad(0, "missing bias"))?;
        if bias.len() != label_set.len() {
            return Err(bad(0, "bias length mismatch"));
        }
        let mask_subject = mask_subject.ok_or_else(|| bad(0, "missing mask_subject"))?;
        let mask_object = mask_object.ok_or_else(|| bad(0, "missing mask_object"))?;
        if mask_subject.len() != entity_dim || mask_object.len() != entity_dim {
            return Err(bad(0, "mask length mismatch"));
        }
        Ok(Self {
            weights: weight_rows.into_iter().flatten().collect(),
            bias,
            masks: MaskParams {
                subject: mask_subject,
                object: mask_object,
            },
            label_set,
            token_dim,
            entity_dim,
            train_config,
        })
    }
}

/// A trained model plus its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: SoftmaxModel,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on the cross-entropy. Interventions are re-drawn every
/// time an instance is visited, so hull sampling and entity substitution
/// act as fresh per-epoch augmentation. Pure function of (data, config,
/// seed): identical inputs give bitwise-identical parameters.
pub fn train(
    dataset: &[Instance],
    label_set: &LabelSet,
    featurizer: &Featurizer,
    config: &TrainConfig,
) -> Result<TrainResult, ClassifierError> {
    if dataset.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut targets = Vec::with_capacity(dataset.len());
    for instance in dataset {
        let idx = label_set
            .index_of(&instance.label)
            .ok_or_else(|| ClassifierError::UnknownLabel {
                label: instance.label.clone(),
            })?;
        targets.push(idx);
    }
    {
        let mut distinct: Vec<usize> = targets.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(ClassifierError::DegenerateDataset);
        }
    }

    let mut model = SoftmaxModel::init_random(
        label_set.clone(),
        featurizer.token_dim(),
        featurizer.entity_dim(),
        seeds::derive(config.seed, "model-init"),
    );
    model.train_config = *config;
    let in_dim = model.in_dim();
    let num_labels = model.num_labels();
    let token_dim = featurizer.token_dim();
    let entity_dim = featurizer.entity_dim();
    let mask_mode = featurizer.config().effective_mode() == InterventionMode::Mask;

    let mut rng = seeds::rng(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.max(1);

    let mut gw = vec![0.0; num_labels * in_dim];
    let mut gb = vec![0.0; num_labels];
    let mut gmask_s = vec![0.0; entity_dim];
    let mut gmask_o = vec![0.0; entity_dim];

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            gmask_s.iter_mut().for_each(|g| *g = 0.0);
            gmask_o.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let f = featurizer.features(&dataset[i], &model.masks, Phase::Train, &mut rng)?;
                let logits = model.logits(&f)?;
                let probs = SoftmaxModel::softmax(&logits);
                epoch_loss += -(probs[targets[i]].max(f64::MIN_POSITIVE)).ln();
                let mut delta = probs;
                delta[targets[i]] -= 1.0;
                for (c, d) in delta.iter().enumerate() {
                    gb[c] += d;
                    let row = &mut gw[c * in_dim..(c + 1) * in_dim];
                    for (g, x) in row.iter_mut().zip(&f) {
                        *g += d * x;
                    }
                }
                if mask_mode {
                    // masks feed the entity slots directly, so their gradient
                    // is W^T delta restricted to each slot
                    for (c, d) in delta.iter().enumerate() {
                        let row = &model.weights[c * in_dim..(c + 1) * in_dim];
                        for j in 0..entity_dim {
                            gmask_s[j] += d * row[token_dim + j];
                            gmask_o[j] += d * row[token_dim + entity_dim + j];
                        }
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= step * g;
            }
            if mask_mode {
                for (m, g) in model.masks.subject.iter_mut().zip(&gmask_s) {
                    *m -= step * g;
                }
                for (m, g) in model.masks.object.iter_mut().zip(&gmask_o) {
                    *m -= step * g;
                }
            }
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainResult {
        model,
        epoch_losses,
    })
}

/// Plain SGD on precomputed feature vectors. Shares the update rule with
/// [`train`] but applies no intervention and trains no masks.
pub fn fit_features(
    features: &[Vec<f64>],
    targets: &[usize],
    label_set: &LabelSet,
    token_dim: usize,
    entity_dim: usize,
    config: &TrainConfig,
) -> Result<SoftmaxModel, ClassifierError> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut model = SoftmaxModel::init_random(
        label_set.clone(),
        token_dim,
        entity_dim,
        seeds::derive(config.seed, "model-init"),
    );
    model.train_config = *config;
    let mut rng = seeds::rng(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let batch_size = config.batch_size.max(1);
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let batch_features: Vec<Vec<f64>> =
                batch.iter().map(|&i| features[i].clone()).collect();
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (gw, gb) = model.grad_on(&batch_features, &batch_targets)?;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= config.learning_rate * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= config.learning_rate * g;
            }
        }
    }
    Ok(model)
}

/// Predict a label and the softmax score vector for one instance.
pub fn predict(
    model: &SoftmaxModel,
    instance: &Instance,
    featurizer: &Featurizer,
) -> Result<(RelationLabel, Vec<f64>), ClassifierError> {
    let features = featurizer.features_infer(instance, &model.masks)?;
    let logits = model.logits(&features)?;
    let probs = SoftmaxModel::softmax(&logits);
    let best = SoftmaxModel::argmax(&logits);
    Ok((model.label_set.get(best).clone(), probs))
}

/// Simplified CoRE inference: argmax of
/// `logits(full) - lambda * logits(entity-only)` where the entity-only pass
/// zeroes the context-mean slot.
pub fn predict_core(
    model: &SoftmaxModel,
    instance: &Instance,
    featurizer: &Featurizer,
    lambda: f64,
) -> Result<RelationLabel, ClassifierError> {
    if lambda < 0.0 {
        return Err(ClassifierError::InvalidLambda { lambda });
    }
    let full = model.logits(&featurizer.features_infer(instance, &model.masks)?)?;
    let entity_only = model.logits(&featurizer.entity_only_features(instance, &model.masks)?)?;
    let corrected: Vec<f64> = full
        .iter()
        .zip(&entity_only)
        .map(|(f, e)| f - lambda * e)
        .collect();
    Ok(model.label_set.get(SoftmaxModel::argmax(&corrected)).clone())
}

/// Pick the CoRE weight on a dev split by micro-F1 over the grid
/// {0.0, 0.1, ..., 1.0}; ties go to the smallest lambda.
pub fn select_core_lambda(
    model: &SoftmaxModel,
    dev: &[Instance],
    featurizer: &Featurizer,
) -> Result<f64, ClassifierError> {
    if dev.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for step in 0..=10 {
        let lambda = step as f64 / 10.0;
        let mut pairs = Vec::with_capacity(dev.len());
        for instance in dev {
            let label = predict_core(model, instance, featurizer, lambda)?;
            pairs.push((instance.label.clone(), label.name));
        }
        let f1 = metrics::micro_f1(&pairs, &model.label_set)
            .map(|r| r.micro_f1)
            .unwrap_or(0.0);
        if f1 > best.1 {
            best = (lambda, f1);
        }
    }
    Ok(best.0)
}
