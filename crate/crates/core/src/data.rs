//! Synthetic shortcut corpora: train/dev/test splits with plantable
//! entity-label shortcuts and a shortcut-free OOD test split.
//!
//! Construction, in brief:
//!
//! - Positive labels come in groups of (at least) two that share one
//!   (subject type, object type) signature, so a "same types, different
//!   relation" context always exists for the OOD split.
//! - Every subject-type entity carries a shortcut label drawn from its
//!   group. In the ID splits the gold label equals that shortcut with
//!   probability `shortcut_strength`; otherwise it is drawn independently
//!   of the entities. The gold label is always a function of the context
//!   template, never of the entities.
//! - The OOD split re-pairs train entities with a context of the same type
//!   signature whose relation differs from the subject's shortcut label.
//! - Entity embeddings sit in per-type Gaussian clusters (so kNN neighbors
//!   are mostly same-type) with per-shortcut sub-cluster offsets (so the
//!   shortcut is linearly learnable from the embedding).
//!
//! All randomness flows from the config seed; identical configs produce
//! byte-identical corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, Instance, LabelSet, RelationLabel};
use crate::embedding::{quantize_sig6, EmbeddingError, EmbeddingTable, EntityId, EntityRecord};
use crate::seeds;

pub const TYPE_NAMES: [&str; 3] = ["PERSON", "ORG", "LOC"];
pub const NEGATIVE_LABEL: &str = "no_relation";

// Embedding-space geometry. Type clusters are far enough apart that small-k
// neighborhoods stay within one type, but close enough that k around ten
// starts mixing types; sub-clusters keep the shortcut linearly readable
// while neighborhoods straddle them. Keywords outweigh filler noise so a
// context-only model clears 95% on the clean OOD contexts.
const TYPE_SEPARATION: f64 = 4.0;
const SUBCLUSTER_SEPARATION: f64 = 0.55;
const ENTITY_NOISE: f64 = 0.8;
const TOKEN_SCALE: f64 = 1.0;
const KEYWORD_SCALE: f64 = 1.6;
const FILLER_VOCAB: usize = 30;
const MIN_FILLERS: usize = 2;
const MAX_FILLERS: usize = 5;
// Share of ID instances realized with a group-ambiguous template: the
// context then only narrows the label to its signature group and the
// entity has to disambiguate, the way "went to" leaves founder/visitor
// open. OOD contexts are always unambiguous.
const AMBIGUOUS_RATE: f64 = 0.12;
// A small share of contexts in every split is drowned in fillers; reading
// those reliably needs the type-level signal that entity slots carry.
const HEAVY_FILLER_RATE: f64 = 0.1;
const HEAVY_MIN_FILLERS: usize = 9;
const HEAVY_MAX_FILLERS: usize = 14;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid generator config: {reason}")]
    BadConfig { reason: String },
    #[error("infeasible generator config: {reason}")]
    Infeasible { reason: String },
    #[error("{path}: line {line}: {reason}")]
    ParseInstance {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of positive labels; `no_relation` is added on top.
    pub num_labels: usize,
    pub entities_per_type: usize,
    pub dim: usize,
    /// Probability that a subject co-occurs with its shortcut label in the
    /// ID splits.
    pub shortcut_strength: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_id_size: usize,
    pub test_ood_size: usize,
    pub templates_per_label: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_labels: 6,
            entities_per_type: 40,
            dim: 16,
            shortcut_strength: 0.9,
            train_size: 2000,
            dev_size: 500,
            test_id_size: 500,
            test_ood_size: 500,
            templates_per_label: 3,
            seed: 13,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: &str| DataError::BadConfig {
            reason: reason.to_string(),
        };
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return Err(bad("shortcut_strength must lie in [0, 1]"));
        }
        if self.num_labels < 2 {
            return Err(DataError::Infeasible {
                reason: "a single relation label makes a different-relation OOD context impossible"
                    .into(),
            });
        }
        if self.entities_per_type < 2 {
            return Err(bad("need at least two entities per type"));
        }
        if self.dim == 0 {
            return Err(bad("dim must be at least 1"));
        }
        if self.templates_per_label == 0 {
            return Err(bad("need at least one template per label"));
        }
        for (name, size) in [
            ("train_size", self.train_size),
            ("dev_size", self.dev_size),
            ("test_id_size", self.test_id_size),
            ("test_ood_size", self.test_ood_size),
        ] {
            if size == 0 {
                return Err(bad(&format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Generated corpus: four splits sharing one label set and one pair of
/// embedding tables, plus the planted shortcut map.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test_id: Vec<Instance>,
    pub test_ood: Vec<Instance>,
    pub entities: EmbeddingTable,
    pub tokens: EmbeddingTable,
    pub label_set: LabelSet,
    /// Entity name -> shortcut label name, for every subject-type entity.
    pub shortcuts: BTreeMap<String, String>,
}

/// A block of positive labels sharing one type signature.
struct Group {
    label_indices: Vec<usize>,
    subj_type: usize,
    obj_type: usize,
}

fn label_name(index: usize, num_labels: usize) -> String {
    if index == num_labels {
        NEGATIVE_LABEL.to_string()
    } else {
        format!("rel_{index}")
    }
}

fn build_label_set(num_labels: usize) -> LabelSet {
    let mut labels: Vec<RelationLabel> = (0..num_labels)
        .map(|i| RelationLabel {
            name: label_name(i, num_labels),
            is_negative: false,
        })
        .collect();
    labels.push(RelationLabel {
        name: NEGATIVE_LABEL.to_string(),
        is_negative: true,
    });
    LabelSet::new(labels).expect("generated label set is valid")
}

/// Pair up labels into same-signature groups; an odd trailing label joins
/// the last group so every group keeps at least two relations.
fn build_groups(num_labels: usize) -> Vec<Group> {
    let num_groups = (num_labels / 2).max(1);
    let mut groups: Vec<Group> = (0..num_groups)
        .map(|g| Group {
            label_indices: vec![2 * g, 2 * g + 1],
            subj_type: g % TYPE_NAMES.len(),
            obj_type: (g + 1) % TYPE_NAMES.len(),
        })
        .collect();
    if num_labels % 2 == 1 {
        groups
            .last_mut()
            .expect("at least one group")
            .label_indices
            .push(num_labels - 1);
    }
    groups
}

fn entity_name(type_index: usize, i: usize) -> String {
    format!("{}_{i:03}", TYPE_NAMES[type_index].to_lowercase())
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; (0,1] argument keeps the log finite
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct EntityWorld {
    table: EmbeddingTable,
    shortcuts: BTreeMap<String, String>,
}

fn build_entities(
    config: &GeneratorConfig,
    groups: &[Group],
    label_set: &LabelSet,
) -> Result<EntityWorld, DataError> {
    let mut rng = seeds::rng(seeds::derive(config.seed, "entities"));
    let dim = config.dim;
    let mut records = Vec::new();
    let mut shortcuts = BTreeMap::new();
    for (type_index, _) in TYPE_NAMES.iter().enumerate() {
        let center: Vec<f64> = random_direction(dim, &mut rng)
            .into_iter()
            .map(|x| x * TYPE_SEPARATION)
            .collect();
        let group = groups.iter().find(|g| g.subj_type == type_index);
        let sub_directions: Vec<Vec<f64>> = match group {
            Some(g) => (0..g.label_indices.len())
                .map(|_| random_direction(dim, &mut rng))
                .collect(),
            None => Vec::new(),
        };
        for i in 0..config.entities_per_type {
            let mut vector = center.clone();
            if let Some(g) = group {
                let sub = i % g.label_indices.len();
                for (v, d) in vector.iter_mut().zip(&sub_directions[sub]) {
                    *v += SUBCLUSTER_SEPARATION * d;
                }
                let label_index = g.label_indices[sub];
                shortcuts.insert(
                    entity_name(type_index, i),
                    label_set.get(label_index).name.clone(),
                );
            }
            for v in vector.iter_mut() {
                *v += ENTITY_NOISE * standard_normal(&mut rng);
                *v = quantize_sig6(*v);
            }
            records.push(EntityRecord {
                id: EntityId::new(entity_name(type_index, i))?,
                etype: TYPE_NAMES[type_index].to_string(),
                vector,
            });
        }
    }
    Ok(EntityWorld {
        table: EmbeddingTable::from_records(records)?,
        shortcuts,
    })
}

enum TemplateToken {
    Subject,
    Object,
    Word(String),
}

struct Template {
    label_index: usize,
    ambiguous: bool,
    tokens: Vec<TemplateToken>,
}

/// Unambiguous templates for label `li` share the keywords `kw{li}_a` /
/// `kw{li}_b` and differ in one template-specific word, so the context
/// determines the label. Each positive label additionally gets one
/// ambiguous template whose tokens name only its group (`grp{g}_*`): the
/// surface form is identical for every label in the group.
fn build_templates(config: &GeneratorConfig, groups: &[Group]) -> Vec<Template> {
    let mut templates = Vec::new();
    for label_index in 0..=config.num_labels {
        for j in 0..config.templates_per_label {
            templates.push(Template {
                label_index,
                ambiguous: false,
                tokens: vec![
                    TemplateToken::Word(format!("kw{label_index}_a")),
                    TemplateToken::Subject,
                    TemplateToken::Word(format!("kw{label_index}_t{j}")),
                    TemplateToken::Object,
                    TemplateToken::Word(format!("kw{label_index}_b")),
                ],
            });
        }
        if label_index < config.num_labels {
            let g = groups
                .iter()
                .position(|g| g.label_indices.contains(&label_index))
                .expect("every positive label belongs to a group");
            templates.push(Template {
                label_index,
                ambiguous: true,
                tokens: vec![
                    TemplateToken::Word(format!("grp{g}_a")),
                    TemplateToken::Subject,
                    TemplateToken::Word(format!("grp{g}_t")),
                    TemplateToken::Object,
                    TemplateToken::Word(format!("grp{g}_b")),
                ],
            });
        }
    }
    templates
}

fn filler_name(i: usize) -> String {
    format!("filler_{i:02}")
}

fn build_tokens(
    config: &GeneratorConfig,
    templates: &[Template],
) -> Result<EmbeddingTable, DataError> {
    let mut rng = seeds::rng(seeds::derive(config.seed, "tokens"));
    let mut seen = BTreeSet::new();
    let mut names = Vec::new();
    for template in templates {
        for token in &template.tokens {
            if let TemplateToken::Word(w) = token {
                if seen.insert(w.clone()) {
                    names.push(w.clone());
                }
            }
        }
    }
    for i in 0..FILLER_VOCAB {
        names.push(filler_name(i));
    }
    let records = names
        .into_iter()
        .map(|name| {
            let scale = if name.starts_with("kw") || name.starts_with("grp") {
                KEYWORD_SCALE
            } else {
                TOKEN_SCALE
            };
            let vector = (0..config.dim)
                .map(|_| quantize_sig6(scale * standard_normal(&mut rng)))
                .collect();
            Ok(EntityRecord {
                id: EntityId::new(name)?,
                etype: "TOKEN".to_string(),
                vector,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(EmbeddingTable::from_records(records)?)
}

fn realize(
    template: &Template,
    subject: &str,
    object: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut tokens: Vec<String> = template
        .tokens
        .iter()
        .map(|t| match t {
            TemplateToken::Subject => subject.to_string(),
            TemplateToken::Object => object.to_string(),
            TemplateToken::Word(w) => w.clone(),
        })
        .collect();
    let fillers = if rng.random::<f64>() < HEAVY_FILLER_RATE {
        rng.random_range(HEAVY_MIN_FILLERS..=HEAVY_MAX_FILLERS)
    } else {
        rng.random_range(MIN_FILLERS..=MAX_FILLERS)
    };
    for _ in 0..fillers {
        tokens.push(filler_name(rng.random_range(0..FILLER_VOCAB)));
    }
    tokens
}

struct SamplerContext<'a> {
    config: &'a GeneratorConfig,
    groups: &'a [Group],
    label_set: &'a LabelSet,
    templates: &'a [Template],
    shortcuts: &'a BTreeMap<String, String>,
}

impl<'a> SamplerContext<'a> {
    fn templates_for(&self, label_index: usize, ambiguous: bool) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.label_index == label_index && t.ambiguous == ambiguous)
            .collect()
    }

    /// One in-distribution instance: subject first, then its label (shortcut
    /// with probability rho, independent of the entities otherwise), then a
    /// template of that label, group-ambiguous a fixed share of the time.
    fn sample_id(&self, rng: &mut ChaCha8Rng) -> Result<Instance, DataError> {
        let group = &self.groups[rng.random_range(0..self.groups.len())];
        let subject_i = rng.random_range(0..self.config.entities_per_type);
        let subject = entity_name(group.subj_type, subject_i);
        // label pool: the group's relations plus no_relation
        let label_index = if rng.random::<f64>() < self.config.shortcut_strength {
            self.label_set
                .index_of(&self.shortcuts[&subject])
                .expect("shortcut labels are in the set")
        } else {
            let pool_pick = rng.random_range(0..=group.label_indices.len());
            if pool_pick == group.label_indices.len() {
                self.config.num_labels // negative
            } else {
                group.label_indices[pool_pick]
            }
        };
        let object = entity_name(
            group.obj_type,
            rng.random_range(0..self.config.entities_per_type),
        );
        let ambiguous =
            label_index < self.config.num_labels && rng.random::<f64>() < AMBIGUOUS_RATE;
        let candidates = self.templates_for(label_index, ambiguous);
        let template = candidates[rng.random_range(0..candidates.len())];
        let tokens = realize(template, &subject, &object, rng);
        Ok(Instance::new(
            tokens,
            EntityId::new(subject)?,
            EntityId::new(object)?,
            self.label_set.get(label_index).name.clone(),
        )?)
    }

    /// One OOD instance: a train entity pair re-paired with a same-signature
    /// context whose relation differs from the subject's shortcut label.
    fn sample_ood(
        &self,
        seen: &BTreeMap<usize, Vec<String>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Instance, DataError> {
        let group = &self.groups[rng.random_range(0..self.groups.len())];
        let subjects = &seen[&group.subj_type];
        let objects = &seen[&group.obj_type];
        let subject = subjects[rng.random_range(0..subjects.len())].clone();
        let object = objects[rng.random_range(0..objects.len())].clone();
        let shortcut = self
            .label_set
            .index_of(&self.shortcuts[&subject])
            .expect("subject-type entities carry shortcuts");
        let alternatives: Vec<usize> = group
            .label_indices
            .iter()
            .copied()
            .filter(|&l| l != shortcut)
            .collect();
        let label_index = alternatives[rng.random_range(0..alternatives.len())];
        // OOD contexts are always unambiguous: the spec of this split is
        // that the context alone carries the updated relation
        let candidates = self.templates_for(label_index, false);
        let template = candidates[rng.random_range(0..candidates.len())];
        let tokens = realize(template, &subject, &object, rng);
        Ok(Instance::new(
            tokens,
            EntityId::new(subject)?,
            EntityId::new(object)?,
            self.label_set.get(label_index).name.clone(),
        )?)
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Corpus, DataError> {
    config.validate()?;
    let label_set = build_label_set(config.num_labels);
    let groups = build_groups(config.num_labels);
    let world = build_entities(config, &groups, &label_set)?;
    let templates = build_templates(config, &groups);
    let tokens = build_tokens(config, &templates)?;
    let sampler = SamplerContext {
        config,
        groups: &groups,
        label_set: &label_set,
        templates: &templates,
        shortcuts: &world.shortcuts,
    };

    let sample_split = |name: &str, size: usize| -> Result<Vec<Instance>, DataError> {
        let mut rng = seeds::rng(seeds::derive(config.seed, name));
        (0..size).map(|_| sampler.sample_id(&mut rng)).collect()
    };
    let train = sample_split("train", config.train_size)?;
    let dev = sample_split("dev", config.dev_size)?;
    let test_id = sample_split("test_id", config.test_id_size)?;

    // entities that actually appear in train, grouped by type index
    let mut seen: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    {
        let mut seen_names: BTreeSet<&str> = BTreeSet::new();
        for instance in &train {
            seen_names.insert(instance.subject.as_str());
            seen_names.insert(instance.object.as_str());
        }
        for (type_index, type_name) in TYPE_NAMES.iter().enumerate() {
            let of_type: Vec<String> = world
                .table
                .iter()
                .filter(|r| &r.etype == type_name && seen_names.contains(r.id.as_str()))
                .map(|r| r.id.to_string())
                .collect();
            seen.insert(type_index, of_type);
        }
    }
    for group in &groups {
        if seen[&group.subj_type].is_empty() || seen[&group.obj_type].is_empty() {
            return Err(DataError::Infeasible {
                reason: format!(
                    "no train entities available to build OOD instances for the \
                     {}->{} signature; enlarge train_size",
                    TYPE_NAMES[group.subj_type], TYPE_NAMES[group.obj_type]
                ),
            });
        }
    }
    let mut ood_rng = seeds::rng(seeds::derive(config.seed, "test_ood"));
    let test_ood = (0..config.test_ood_size)
        .map(|_| sampler.sample_ood(&seen, &mut ood_rng))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Corpus {
        train,
        dev,
        test_id,
        test_ood,
        entities: world.table,
        tokens,
        label_set,
        shortcuts: world.shortcuts,
    })
}

const SPLIT_NAMES: [&str; 4] = ["train", "dev", "test_id", "test_ood"];

fn split_instances<'a>(corpus: &'a Corpus, name: &str) -> &'a [Instance] {
    match name {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test_id" => &corpus.test_id,
        "test_ood" => &corpus.test_ood,
        _ => unreachable!("split names are fixed"),
    }
}

pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for name in SPLIT_NAMES {
        let path = dir.join(format!("{name}.tsv"));
        let mut out = String::new();
        for instance in split_instances(corpus, name) {
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\n",
                instance.subject,
                instance.object,
                instance.label,
                instance.context_tokens.join(" ")
            ));
        }
        fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    }
    corpus.entities.save(dir.join("entities.tsv"))?;
    corpus.tokens.save(dir.join("tokens.tsv"))?;
    let labels_path = dir.join("labels.tsv");
    let mut out = String::new();
    for label in corpus.label_set.iter() {
        let kind = if label.is_negative { "neg" } else { "pos" };
        out.push_str(&format!("{}\t{kind}\n", label.name));
    }
    fs::write(&labels_path, out).map_err(|e| io_err(&labels_path, e))?;
    let shortcuts_path = dir.join("shortcuts.tsv");
    let mut out = String::new();
    for (entity, label) in &corpus.shortcuts {
        out.push_str(&format!("{entity}\t{label}\n"));
    }
    fs::write(&shortcuts_path, out).map_err(|e| io_err(&shortcuts_path, e))?;
    Ok(())
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus, DataError> {
    let dir = dir.as_ref();
    let read = |path: &Path| -> Result<String, DataError> {
        fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };

    let labels_path = dir.join("labels.tsv");
    let labels_text = read(&labels_path)?;
    let mut labels = Vec::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, kind) = line
            .split_once('\t')
            .ok_or_else(|| DataError::ParseInstance {
                path: labels_path.display().to_string(),
                line: lineno + 1,
                reason: "expected `name<TAB>pos|neg`".into(),
            })?;
        labels.push(RelationLabel {
            name: name.to_string(),
            is_negative: kind == "neg",
        });
    }
    let label_set = LabelSet::new(labels)?;

    let entities = EmbeddingTable::load(dir.join("entities.tsv"))?;
    let tokens = EmbeddingTable::load(dir.join("tokens.tsv"))?;

    let shortcuts_path = dir.join("shortcuts.tsv");
    let shortcuts_text = read(&shortcuts_path)?;
    let mut shortcuts = BTreeMap::new();
    for (lineno, line) in shortcuts_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (entity, label) = line
            .split_once('\t')
            .ok_or_else(|| DataError::ParseInstance {
                path: shortcuts_path.display().to_string(),
                line: lineno + 1,
                reason: "expected `entity<TAB>label`".into(),
            })?;
        shortcuts.insert(entity.to_string(), label.to_string());
    }

    let mut splits: Vec<Vec<Instance>> = Vec::new();
    for name in SPLIT_NAMES {
        let path = dir.join(format!("{name}.tsv"));
        let text = read(&path)?;
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: &str| DataError::ParseInstance {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse_err(
                    "expected `split<TAB>subject<TAB>object<TAB>gold_label<TAB>tokens`",
                ));
            }
            let (split, subject, object, gold, tokens_field) =
                (fields[0], fields[1], fields[2], fields[3], fields[4]);
            if split != name {
                return Err(parse_err(&format!(
                    "split field `{split}` does not match file `{name}`"
                )));
            }
            if gold.is_empty() {
                return Err(parse_err("missing gold-label field"));
            }
            if label_set.index_of(gold).is_none() {
                return Err(parse_err(&format!("unknown gold label `{gold}`")));
            }
            if !entities.contains(subject) {
                return Err(parse_err(&format!("unknown subject entity `{subject}`")));
            }
            if !entities.contains(object) {
                return Err(parse_err(&format!("unknown object entity `{object}`")));
            }
            let context_tokens: Vec<String> =
                tokens_field.split_whitespace().map(str::to_string).collect();
            instances.push(
                Instance::new(
                    context_tokens,
                    EntityId::new(subject)?,
                    EntityId::new(object)?,
                    gold.to_string(),
                )
                .map_err(|e| parse_err(&e.to_string()))?,
            );
        }
        splits.push(instances);
    }
    let mut iter = splits.into_iter();
    Ok(Corpus {
        train: iter.next().unwrap(),
        dev: iter.next().unwrap(),
        test_id: iter.next().unwrap(),
        test_ood: iter.next().unwrap(),
        entities,
        tokens,
        label_set,
        shortcuts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use tempfile::tempdir;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            num_labels: 4,
            entities_per_type: 8,
            dim: 8,
            shortcut_strength: 0.9,
            train_size: 300,
            dev_size: 60,
            test_id_size: 60,
            test_ood_size: 60,
            templates_per_label: 2,
            seed: 5,
        }
    }

    #[test]
    fn same_seed_generates_identical_corpora() {
        let config = small_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        let different = generate(&GeneratorConfig {
            seed: 6,
            ..config
        })
        .unwrap();
        assert_ne!(a, different);
    }

    #[test]
    fn gold_label_is_a_function_of_the_template() {
        let config = small_config();
        let corpus = generate(&config).unwrap();
        let groups = build_groups(config.num_labels);
        for split in [&corpus.train, &corpus.dev, &corpus.test_id, &corpus.test_ood] {
            for instance in split.iter() {
                if let Some(keyword) = instance
                    .context_tokens
                    .iter()
                    .find(|t| t.starts_with("kw") && t.ends_with("_a"))
                {
                    // unambiguous: the keyword names the label
                    let index: usize = keyword[2..keyword.len() - 2].parse().unwrap();
                    assert_eq!(corpus.label_set.get(index).name, instance.label);
                } else {
                    // ambiguous: the group token must cover the gold label
                    let token = instance
                        .context_tokens
                        .iter()
                        .find(|t| t.starts_with("grp") && t.ends_with("_a"))
                        .expect("context carries either a label or a group keyword");
                    let g: usize = token[3..token.len() - 2].parse().unwrap();
                    let label_index = corpus.label_set.index_of(&instance.label).unwrap();
                    assert!(groups[g].label_indices.contains(&label_index));
                }
            }
        }
    }

    #[test]
    fn ood_contexts_are_always_unambiguous() {
        let corpus = generate(&small_config()).unwrap();
        for instance in &corpus.test_ood {
            assert!(
                instance.context_tokens.iter().any(|t| t.starts_with("kw")),
                "OOD context must carry its label keyword"
            );
        }
    }

    #[test]
    fn ood_gold_never_matches_a_shortcut_of_the_entities_present() {
        let corpus = generate(&small_config()).unwrap();
        for instance in &corpus.test_ood {
            if let Some(subject_shortcut) = corpus.shortcuts.get(instance.subject.as_str()) {
                assert_ne!(&instance.label, subject_shortcut);
            }
            if let Some(object_shortcut) = corpus.shortcuts.get(instance.object.as_str()) {
                assert_ne!(&instance.label, object_shortcut);
            }
            assert_ne!(instance.label, NEGATIVE_LABEL);
        }
    }

    #[test]
    fn ood_entities_appear_in_train() {
        let corpus = generate(&small_config()).unwrap();
        let mut seen = BTreeSet::new();
        for instance in &corpus.train {
            seen.insert(instance.subject.as_str().to_string());
            seen.insert(instance.object.as_str().to_string());
        }
        for instance in &corpus.test_ood {
            assert!(seen.contains(instance.subject.as_str()));
            assert!(seen.contains(instance.object.as_str()));
        }
    }

    #[test]
    fn all_splits_share_label_set_and_tables() {
        let corpus = generate(&small_config()).unwrap();
        for split in [&corpus.train, &corpus.dev, &corpus.test_id, &corpus.test_ood] {
            for instance in split.iter() {
                assert!(corpus.label_set.index_of(&instance.label).is_some());
                assert!(corpus.entities.contains(instance.subject.as_str()));
                assert!(corpus.entities.contains(instance.object.as_str()));
                for token in &instance.context_tokens {
                    // context tokens are either vocabulary words or entity mentions
                    assert!(
                        corpus.tokens.contains(token) || corpus.entities.contains(token),
                        "stray token {token}"
                    );
                }
            }
        }
    }

    // Plug-in mutual information between subject identity and label, bits.
    fn empirical_mi(instances: &[Instance]) -> f64 {
        let n = instances.len() as f64;
        let mut joint: HashMap<(String, String), f64> = HashMap::new();
        let mut p_subject: HashMap<String, f64> = HashMap::new();
        let mut p_label: HashMap<String, f64> = HashMap::new();
        for instance in instances {
            let s = instance.subject.to_string();
            let l = instance.label.clone();
            *joint.entry((s.clone(), l.clone())).or_default() += 1.0 / n;
            *p_subject.entry(s).or_default() += 1.0 / n;
            *p_label.entry(l).or_default() += 1.0 / n;
        }
        joint
            .iter()
            .map(|((s, l), p)| p * (p / (p_subject[s] * p_label[l])).log2())
            .sum()
    }

    #[test]
    fn zero_shortcut_strength_gives_near_zero_entity_label_mi() {
        // single-group config so the subject's type leaks nothing about the label
        let config = GeneratorConfig {
            num_labels: 2,
            entities_per_type: 20,
            dim: 8,
            shortcut_strength: 0.0,
            train_size: 5000,
            dev_size: 1,
            test_id_size: 1,
            test_ood_size: 1,
            templates_per_label: 2,
            seed: 17,
        };
        let corpus = generate(&config).unwrap();
        let mi = empirical_mi(&corpus.train);
        assert!(mi < 0.05, "MI at rho=0 should be near zero, got {mi} bits");
        // contrast: planted shortcuts carry real information
        let biased = generate(&GeneratorConfig {
            shortcut_strength: 0.9,
            ..config
        })
        .unwrap();
        let biased_mi = empirical_mi(&biased.train);
        assert!(biased_mi > 0.3, "rho=0.9 should plant signal, got {biased_mi}");
    }

    // Entity-only oracle: majority vote per subject over train.
    fn majority_vote(train: &[Instance]) -> HashMap<String, String> {
        let mut counts: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for instance in train {
            *counts
                .entry(instance.subject.to_string())
                .or_default()
                .entry(instance.label.clone())
                .or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(subject, label_counts)| {
                let mut best: Vec<(String, usize)> = label_counts.into_iter().collect();
                best.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                (subject, best[0].0.clone())
            })
            .collect()
    }

    fn vote_accuracy(votes: &HashMap<String, String>, split: &[Instance]) -> f64 {
        let correct = split
            .iter()
            .filter(|i| votes.get(i.subject.as_str()) == Some(&i.label))
            .count();
        correct as f64 / split.len() as f64
    }

    #[test]
    fn full_shortcut_strength_maxes_out_an_entity_only_classifier() {
        let config = GeneratorConfig {
            num_labels: 2,
            entities_per_type: 10,
            dim: 8,
            shortcut_strength: 1.0,
            train_size: 400,
            dev_size: 50,
            test_id_size: 50,
            test_ood_size: 100,
            templates_per_label: 2,
            seed: 23,
        };
        let corpus = generate(&config).unwrap();
        let votes = majority_vote(&corpus.train);
        assert_eq!(
            vote_accuracy(&votes, &corpus.train),
            1.0,
            "rho=1 makes the subject fully determine the train label"
        );
        let ood = vote_accuracy(&votes, &corpus.test_ood);
        assert!(
            ood <= 0.5,
            "entity-only lookup must be at or below chance on OOD, got {ood}"
        );
    }

    #[test]
    fn default_strength_supports_shortcut_and_breaks_it_ood() {
        let corpus = generate(&GeneratorConfig {
            train_size: 2000,
            test_id_size: 500,
            test_ood_size: 500,
            ..small_config()
        })
        .unwrap();
        let votes = majority_vote(&corpus.train);
        let id_accuracy = vote_accuracy(&votes, &corpus.test_id);
        let ood_accuracy = vote_accuracy(&votes, &corpus.test_ood);
        let chance = 1.0 / 4.0 + 0.1;
        assert!(
            id_accuracy >= 0.8,
            "entity-only lookup should exploit rho=0.9 in-distribution, got {id_accuracy}"
        );
        assert!(
            ood_accuracy <= chance,
            "entity-only lookup must collapse OOD, got {ood_accuracy} > {chance}"
        );
    }

    #[test]
    fn round_trip_preserves_corpus_exactly() {
        let corpus = generate(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let reread = read_corpus(dir.path()).unwrap();
        assert_eq!(corpus, reread);
    }

    #[test]
    fn missing_gold_field_is_a_parse_error_with_line() {
        let corpus = generate(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let path = dir.path().join("dev.tsv");
        let mut text = fs::read_to_string(&path).unwrap();
        let first_line_end = text.find('\n').unwrap();
        // drop the gold label field from line 1
        let broken: Vec<&str> = text[..first_line_end].split('\t').collect();
        let mangled = format!(
            "{}\t{}\t{}\t{}\n",
            broken[0], broken[1], broken[2], broken[4]
        );
        text.replace_range(..first_line_end + 1, &mangled);
        fs::write(&path, text).unwrap();
        match read_corpus(dir.path()) {
            Err(DataError::ParseInstance { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error with line, got {other:?}"),
        }
    }

    #[test]
    fn single_label_config_is_infeasible() {
        let config = GeneratorConfig {
            num_labels: 1,
            ..small_config()
        };
        assert!(matches!(
            generate(&config),
            Err(DataError::Infeasible { .. })
        ));
    }

    #[test]
    fn invalid_rho_is_rejected() {
        let config = GeneratorConfig {
            shortcut_strength: 1.5,
            ..small_config()
        };
        assert!(matches!(generate(&config), Err(DataError::BadConfig { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn instance_counts_survive_round_trip(
            seed in 0u64..50,
            num_labels in 2usize..6,
            train_size in 30usize..120,
        ) {
            let config = GeneratorConfig {
                num_labels,
                entities_per_type: 6,
                dim: 4,
                train_size,
                dev_size: 13,
                test_id_size: 17,
                test_ood_size: 19,
                templates_per_label: 1,
                seed,
                ..GeneratorConfig::default()
            };
            let corpus = generate(&config).unwrap();
            let dir = tempdir().unwrap();
            write_corpus(&corpus, dir.path()).unwrap();
            let reread = read_corpus(dir.path()).unwrap();
            prop_assert_eq!(reread.train.len(), train_size);
            prop_assert_eq!(reread.dev.len(), 13);
            prop_assert_eq!(reread.test_id.len(), 17);
            prop_assert_eq!(reread.test_ood.len(), 19);
            prop_assert_eq!(corpus, reread);
        }
    }
}
