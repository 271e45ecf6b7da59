//! Four-step in-context intervention for black-box completion models.
//!
//! 1. Replace the subject and object mentions with abstract placeholders.
//! 2. Ask the model to name k entities similar to each original.
//! 3. Define each placeholder by its entity set ("Assume that X can be any
//!    of ..."), permuting member order so the two originals never line up.
//! 4. Prepend the definitions and query the relation between the
//!    placeholders.
//!
//! The rewritten prompt carries no mention of the original entities outside
//! the definitions, which is what blocks entity-triggered shortcuts, while
//! the similar-entity sets keep the type-level predictive signal.
//!
//! Every step is pure given the policy seed; with a transcript-backed mock
//! client the whole pipeline is byte-reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{LabelSet, RelationLabel};
use crate::data::Corpus;
use crate::llm::{LlmClient, LlmError};
use crate::metrics::{self, EvalRecord, MetricsError, MetricsReport};
use crate::seeds;

#[derive(Debug, Error)]
pub enum IncontextError {
    #[error("invalid placeholder policy: {reason}")]
    BadPolicy { reason: String },
    #[error("mention `{mention}` does not occur in the context")]
    MentionNotFound { mention: String },
    #[error("subject and object mentions overlap in the context")]
    OverlappingMentions,
    #[error("placeholder `{token}` already occurs in the context")]
    PlaceholderCollision { token: String },
    #[error("entity set for `{placeholder}` is empty")]
    EmptySet { placeholder: String },
    #[error("entity set for `{placeholder}` has duplicate members")]
    DuplicateMembers { placeholder: String },
    #[error("got {got} distinct similar entities for `{entity}` after retry, need {need}")]
    InsufficientSimilar {
        entity: String,
        need: usize,
        got: usize,
    },
    #[error("cannot place originals at different positions: both sets have a single member")]
    ConstraintUnsatisfiable,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Controls of the prompt rewriting. The three ablation switches map to the
/// "w/o definition", "w/o original entity", and "w/o random order" variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaceholderPolicy {
    pub subject_token: String,
    pub object_token: String,
    /// Similar entities requested per original.
    pub k_similar: usize,
    pub include_original: bool,
    pub include_definition: bool,
    pub randomize_order: bool,
    pub seed: u64,
    /// Template for the similar-entity query; `{k}` and `{entity}` are
    /// substituted.
    pub similar_query_template: String,
}

impl Default for PlaceholderPolicy {
    fn default() -> Self {
        Self {
            subject_token: "SUBJ_ENTITY".to_string(),
            object_token: "OBJ_ENTITY".to_string(),
            k_similar: 2,
            include_original: true,
            include_definition: true,
            randomize_order: true,
            seed: 0,
            similar_query_template:
                "Name {k} entities similar to {entity}. Answer with a comma-separated list only."
                    .to_string(),
        }
    }
}

impl PlaceholderPolicy {
    fn validate(&self) -> Result<(), IncontextError> {
        if self.subject_token.is_empty() || self.object_token.is_empty() {
            return Err(IncontextError::BadPolicy {
                reason: "placeholder tokens must be non-empty".into(),
            });
        }
        if self.subject_token == self.object_token {
            return Err(IncontextError::BadPolicy {
                reason: "subject and object placeholders must differ".into(),
            });
        }
        Ok(())
    }

    pub fn similar_query(&self, entity: &str, k: usize) -> String {
        self.similar_query_template
            .replace("{k}", &k.to_string())
            .replace("{entity}", entity)
    }
}

/// The entities standing in for one placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySet {
    pub placeholder: String,
    pub members: Vec<String>,
    /// Position of the original entity, present iff the policy includes it.
    pub original_index: Option<usize>,
}

impl EntitySet {
    /// Original first (when included), generated entities after, in the
    /// order the model produced them.
    pub fn new(
        placeholder: impl Into<String>,
        original: &str,
        generated: Vec<String>,
        include_original: bool,
    ) -> Result<Self, IncontextError> {
        let placeholder = placeholder.into();
        let mut members = Vec::with_capacity(generated.len() + 1);
        if include_original {
            members.push(original.to_string());
        }
        members.extend(generated);
        if members.is_empty() {
            return Err(IncontextError::EmptySet { placeholder });
        }
        for (i, member) in members.iter().enumerate() {
            if members[..i].contains(member) {
                return Err(IncontextError::DuplicateMembers { placeholder });
            }
        }
        Ok(Self {
            placeholder,
            members,
            original_index: include_original.then_some(0),
        })
    }

    fn permute(&mut self, rng: &mut ChaCha8Rng) {
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.shuffle(rng);
        let members: Vec<String> = order.iter().map(|&i| self.members[i].clone()).collect();
        self.original_index = self
            .original_index
            .map(|old| order.iter().position(|&i| i == old).expect("index present"));
        self.members = members;
    }
}

/// The assembled prompt and its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPackage {
    pub definition_preamble: String,
    pub rewritten_context: String,
    pub query: String,
    pub full_prompt: String,
}

/// One knowledge-conflict evaluation input: a context whose correct label
/// contradicts the memorized answer for the entity pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictInstance {
    pub id: String,
    pub context: String,
    pub subject_mention: String,
    pub object_mention: String,
    /// Context-determined answer.
    pub gold_updated: String,
    /// Memorized pre-substitution answer.
    pub original_label: String,
}

/// Non-overlapping left-to-right occurrences of `needle` in `haystack`.
fn occurrences(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    haystack
        .match_indices(needle)
        .scan(0usize, |end, (start, m)| {
            // match_indices already yields non-overlapping matches
            let span = (start, start + m.len());
            *end = span.1;
            Some(span)
        })
        .collect()
}

/// Replace every occurrence of the subject and object mentions with their
/// placeholder tokens; all other bytes pass through untouched.
pub fn substitute_placeholders(
    context: &str,
    subject_mention: &str,
    object_mention: &str,
    policy: &PlaceholderPolicy,
) -> Result<String, IncontextError> {
    policy.validate()?;
    for token in [&policy.subject_token, &policy.object_token] {
        if context.contains(token.as_str()) {
            return Err(IncontextError::PlaceholderCollision {
                token: token.clone(),
            });
        }
    }
    for mention in [subject_mention, object_mention] {
        if mention.is_empty() {
            return Err(IncontextError::MentionNotFound {
                mention: mention.to_string(),
            });
        }
    }
    let subject_spans = occurrences(context, subject_mention);
    if subject_spans.is_empty() {
        return Err(IncontextError::MentionNotFound {
            mention: subject_mention.to_string(),
        });
    }
    let object_spans = occurrences(context, object_mention);
    if object_spans.is_empty() {
        return Err(IncontextError::MentionNotFound {
            mention: object_mention.to_string(),
        });
    }
    for &(s1, e1) in &subject_spans {
        for &(s2, e2) in &object_spans {
            if s1 < e2 && s2 < e1 {
                return Err(IncontextError::OverlappingMentions);
            }
        }
    }
    let mut spans: Vec<(usize, usize, &str)> = subject_spans
        .iter()
        .map(|&(s, e)| (s, e, policy.subject_token.as_str()))
        .chain(
            object_spans
                .iter()
                .map(|&(s, e)| (s, e, policy.object_token.as_str())),
        )
        .collect();
    spans.sort_by_key(|&(s, _, _)| s);
    let mut out = String::with_capacity(context.len());
    let mut cursor = 0;
    for (start, end, token) in spans {
        out.push_str(&context[cursor..start]);
        out.push_str(token);
        cursor = end;
    }
    out.push_str(&context[cursor..]);
    Ok(out)
}

/// Parse candidate entity names out of a completion: split on commas,
/// semicolons, and newlines; strip list markers, quotes, and trailing
/// punctuation.
fn parse_entity_names(completion: &str) -> Vec<String> {
    completion
        .split(['\n', ',', ';'])
        .map(|raw| {
            let mut name = raw.trim();
            name = name.trim_start_matches(|c: char| {
                c.is_ascii_digit() || c == '.' || c == ')' || c == '-' || c == '*'
            });
            name = name.trim();
            name = name.trim_matches(|c| c == '"' || c == '\'');
            name.trim_end_matches('.').trim()
        })
        .filter(|name| !name.is_empty())
        .map(str::to_string)
        .collect()
}

/// Ask the client for k entities similar to `entity`. Duplicates and the
/// original are dropped; one retry, then a hard error if still short.
pub fn fetch_similar_entities(
    client: &dyn LlmClient,
    entity: &str,
    k: usize,
    policy: &PlaceholderPolicy,
) -> Result<Vec<String>, IncontextError> {
    if k == 0 {
        return Err(IncontextError::BadPolicy {
            reason: "k_similar must be at least 1".into(),
        });
    }
    let prompt = policy.similar_query(entity, k);
    let mut best_count = 0;
    for _attempt in 0..2 {
        let completion = client.complete(&prompt)?;
        let mut names: Vec<String> = Vec::new();
        for name in parse_entity_names(&completion) {
            let lowered = name.to_lowercase();
            if lowered == entity.to_lowercase() {
                continue;
            }
            if names.iter().any(|n| n.to_lowercase() == lowered) {
                continue;
            }
            names.push(name);
        }
        if names.len() >= k {
            names.truncate(k);
            return Ok(names);
        }
        best_count = best_count.max(names.len());
    }
    Err(IncontextError::InsufficientSimilar {
        entity: entity.to_string(),
        need: k,
        got: best_count,
    })
}

/// Apply the policy's ordering to both sets: permute each independently
/// under the constraint that the two originals never share a position.
/// Without randomization the construction order stands, originals first.
pub fn arrange_entity_sets(
    subject: &EntitySet,
    object: &EntitySet,
    policy: &PlaceholderPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(EntitySet, EntitySet), IncontextError> {
    let mut subject = subject.clone();
    let mut object = object.clone();
    if !policy.randomize_order {
        return Ok((subject, object));
    }
    let constrained = subject.original_index.is_some() && object.original_index.is_some();
    if constrained && subject.members.len() == 1 && object.members.len() == 1 {
        return Err(IncontextError::ConstraintUnsatisfiable);
    }
    subject.permute(rng);
    object.permute(rng);
    while constrained && subject.original_index == object.original_index {
        object.permute(rng);
        if object.members.len() == 1 {
            // single-member object cannot move; move the subject instead
            subject.permute(rng);
        }
    }
    Ok((subject, object))
}

fn verbalize_members(members: &[String]) -> String {
    match members.len() {
        1 => members[0].clone(),
        2 => format!("{} and {}", members[0], members[1]),
        _ => {
            let head = members[..members.len() - 1].join(", ");
            format!("{head}, and {}", members[members.len() - 1])
        }
    }
}

fn definition_sentence(set: &EntitySet) -> String {
    format!(
        "Assume that {} can be any of {}.",
        set.placeholder,
        verbalize_members(&set.members)
    )
}

/// The definition preamble for both placeholders, or an empty string when
/// definitions are disabled.
pub fn build_definition(
    subject: &EntitySet,
    object: &EntitySet,
    policy: &PlaceholderPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<String, IncontextError> {
    if !policy.include_definition {
        return Ok(String::new());
    }
    let (subject, object) = arrange_entity_sets(subject, object, policy, rng)?;
    Ok(format!(
        "{} {}",
        definition_sentence(&subject),
        definition_sentence(&object)
    ))
}

/// The attribute-style relation query, used both by the rewritten prompt
/// (with placeholders) and the plain baseline (with original mentions).
pub fn relation_query(subject: &str, object: &str) -> String {
    format!("What's the relation between {subject} and {object} in the given context?")
}

/// Assemble the rewritten prompt for one instance. Deterministic given the
/// policy seed and the instance id.
pub fn assemble_prompt(
    instance: &ConflictInstance,
    subject_set: &EntitySet,
    object_set: &EntitySet,
    policy: &PlaceholderPolicy,
) -> Result<PromptPackage, IncontextError> {
    let rewritten_context = substitute_placeholders(
        &instance.context,
        &instance.subject_mention,
        &instance.object_mention,
        policy,
    )?;
    let mut rng = seeds::rng(seeds::derive(
        policy.seed,
        &format!("arrange:{}", instance.id),
    ));
    let definition_preamble = build_definition(subject_set, object_set, policy, &mut rng)?;
    let query = relation_query(&policy.subject_token, &policy.object_token);
    let full_prompt = if definition_preamble.is_empty() {
        format!("{rewritten_context}\n{query}")
    } else {
        format!("{definition_preamble}\n{rewritten_context}\n{query}")
    };
    Ok(PromptPackage {
        definition_preamble,
        rewritten_context,
        query,
        full_prompt,
    })
}

/// The unmodified attribute-style prompt: context plus the relation query
/// over the original mentions.
pub fn attribute_prompt(instance: &ConflictInstance) -> String {
    format!(
        "{}\n{}",
        instance.context,
        relation_query(&instance.subject_mention, &instance.object_mention)
    )
}

/// Map a free-form completion to a label: case-insensitive longest match of
/// any label name, with underscores and spaces equivalent; unmatched
/// completions fall back to the negative label.
pub fn parse_relation_answer(completion: &str, labels: &LabelSet) -> RelationLabel {
    let normalize = |s: &str| s.to_lowercase().replace('_', " ");
    let haystack = normalize(completion);
    let mut best: Option<(usize, &RelationLabel)> = None;
    for label in labels.iter() {
        let needle = normalize(&label.name);
        if !needle.trim().is_empty() && haystack.contains(&needle) {
            let length = needle.len();
            if best.is_none_or(|(best_len, _)| length > best_len) {
                best = Some((length, label));
            }
        }
    }
    best.map(|(_, label)| label.clone())
        .unwrap_or_else(|| labels.negative().clone())
}

/// The four prompt configurations of the ablation study plus the plain
/// attribute baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncontextVariant {
    Full,
    NoDefinition,
    NoOriginal,
    NoRandomOrder,
    Attribute,
}

impl IncontextVariant {
    pub fn apply(self, base: &PlaceholderPolicy) -> PlaceholderPolicy {
        let mut policy = base.clone();
        match self {
            Self::Full | Self::Attribute => {}
            Self::NoDefinition => policy.include_definition = false,
            Self::NoOriginal => policy.include_original = false,
            Self::NoRandomOrder => policy.randomize_order = false,
        }
        policy
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDefinition => "no_definition",
            Self::NoOriginal => "no_original",
            Self::NoRandomOrder => "no_random_order",
            Self::Attribute => "attribute",
        }
    }
}

/// A per-instance pipeline failure, kept alongside the successful records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct IncontextOutcome {
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<InstanceFailure>,
}

/// Run the in-context pipeline over a conflict set and score it. Similar
/// entity sets are fetched once per distinct mention; per-instance failures
/// are collected, not fatal.
pub fn run_incontext(
    instances: &[ConflictInstance],
    labels: &LabelSet,
    base_policy: &PlaceholderPolicy,
    variant: IncontextVariant,
    client: &dyn LlmClient,
) -> Result<IncontextOutcome, IncontextError> {
    let policy = variant.apply(base_policy);
    policy.validate()?;
    let mut similar_cache: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for instance in instances {
        let prompt = if variant == IncontextVariant::Attribute {
            Ok(attribute_prompt(instance))
        } else {
            build_instance_prompt(instance, &policy, client, &mut similar_cache)
                .map(|package| package.full_prompt)
        };
        let outcome = prompt.and_then(|p| Ok(client.complete(&p)?));
        match outcome {
            Ok(completion) => {
                let predicted = parse_relation_answer(&completion, labels);
                records.push(EvalRecord {
                    id: instance.id.clone(),
                    gold_updated: instance.gold_updated.clone(),
                    original_label: instance.original_label.clone(),
                    predicted: predicted.name,
                });
            }
            Err(error) => failures.push(InstanceFailure {
                id: instance.id.clone(),
                error: error.to_string(),
            }),
        }
    }
    let report = metrics::conflict_metrics(&records, labels)?;
    Ok(IncontextOutcome {
        report,
        records,
        failures,
    })
}

fn build_instance_prompt(
    instance: &ConflictInstance,
    policy: &PlaceholderPolicy,
    client: &dyn LlmClient,
    similar_cache: &mut BTreeMap<String, Vec<String>>,
) -> Result<PromptPackage, IncontextError> {
    let mut set_for = |mention: &str, token: &str| -> Result<EntitySet, IncontextError> {
        let generated = match similar_cache.get(mention) {
            Some(cached) => cached.clone(),
            None => {
                let fetched =
                    fetch_similar_entities(client, mention, policy.k_similar, policy)?;
                similar_cache.insert(mention.to_string(), fetched.clone());
                fetched
            }
        };
        EntitySet::new(token, mention, generated, policy.include_original)
    };
    let subject_set = set_for(&instance.subject_mention, &policy.subject_token)?;
    let object_set = set_for(&instance.object_mention, &policy.object_token)?;
    assemble_prompt(instance, &subject_set, &object_set, policy)
}

/// Project a corpus's OOD split into knowledge-conflict instances: the
/// memorized answer is the subject's planted shortcut label, the updated
/// answer the context's gold label. Rows without a genuine conflict are
/// dropped, as are rows touching the negative label.
pub fn conflict_instances(corpus: &Corpus) -> Vec<ConflictInstance> {
    let negative = corpus.label_set.negative().name.as_str();
    corpus
        .test_ood
        .iter()
        .enumerate()
        .filter_map(|(i, instance)| {
            let original = corpus.shortcuts.get(instance.subject.as_str())?;
            if original == &instance.label
                || original == negative
                || instance.label == negative
            {
                return None;
            }
            Some(ConflictInstance {
                id: format!("ood_{i:04}"),
                context: instance.context_tokens.join(" "),
                subject_mention: instance.subject.to_string(),
                object_mention: instance.object.to_string(),
                gold_updated: instance.label.clone(),
                original_label: original.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockLlmClient;
    use proptest::prelude::*;

    fn labels(names: &[&str]) -> LabelSet {
        let mut v: Vec<RelationLabel> = names
            .iter()
            .map(|n| RelationLabel {
                name: n.to_string(),
                is_negative: false,
            })
            .collect();
        v.push(RelationLabel {
            name: "no_relation".into(),
            is_negative: true,
        });
        LabelSet::new(v).unwrap()
    }

    fn policy() -> PlaceholderPolicy {
        PlaceholderPolicy::default()
    }

    #[test]
    fn figure_sentence_substitution() {
        let rewritten = substitute_placeholders(
            "Bill Gates went to Microsoft Building 99.",
            "Bill Gates",
            "Microsoft",
            &policy(),
        )
        .unwrap();
        assert_eq!(rewritten, "SUBJ_ENTITY went to OBJ_ENTITY Building 99.");
    }

    #[test]
    fn every_occurrence_is_replaced() {
        let rewritten = substitute_placeholders(
            "Alice met Bob. Alice likes Bob a lot.",
            "Alice",
            "Bob",
            &policy(),
        )
        .unwrap();
        assert_eq!(
            rewritten,
            "SUBJ_ENTITY met OBJ_ENTITY. SUBJ_ENTITY likes OBJ_ENTITY a lot."
        );
    }

    #[test]
    fn missing_mention_is_an_error() {
        assert!(matches!(
            substitute_placeholders("Alice met Bob.", "Carol", "Bob", &policy()),
            Err(IncontextError::MentionNotFound { .. })
        ));
    }

    #[test]
    fn overlapping_mentions_are_an_error() {
        assert!(matches!(
            substitute_placeholders(
                "Microsoft Building is tall.",
                "Microsoft Building",
                "Building",
                &policy()
            ),
            Err(IncontextError::OverlappingMentions)
        ));
        // identical mentions always overlap
        assert!(matches!(
            substitute_placeholders("Alice met Alice.", "Alice", "Alice", &policy()),
            Err(IncontextError::OverlappingMentions)
        ));
    }

    #[test]
    fn placeholder_collision_is_an_error() {
        assert!(matches!(
            substitute_placeholders("SUBJ_ENTITY met Bob.", "met", "Bob", &policy()),
            Err(IncontextError::PlaceholderCollision { .. })
        ));
    }

    proptest! {
        // substituting then reverse-substituting restores the context
        #[test]
        fn substitution_round_trips(
            words in proptest::collection::vec("[a-z]{2,6}", 3..12),
            subject_pos in 0usize..12,
            object_pos in 0usize..12,
        ) {
            let mut words = words;
            let subject = "Xsubj";
            let object = "Yobj";
            let si = subject_pos % (words.len() + 1);
            words.insert(si, subject.to_string());
            let oi = object_pos % (words.len() + 1);
            words.insert(oi, object.to_string());
            let context = words.join(" ");
            let rewritten =
                substitute_placeholders(&context, subject, object, &policy()).unwrap();
            prop_assert!(!rewritten.contains(subject));
            prop_assert!(!rewritten.contains(object));
            let restored = rewritten
                .replace("SUBJ_ENTITY", subject)
                .replace("OBJ_ENTITY", object);
            prop_assert_eq!(restored, context);
        }
    }

    #[test]
    fn similar_entities_parse_from_mock_transcript() {
        let p = policy();
        let mock = MockLlmClient::from_pairs([(
            p.similar_query("Bill Gates", 2),
            "Steve Jobs, Jeff Bezos".to_string(),
        )]);
        let names = fetch_similar_entities(&mock, "Bill Gates", 2, &p).unwrap();
        assert_eq!(names, ["Steve Jobs", "Jeff Bezos"]);
    }

    #[test]
    fn similar_entities_handle_numbered_lists() {
        let p = policy();
        let mock = MockLlmClient::from_pairs([(
            p.similar_query("Microsoft", 3),
            "1. Apple\n2. Google\n3. Amazon.".to_string(),
        )]);
        let names = fetch_similar_entities(&mock, "Microsoft", 3, &p).unwrap();
        assert_eq!(names, ["Apple", "Google", "Amazon"]);
    }

    #[test]
    fn duplicates_and_original_are_dropped_then_retry_then_error() {
        let p = policy();
        let mock = MockLlmClient::from_pairs([(
            p.similar_query("Bill Gates", 2),
            "Bill Gates, Bill Gates, Steve Jobs".to_string(),
        )]);
        match fetch_similar_entities(&mock, "Bill Gates", 2, &p) {
            Err(IncontextError::InsufficientSimilar { need: 2, got: 1, .. }) => {}
            other => panic!("expected insufficient-results error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn successful_fetch_returns_exactly_k(
            names in proptest::collection::hash_set("[A-Z][a-z]{2,8}", 1..8),
            k in 1usize..6,
        ) {
            let p = policy();
            let names: Vec<String> = names.into_iter().collect();
            let completion = names.join(", ");
            let mock = MockLlmClient::from_pairs([
                (p.similar_query("Seed", k), completion),
            ]);
            let result = fetch_similar_entities(&mock, "Seed", k, &p);
            let distinct = names
                .iter()
                .filter(|n| n.to_lowercase() != "seed")
                .count();
            match result {
                Ok(list) => {
                    prop_assert!(distinct >= k);
                    prop_assert_eq!(list.len(), k);
                }
                Err(IncontextError::InsufficientSimilar { .. }) => {
                    prop_assert!(distinct < k);
                }
                Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
            }
        }
    }

    #[test]
    fn definition_sentence_matches_paper_shape() {
        let set = EntitySet {
            placeholder: "SUBJ_ENTITY".into(),
            members: vec![
                "Steve Jobs".into(),
                "Bill Gates".into(),
                "Jeff Bezos".into(),
            ],
            original_index: Some(1),
        };
        assert_eq!(
            definition_sentence(&set),
            "Assume that SUBJ_ENTITY can be any of Steve Jobs, Bill Gates, and Jeff Bezos."
        );
        let pair = EntitySet {
            placeholder: "OBJ_ENTITY".into(),
            members: vec!["Apple".into(), "Google".into()],
            original_index: None,
        };
        assert_eq!(
            definition_sentence(&pair),
            "Assume that OBJ_ENTITY can be any of Apple and Google."
        );
    }

    #[test]
    fn no_definition_policy_yields_empty_preamble() {
        let subject = EntitySet::new("S", "a", vec!["b".into()], true).unwrap();
        let object = EntitySet::new("O", "c", vec!["d".into()], true).unwrap();
        let mut p = policy();
        p.include_definition = false;
        let mut rng = seeds::rng(0);
        assert_eq!(
            build_definition(&subject, &object, &p, &mut rng).unwrap(),
            ""
        );
    }

    #[test]
    fn randomized_originals_never_share_a_position() {
        let subject = EntitySet::new(
            "S",
            "orig_s",
            vec!["s1".into(), "s2".into()],
            true,
        )
        .unwrap();
        let object = EntitySet::new(
            "O",
            "orig_o",
            vec!["o1".into(), "o2".into()],
            true,
        )
        .unwrap();
        let p = policy();
        let mut seen_positions = std::collections::BTreeSet::new();
        for seed in 0..1000u64 {
            let mut rng = seeds::rng(seed);
            let (s, o) = arrange_entity_sets(&subject, &object, &p, &mut rng).unwrap();
            let si = s.original_index.unwrap();
            let oi = o.original_index.unwrap();
            assert_ne!(si, oi, "seed {seed} aligned the originals");
            assert_eq!(s.members[si], "orig_s");
            assert_eq!(o.members[oi], "orig_o");
            seen_positions.insert((si, oi));
        }
        assert!(seen_positions.len() > 1, "permutation must actually vary");
    }

    #[test]
    fn unsatisfiable_order_constraint_is_an_error() {
        let subject = EntitySet::new("S", "orig_s", vec![], true).unwrap();
        let object = EntitySet::new("O", "orig_o", vec![], true).unwrap();
        let mut rng = seeds::rng(0);
        assert!(matches!(
            arrange_entity_sets(&subject, &object, &policy(), &mut rng),
            Err(IncontextError::ConstraintUnsatisfiable)
        ));
    }

    #[test]
    fn no_random_order_keeps_originals_first() {
        let subject =
            EntitySet::new("S", "orig_s", vec!["s1".into(), "s2".into()], true).unwrap();
        let object =
            EntitySet::new("O", "orig_o", vec!["o1".into(), "o2".into()], true).unwrap();
        let mut p = policy();
        p.randomize_order = false;
        let mut rng = seeds::rng(7);
        let (s, o) = arrange_entity_sets(&subject, &object, &p, &mut rng).unwrap();
        assert_eq!(s.original_index, Some(0));
        assert_eq!(o.original_index, Some(0));
        assert_eq!(s.members[0], "orig_s");
        assert_eq!(o.members[0], "orig_o");
    }

    fn figure_instance() -> ConflictInstance {
        ConflictInstance {
            id: "fig1".into(),
            context: "Bill Gates went to Microsoft Building 99.".into(),
            subject_mention: "Bill Gates".into(),
            object_mention: "Microsoft".into(),
            gold_updated: "visitor".into(),
            original_label: "founder".into(),
        }
    }

    #[test]
    fn assembled_prompt_leaks_no_original_mentions_outside_the_preamble() {
        let instance = figure_instance();
        let subject_set = EntitySet::new(
            "SUBJ_ENTITY",
            "Bill Gates",
            vec!["Steve Jobs".into(), "Jeff Bezos".into()],
            true,
        )
        .unwrap();
        let object_set = EntitySet::new(
            "OBJ_ENTITY",
            "Microsoft",
            vec!["Apple".into(), "Google".into()],
            true,
        )
        .unwrap();
        let package = assemble_prompt(&instance, &subject_set, &object_set, &policy()).unwrap();
        assert!(!package.rewritten_context.contains("Bill Gates"));
        assert!(!package.rewritten_context.contains("Microsoft"));
        assert!(!package.query.contains("Bill Gates"));
        // originals appear exactly once, in the definitions
        assert_eq!(package.full_prompt.matches("Bill Gates").count(), 1);
        assert_eq!(package.full_prompt.matches("Microsoft").count(), 1);
        assert!(package.definition_preamble.contains("Bill Gates"));
        assert_eq!(
            package.full_prompt,
            format!(
                "{}\n{}\n{}",
                package.definition_preamble, package.rewritten_context, package.query
            )
        );
    }

    #[test]
    fn ablation_variants_emit_pairwise_distinct_prompts() {
        let instance = figure_instance();
        let base = policy();
        let variants = [
            IncontextVariant::Full,
            IncontextVariant::NoDefinition,
            IncontextVariant::NoOriginal,
            IncontextVariant::NoRandomOrder,
        ];
        let mut prompts = Vec::new();
        for variant in variants {
            let p = variant.apply(&base);
            let subject_set = EntitySet::new(
                "SUBJ_ENTITY",
                "Bill Gates",
                vec!["Steve Jobs".into(), "Jeff Bezos".into()],
                p.include_original,
            )
            .unwrap();
            let object_set = EntitySet::new(
                "OBJ_ENTITY",
                "Microsoft",
                vec!["Apple".into(), "Google".into()],
                p.include_original,
            )
            .unwrap();
            let package = assemble_prompt(&instance, &subject_set, &object_set, &p).unwrap();
            prompts.push(package.full_prompt);
        }
        for i in 0..prompts.len() {
            for j in i + 1..prompts.len() {
                assert_ne!(
                    prompts[i], prompts[j],
                    "variants {i} and {j} emitted identical prompts"
                );
            }
        }
    }

    #[test]
    fn no_original_preamble_lists_only_generated_entities() {
        let instance = figure_instance();
        let mut p = policy();
        p.include_original = false;
        let subject_set = EntitySet::new(
            "SUBJ_ENTITY",
            "Bill Gates",
            vec!["Steve Jobs".into(), "Jeff Bezos".into()],
            false,
        )
        .unwrap();
        let object_set = EntitySet::new(
            "OBJ_ENTITY",
            "Microsoft",
            vec!["Apple".into(), "Google".into()],
            false,
        )
        .unwrap();
        let package = assemble_prompt(&instance, &subject_set, &object_set, &p).unwrap();
        assert!(!package.full_prompt.contains("Bill Gates"));
        assert!(!package.full_prompt.contains("Microsoft"));
        assert!(package.definition_preamble.contains("Steve Jobs"));
    }

    #[test]
    fn assemble_is_deterministic_per_seed() {
        let instance = figure_instance();
        let subject_set = EntitySet::new(
            "SUBJ_ENTITY",
            "Bill Gates",
            vec!["Steve Jobs".into(), "Jeff Bezos".into()],
            true,
        )
        .unwrap();
        let object_set = EntitySet::new(
            "OBJ_ENTITY",
            "Microsoft",
            vec!["Apple".into(), "Google".into()],
            true,
        )
        .unwrap();
        let a = assemble_prompt(&instance, &subject_set, &object_set, &policy()).unwrap();
        let b = assemble_prompt(&instance, &subject_set, &object_set, &policy()).unwrap();
        assert_eq!(a, b);
        let mut other = policy();
        other.seed = 999;
        let c = assemble_prompt(&instance, &subject_set, &object_set, &other).unwrap();
        // different seed permutes differently (with overwhelming probability
        // over 3-member sets; this particular pair differs)
        assert_ne!(a.definition_preamble, c.definition_preamble);
    }

    #[test]
    fn answer_parsing_matches_labels() {
        let set = labels(&["founder", "visitor"]);
        assert_eq!(
            parse_relation_answer("The relation is founder.", &set).name,
            "founder"
        );
        assert_eq!(parse_relation_answer("no idea", &set).name, "no_relation");
    }

    #[test]
    fn answer_parsing_prefers_longest_match() {
        let set = labels(&["org:founded_by", "org:founded"]);
        let completion = "it could be org:founded_by, since founded appears";
        assert_eq!(
            parse_relation_answer(completion, &set).name,
            "org:founded_by"
        );
        // underscores and spaces are equivalent
        assert_eq!(
            parse_relation_answer("ORG:FOUNDED BY", &set).name,
            "org:founded_by"
        );
    }

    #[test]
    fn conflict_instances_come_from_the_ood_split() {
        let corpus = crate::data::generate(&crate::data::GeneratorConfig {
            num_labels: 4,
            entities_per_type: 8,
            dim: 4,
            train_size: 200,
            dev_size: 20,
            test_id_size: 20,
            test_ood_size: 40,
            templates_per_label: 2,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let conflicts = conflict_instances(&corpus);
        assert_eq!(conflicts.len(), 40, "every OOD row is a genuine conflict");
        for conflict in &conflicts {
            assert_ne!(conflict.gold_updated, conflict.original_label);
            assert!(conflict.context.contains(&conflict.subject_mention));
            assert!(conflict.context.contains(&conflict.object_mention));
        }
    }
}
