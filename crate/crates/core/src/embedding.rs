//! Immutable entity-embedding tables with type tags.
//!
//! The on-disk format is one record per line, UTF-8:
//!
//! ```text
//! entity_name<TAB>type<TAB>v1 v2 ... vd
//! ```
//!
//! Lines starting with `#` are comments. Components are written with six
//! significant decimal digits so golden files reproduce across platforms;
//! `load(save(t))` is the identity at that stored precision.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: expected `name<TAB>type<TAB>components`")]
    MalformedLine { path: String, line: usize },
    #[error("{path}: line {line}: dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch {
        path: String,
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("{path}: line {line}: duplicate entity id `{id}`")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}: line {line}: unparseable component `{token}`")]
    BadComponent {
        path: String,
        line: usize,
        token: String,
    },
    #[error("{path}: line {line}: non-finite component `{token}`")]
    NonFinite {
        path: String,
        line: usize,
        token: String,
    },
    #[error("empty table: {path} has no records")]
    EmptyFile { path: String },
    #[error("empty table")]
    EmptyTable,
    #[error("entity name must be non-empty")]
    EmptyEntityName,
    #[error("entity name `{name}` contains a tab or newline")]
    InvalidEntityName { name: String },
    #[error("duplicate entity id `{id}`")]
    DuplicateRecord { id: String },
    #[error("record `{id}`: dimension mismatch: got {got}, expected {expected}")]
    RecordDimension { id: String, got: usize, expected: usize },
    #[error("record `{id}` has a non-finite component")]
    RecordNonFinite { id: String },
    #[error("unknown entity `{id}`")]
    UnknownEntity { id: String },
}

/// Name of an entity, unique within a table. Never contains tabs or newlines.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(name: impl Into<String>) -> Result<Self, EmbeddingError> {
        let name = name.into();
        if name.is_empty() {
            return Err(EmbeddingError::EmptyEntityName);
        }
        if name.contains('\t') || name.contains('\n') {
            return Err(EmbeddingError::InvalidEntityName { name });
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One entity: id, free-form type tag, and its embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: EntityId,
    pub etype: String,
    pub vector: Vec<f64>,
}

/// An immutable embedding vocabulary. Iteration order is load order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    records: Vec<EntityRecord>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl EmbeddingTable {
    /// Build a table from records, enforcing uniqueness, a shared dimension,
    /// and finite components. The dimension is taken from the first record.
    pub fn from_records(records: Vec<EntityRecord>) -> Result<Self, EmbeddingError> {
        let dim = match records.first() {
            Some(r) => r.vector.len(),
            None => return Err(EmbeddingError::EmptyTable),
        };
        let mut index = HashMap::with_capacity(records.len());
        for (pos, record) in records.iter().enumerate() {
            if record.vector.len() != dim {
                return Err(EmbeddingError::RecordDimension {
                    id: record.id.to_string(),
                    got: record.vector.len(),
                    expected: dim,
                });
            }
            if record.vector.iter().any(|c| !c.is_finite()) {
                return Err(EmbeddingError::RecordNonFinite {
                    id: record.id.to_string(),
                });
            }
            if index.insert(record.id.as_str().to_string(), pos).is_some() {
                return Err(EmbeddingError::DuplicateRecord {
                    id: record.id.to_string(),
                });
            }
        }
        if dim == 0 {
            return Err(EmbeddingError::RecordDimension {
                id: records[0].id.to_string(),
                got: 0,
                expected: 1,
            });
        }
        Ok(Self { records, index, dim })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path_str.clone(),
            source,
        })?;
        Self::parse(&text, &path_str)
    }

    /// Parse the text format. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, EmbeddingError> {
        let mut records = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut dim: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split('\t');
            let (name, etype, comps) = match (fields.next(), fields.next(), fields.next()) {
                (Some(n), Some(t), Some(c)) if fields.next().is_none() => (n, t, c),
                _ => {
                    return Err(EmbeddingError::MalformedLine {
                        path: origin.to_string(),
                        line,
                    })
                }
            };
            let id = EntityId::new(name).map_err(|_| EmbeddingError::MalformedLine {
                path: origin.to_string(),
                line,
            })?;
            let mut vector = Vec::new();
            for token in comps.split_whitespace() {
                let value: f64 = token.parse().map_err(|_| EmbeddingError::BadComponent {
                    path: origin.to_string(),
                    line,
                    token: token.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(EmbeddingError::NonFinite {
                        path: origin.to_string(),
                        line,
                        token: token.to_string(),
                    });
                }
                vector.push(value);
            }
            if vector.is_empty() {
                return Err(EmbeddingError::MalformedLine {
                    path: origin.to_string(),
                    line,
                });
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(EmbeddingError::DimensionMismatch {
                        path: origin.to_string(),
                        line,
                        got: vector.len(),
                        expected: d,
                    })
                }
                Some(_) => {}
            }
            if index.insert(id.as_str().to_string(), records.len()).is_some() {
                return Err(EmbeddingError::DuplicateId {
                    path: origin.to_string(),
                    line,
                    id: id.to_string(),
                });
            }
            records.push(EntityRecord {
                id,
                etype: etype.to_string(),
                vector,
            });
        }
        if records.is_empty() {
            return Err(EmbeddingError::EmptyFile {
                path: origin.to_string(),
            });
        }
        let dim = dim.expect("records non-empty");
        Ok(Self { records, index, dim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        fs::write(path, self.to_canonical_string()).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Render the canonical text form: load order, six significant digits.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(record.id.as_str());
            out.push('\t');
            out.push_str(&record.etype);
            out.push('\t');
            for (i, c) in record.vector.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&format_sig6(*c));
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, id: &EntityId) -> Result<&EntityRecord, EmbeddingError> {
        self.get_str(id.as_str())
    }

    pub fn get_str(&self, name: &str) -> Result<&EntityRecord, EmbeddingError> {
        self.index
            .get(name)
            .map(|&pos| &self.records[pos])
            .ok_or_else(|| EmbeddingError::UnknownEntity {
                id: name.to_string(),
            })
    }

    /// Load-order position of an entity, used for stable tie-breaking.
    pub fn position(&self, id: &EntityId) -> Option<usize> {
        self.index.get(id.as_str()).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.records.iter()
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Format with six significant decimal digits.
pub fn format_sig6(x: f64) -> String {
    format!("{:.5e}", x)
}

/// Round to the value that `format_sig6` stores.
pub fn quantize_sig6(x: f64) -> f64 {
    format_sig6(x).parse().expect("canonical format parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn table_3x4() -> &'static str {
        "# sample vocabulary\n\
         alice\tPERSON\t1.0 0.0 0.5 -2.25\n\
         acme\tORG\t0.25 1e-3 3.0 4.0\n\
         bob\tPERSON\t-1.5 2.0 0.125 9.75\n"
    }

    #[test]
    fn loads_three_records_of_dim_four() {
        let table = EmbeddingTable::parse(table_3x4(), "mem").unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.dim(), 4);
        let ids: Vec<&str> = table.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["alice", "acme", "bob"], "iteration preserves load order");
        assert_eq!(table.get_str("acme").unwrap().etype, "ORG");
    }

    #[test]
    fn dimension_mismatch_cites_offending_line() {
        let text = "a\tT\t1.0 2.0 3.0 4.0\nb\tT\t1.0 2.0 3.0\n";
        match EmbeddingTable::parse(text, "mem") {
            Err(EmbeddingError::DimensionMismatch { line, got, expected, .. }) => {
                assert_eq!((line, got, expected), (2, 3, 4));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected_with_line() {
        let text = "a\tT\t1.0\nb\tT\t2.0\na\tT\t3.0\n";
        match EmbeddingTable::parse(text, "mem") {
            Err(EmbeddingError::DuplicateId { line, id, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "a");
            }
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_component_rejected() {
        let text = "a\tT\t1.0 NaN\n";
        assert!(matches!(
            EmbeddingTable::parse(text, "mem"),
            Err(EmbeddingError::NonFinite { line: 1, .. })
        ));
        let text = "a\tT\t1.0 inf\n";
        assert!(matches!(
            EmbeddingTable::parse(text, "mem"),
            Err(EmbeddingError::NonFinite { line: 1, .. })
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            EmbeddingTable::parse("", "mem"),
            Err(EmbeddingError::EmptyFile { .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse("# only comments\n\n", "mem"),
            Err(EmbeddingError::EmptyFile { .. })
        ));
        assert!(matches!(
            EmbeddingTable::from_records(vec![]),
            Err(EmbeddingError::EmptyTable)
        ));
    }

    #[test]
    fn unknown_lookup_is_an_error_not_a_default() {
        let table = EmbeddingTable::parse(table_3x4(), "mem").unwrap();
        assert!(matches!(
            table.get_str("carol"),
            Err(EmbeddingError::UnknownEntity { .. })
        ));
    }

    #[test]
    fn single_record_table_saves_to_single_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.tsv");
        let table = EmbeddingTable::parse("solo\tORG\t1.5 -0.25\n", "mem").unwrap();
        table.save(&path).unwrap();
        let written = fs::read_to_string(&path).unwrap();
        assert_eq!(written, "solo\tORG\t1.50000e0 -2.50000e-1\n");
    }

    // Independent canonicalizer: strips comments/blanks and reformats every
    // component, without going through EmbeddingTable.
    fn canonicalize_text(text: &str) -> String {
        let mut out = String::new();
        for raw in text.lines() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let name = parts.next().unwrap();
            let etype = parts.next().unwrap();
            let comps: Vec<String> = parts
                .next()
                .unwrap()
                .split_whitespace()
                .map(|t| format!("{:.5e}", t.parse::<f64>().unwrap()))
                .collect();
            out.push_str(&format!("{name}\t{etype}\t{}\n", comps.join(" ")));
        }
        out
    }

    #[test]
    fn save_of_load_is_canonicalization() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("src.tsv");
        let dst = dir.path().join("dst.tsv");
        fs::write(&src, table_3x4()).unwrap();
        EmbeddingTable::load(&src).unwrap().save(&dst).unwrap();
        let expected = canonicalize_text(table_3x4());
        let written = fs::read_to_string(&dst).unwrap();
        assert_eq!(written, expected);
    }

    fn arb_table() -> impl Strategy<Value = EmbeddingTable> {
        (1usize..5, 1usize..8).prop_flat_map(|(dim, n)| {
            let comp = prop_oneof![
                -1e6f64..1e6f64,
                -1.0f64..1.0f64,
                Just(0.0f64),
            ];
            proptest::collection::vec(
                (proptest::collection::vec(comp, dim), 0usize..3),
                n,
            )
            .prop_map(|rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (vector, t))| EntityRecord {
                        id: EntityId::new(format!("e{i}")).unwrap(),
                        etype: format!("T{t}"),
                        vector,
                    })
                    .collect();
                EmbeddingTable::from_records(records).unwrap()
            })
        })
    }

    proptest! {
        // load ∘ save is the identity once values sit at the stored precision
        #[test]
        fn save_load_idempotent(table in arb_table()) {
            let first = EmbeddingTable::parse(&table.to_canonical_string(), "mem").unwrap();
            let second = EmbeddingTable::parse(&first.to_canonical_string(), "mem").unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(first.to_canonical_string(), second.to_canonical_string());
        }

        #[test]
        fn lookup_returns_table_dim(table in arb_table()) {
            for record in table.iter() {
                prop_assert_eq!(table.get(&record.id).unwrap().vector.len(), table.dim());
            }
        }
    }
}
