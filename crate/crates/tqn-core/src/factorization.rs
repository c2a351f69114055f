//! Label factorisation: categories as tuples of per-query attributes.
//!
//! A schema declares K queries, each with a list of attributes plus the
//! shared null attribute `∅` (id 0, meaning "not applicable"), and a category
//! table that maps every class index to one attribute per query. Categories
//! are a subset of the attribute product set, so class probabilities factor
//! into products of per-query attribute probabilities, and a decoded
//! attribute sequence maps back to the nearest category under edit distance.
//!
//! Schemas load from a pair of CSV tables (queries and classes). Structural
//! problems (ragged rows, unparseable ids) are I/O errors; semantic problems
//! (unknown attribute ids, duplicate tuples, non-dense class indices) are
//! collected into a [`ValidationReport`] so that a questionable table can be
//! inspected rather than merely rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Attribute id of the shared null attribute `∅`.
pub const NULL_ATTRIBUTE_ID: u32 = 0;

/// Display name used for the null attribute when none is declared.
pub const NULL_ATTRIBUTE_NAME: &str = "null";

/// Errors raised while loading or querying a factorisation schema.
#[derive(Debug, Error)]
pub enum FactorizationError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed {table} table: {detail}")]
    Malformed { table: &'static str, detail: String },
    #[error("schema failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("class index {index} out of range (have {count} classes)")]
    ClassOutOfRange { index: usize, count: usize },
    #[error("attribute tuple has {found} entries, schema has {expected} queries")]
    TupleArity { expected: usize, found: usize },
    #[error("attribute id {attribute} is not declared for query {query}")]
    UnknownAttribute { query: u32, attribute: u32 },
    #[error("per-query probabilities invalid: {0}")]
    BadProbabilities(String),
}

/// One attribute a query may take (not including the shared null).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpec {
    pub id: u32,
    pub name: String,
}

/// One query and its declared (non-null) attributes.
///
/// The modelled answer set always contains the shared null attribute in
/// local slot 0, so the per-query head size is `attributes.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub id: u32,
    pub name: String,
    pub attributes: Vec<AttributeSpec>,
}

impl QuerySpec {
    /// Number of answer slots, including the null slot.
    pub fn arity(&self) -> usize {
        self.attributes.len() + 1
    }

    /// Local answer slot of an attribute id (0 is the null slot).
    pub fn local_index(&self, attribute_id: u32) -> Option<usize> {
        if attribute_id == NULL_ATTRIBUTE_ID {
            return Some(0);
        }
        self.attributes
            .iter()
            .position(|a| a.id == attribute_id)
            .map(|p| p + 1)
    }

    /// Attribute id stored in a local answer slot.
    pub fn attribute_id_at(&self, local: usize) -> Option<u32> {
        if local == 0 {
            Some(NULL_ATTRIBUTE_ID)
        } else {
            self.attributes.get(local - 1).map(|a| a.id)
        }
    }

    /// Attribute name of a local answer slot.
    pub fn attribute_name_at<'a>(&'a self, local: usize, null_name: &'a str) -> Option<&'a str> {
        if local == 0 {
            Some(null_name)
        } else {
            self.attributes.get(local - 1).map(|a| a.name.as_str())
        }
    }
}

/// One category: a class index, a display name, and one attribute per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRow {
    pub class_index: usize,
    pub class_name: String,
    /// Attribute ids in query order; 0 marks the null attribute.
    pub tuple: Vec<u32>,
}

/// A semantic defect that makes a schema unusable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    /// The queries table has no `-` row declaring the shared null attribute.
    MissingNullRow,
    /// The null attribute id 0 appeared under a real query, or a `-` row
    /// carried a non-zero attribute id.
    ReservedNullId { query: String, attribute: u32 },
    /// The same attribute id was declared more than once.
    DuplicateAttributeId { attribute: u32, queries: Vec<u32> },
    /// A query id appeared with two different names.
    InconsistentQueryName { query: u32, names: Vec<String> },
    /// The queries table declares no queries.
    NoQueries,
    /// The classes table declares no categories.
    NoCategories,
    /// The classes table has a different query count than the queries table.
    QueryCountMismatch { queries: usize, columns: usize },
    /// A category references an attribute id its query does not declare.
    UnknownAttribute {
        class_index: usize,
        query: u32,
        attribute: u32,
    },
    /// Two categories share the same attribute tuple.
    DuplicateTuple {
        first_class: usize,
        second_class: usize,
    },
    /// Class indices must read 0..N-1 from top to bottom.
    ClassIndexNotDense { position: usize, found: usize },
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingNullRow => {
                write!(f, "queries table is missing the shared null attribute row")
            }
            Self::ReservedNullId { query, attribute } => write!(
                f,
                "attribute id {attribute} under query {query} clashes with the reserved null id"
            ),
            Self::DuplicateAttributeId { attribute, queries } => write!(
                f,
                "attribute id {attribute} is declared more than once (queries {queries:?})"
            ),
            Self::InconsistentQueryName { query, names } => {
                write!(f, "query {query} appears with conflicting names {names:?}")
            }
            Self::NoQueries => write!(f, "no queries declared"),
            Self::NoCategories => write!(f, "no categories declared"),
            Self::QueryCountMismatch { queries, columns } => write!(
                f,
                "queries table declares {queries} queries but classes table has {columns} attribute columns"
            ),
            Self::UnknownAttribute {
                class_index,
                query,
                attribute,
            } => write!(
                f,
                "class {class_index} references attribute {attribute}, which query {query} does not declare"
            ),
            Self::DuplicateTuple {
                first_class,
                second_class,
            } => write!(
                f,
                "classes {first_class} and {second_class} share the same attribute tuple"
            ),
            Self::ClassIndexNotDense { position, found } => write!(
                f,
                "class index {found} at row {position}; indices must read 0..N-1 in order"
            ),
        }
    }
}

/// A suspicious but tolerable property of a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaWarning {
    /// Two categories share a display name (tuples still distinguish them).
    DuplicateClassName { name: String, classes: Vec<usize> },
}

impl fmt::Display for SchemaWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateClassName { name, classes } => {
                write!(f, "class name {name:?} is shared by classes {classes:?}")
            }
        }
    }
}

/// Everything `validate` found: violations make the schema unusable,
/// warnings are logged and tolerated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<SchemaViolation>,
    pub warnings: Vec<SchemaWarning>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        if self.violations.is_empty() && self.warnings.is_empty() {
            writeln!(f, "schema is clean")?;
        }
        Ok(())
    }
}

/// Parsed but not yet validated schema tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaData {
    pub queries: Vec<QuerySpec>,
    pub categories: Vec<CategoryRow>,
    /// Display name from the `-` row, if one was present.
    pub null_name: Option<String>,
}

fn read_to_string(path: &Path) -> Result<String, FactorizationError> {
    std::fs::read_to_string(path).map_err(|source| FactorizationError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl SchemaData {
    /// Parses the two CSV tables without judging semantic validity.
    pub fn parse(queries_csv: &str, classes_csv: &str) -> Result<Self, FactorizationError> {
        let mut queries: Vec<QuerySpec> = Vec::new();
        let mut null_name = None;
        let mut reader = csv::ReaderBuilder::new().from_reader(queries_csv.as_bytes());
        {
            let headers = reader.headers()?;
            let expected = ["q_id", "q_name", "att_id", "att_name"];
            if headers.iter().ne(expected) {
                return Err(FactorizationError::Malformed {
                    table: "queries",
                    detail: format!("header must be {expected:?}, got {headers:?}"),
                });
            }
        }
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            let (q_id_raw, q_name, att_id_raw, att_name) =
                (field(0), field(1), field(2), field(3));
            let att_id: u32 = att_id_raw.parse().map_err(|_| FactorizationError::Malformed {
                table: "queries",
                detail: format!("row {}: bad att_id {att_id_raw:?}", line + 2),
            })?;
            if q_id_raw == "-" {
                if null_name.is_none() && att_id == NULL_ATTRIBUTE_ID {
                    null_name = Some(att_name);
                } else if att_id != NULL_ATTRIBUTE_ID {
                    // Keep the row so validation can flag it.
                    null_name.get_or_insert(att_name);
                }
                continue;
            }
            let q_id: u32 = q_id_raw.parse().map_err(|_| FactorizationError::Malformed {
                table: "queries",
                detail: format!("row {}: bad q_id {q_id_raw:?}", line + 2),
            })?;
            let spec = match queries.iter_mut().find(|q| q.id == q_id) {
                Some(spec) => spec,
                None => {
                    queries.push(QuerySpec {
                        id: q_id,
                        name: q_name.clone(),
                        attributes: Vec::new(),
                    });
                    queries.last_mut().expect("just pushed")
                }
            };
            if spec.name != q_name {
                // Recorded as-is; validation reports the inconsistency.
                spec.name = format!("{}|{}", spec.name, q_name);
            }
            spec.attributes.push(AttributeSpec {
                id: att_id,
                name: att_name,
            });
        }

        let mut categories = Vec::new();
        let mut reader = csv::ReaderBuilder::new().from_reader(classes_csv.as_bytes());
        let att_columns = {
            let headers = reader.headers()?;
            let fields: Vec<String> = headers.iter().map(str::to_string).collect();
            if fields.len() < 3 || fields[0] != "class_index" || fields[1] != "class_name" {
                return Err(FactorizationError::Malformed {
                    table: "classes",
                    detail: format!(
                        "header must be class_index,class_name,att_q0..; got {fields:?}"
                    ),
                });
            }
            for (i, name) in fields[2..].iter().enumerate() {
                if *name != format!("att_q{i}") {
                    return Err(FactorizationError::Malformed {
                        table: "classes",
                        detail: format!("attribute column {i} must be att_q{i}, got {name:?}"),
                    });
                }
            }
            fields.len() - 2
        };
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != att_columns + 2 {
                return Err(FactorizationError::Malformed {
                    table: "classes",
                    detail: format!("row {}: wrong field count", line + 2),
                });
            }
            let class_index: usize =
                record[0]
                    .trim()
                    .parse()
                    .map_err(|_| FactorizationError::Malformed {
                        table: "classes",
                        detail: format!("row {}: bad class_index {:?}", line + 2, &record[0]),
                    })?;
            let mut tuple = Vec::with_capacity(att_columns);
            for i in 0..att_columns {
                let raw = record[i + 2].trim();
                tuple.push(raw.parse().map_err(|_| FactorizationError::Malformed {
                    table: "classes",
                    detail: format!("row {}: bad attribute id {raw:?}", line + 2),
                })?);
            }
            categories.push(CategoryRow {
                class_index,
                class_name: record[1].to_string(),
                tuple,
            });
        }
        Ok(Self {
            queries,
            categories,
            null_name,
        })
    }

    /// Reads and parses the two CSV files.
    pub fn read(queries_path: &Path, classes_path: &Path) -> Result<Self, FactorizationError> {
        Self::parse(&read_to_string(queries_path)?, &read_to_string(classes_path)?)
    }

    /// Checks every schema invariant, collecting violations and warnings.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.null_name.is_none() {
            report.violations.push(SchemaViolation::MissingNullRow);
        }
        if self.queries.is_empty() {
            report.violations.push(SchemaViolation::NoQueries);
        }
        if self.categories.is_empty() {
            report.violations.push(SchemaViolation::NoCategories);
        }
        for q in &self.queries {
            if q.name.contains('|') {
                report.violations.push(SchemaViolation::InconsistentQueryName {
                    query: q.id,
                    names: q.name.split('|').map(str::to_string).collect(),
                });
            }
        }
        let mut id_owners: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for q in &self.queries {
            for a in &q.attributes {
                if a.id == NULL_ATTRIBUTE_ID {
                    report.violations.push(SchemaViolation::ReservedNullId {
                        query: q.id.to_string(),
                        attribute: a.id,
                    });
                    continue;
                }
                id_owners.entry(a.id).or_default().push(q.id);
            }
        }
        for (attribute, queries) in id_owners {
            if queries.len() > 1 {
                report
                    .violations
                    .push(SchemaViolation::DuplicateAttributeId { attribute, queries });
            }
        }
        for (position, row) in self.categories.iter().enumerate() {
            if row.class_index != position {
                report.violations.push(SchemaViolation::ClassIndexNotDense {
                    position,
                    found: row.class_index,
                });
            }
            if row.tuple.len() != self.queries.len() {
                report.violations.push(SchemaViolation::QueryCountMismatch {
                    queries: self.queries.len(),
                    columns: row.tuple.len(),
                });
                continue;
            }
            for (q, &att) in self.queries.iter().zip(&row.tuple) {
                if q.local_index(att).is_none() {
                    report.violations.push(SchemaViolation::UnknownAttribute {
                        class_index: row.class_index,
                        query: q.id,
                        attribute: att,
                    });
                }
            }
        }
        let mut seen_tuples: BTreeMap<&[u32], usize> = BTreeMap::new();
        for row in &self.categories {
            if let Some(&first) = seen_tuples.get(row.tuple.as_slice()) {
                report.violations.push(SchemaViolation::DuplicateTuple {
                    first_class: first,
                    second_class: row.class_index,
                });
            } else {
                seen_tuples.insert(&row.tuple, row.class_index);
            }
        }
        let mut seen_names: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for row in &self.categories {
            seen_names
                .entry(row.class_name.as_str())
                .or_default()
                .push(row.class_index);
        }
        for (name, classes) in seen_names {
            if classes.len() > 1 {
                report.warnings.push(SchemaWarning::DuplicateClassName {
                    name: name.to_string(),
                    classes,
                });
            }
        }
        report
    }
}

/// A validated factorisation schema with fast tuple lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationSchema {
    queries: Vec<QuerySpec>,
    categories: Vec<CategoryRow>,
    null_name: String,
    tuple_to_class: BTreeMap<Vec<u32>, usize>,
}

impl FactorizationSchema {
    /// Validates parsed tables and builds the lookup structures. Warnings are
    /// logged; violations abort with the full report.
    pub fn from_data(data: SchemaData) -> Result<Self, FactorizationError> {
        let report = data.validate();
        for w in &report.warnings {
            log::warn!("schema: {w}");
        }
        if !report.is_clean() {
            return Err(FactorizationError::Invalid(report));
        }
        let tuple_to_class = data
            .categories
            .iter()
            .map(|row| (row.tuple.clone(), row.class_index))
            .collect();
        Ok(Self {
            queries: data.queries,
            categories: data.categories,
            null_name: data.null_name.unwrap_or_else(|| NULL_ATTRIBUTE_NAME.into()),
            tuple_to_class,
        })
    }

    /// Parses and validates schema tables from CSV strings.
    pub fn parse(queries_csv: &str, classes_csv: &str) -> Result<Self, FactorizationError> {
        Self::from_data(SchemaData::parse(queries_csv, classes_csv)?)
    }

    /// Loads and validates schema tables from CSV files.
    pub fn load(queries_path: &Path, classes_path: &Path) -> Result<Self, FactorizationError> {
        Self::from_data(SchemaData::read(queries_path, classes_path)?)
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn categories(&self) -> &[CategoryRow] {
        &self.categories
    }

    pub fn null_name(&self) -> &str {
        &self.null_name
    }

    /// Number of factorised queries K (the category query is extra).
    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    /// Number of categories N.
    pub fn class_count(&self) -> usize {
        self.categories.len()
    }

    /// Per-query answer-set sizes, including the null slot.
    pub fn arities(&self) -> Vec<usize> {
        self.queries.iter().map(QuerySpec::arity).collect()
    }

    /// Sum of all per-query answer-set sizes.
    pub fn total_arity(&self) -> usize {
        self.queries.iter().map(QuerySpec::arity).sum()
    }

    /// Largest declared attribute id.
    pub fn max_attribute_id(&self) -> u32 {
        self.queries
            .iter()
            .flat_map(|q| q.attributes.iter().map(|a| a.id))
            .max()
            .unwrap_or(0)
    }

    pub fn class_name(&self, class_index: usize) -> Result<&str, FactorizationError> {
        self.categories
            .get(class_index)
            .map(|c| c.class_name.as_str())
            .ok_or(FactorizationError::ClassOutOfRange {
                index: class_index,
                count: self.categories.len(),
            })
    }

    /// The attribute tuple of a category, in query order.
    pub fn category_to_attributes(&self, class_index: usize) -> Result<&[u32], FactorizationError> {
        self.categories
            .get(class_index)
            .map(|c| c.tuple.as_slice())
            .ok_or(FactorizationError::ClassOutOfRange {
                index: class_index,
                count: self.categories.len(),
            })
    }

    /// The category matching an attribute tuple exactly, if one exists.
    /// Arity mismatches and undeclared attribute ids are errors; a valid
    /// tuple that simply is not a category yields `None`.
    pub fn attributes_to_category(&self, tuple: &[u32]) -> Result<Option<usize>, FactorizationError> {
        if tuple.len() != self.queries.len() {
            return Err(FactorizationError::TupleArity {
                expected: self.queries.len(),
                found: tuple.len(),
            });
        }
        for (q, &att) in self.queries.iter().zip(tuple) {
            if q.local_index(att).is_none() {
                return Err(FactorizationError::UnknownAttribute {
                    query: q.id,
                    attribute: att,
                });
            }
        }
        Ok(self.tuple_to_class.get(tuple).copied())
    }

    /// Local answer slots of a category's tuple, one per query.
    pub fn local_indices(&self, class_index: usize) -> Result<Vec<usize>, FactorizationError> {
        let tuple = self.category_to_attributes(class_index)?;
        Ok(self
            .queries
            .iter()
            .zip(tuple)
            .map(|(q, &att)| q.local_index(att).expect("validated tuple"))
            .collect())
    }

    /// Concatenated per-query one-hot answer indicators (null slot included),
    /// as 0/1 targets of length [`Self::total_arity`].
    pub fn multilabel_bits(&self, class_index: usize) -> Result<Vec<f64>, FactorizationError> {
        let locals = self.local_indices(class_index)?;
        let mut bits = vec![0.0; self.total_arity()];
        let mut offset = 0;
        for (q, local) in self.queries.iter().zip(locals) {
            bits[offset + local] = 1.0;
            offset += q.arity();
        }
        Ok(bits)
    }

    /// The category's non-null attribute ids in query order — the target
    /// sequence a sequence decoder should emit.
    pub fn attribute_sequence(&self, class_index: usize) -> Result<Vec<u32>, FactorizationError> {
        Ok(self
            .category_to_attributes(class_index)?
            .iter()
            .copied()
            .filter(|&a| a != NULL_ATTRIBUTE_ID)
            .collect())
    }

    /// Class probabilities from per-query attribute probabilities: the
    /// probability of a category is the product, over queries, of the
    /// probability assigned to its attribute. Entries must lie in [0, 1];
    /// vectors must match the per-query answer-set sizes (null slot first).
    pub fn class_prob_from_attributes(
        &self,
        per_query: &[Vec<f64>],
    ) -> Result<Vec<f64>, FactorizationError> {
        if per_query.len() != self.queries.len() {
            return Err(FactorizationError::BadProbabilities(format!(
                "{} probability vectors for {} queries",
                per_query.len(),
                self.queries.len()
            )));
        }
        for (q, probs) in self.queries.iter().zip(per_query) {
            if probs.len() != q.arity() {
                return Err(FactorizationError::BadProbabilities(format!(
                    "query {} has {} answer slots, got {} probabilities",
                    q.id,
                    q.arity(),
                    probs.len()
                )));
            }
            if probs.iter().any(|p| !p.is_finite() || *p < -1e-9 || *p > 1.0 + 1e-9) {
                return Err(FactorizationError::BadProbabilities(format!(
                    "query {} probabilities outside [0, 1]",
                    q.id
                )));
            }
        }
        let mut out = Vec::with_capacity(self.categories.len());
        for row in &self.categories {
            let mut p = 1.0;
            for ((q, probs), &att) in self.queries.iter().zip(per_query).zip(&row.tuple) {
                p *= probs[q.local_index(att).expect("validated tuple")];
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Maps a decoded attribute-id sequence to the nearest category by edit
    /// distance to each category's non-null attribute sequence. Ties resolve
    /// to the lowest class index.
    pub fn class_from_sequence(&self, decoded: &[u32]) -> usize {
        debug_assert!(!self.categories.is_empty(), "validated schema has classes");
        let mut best = (usize::MAX, 0usize);
        for row in &self.categories {
            let reference: Vec<u32> = row
                .tuple
                .iter()
                .copied()
                .filter(|&a| a != NULL_ATTRIBUTE_ID)
                .collect();
            let d = edit_distance(decoded, &reference);
            if d < best.0 {
                best = (d, row.class_index);
            }
        }
        best.1
    }

    /// Serialises the schema back to the two CSV table strings.
    pub fn to_csv_strings(&self) -> (String, String) {
        let mut queries = csv::Writer::from_writer(Vec::new());
        queries
            .write_record(["q_id", "q_name", "att_id", "att_name"])
            .expect("in-memory write");
        queries
            .write_record(["-", "-", "0", &self.null_name])
            .expect("in-memory write");
        for q in &self.queries {
            for a in &q.attributes {
                queries
                    .write_record([
                        q.id.to_string(),
                        q.name.clone(),
                        a.id.to_string(),
                        a.name.clone(),
                    ])
                    .expect("in-memory write");
            }
        }
        let mut classes = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["class_index".to_string(), "class_name".to_string()];
        header.extend((0..self.queries.len()).map(|i| format!("att_q{i}")));
        classes.write_record(&header).expect("in-memory write");
        for row in &self.categories {
            let mut record = vec![row.class_index.to_string(), row.class_name.clone()];
            record.extend(row.tuple.iter().map(u32::to_string));
            classes.write_record(&record).expect("in-memory write");
        }
        let finish = |w: csv::Writer<Vec<u8>>| {
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
        };
        (finish(queries), finish(classes))
    }

    /// Writes the schema back to a pair of CSV files.
    pub fn save(&self, queries_path: &Path, classes_path: &Path) -> Result<(), FactorizationError> {
        let (q, c) = self.to_csv_strings();
        for (path, body) in [(queries_path, q), (classes_path, c)] {
            std::fs::write(path, body).map_err(|source| FactorizationError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Levenshtein distance between two id sequences (unit costs).
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Schema tables shipped with the crate.
pub mod bundled {
    use super::{FactorizationError, FactorizationSchema};

    /// Queries table for the 4-query diving factorisation.
    pub const DIVING48_QUERIES_CSV: &str = include_str!("../data/diving48_queries.csv");
    /// Classes table for the 48 diving categories, with the eight take-off
    /// entries that are inconsistent in the published grouping normalised to
    /// match their class names (so that every tuple is unique).
    pub const DIVING48_CLASSES_CSV: &str = include_str!("../data/diving48_classes.csv");
    /// The published classes table, kept verbatim for reference; it fails
    /// validation with six duplicate-tuple violations.
    pub const DIVING48_CLASSES_PUBLISHED_CSV: &str =
        include_str!("../data/diving48_classes_published.csv");
    /// Queries table for the synthetic planted-event benchmark.
    pub const SYNTH_QUERIES_CSV: &str = include_str!("../data/synth_queries.csv");
    /// Classes table for the synthetic planted-event benchmark.
    pub const SYNTH_CLASSES_CSV: &str = include_str!("../data/synth_classes.csv");

    /// The diving schema (48 classes, 4 queries).
    pub fn diving48() -> Result<FactorizationSchema, FactorizationError> {
        FactorizationSchema::parse(DIVING48_QUERIES_CSV, DIVING48_CLASSES_CSV)
    }

    /// The synthetic benchmark schema (27 classes, 3 queries).
    pub fn synthetic() -> Result<FactorizationSchema, FactorizationError> {
        FactorizationSchema::parse(SYNTH_QUERIES_CSV, SYNTH_CLASSES_CSV)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diving_schema_loads_and_round_trips() {
        let schema = bundled::diving48().unwrap();
        assert_eq!(schema.query_count(), 4);
        assert_eq!(schema.class_count(), 48);
        assert_eq!(schema.arities(), vec![5, 9, 9, 5]);
        assert_eq!(schema.category_to_attributes(0).unwrap(), &[1, 7, 14, 24]);
        assert_eq!(schema.category_to_attributes(30).unwrap(), &[2, 5, 13, 23]);
        assert_eq!(schema.attributes_to_category(&[1, 7, 14, 24]).unwrap(), Some(0));
        for c in 0..48 {
            let tuple = schema.category_to_attributes(c).unwrap().to_vec();
            assert_eq!(schema.attributes_to_category(&tuple).unwrap(), Some(c));
        }
    }

    #[test]
    fn published_diving_classes_fail_with_duplicate_tuples() {
        let data = SchemaData::parse(
            bundled::DIVING48_QUERIES_CSV,
            bundled::DIVING48_CLASSES_PUBLISHED_CSV,
        )
        .unwrap();
        let report = data.validate();
        let dups: Vec<(usize, usize)> = report
            .violations
            .iter()
            .filter_map(|v| match v {
                SchemaViolation::DuplicateTuple {
                    first_class,
                    second_class,
                } => Some((*first_class, *second_class)),
                _ => None,
            })
            .collect();
        assert_eq!(
            dups,
            vec![(15, 29), (31, 41), (33, 43), (34, 44), (35, 45), (36, 46)]
        );
        assert_eq!(report.violations.len(), 6);
    }

    #[test]
    fn synthetic_schema_is_the_full_product_with_optional_accent() {
        let schema = bundled::synthetic().unwrap();
        assert_eq!(schema.query_count(), 3);
        assert_eq!(schema.class_count(), 27);
        assert_eq!(schema.arities(), vec![4, 4, 3]);
        assert_eq!(schema.category_to_attributes(2).unwrap(), &[1, 4, 0]);
        assert_eq!(schema.local_indices(2).unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn absent_combination_is_none_not_an_error() {
        let schema = bundled::diving48().unwrap();
        // Valid ids per query, but no such dive exists.
        assert_eq!(schema.attributes_to_category(&[1, 12, 20, 23]).unwrap(), None);
        assert!(matches!(
            schema.attributes_to_category(&[1, 7, 14]),
            Err(FactorizationError::TupleArity { expected: 4, found: 3 })
        ));
        assert!(matches!(
            schema.attributes_to_category(&[99, 7, 14, 24]),
            Err(FactorizationError::UnknownAttribute { query: 0, attribute: 99 })
        ));
    }

    #[test]
    fn unknown_attribute_in_classes_is_one_violation() {
        let queries = "q_id,q_name,att_id,att_name\n-,-,0,null\n0,shape,1,round\n0,shape,2,square\n";
        let classes = "class_index,class_name,att_q0\n0,Round,1\n1,Odd,9\n";
        let data = SchemaData::parse(queries, classes).unwrap();
        let report = data.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            SchemaViolation::UnknownAttribute {
                class_index: 1,
                query: 0,
                attribute: 9
            }
        ));
    }

    #[test]
    fn duplicate_class_name_is_a_warning_not_a_violation() {
        let queries = "q_id,q_name,att_id,att_name\n-,-,0,null\n0,shape,1,round\n0,shape,2,square\n";
        let classes = "class_index,class_name,att_q0\n0,Thing,1\n1,Thing,2\n";
        let data = SchemaData::parse(queries, classes).unwrap();
        let report = data.validate();
        assert!(report.is_clean());
        assert_eq!(report.warnings.len(), 1);
        // The schema still loads.
        FactorizationSchema::from_data(data).unwrap();
    }

    #[test]
    fn class_prob_uniform_inputs_give_uniform_products() {
        let schema = bundled::synthetic().unwrap();
        let per_query: Vec<Vec<f64>> = schema
            .arities()
            .iter()
            .map(|&n| vec![1.0 / n as f64; n])
            .collect();
        let probs = schema.class_prob_from_attributes(&per_query).unwrap();
        let expected = 1.0 / (4.0 * 4.0 * 3.0);
        for p in &probs {
            assert!((p - expected).abs() < 1e-12);
        }
        let total: f64 = probs.iter().sum();
        assert!(total <= 1.0 + 1e-9, "sum {total} exceeds 1");
    }

    #[test]
    fn class_prob_concentrates_where_attributes_agree() {
        let schema = bundled::synthetic().unwrap();
        // Near-certain: ramp, slow, no accent -> class 2.
        let mut per_query = vec![
            vec![0.01, 0.97, 0.01, 0.01],
            vec![0.01, 0.97, 0.01, 0.01],
            vec![0.98, 0.01, 0.01],
        ];
        let probs = schema.class_prob_from_attributes(&per_query).unwrap();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(argmax, 2);
        per_query[0][1] = 1.5;
        assert!(schema.class_prob_from_attributes(&per_query).is_err());
    }

    #[test]
    fn edit_distance_matches_known_cases() {
        assert_eq!(edit_distance(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 9, 3]), 1);
        assert_eq!(edit_distance(&[1, 2], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[], &[5, 6]), 2);
        // kitten -> sitting in id form.
        let kitten = [10, 8, 19, 19, 4, 13];
        let sitting = [18, 8, 19, 19, 8, 13, 6];
        assert_eq!(edit_distance(&kitten, &sitting), 3);
    }

    #[test]
    fn class_from_sequence_prefers_lowest_index_on_ties() {
        let schema = bundled::synthetic().unwrap();
        // Exact match decodes exactly.
        for c in [0usize, 2, 13, 26] {
            let seq = schema.attribute_sequence(c).unwrap();
            assert_eq!(schema.class_from_sequence(&seq), c);
        }
        // (1, 4) is class 2's sequence (accent null). Dropping everything
        // leaves an empty decode, equidistant from many; lowest index wins.
        let empty: Vec<u32> = vec![];
        let cands: Vec<usize> = (0..27)
            .filter(|&c| {
                let s = schema.attribute_sequence(c).unwrap();
                edit_distance(&empty, &s)
                    == (0..27)
                        .map(|k| edit_distance(&empty, &schema.attribute_sequence(k).unwrap()))
                        .min()
                        .unwrap()
            })
            .collect();
        assert_eq!(schema.class_from_sequence(&empty), cands[0]);
    }

    #[test]
    fn csv_round_trip_preserves_schema() {
        let schema = bundled::diving48().unwrap();
        let (q, c) = schema.to_csv_strings();
        let again = FactorizationSchema::parse(&q, &c).unwrap();
        assert_eq!(schema, again);
    }
}
