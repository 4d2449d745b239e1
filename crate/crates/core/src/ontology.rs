//! Concept vocabulary with types and a parent/child hierarchy.
//!
//! The hierarchy is a DAG: a concept may have several parents, and cycles are
//! rejected at load time. Ancestry is strict, so a concept is never its own
//! ancestor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("i/o error reading concept table: {0}")]
    Io(#[from] std::io::Error),
    #[error("concept table header must be `id\\tname\\ttype\\tparents`, found {0:?}")]
    BadHeader(String),
    #[error("line {line}: expected 4 tab-separated fields, found {found}")]
    MalformedRow { line: usize, found: usize },
    #[error("line {line}: empty concept id")]
    EmptyId { line: usize },
    #[error("duplicate concept {0}")]
    DuplicateConcept(ConceptId),
    #[error("unknown concept type {0:?}")]
    UnknownType(String),
    #[error("hierarchy contains a cycle through {0}")]
    CyclicHierarchy(ConceptId),
    #[error("concept {child} names missing parent {parent}")]
    DanglingParent { child: ConceptId, parent: ConceptId },
    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),
}

/// Concept types selected from the source terminology.
///
/// Nineteen names are listed even though the source describes the set as
/// eighteen types; none is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConceptType {
    Occupation,
    Disorder,
    ClinicalDrug,
    TumourStaging,
    RecordArtifact,
    MedicinalProductForm,
    Organism,
    Situation,
    ObservableEntity,
    Substance,
    Finding,
    AssessmentScale,
    MedicinalProduct,
    BodyStructure,
    PhysicalObject,
    MorphologicAbnormality,
    RegimeTherapy,
    Product,
    Procedure,
}

impl ConceptType {
    pub const ALL: [ConceptType; 19] = [
        ConceptType::Occupation,
        ConceptType::Disorder,
        ConceptType::ClinicalDrug,
        ConceptType::TumourStaging,
        ConceptType::RecordArtifact,
        ConceptType::MedicinalProductForm,
        ConceptType::Organism,
        ConceptType::Situation,
        ConceptType::ObservableEntity,
        ConceptType::Substance,
        ConceptType::Finding,
        ConceptType::AssessmentScale,
        ConceptType::MedicinalProduct,
        ConceptType::BodyStructure,
        ConceptType::PhysicalObject,
        ConceptType::MorphologicAbnormality,
        ConceptType::RegimeTherapy,
        ConceptType::Product,
        ConceptType::Procedure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConceptType::Occupation => "Occupation",
            ConceptType::Disorder => "Disorder",
            ConceptType::ClinicalDrug => "Clinical drug",
            ConceptType::TumourStaging => "Tumour staging",
            ConceptType::RecordArtifact => "Record artifact",
            ConceptType::MedicinalProductForm => "Medicinal product form",
            ConceptType::Organism => "Organism",
            ConceptType::Situation => "Situation",
            ConceptType::ObservableEntity => "Observable entity",
            ConceptType::Substance => "Substance",
            ConceptType::Finding => "Finding",
            ConceptType::AssessmentScale => "Assessment scale",
            ConceptType::MedicinalProduct => "Medicinal product",
            ConceptType::BodyStructure => "Body structure",
            ConceptType::PhysicalObject => "Physical object",
            ConceptType::MorphologicAbnormality => "Morphologic abnormality",
            ConceptType::RegimeTherapy => "Regime/Therapy",
            ConceptType::Product => "Product",
            ConceptType::Procedure => "Procedure",
        }
    }
}

impl fmt::Display for ConceptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConceptType {
    type Err = OntologyError;

    /// Case-insensitive match on the display name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        ConceptType::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| OntologyError::UnknownType(s.to_string()))
    }
}

impl TryFrom<String> for ConceptType {
    type Error = OntologyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ConceptType> for String {
    fn from(t: ConceptType) -> String {
        t.name().to_string()
    }
}

/// Opaque concept identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(id: impl Into<String>) -> Self {
        ConceptId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        ConceptId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub name: String,
    pub concept_type: ConceptType,
}

/// One row of the concept table before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptRow {
    pub id: ConceptId,
    pub name: String,
    pub concept_type: ConceptType,
    pub parents: Vec<ConceptId>,
}

impl ConceptRow {
    pub fn new(id: &str, name: &str, concept_type: ConceptType, parents: &[&str]) -> Self {
        ConceptRow {
            id: ConceptId::new(id),
            name: name.to_string(),
            concept_type,
            parents: parents.iter().map(|p| ConceptId::new(*p)).collect(),
        }
    }
}

pub const CONCEPT_TABLE_HEADER: &str = "id\tname\ttype\tparents";

/// Validated, immutable concept table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ontology {
    concepts: BTreeMap<ConceptId, ConceptInfo>,
    parents: BTreeMap<ConceptId, Vec<ConceptId>>,
}

impl Ontology {
    /// Validates rows into an ontology: ids unique, parents present, no cycles.
    pub fn from_rows(rows: impl IntoIterator<Item = ConceptRow>) -> Result<Self, OntologyError> {
        let mut concepts = BTreeMap::new();
        let mut parents: BTreeMap<ConceptId, Vec<ConceptId>> = BTreeMap::new();
        for row in rows {
            if concepts.contains_key(&row.id) {
                return Err(OntologyError::DuplicateConcept(row.id));
            }
            concepts.insert(
                row.id.clone(),
                ConceptInfo {
                    name: row.name,
                    concept_type: row.concept_type,
                },
            );
            let mut ps = row.parents;
            ps.sort();
            ps.dedup();
            if !ps.is_empty() {
                parents.insert(row.id, ps);
            }
        }
        for (child, ps) in &parents {
            for p in ps {
                if p == child {
                    return Err(OntologyError::CyclicHierarchy(child.clone()));
                }
                if !concepts.contains_key(p) {
                    return Err(OntologyError::DanglingParent {
                        child: child.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        let ontology = Ontology { concepts, parents };
        ontology.check_acyclic()?;
        Ok(ontology)
    }

    /// Reads the tab-separated concept table format, header row included.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, OntologyError> {
        let mut rows = Vec::new();
        let mut lines = reader.lines().enumerate();
        match lines.next() {
            None => return Ok(Ontology::default()),
            Some((_, header)) => {
                let header = header?;
                if header.trim_end_matches('\r') != CONCEPT_TABLE_HEADER {
                    return Err(OntologyError::BadHeader(header));
                }
            }
        }
        for (idx, line) in lines {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(OntologyError::MalformedRow {
                    line: idx + 1,
                    found: fields.len(),
                });
            }
            if fields[0].is_empty() {
                return Err(OntologyError::EmptyId { line: idx + 1 });
            }
            let parents = fields[3]
                .split('|')
                .filter(|p| !p.is_empty())
                .map(ConceptId::new)
                .collect();
            rows.push(ConceptRow {
                id: ConceptId::new(fields[0]),
                name: fields[1].to_string(),
                concept_type: fields[2].parse()?,
                parents,
            });
        }
        Ontology::from_rows(rows)
    }

    pub fn load_path(path: impl AsRef<std::path::Path>) -> Result<Self, OntologyError> {
        let file = std::fs::File::open(path)?;
        Ontology::load(std::io::BufReader::new(file))
    }

    /// Writes the table back out in the load format.
    pub fn write<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CONCEPT_TABLE_HEADER}")?;
        for (id, info) in &self.concepts {
            let parents = self
                .parents(id)
                .iter()
                .map(ConceptId::as_str)
                .collect::<Vec<_>>()
                .join("|");
            writeln!(w, "{}\t{}\t{}\t{}", id, info.name, info.concept_type, parents)?;
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), OntologyError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<&ConceptId, u8> = BTreeMap::new();
        for start in self.concepts.keys() {
            if state.get(start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack: Vec<(&ConceptId, usize)> = vec![(start, 0)];
            state.insert(start, 1);
            while let Some((node, next)) = stack.pop() {
                let ps = self.parents(node);
                if next < ps.len() {
                    stack.push((node, next + 1));
                    let p = &ps[next];
                    match state.get(p).copied().unwrap_or(0) {
                        0 => {
                            state.insert(p, 1);
                            stack.push((p, 0));
                        }
                        1 => return Err(OntologyError::CyclicHierarchy(p.clone())),
                        _ => {}
                    }
                } else {
                    state.insert(node, 2);
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.values().map(Vec::len).sum()
    }

    pub fn contains(&self, c: &ConceptId) -> bool {
        self.concepts.contains_key(c)
    }

    pub fn get(&self, c: &ConceptId) -> Option<&ConceptInfo> {
        self.concepts.get(c)
    }

    pub fn concepts(&self) -> impl Iterator<Item = (&ConceptId, &ConceptInfo)> {
        self.concepts.iter()
    }

    /// Direct parents, sorted.
    pub fn parents(&self, c: &ConceptId) -> &[ConceptId] {
        self.parents.get(c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn type_of(&self, c: &ConceptId) -> Result<ConceptType, OntologyError> {
        self.concepts
            .get(c)
            .map(|i| i.concept_type)
            .ok_or_else(|| OntologyError::UnknownConcept(c.clone()))
    }

    /// True iff `a` is reached from `b` by following one or more child→parent edges.
    pub fn is_ancestor(&self, a: &ConceptId, b: &ConceptId) -> Result<bool, OntologyError> {
        for c in [a, b] {
            if !self.contains(c) {
                return Err(OntologyError::UnknownConcept(c.clone()));
            }
        }
        Ok(self.ancestors(b).contains(a))
    }

    /// Every strict ancestor of `c`. Empty for unknown concepts.
    pub fn ancestors(&self, c: &ConceptId) -> BTreeSet<ConceptId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&ConceptId> = self.parents(c).iter().collect();
        while let Some(p) = stack.pop() {
            if seen.insert(p.clone()) {
                stack.extend(self.parents(p));
            }
        }
        seen
    }
}
