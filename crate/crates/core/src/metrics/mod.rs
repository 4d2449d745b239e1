//! Time-windowed top-k forecast evaluation.
//!
//! Every concept position of a test timeline is scored with the true prefix.
//! Candidates are restricted to the ground truth's concept type and to its
//! novelty (new or recurring for the patient). A candidate counts as a true
//! positive if the patient actually has that concept within the window
//! `[t_j, t_j + T]`; the ground truth missing from the top k adds a false
//! negative.

mod reference;
mod render;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError, Vocab, UNK};
use crate::ontology::{ConceptId, ConceptType, Ontology};
use crate::timeline::{AnnotationEvent, Timeline, Token};

pub use reference::reference_evaluate;
pub use render::render_table;

/// Anything that yields next-token distributions over a vocabulary.
pub trait Predictor: Sync {
    fn vocab(&self) -> &Vocab;

    /// Longest prefix the predictor accepts.
    fn max_prefix(&self) -> usize;

    fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;

    /// Row `j` is the distribution after `tokens[..=j]`.
    fn sequence_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        (1..=tokens.len()).map(|j| self.next_distribution(&tokens[..j])).collect()
    }
}

impl Predictor for Model {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_prefix(&self) -> usize {
        self.config().context_len
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        Model::next_distribution(self, prefix)
    }

    fn sequence_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        Model::sequence_distributions(self, tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeRange {
    Days(u32),
    Infinite,
}

impl TimeRange {
    pub fn contains(self, start: NaiveDate, date: NaiveDate) -> bool {
        date >= start
            && match self {
                TimeRange::Infinite => true,
                TimeRange::Days(n) => start.checked_add_days(Days::new(n as u64)).is_none_or(|end| date <= end),
            }
    }
}

impl fmt::Display for TimeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeRange::Days(n) => write!(f, "{n}d"),
            TimeRange::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for TimeRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(TimeRange::Infinite);
        }
        let digits = s.strip_suffix('d').unwrap_or(s);
        match digits.parse::<u32>() {
            Ok(n) if n > 0 => Ok(TimeRange::Days(n)),
            _ => Err(format!("time range must be a positive day count or `inf`, got {s:?}")),
        }
    }
}

impl Serialize for TimeRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TypeGroup {
    All,
    Disorders,
    Findings,
    Substances,
    Procedures,
}

impl TypeGroup {
    pub const ALL: [TypeGroup; 5] =
        [TypeGroup::All, TypeGroup::Disorders, TypeGroup::Findings, TypeGroup::Substances, TypeGroup::Procedures];

    /// Whether a ground truth of type `ty` is scored in this group.
    pub fn includes(self, ty: ConceptType) -> bool {
        match self {
            TypeGroup::All => true,
            TypeGroup::Disorders => ty == ConceptType::Disorder,
            TypeGroup::Findings => ty == ConceptType::Finding,
            TypeGroup::Substances => ty == ConceptType::Substance,
            TypeGroup::Procedures => ty == ConceptType::Procedure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Novelty {
    New,
    Recurring,
}

impl Novelty {
    pub fn of(seen_before: bool) -> Novelty {
        if seen_before {
            Novelty::Recurring
        } else {
            Novelty::New
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub time_ranges: Vec<TimeRange>,
    pub top_ks: Vec<usize>,
    pub type_groups: Vec<TypeGroup>,
    pub novelty_modes: Vec<Novelty>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            time_ranges: vec![TimeRange::Days(30), TimeRange::Days(365), TimeRange::Infinite],
            top_ks: vec![1, 5, 10],
            type_groups: TypeGroup::ALL.to_vec(),
            novelty_modes: vec![Novelty::New, Novelty::Recurring],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.time_ranges.is_empty() || self.top_ks.is_empty() || self.type_groups.is_empty() || self.novelty_modes.is_empty() {
            return bad("evaluation lists must be nonempty");
        }
        if self.top_ks.contains(&0) {
            return bad("top-k values must be at least 1");
        }
        if self.time_ranges.contains(&TimeRange::Days(0)) {
            return bad("time ranges must be positive");
        }
        Ok(())
    }

    fn keys(&self) -> impl Iterator<Item = CellKey> + '_ {
        self.type_groups.iter().flat_map(move |&group| {
            self.time_ranges.iter().flat_map(move |&range| {
                self.top_ks.iter().flat_map(move |&k| {
                    self.novelty_modes.iter().map(move |&novelty| CellKey { group, range, k, novelty })
                })
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub group: TypeGroup,
    pub range: TimeRange,
    pub k: usize,
    pub novelty: Novelty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Tally {
    pub fn add(&mut self, other: &Tally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cell {
    /// Evaluated ground-truth positions.
    pub positions: u64,
    pub totals: Tally,
    /// TP/FP are charged to the candidate, FN to the missed ground truth.
    pub per_concept: BTreeMap<ConceptId, Tally>,
}

impl Cell {
    fn charge(&mut self, concept: &ConceptId, f: impl Fn(&mut Tally)) {
        f(&mut self.totals);
        f(self.per_concept.entry(concept.clone()).or_default());
    }

    fn merge(&mut self, other: Cell) {
        self.positions += other.positions;
        self.totals.add(&other.totals);
        for (c, t) in other.per_concept {
            self.per_concept.entry(c).or_default().add(&t);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ReportFile", from = "ReportFile")]
pub struct MetricsReport {
    pub cells: BTreeMap<CellKey, Cell>,
}

impl MetricsReport {
    /// Every configured cell, zeroed.
    pub fn empty(ec: &EvalConfig) -> MetricsReport {
        MetricsReport { cells: ec.keys().map(|k| (k, Cell::default())).collect() }
    }

    pub fn cell(&self, key: &CellKey) -> Option<&Cell> {
        self.cells.get(key)
    }

    fn merge(&mut self, other: MetricsReport) {
        for (k, c) in other.cells {
            self.cells.entry(k).or_default().merge(c);
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

#[derive(Serialize, Deserialize)]
struct CellRow {
    #[serde(flatten)]
    key: CellKey,
    positions: u64,
    #[serde(flatten)]
    totals: Tally,
    precision: f64,
    recall: f64,
}

#[derive(Serialize, Deserialize)]
struct ConceptRowFile {
    #[serde(flatten)]
    key: CellKey,
    concept: ConceptId,
    #[serde(flatten)]
    tally: Tally,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    cells: Vec<CellRow>,
    per_concept: Vec<ConceptRowFile>,
}

impl From<MetricsReport> for ReportFile {
    fn from(r: MetricsReport) -> Self {
        let mut cells = Vec::new();
        let mut per_concept = Vec::new();
        for (key, cell) in r.cells {
            cells.push(CellRow {
                key,
                positions: cell.positions,
                totals: cell.totals,
                precision: cell.totals.precision(),
                recall: cell.totals.recall(),
            });
            per_concept.extend(cell.per_concept.into_iter().map(|(concept, tally)| ConceptRowFile { key, concept, tally }));
        }
        ReportFile { cells, per_concept }
    }
}

impl From<ReportFile> for MetricsReport {
    fn from(f: ReportFile) -> Self {
        let mut cells: BTreeMap<CellKey, Cell> = f
            .cells
            .into_iter()
            .map(|r| (r.key, Cell { positions: r.positions, totals: r.totals, per_concept: BTreeMap::new() }))
            .collect();
        for row in f.per_concept {
            cells.entry(row.key).or_default().per_concept.insert(row.concept, row.tally);
        }
        MetricsReport { cells }
    }
}

/// Per-patient filtered event lists, each sorted by date.
pub type PatientHistories = HashMap<String, Vec<AnnotationEvent>>;

pub fn group_histories(events: &[AnnotationEvent]) -> PatientHistories {
    let mut out: PatientHistories = HashMap::new();
    for e in events {
        out.entry(e.patient_id.clone()).or_default().push(e.clone());
    }
    for list in out.values_mut() {
        list.sort_by_key(|e| e.timestamp);
    }
    out
}

/// Concept id and type for every vocabulary slot that holds a known concept.
#[derive(Debug, Clone)]
pub struct ConceptIndex {
    slots: Vec<Option<(ConceptId, ConceptType)>>,
}

impl ConceptIndex {
    pub fn new(vocab: &Vocab, ontology: &Ontology) -> ConceptIndex {
        let slots = (0..vocab.len() as u32)
            .map(|i| {
                let c = vocab.token(i)?.concept()?;
                Some((c.clone(), ontology.type_of(c).ok()?))
            })
            .collect();
        ConceptIndex { slots }
    }

    pub fn get(&self, index: u32) -> Option<&(ConceptId, ConceptType)> {
        self.slots.get(index as usize).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: u32,
    pub concept: ConceptId,
    pub concept_type: ConceptType,
    pub probability: f64,
}

/// Top `k` concepts of `dist`, optionally restricted to one type and to
/// concepts whose presence in `history` matches `novelty`. Ranked by
/// probability, ties by concept id.
pub fn candidate_filter(
    dist: &[f64],
    index: &ConceptIndex,
    concept_type: Option<ConceptType>,
    novelty: Option<Novelty>,
    history: &HashSet<ConceptId>,
    k: usize,
) -> Vec<Candidate> {
    let mut pool: Vec<(u32, &ConceptId, ConceptType)> = index
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|(c, t)| (i as u32, c, *t)))
        .filter(|(_, _, t)| concept_type.is_none_or(|want| *t == want))
        .filter(|(_, c, _)| novelty.is_none_or(|n| Novelty::of(history.contains(*c)) == n))
        .collect();
    let order = |a: &(u32, &ConceptId, ConceptType), b: &(u32, &ConceptId, ConceptType)| -> Ordering {
        dist[b.0 as usize].total_cmp(&dist[a.0 as usize]).then_with(|| a.1.cmp(b.1))
    };
    if k == 0 {
        return Vec::new();
    }
    if pool.len() > k {
        pool.select_nth_unstable_by(k - 1, order);
        pool.truncate(k);
    }
    pool.sort_by(order);
    pool.into_iter()
        .map(|(i, c, t)| Candidate { index: i, concept: c.clone(), concept_type: t, probability: dist[i as usize] })
        .collect()
}

/// Scores every concept position of `test` against the patients' full
/// filtered histories.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    ontology: &Ontology,
    test: &[Timeline],
    histories: &PatientHistories,
    ec: &EvalConfig,
) -> Result<MetricsReport, ModelError> {
    ec.validate()?;
    let index = ConceptIndex::new(predictor.vocab(), ontology);
    let empty = Vec::new();
    let partials = test
        .par_iter()
        .map(|t| {
            let events = histories.get(&t.patient_id).unwrap_or(&empty);
            evaluate_timeline(predictor, &index, t, events, ec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = MetricsReport::empty(ec);
    for p in partials {
        report.merge(p);
    }
    Ok(report)
}

fn evaluate_timeline<P: Predictor + ?Sized>(
    predictor: &P,
    index: &ConceptIndex,
    timeline: &Timeline,
    events: &[AnnotationEvent],
    ec: &EvalConfig,
) -> Result<MetricsReport, ModelError> {
    let mut report = MetricsReport::empty(ec);
    let seq = predictor.vocab().encode_timeline(timeline);
    let inputs = (seq.len().saturating_sub(1)).min(predictor.max_prefix());
    if inputs == 0 {
        return Ok(report);
    }
    let dists = predictor.sequence_distributions(&seq[..inputs])?;

    let mut dates: HashMap<&ConceptId, Vec<NaiveDate>> = HashMap::new();
    for e in events {
        dates.entry(&e.concept).or_default().push(e.timestamp);
    }
    let max_k = ec.top_ks.iter().copied().max().unwrap_or(1);
    let mut history: HashSet<ConceptId> = HashSet::new();
    let mut consumed = 0;
    if let Some(Token::Concept(c)) = timeline.items.first().map(|i| &i.token) {
        history.insert(c.clone());
    }

    for j in 1..=inputs {
        let item = &timeline.items[j];
        while consumed < events.len() && events[consumed].timestamp < item.t {
            history.insert(events[consumed].concept.clone());
            consumed += 1;
        }
        let target = match &item.token {
            Token::Concept(g) if seq[j] != UNK => index.get(seq[j]).map(|(_, ty)| (g, *ty)),
            _ => None,
        };
        if let Some((g, ty)) = target {
            let novelty = Novelty::of(history.contains(g));
            if ec.novelty_modes.contains(&novelty) {
                let ranked = candidate_filter(&dists[j - 1], index, Some(ty), Some(novelty), &history, max_k);
                let first_hit: Vec<Option<NaiveDate>> = ranked
                    .iter()
                    .map(|c| {
                        let ds = dates.get(&c.concept)?;
                        ds.get(ds.partition_point(|d| *d < item.t)).copied()
                    })
                    .collect();
                for (key, cell) in report.cells.iter_mut() {
                    if key.novelty != novelty || !key.group.includes(ty) {
                        continue;
                    }
                    cell.positions += 1;
                    let top = &ranked[..key.k.min(ranked.len())];
                    for (c, hit) in top.iter().zip(&first_hit) {
                        if hit.is_some_and(|d| key.range.contains(item.t, d)) {
                            cell.charge(&c.concept, |t| t.tp += 1);
                        } else {
                            cell.charge(&c.concept, |t| t.fp += 1);
                        }
                    }
                    if !top.iter().any(|c| &c.concept == g) {
                        cell.charge(g, |t| t.fn_ += 1);
                    }
                }
            }
        }
        if let Token::Concept(c) = &item.token {
            history.insert(c.clone());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: ConceptId,
    pub tp: u64,
    pub fp: u64,
    pub precision: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub best: Vec<ConceptScore>,
    pub worst: Vec<ConceptScore>,
}

/// Best and worst `top_n` concepts of one cell by precision, among concepts
/// that were forecast at least once. Ties go to the smaller concept id.
pub fn per_concept_breakdown(report: &MetricsReport, key: &CellKey, top_n: usize) -> Breakdown {
    let Some(cell) = report.cell(key) else {
        return Breakdown::default();
    };
    let scored: Vec<ConceptScore> = cell
        .per_concept
        .iter()
        .filter(|(_, t)| t.tp + t.fp > 0)
        .map(|(c, t)| ConceptScore { concept: c.clone(), tp: t.tp, fp: t.fp, precision: t.precision() })
        .collect();
    let mut best = scored.clone();
    best.sort_by(|a, b| b.precision.total_cmp(&a.precision).then_with(|| a.concept.cmp(&b.concept)));
    best.truncate(top_n);
    let mut worst = scored;
    worst.sort_by(|a, b| a.precision.total_cmp(&b.precision).then_with(|| a.concept.cmp(&b.concept)));
    worst.truncate(top_n);
    Breakdown { best, worst }
}
