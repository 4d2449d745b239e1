//! Raw annotation events to enriched, tokenized patient timelines.
//!
//! Processing order is fixed: global frequency filter, per-patient frequency
//! filter, ancestor pruning, bucketing with in-bucket dedupe, age tokens,
//! separators, demographic prefix, death marker, and finally splitting into
//! fragments of bounded concept count.

mod io;
mod stats;
mod token;

pub use io::{
    read_demographics, read_events, read_jsonl, read_timelines, write_demographics,
    write_events, write_jsonl, write_timelines, DemographicsRow,
};
pub use stats::{corpus_stats, AgeBand, CorpusStats, StratumStats};
pub use token::{Ethnicity, Sex, Token, TokenParseError};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{ConceptId, Ontology};

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("no demographics for patient {0}")]
    MissingDemographics(String),
    #[error("patient {patient}: event on {date} lies outside the recorded lifespan")]
    EventOutsideLifespan { patient: String, date: NaiveDate },
    #[error("patient {0}: death date precedes birth date")]
    InvalidLifespan(String),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("invalid build config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One extracted concept mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub patient_id: String,
    pub timestamp: NaiveDate,
    pub concept: ConceptId,
}

impl AnnotationEvent {
    pub fn new(patient_id: &str, timestamp: NaiveDate, concept: &str) -> Self {
        AnnotationEvent {
            patient_id: patient_id.to_string(),
            timestamp,
            concept: ConceptId::new(concept),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub birth_date: NaiveDate,
    pub death_date: Option<NaiveDate>,
}

impl Demographics {
    /// Completed years at `date`, saturating at 0 before birth and capped at 130.
    pub fn age_at(&self, date: NaiveDate) -> u8 {
        date.years_since(self.birth_date).unwrap_or(0).min(Token::MAX_AGE as u32) as u8
    }

    fn covers(&self, date: NaiveDate) -> bool {
        date >= self.birth_date && self.death_date.is_none_or(|d| date <= d)
    }
}

/// All events of one patient, time-ordered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub events: Vec<AnnotationEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineItem {
    pub token: Token,
    pub t: NaiveDate,
}

/// One fragment of a patient's enriched token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub patient_id: String,
    #[serde(rename = "fragment")]
    pub fragment_index: usize,
    pub items: Vec<TimelineItem>,
}

impl Timeline {
    pub fn concept_count(&self) -> usize {
        self.items.iter().filter(|i| i.token.is_concept()).count()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.items.iter().map(|i| &i.token)
    }

    pub fn spellings(&self) -> Vec<String> {
        self.tokens().map(Token::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub bucket_days: u32,
    pub max_concepts: usize,
    pub min_concepts: usize,
    pub min_global_count: usize,
    pub min_patient_count: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            bucket_days: 1,
            max_concepts: 256,
            min_concepts: 10,
            min_global_count: 100,
            min_patient_count: 2,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), TimelineError> {
        let bad = |m: &str| Err(TimelineError::InvalidConfig(m.to_string()));
        if self.bucket_days == 0 {
            return bad("bucket_days must be positive");
        }
        if self.max_concepts == 0 || self.min_concepts == 0 {
            return bad("concept bounds must be positive");
        }
        if self.min_concepts > self.max_concepts {
            return bad("min_concepts exceeds max_concepts");
        }
        if self.min_global_count == 0 || self.min_patient_count == 0 {
            return bad("frequency thresholds must be positive");
        }
        Ok(())
    }
}

/// Groups events by patient, sorted by (timestamp, concept id).
pub fn aggregate_events(
    events: impl IntoIterator<Item = AnnotationEvent>,
    demographics: &BTreeMap<String, Demographics>,
) -> Result<Vec<PatientRecord>, TimelineError> {
    let mut grouped: BTreeMap<String, Vec<AnnotationEvent>> = BTreeMap::new();
    for event in events {
        let demo = demographics
            .get(&event.patient_id)
            .ok_or_else(|| TimelineError::MissingDemographics(event.patient_id.clone()))?;
        if !demo.covers(event.timestamp) {
            return Err(TimelineError::EventOutsideLifespan {
                patient: event.patient_id,
                date: event.timestamp,
            });
        }
        grouped.entry(event.patient_id.clone()).or_default().push(event);
    }
    Ok(grouped
        .into_iter()
        .map(|(patient_id, mut events)| {
            events.sort_by(|a, b| (a.timestamp, &a.concept).cmp(&(b.timestamp, &b.concept)));
            PatientRecord {
                demographics: demographics[&patient_id].clone(),
                patient_id,
                events,
            }
        })
        .collect())
}

/// Drops globally rare concepts, then concepts seen too rarely per patient.
pub fn apply_frequency_filters(records: Vec<PatientRecord>, cfg: &BuildConfig) -> Vec<PatientRecord> {
    let mut global: HashMap<ConceptId, usize> = HashMap::new();
    for e in records.iter().flat_map(|r| &r.events) {
        *global.entry(e.concept.clone()).or_default() += 1;
    }
    records
        .into_iter()
        .map(|mut r| {
            r.events.retain(|e| global[&e.concept] >= cfg.min_global_count);
            let mut local: HashMap<&ConceptId, usize> = HashMap::new();
            for e in &r.events {
                *local.entry(&e.concept).or_default() += 1;
            }
            let keep: BTreeSet<ConceptId> = local
                .into_iter()
                .filter(|(_, n)| *n >= cfg.min_patient_count)
                .map(|(c, _)| c.clone())
                .collect();
            r.events.retain(|e| keep.contains(&e.concept));
            r
        })
        .collect()
}

/// Removes every event whose concept is a strict ancestor of a concept kept on
/// a strictly earlier date.
pub fn prune_ancestors(events: &[AnnotationEvent], ontology: &Ontology) -> Vec<AnnotationEvent> {
    let mut covered: BTreeSet<ConceptId> = BTreeSet::new();
    let mut kept = Vec::with_capacity(events.len());
    let mut start = 0;
    while start < events.len() {
        let day = events[start].timestamp;
        let end = start + events[start..].iter().take_while(|e| e.timestamp == day).count();
        let today: Vec<&AnnotationEvent> = events[start..end]
            .iter()
            .filter(|e| !covered.contains(&e.concept))
            .collect();
        for e in today {
            covered.extend(ontology.ancestors(&e.concept));
            kept.push(e.clone());
        }
        start = end;
    }
    kept
}

/// Splits events into windows of `bucket_days` anchored at the first event and
/// drops repeated concepts inside a window, keeping the earliest.
pub fn dedupe_buckets(events: &[AnnotationEvent], bucket_days: u32) -> Vec<Vec<AnnotationEvent>> {
    let Some(anchor) = events.first().map(|e| e.timestamp) else {
        return Vec::new();
    };
    let mut buckets: Vec<(i64, Vec<AnnotationEvent>)> = Vec::new();
    for e in events {
        let idx = (e.timestamp - anchor).num_days() / bucket_days as i64;
        match buckets.last_mut() {
            Some((b, items)) if *b == idx => {
                if !items.iter().any(|x| x.concept == e.concept) {
                    items.push(e.clone());
                }
            }
            _ => buckets.push((idx, vec![e.clone()])),
        }
    }
    buckets.into_iter().map(|(_, items)| items).collect()
}

fn prefix(demo: &Demographics, age: u8, t: NaiveDate) -> [TimelineItem; 3] {
    [
        TimelineItem { token: Token::Sex(demo.sex), t },
        TimelineItem { token: Token::Ethnicity(demo.ethnicity), t },
        TimelineItem { token: Token::Age(age), t },
    ]
}

/// Enriches one frequency-filtered record into zero or more timeline fragments.
pub fn build_timeline(record: &PatientRecord, ontology: &Ontology, cfg: &BuildConfig) -> Vec<Timeline> {
    let demo = &record.demographics;
    let pruned = prune_ancestors(&record.events, ontology);
    let buckets = dedupe_buckets(&pruned, cfg.bucket_days);
    if buckets.is_empty() {
        return Vec::new();
    }

    let first_age = demo.age_at(buckets[0][0].timestamp);
    let mut body: Vec<TimelineItem> = Vec::new();
    let mut last_age = first_age;
    for (i, bucket) in buckets.iter().enumerate() {
        let t = bucket[0].timestamp;
        if i > 0 {
            body.push(TimelineItem { token: Token::Sep, t });
            let age = demo.age_at(t);
            if age != last_age {
                body.push(TimelineItem { token: Token::Age(age), t });
                last_age = age;
            }
        }
        body.extend(bucket.iter().map(|e| TimelineItem {
            token: Token::Concept(e.concept.clone()),
            t: e.timestamp,
        }));
    }
    if let Some(death) = demo.death_date {
        body.push(TimelineItem { token: Token::Death, t: death });
    }

    // Split into fragments of at most max_concepts concepts. Separator and age
    // tokens that would open a fragment are absorbed by its fresh prefix.
    struct Fragment {
        age: u8,
        items: Vec<TimelineItem>,
        concepts: usize,
    }
    let mut fragments: Vec<Fragment> = Vec::new();
    let mut pending: Vec<TimelineItem> = Vec::new();
    let mut current_age = first_age;
    for item in body {
        match item.token {
            Token::Concept(_) => {
                let full = fragments.last().is_none_or(|f| f.concepts >= cfg.max_concepts);
                if full {
                    fragments.push(Fragment { age: current_age, items: Vec::new(), concepts: 0 });
                    pending.clear();
                }
                let frag = fragments.last_mut().expect("fragment exists");
                frag.items.append(&mut pending);
                frag.items.push(item);
                frag.concepts += 1;
            }
            Token::Age(a) => {
                current_age = a;
                pending.push(item);
            }
            _ => pending.push(item),
        }
    }
    if let Some(last) = fragments.last_mut() {
        last.items.append(&mut pending);
    }

    fragments
        .into_iter()
        .enumerate()
        .filter(|(_, f)| f.concepts >= cfg.min_concepts)
        .map(|(idx, f)| {
            let t = f.items[0].t;
            let mut items: Vec<TimelineItem> = prefix(demo, f.age, t).into();
            items.extend(f.items);
            Timeline {
                patient_id: record.patient_id.clone(),
                fragment_index: idx,
                items,
            }
        })
        .collect()
}

/// Builds timelines for every record, in record order.
pub fn build_timelines(records: &[PatientRecord], ontology: &Ontology, cfg: &BuildConfig) -> Vec<Timeline> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| build_timeline(r, ontology, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Chooses the held-out patient ids: `round(n * fraction)` of them.
pub fn split_patients(
    patient_ids: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<BTreeSet<String>, TimelineError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TimelineError::InvalidFraction(test_fraction));
    }
    let mut ids: Vec<&String> = patient_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids.into_iter().take(n_test).cloned().collect())
}

/// Patient-level train/test split; input order is preserved on both sides.
pub fn split_corpus(
    records: Vec<PatientRecord>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>), TimelineError> {
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let test_ids = split_patients(&ids, test_fraction, seed)?;
    Ok(records.into_iter().partition(|r| !test_ids.contains(&r.patient_id)))
}
