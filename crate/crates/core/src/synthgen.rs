//! Synthetic patient populations from a known first-order Markov process.
//!
//! A world fixes an ontology, one transition kernel per sex stratum, a set of
//! chronic concepts that keep recurring once seen, a geometric gap between
//! events and a per-concept death hazard. Because the kernel is known, the
//! best achievable next-concept accuracy can be computed exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::mix;
use crate::ontology::{ConceptId, ConceptRow, ConceptType, Ontology, OntologyError};
use crate::timeline::{aggregate_events, AnnotationEvent, Demographics, Ethnicity, PatientRecord, Sex, Timeline, TimelineError, Token};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_concepts: usize,
    pub n_patients: usize,
    /// Mean walk length per patient; budgets are uniform on [mean/2, 3·mean/2].
    pub mean_events: f64,
    pub seed: u64,
    /// Number of hierarchy levels; 1 is flat.
    pub hierarchy_depth: usize,
    pub chronic_fraction: f64,
    /// Probability mass each concept puts on its preferred successor.
    pub dominance: f64,
    pub gap_mean_days: f64,
    pub gap_min_days: u32,
    /// Upper bound of the per-event death hazard.
    pub max_mortality: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_concepts: 40,
            n_patients: 1000,
            mean_events: 20.0,
            seed: 0,
            hierarchy_depth: 3,
            chronic_fraction: 0.2,
            dominance: 0.6,
            gap_mean_days: 7.0,
            gap_min_days: 1,
            max_mortality: 0.01,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
        if self.n_concepts == 0 || self.n_patients == 0 || self.hierarchy_depth == 0 {
            return bad("concept, patient and hierarchy counts must be positive");
        }
        if !(self.mean_events >= 1.0 && self.mean_events.is_finite()) {
            return bad("mean_events must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.chronic_fraction) || !(0.0..=1.0).contains(&self.dominance) {
            return bad("chronic_fraction and dominance must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.max_mortality) {
            return bad("max_mortality must lie in [0, 1]");
        }
        if !(self.gap_mean_days >= self.gap_min_days as f64 && self.gap_mean_days.is_finite()) {
            return bad("gap_mean_days must be at least gap_min_days");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConcept {
    pub id: ConceptId,
    pub name: String,
    pub concept_type: ConceptType,
    pub parents: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub concepts: Vec<SynthConcept>,
    /// `[stratum][from][to]`; strata follow [`Sex::ALL`]. A single stratum is
    /// shared by everyone.
    pub kernel: Vec<Vec<Vec<f64>>>,
    /// `[stratum][to]`, distribution of the first concept.
    pub initial: Vec<Vec<f64>>,
    /// Per-concept probability of recurring on each later event day once seen.
    pub chronic: Vec<f64>,
    /// Per-concept probability of death right after the concept occurs.
    pub mortality: Vec<f64>,
    pub mean_events: f64,
    pub gap_mean_days: f64,
    pub gap_min_days: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub events: Vec<AnnotationEvent>,
    pub demographics: BTreeMap<String, Demographics>,
}

impl Population {
    pub fn records(&self) -> Result<Vec<PatientRecord>, TimelineError> {
        aggregate_events(self.events.iter().cloned(), &self.demographics)
    }
}

fn noise_row(rng: &mut ChaCha8Rng, n: usize, skip: Option<usize>) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|j| if Some(j) == skip { 0.0 } else { Exp1.sample(rng) }).collect();
    let z: f64 = row.iter().sum();
    if z > 0.0 {
        row.iter_mut().for_each(|p| *p /= z);
    } else {
        row = vec![1.0 / n as f64; n];
    }
    row
}

fn blend(a: &[f64], b: &[f64], wa: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + (1.0 - wa) * y).collect()
}

fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut u = rng.random::<f64>() * probs.iter().sum::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

const MAIN_TYPES: [ConceptType; 4] =
    [ConceptType::Disorder, ConceptType::Finding, ConceptType::Substance, ConceptType::Procedure];

fn draw_type(rng: &mut ChaCha8Rng) -> ConceptType {
    let u: f64 = rng.random();
    match u {
        u if u < 0.35 => ConceptType::Disorder,
        u if u < 0.60 => ConceptType::Finding,
        u if u < 0.80 => ConceptType::Substance,
        u if u < 0.95 => ConceptType::Procedure,
        _ => {
            let others: Vec<ConceptType> = ConceptType::ALL.into_iter().filter(|t| !MAIN_TYPES.contains(t)).collect();
            others[rng.random_range(0..others.len())]
        }
    }
}

/// Builds a random world; identical parameters give an identical world.
pub fn build_world(p: &SynthParams) -> Result<SynthWorld, SynthError> {
    p.validate()?;
    let n = p.n_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = n.to_string().len().max(3);
    let levels = p.hierarchy_depth.min(n);
    let level_start = |l: usize| (l * n).div_ceil(levels);

    let mut concepts = Vec::with_capacity(n);
    for i in 0..n {
        let concept_type = if i < MAIN_TYPES.len() { MAIN_TYPES[i] } else { draw_type(&mut rng) };
        let level = (i * levels) / n;
        let parents = if level == 0 {
            Vec::new()
        } else {
            let j = rng.random_range(level_start(level - 1)..level_start(level));
            vec![ConceptId::new(format!("S{j:0width$}"))]
        };
        concepts.push(SynthConcept {
            id: ConceptId::new(format!("S{i:0width$}")),
            name: format!("synthetic {} {i}", concept_type.name().to_lowercase()),
            concept_type,
            parents,
        });
    }

    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if n == 1 {
                return vec![1.0];
            }
            let noise = noise_row(&mut rng, n, Some(i));
            let mut succ = rng.random_range(0..n - 1);
            if succ >= i {
                succ += 1;
            }
            let mut row: Vec<f64> = noise.iter().map(|x| (1.0 - p.dominance) * x).collect();
            row[succ] += p.dominance;
            row
        })
        .collect();
    let base_init = noise_row(&mut rng, n, None);
    let mut kernel = Vec::with_capacity(Sex::ALL.len());
    let mut initial = Vec::with_capacity(Sex::ALL.len());
    for _ in Sex::ALL {
        let rows = (0..n)
            .map(|i| {
                let own = noise_row(&mut rng, n, if n > 1 { Some(i) } else { None });
                blend(&base[i], &own, 0.8)
            })
            .collect();
        kernel.push(rows);
        initial.push(blend(&base_init, &noise_row(&mut rng, n, None), 0.8));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_chronic = (n as f64 * p.chronic_fraction).round() as usize;
    let mut chronic = vec![0.0; n];
    for &i in &order[..n_chronic] {
        chronic[i] = rng.random_range(0.3..0.8);
    }
    let mortality = (0..n).map(|_| rng.random::<f64>() * p.max_mortality).collect();

    let world = SynthWorld {
        concepts,
        kernel,
        initial,
        chronic,
        mortality,
        mean_events: p.mean_events,
        gap_mean_days: p.gap_mean_days,
        gap_min_days: p.gap_min_days,
    };
    world.validate()?;
    Ok(world)
}

impl SynthWorld {
    /// A world with one explicit kernel shared by all strata, all concepts
    /// typed as disorders, no chronic recurrence and no mortality.
    pub fn from_kernel(ids: &[&str], kernel: Vec<Vec<f64>>, initial: Vec<f64>, mean_events: f64) -> Result<SynthWorld, SynthError> {
        let n = ids.len();
        let world = SynthWorld {
            concepts: ids
                .iter()
                .map(|id| SynthConcept {
                    id: ConceptId::from(*id),
                    name: format!("synthetic {id}"),
                    concept_type: ConceptType::Disorder,
                    parents: Vec::new(),
                })
                .collect(),
            kernel: vec![kernel],
            initial: vec![initial],
            chronic: vec![0.0; n],
            mortality: vec![0.0; n],
            mean_events,
            gap_mean_days: 7.0,
            gap_min_days: 1,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.concepts.len();
        let bad = |m: String| Err(SynthError::InvalidWorld(m));
        if n == 0 {
            return bad("no concepts".into());
        }
        if self.kernel.is_empty() || self.kernel.len() != self.initial.len() {
            return bad("kernel and initial distributions need matching strata".into());
        }
        let check_row = |row: &[f64]| {
            row.len() == n && row.iter().all(|p| (0.0..=1.0).contains(p)) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        for (s, rows) in self.kernel.iter().enumerate() {
            if rows.len() != n {
                return bad(format!("stratum {s} has {} rows for {n} concepts", rows.len()));
            }
            if let Some(i) = rows.iter().position(|r| !check_row(r)) {
                return bad(format!("stratum {s} row {i} is not a distribution over {n} concepts"));
            }
        }
        if let Some(s) = self.initial.iter().position(|r| !check_row(r)) {
            return bad(format!("initial distribution of stratum {s} is invalid"));
        }
        let unit = |v: &[f64]| v.len() == n && v.iter().all(|p| (0.0..=1.0).contains(p));
        if !unit(&self.chronic) || !unit(&self.mortality) {
            return bad("chronic and mortality probabilities must lie in [0, 1]".into());
        }
        if !(self.mean_events >= 1.0) || !(self.gap_mean_days >= self.gap_min_days as f64) {
            return bad("mean_events must be at least 1 and the gap mean at least its minimum".into());
        }
        Ok(())
    }

    pub fn ontology(&self) -> Result<Ontology, SynthError> {
        let rows = self.concepts.iter().map(|c| {
            let parents: Vec<&str> = c.parents.iter().map(ConceptId::as_str).collect();
            ConceptRow::new(c.id.as_str(), &c.name, c.concept_type, &parents)
        });
        Ok(Ontology::from_rows(rows.collect::<Vec<_>>())?)
    }

    fn stratum(&self, sex: Sex) -> usize {
        let s = Sex::ALL.iter().position(|&x| x == sex).unwrap_or(0);
        s.min(self.kernel.len() - 1)
    }

    fn positions(&self) -> HashMap<&ConceptId, usize> {
        self.concepts.iter().enumerate().map(|(i, c)| (&c.id, i)).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SynthWorld, SynthError> {
        let w: SynthWorld = serde_json::from_str(&fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }
}

fn sample_patient(w: &SynthWorld, pid: String, rng: &mut ChaCha8Rng) -> (Vec<AnnotationEvent>, Demographics) {
    let sex = match rng.random::<f64>() {
        u if u < 0.48 => Sex::Female,
        u if u < 0.96 => Sex::Male,
        _ => Sex::Unknown,
    };
    let ethnicity = Ethnicity::ALL[rng.random_range(0..Ethnicity::ALL.len())];
    let epoch = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let start = epoch + Days::new(rng.random_range(0..5000));
    let age_days = rng.random_range(18 * 365..80 * 365);
    let birth_date = start - Days::new(age_days);

    let lo = (w.mean_events / 2.0).ceil().max(1.0) as usize;
    let hi = ((w.mean_events * 1.5).floor() as usize).max(lo);
    let budget = rng.random_range(lo..=hi);
    let extra = w.gap_mean_days - w.gap_min_days as f64;
    let geo = Geometric::new(1.0 / (1.0 + extra)).expect("valid probability");
    let gap = |rng: &mut ChaCha8Rng| Days::new(w.gap_min_days as u64 + geo.sample(rng));

    let s = w.stratum(sex);
    let mut state = pick(rng, &w.initial[s]);
    let mut date = start;
    let mut seen: Vec<usize> = Vec::new();
    let mut seen_set: HashSet<usize> = HashSet::new();
    let mut events = Vec::with_capacity(budget);
    let mut death_date = None;
    for step in 0..budget {
        events.push(AnnotationEvent { patient_id: pid.clone(), timestamp: date, concept: w.concepts[state].id.clone() });
        for &c in &seen {
            if c != state && w.chronic[c] > 0.0 && rng.random::<f64>() < w.chronic[c] {
                events.push(AnnotationEvent { patient_id: pid.clone(), timestamp: date, concept: w.concepts[c].id.clone() });
            }
        }
        if seen_set.insert(state) {
            seen.push(state);
        }
        if w.mortality[state] > 0.0 && rng.random::<f64>() < w.mortality[state] {
            death_date = Some(date + gap(rng));
            break;
        }
        if step + 1 < budget {
            date = date + gap(rng);
            state = pick(rng, &w.kernel[s][state]);
        }
    }
    (events, Demographics { sex, ethnicity, birth_date, death_date })
}

/// Walks the world's kernel for `n_patients` patients. Each patient draws
/// from its own seed, so output is independent of thread count.
pub fn sample_population(w: &SynthWorld, n_patients: usize, seed: u64) -> Population {
    let width = n_patients.to_string().len().max(6);
    let patients: Vec<(String, Vec<AnnotationEvent>, Demographics)> = (0..n_patients)
        .into_par_iter()
        .map(|i| {
            let pid = format!("P{i:0width$}");
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let (events, demo) = sample_patient(w, pid.clone(), &mut rng);
            (pid, events, demo)
        })
        .collect();
    let mut events = Vec::new();
    let mut demographics = BTreeMap::new();
    for (pid, ev, demo) in patients {
        events.extend(ev);
        demographics.insert(pid, demo);
    }
    Population { events, demographics }
}

/// The concept the true kernel rates most likely at each concept position:
/// the initial distribution's mode before any concept, otherwise the mode of
/// the previous concept's row. Concepts unknown to the world yield `None`.
pub fn bayes_predictions(w: &SynthWorld, timeline: &Timeline) -> Vec<(usize, Option<ConceptId>)> {
    let pos = w.positions();
    let sex = timeline
        .tokens()
        .find_map(|t| match t {
            Token::Sex(s) => Some(*s),
            _ => None,
        })
        .unwrap_or(Sex::Unknown);
    let s = w.stratum(sex);
    let mut last: Option<usize> = None;
    let mut out = Vec::new();
    for (j, item) in timeline.items.iter().enumerate() {
        if let Token::Concept(c) = &item.token {
            let row = last.map_or(&w.initial[s], |l| &w.kernel[s][l]);
            out.push((j, Some(w.concepts[argmax(row)].id.clone())));
            last = pos.get(c).copied();
            if last.is_none() {
                out.last_mut().expect("just pushed").1 = None;
            }
        }
    }
    out
}

/// Mean top-1 accuracy of [`bayes_predictions`] over all concept positions.
pub fn bayes_optimal_accuracy(w: &SynthWorld, timelines: &[Timeline]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for t in timelines {
        for (j, pred) in bayes_predictions(w, t) {
            total += 1;
            if pred.as_ref() == t.items[j].token.concept() {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
