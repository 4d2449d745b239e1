//! Brute-force evaluator used to cross-check [`super::evaluate`]. Each cell is
//! recomputed from scratch with linear scans over the patient's events.

use chrono::{Days, NaiveDate};

use super::{Cell, CellKey, EvalConfig, MetricsReport, Novelty, PatientHistories, Predictor, TimeRange, TypeGroup};
use crate::model::{ModelError, UNK};
use crate::ontology::{ConceptId, ConceptType, Ontology};
use crate::timeline::{AnnotationEvent, Timeline, TimelineItem, Token};

fn type_in_group(group: TypeGroup, ty: ConceptType) -> bool {
    match group {
        TypeGroup::All => true,
        TypeGroup::Disorders => matches!(ty, ConceptType::Disorder),
        TypeGroup::Findings => matches!(ty, ConceptType::Finding),
        TypeGroup::Substances => matches!(ty, ConceptType::Substance),
        TypeGroup::Procedures => matches!(ty, ConceptType::Procedure),
    }
}

fn seen_before(concept: &ConceptId, at: NaiveDate, events: &[AnnotationEvent], prefix: &[TimelineItem]) -> bool {
    for e in events {
        if &e.concept == concept && e.timestamp < at {
            return true;
        }
    }
    for item in prefix {
        if item.token == Token::Concept(concept.clone()) {
            return true;
        }
    }
    false
}

fn occurs_in_window(concept: &ConceptId, start: NaiveDate, range: TimeRange, events: &[AnnotationEvent]) -> bool {
    for e in events {
        if &e.concept != concept || e.timestamp < start {
            continue;
        }
        match range {
            TimeRange::Infinite => return true,
            TimeRange::Days(n) => {
                let end = start.checked_add_days(Days::new(n as u64));
                if end.is_none() || e.timestamp <= end.unwrap() {
                    return true;
                }
            }
        }
    }
    false
}

fn bump(cell: &mut Cell, concept: &ConceptId, tp: u64, fp: u64, fn_: u64) {
    cell.totals.tp += tp;
    cell.totals.fp += fp;
    cell.totals.fn_ += fn_;
    let t = cell.per_concept.entry(concept.clone()).or_default();
    t.tp += tp;
    t.fp += fp;
    t.fn_ += fn_;
}

/// Same contract as [`super::evaluate`]; intended for small corpora only.
pub fn reference_evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    ontology: &Ontology,
    test: &[Timeline],
    histories: &PatientHistories,
    ec: &EvalConfig,
) -> Result<MetricsReport, ModelError> {
    ec.validate()?;
    let vocab = predictor.vocab();
    let mut report = MetricsReport::empty(ec);
    let no_events: Vec<AnnotationEvent> = Vec::new();

    for timeline in test {
        let events = histories.get(&timeline.patient_id).unwrap_or(&no_events);
        let seq: Vec<u32> = timeline.items.iter().map(|i| vocab.encode(&i.token)).collect();
        for j in 1..seq.len() {
            if j > predictor.max_prefix() {
                break;
            }
            let Token::Concept(g) = &timeline.items[j].token else { continue };
            if seq[j] == UNK {
                continue;
            }
            let Some(info) = ontology.get(g) else { continue };
            let g_type = info.concept_type;
            let t_j = timeline.items[j].t;
            let prefix = &timeline.items[..j];
            let novelty = if seen_before(g, t_j, events, prefix) { Novelty::Recurring } else { Novelty::New };
            let dist = predictor.next_distribution(&seq[..j])?;

            for (key, cell) in report.cells.iter_mut() {
                let CellKey { group, range, k, novelty: mode } = *key;
                if mode != novelty || !type_in_group(group, g_type) {
                    continue;
                }
                cell.positions += 1;

                let mut pool: Vec<(f64, ConceptId)> = Vec::new();
                for idx in 0..vocab.len() as u32 {
                    let Some(Token::Concept(c)) = vocab.token(idx) else { continue };
                    let Some(ci) = ontology.get(c) else { continue };
                    if ci.concept_type != g_type {
                        continue;
                    }
                    let recurring = seen_before(c, t_j, events, prefix);
                    if recurring != (mode == Novelty::Recurring) {
                        continue;
                    }
                    pool.push((dist[idx as usize], c.clone()));
                }
                pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

                let mut hit_truth = false;
                for (_, c) in pool.iter().take(k) {
                    if c == g {
                        hit_truth = true;
                    }
                    if occurs_in_window(c, t_j, range, events) {
                        bump(cell, c, 1, 0, 0);
                    } else {
                        bump(cell, c, 0, 1, 0);
                    }
                }
                if !hit_truth {
                    bump(cell, g, 0, 0, 1);
                }
            }
        }
    }
    Ok(report)
}
