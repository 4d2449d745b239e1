//! Corpus characteristics stratified by ethnicity, sex and age band.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Demographics, Ethnicity, Sex, Timeline};
use crate::ontology::{ConceptType, Ontology};

/// Half-open age bands: [0,18) [18,30) [30,41) [41,51) [51,64) [64,∞).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "0-18")]
    Under18,
    #[serde(rename = "18-30")]
    From18To30,
    #[serde(rename = "30-41")]
    From30To41,
    #[serde(rename = "41-50")]
    From41To50,
    #[serde(rename = "51-64")]
    From51To64,
    #[serde(rename = "64+")]
    Over64,
}

impl AgeBand {
    pub const ALL: [AgeBand; 6] = [
        AgeBand::Under18,
        AgeBand::From18To30,
        AgeBand::From30To41,
        AgeBand::From41To50,
        AgeBand::From51To64,
        AgeBand::Over64,
    ];

    pub fn of(age: u32) -> AgeBand {
        match age {
            0..18 => AgeBand::Under18,
            18..30 => AgeBand::From18To30,
            30..41 => AgeBand::From30To41,
            41..51 => AgeBand::From41To50,
            51..64 => AgeBand::From51To64,
            _ => AgeBand::Over64,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBand::Under18 => "0-18",
            AgeBand::From18To30 => "18-30",
            AgeBand::From30To41 => "30-41",
            AgeBand::From41To50 => "41-50",
            AgeBand::From51To64 => "51-64",
            AgeBand::Over64 => "64+",
        }
    }
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub patients: usize,
    pub timelines: usize,
    /// Mean concept tokens per timeline.
    pub mean_length: f64,
    /// Mean years from first to last item.
    pub mean_span_years: f64,
}

#[derive(Default)]
struct Acc {
    patients: BTreeSet<String>,
    timelines: usize,
    length: f64,
    span: f64,
}

impl Acc {
    fn add(&mut self, patient: &str, length: usize, span: f64) {
        self.patients.insert(patient.to_string());
        self.timelines += 1;
        self.length += length as f64;
        self.span += span;
    }

    fn finish(self) -> StratumStats {
        let n = self.timelines.max(1) as f64;
        StratumStats {
            patients: self.patients.len(),
            timelines: self.timelines,
            mean_length: self.length / n,
            mean_span_years: self.span / n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: StratumStats,
    pub by_ethnicity: BTreeMap<Ethnicity, StratumStats>,
    pub by_sex: BTreeMap<Sex, StratumStats>,
    /// Keyed by the band of the age at each timeline's last item.
    pub by_age_band: BTreeMap<AgeBand, StratumStats>,
    /// A patient is counted once in every band their data spans.
    pub patients_by_age_band: BTreeMap<AgeBand, usize>,
    pub mean_concepts_per_type: BTreeMap<ConceptType, f64>,
}

fn span_years(t: &Timeline) -> f64 {
    match (t.items.first(), t.items.last()) {
        (Some(a), Some(b)) => (b.t - a.t).num_days() as f64 / 365.25,
        _ => 0.0,
    }
}

/// Timelines of patients without demographics are skipped.
pub fn corpus_stats(
    timelines: &[Timeline],
    demographics: &BTreeMap<String, Demographics>,
    ontology: &Ontology,
) -> CorpusStats {
    let mut total = Acc::default();
    let mut by_eth: BTreeMap<Ethnicity, Acc> = BTreeMap::new();
    let mut by_sex: BTreeMap<Sex, Acc> = BTreeMap::new();
    let mut by_band: BTreeMap<AgeBand, Acc> = BTreeMap::new();
    let mut spans: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    let mut per_type: BTreeMap<ConceptType, usize> = BTreeMap::new();

    let mut counted = 0usize;
    for t in timelines {
        let Some(demo) = demographics.get(&t.patient_id) else { continue };
        let (Some(first), Some(last)) = (t.items.first(), t.items.last()) else { continue };
        counted += 1;
        let length = t.concept_count();
        let span = span_years(t);
        total.add(&t.patient_id, length, span);
        by_eth.entry(demo.ethnicity).or_default().add(&t.patient_id, length, span);
        by_sex.entry(demo.sex).or_default().add(&t.patient_id, length, span);
        let recent = demo.age_at(last.t) as u32;
        by_band.entry(AgeBand::of(recent)).or_default().add(&t.patient_id, length, span);

        let lo = demo.age_at(first.t) as u32;
        let entry = spans.entry(&t.patient_id).or_insert((lo, recent));
        entry.0 = entry.0.min(lo);
        entry.1 = entry.1.max(recent);

        for c in t.tokens().filter_map(|tok| tok.concept()) {
            if let Ok(ty) = ontology.type_of(c) {
                *per_type.entry(ty).or_default() += 1;
            }
        }
    }

    let mut patients_by_age_band = BTreeMap::new();
    for (lo, hi) in spans.values() {
        let bands: BTreeSet<AgeBand> = [AgeBand::of(*lo), AgeBand::of(*hi)].into_iter().collect();
        let (first, last) = (*bands.first().unwrap(), *bands.last().unwrap());
        for band in AgeBand::ALL.into_iter().filter(|b| *b >= first && *b <= last) {
            *patients_by_age_band.entry(band).or_insert(0) += 1;
        }
    }

    let n = counted.max(1) as f64;
    CorpusStats {
        total: total.finish(),
        by_ethnicity: by_eth.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        by_sex: by_sex.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        by_age_band: by_band.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        patients_by_age_band,
        mean_concepts_per_type: per_type.into_iter().map(|(k, v)| (k, v as f64 / n)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::ConceptRow;
    use crate::timeline::{TimelineItem, Token};
    use chrono::{Days, NaiveDate};

    fn demo(birth: &str, sex: Sex, eth: Ethnicity) -> Demographics {
        Demographics { sex, ethnicity: eth, birth_date: birth.parse().unwrap(), death_date: None }
    }

    fn timeline(patient: &str, start: &str, n: usize, step_days: u64) -> Timeline {
        let start: NaiveDate = start.parse().unwrap();
        let items = (0..n)
            .map(|i| TimelineItem {
                token: Token::Concept(format!("c{}", i % 2).as_str().into()),
                t: start + Days::new(i as u64 * step_days),
            })
            .collect();
        Timeline { patient_id: patient.into(), fragment_index: 0, items }
    }

    fn ontology() -> Ontology {
        Ontology::from_rows([
            ConceptRow::new("c0", "zero", ConceptType::Disorder, &[]),
            ConceptRow::new("c1", "one", ConceptType::Finding, &[]),
        ])
        .unwrap()
    }

    #[test]
    fn singleton_corpus() {
        let demos = BTreeMap::from([("a".to_string(), demo("1990-01-01", Sex::Male, Ethnicity::White))]);
        // 12 concepts spread over 730 days
        let t = timeline("a", "2010-01-01", 12, 730 / 11);
        let mut t = t;
        t.items.last_mut().unwrap().t = "2012-01-01".parse().unwrap();
        let s = corpus_stats(&[t], &demos, &ontology());
        assert_eq!(s.total.mean_length, 12.0);
        assert!((s.total.mean_span_years - 2.0).abs() < 1e-2);
        assert_eq!(s.total.patients, 1);
        assert_eq!(s.mean_concepts_per_type[&ConceptType::Disorder], 6.0);
    }

    #[test]
    fn mean_of_two() {
        let demos = BTreeMap::from([
            ("a".to_string(), demo("1990-01-01", Sex::Male, Ethnicity::White)),
            ("b".to_string(), demo("1990-01-01", Sex::Female, Ethnicity::Asian)),
        ]);
        let s = corpus_stats(
            &[timeline("a", "2010-01-01", 10, 1), timeline("b", "2010-01-01", 20, 1)],
            &demos,
            &ontology(),
        );
        assert_eq!(s.total.mean_length, 15.0);
        let by_sex: usize = s.by_sex.values().map(|x| x.patients).sum();
        let by_eth: usize = s.by_ethnicity.values().map(|x| x.patients).sum();
        assert_eq!(by_sex, 2);
        assert_eq!(by_eth, 2);
    }

    #[test]
    fn spanning_patient_counts_in_both_bands() {
        let demos = BTreeMap::from([("a".to_string(), demo("1970-01-01", Sex::Female, Ethnicity::Black))]);
        // age 49 through age 52
        let t = timeline("a", "2019-06-01", 10, 120);
        let s = corpus_stats(&[t], &demos, &ontology());
        assert_eq!(s.patients_by_age_band.get(&AgeBand::From41To50), Some(&1));
        assert_eq!(s.patients_by_age_band.get(&AgeBand::From51To64), Some(&1));
        assert_eq!(s.patients_by_age_band.len(), 2);
        // length statistics use only the most recent age
        assert_eq!(s.by_age_band.len(), 1);
        assert!(s.by_age_band.contains_key(&AgeBand::From51To64));
    }

    #[test]
    fn band_edges() {
        assert_eq!(AgeBand::of(17), AgeBand::Under18);
        assert_eq!(AgeBand::of(18), AgeBand::From18To30);
        assert_eq!(AgeBand::of(50), AgeBand::From41To50);
        assert_eq!(AgeBand::of(51), AgeBand::From51To64);
        assert_eq!(AgeBand::of(64), AgeBand::Over64);
    }
}
