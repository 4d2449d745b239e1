use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use chronicle_core::metrics::{
    evaluate, group_histories, reference_evaluate, CellKey, EvalConfig, MetricsReport, Novelty, Predictor, Tally,
    TimeRange, TypeGroup,
};
use chronicle_core::model::{ModelError, UNK};
use chronicle_core::synthgen::{build_world, sample_population, SynthParams};
use chronicle_core::timeline::{apply_frequency_filters, build_timelines};
use chronicle_core::{BuildConfig, Ontology, Timeline, Vocab};
use proptest::prelude::*;

/// Pseudo-random distributions keyed on the prefix, coarsely quantised so
/// that ties are common.
struct Hashed {
    vocab: Vocab,
    salt: u64,
    max_prefix: usize,
}

impl Predictor for Hashed {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn max_prefix(&self) -> usize {
        self.max_prefix
    }
    fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let raw: Vec<f64> = (0..self.vocab.len())
            .map(|i| {
                let mut h = DefaultHasher::new();
                (self.salt, prefix, i).hash(&mut h);
                (h.finish() % 4) as f64
            })
            .collect();
        let z: f64 = raw.iter().sum::<f64>().max(1.0);
        Ok(raw.into_iter().map(|x| x / z).collect())
    }
}

struct Case {
    predictor: Hashed,
    ontology: Ontology,
    test: Vec<Timeline>,
    histories: chronicle_core::metrics::PatientHistories,
}

fn case(seed: u64, patients: usize, max_prefix: usize) -> Case {
    let params = SynthParams { n_concepts: 16, n_patients: patients, mean_events: 12.0, seed, chronic_fraction: 0.3, ..SynthParams::default() };
    let world = build_world(&params).unwrap();
    let ontology = world.ontology().unwrap();
    let pop = sample_population(&world, patients, seed ^ 0x5eed);
    let cfg = BuildConfig { min_global_count: 1, min_patient_count: 1, min_concepts: 2, ..BuildConfig::default() };
    let records = apply_frequency_filters(pop.records().unwrap(), &cfg);
    let events: Vec<_> = records.iter().flat_map(|r| r.events.clone()).collect();
    let timelines = build_timelines(&records, &ontology, &cfg);
    // Vocabulary from half the corpus so that unknown targets occur.
    let half = timelines.len() / 2;
    let mut vocab = Vocab::build(&timelines[..half.max(1).min(timelines.len())]).unwrap();
    vocab.annotate_types(&ontology);
    Case {
        predictor: Hashed { vocab, salt: seed, max_prefix },
        ontology,
        test: timelines,
        histories: group_histories(&events),
    }
}

fn run(c: &Case, ec: &EvalConfig) -> MetricsReport {
    evaluate(&c.predictor, &c.ontology, &c.test, &c.histories, ec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fast_path_equals_reference(seed in 0u64..10_000, patients in 1usize..50, max_prefix in 4usize..80) {
        let c = case(seed, patients, max_prefix);
        let ec = EvalConfig::default();
        let fast = run(&c, &ec);
        let slow = reference_evaluate(&c.predictor, &c.ontology, &c.test, &c.histories, &ec).unwrap();
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn report_invariants(seed in 0u64..10_000, patients in 1usize..50) {
        let c = case(seed, patients, 600);
        let ec = EvalConfig::default();
        let report = run(&c, &ec);

        for (key, cell) in &report.cells {
            let t = &cell.totals;
            prop_assert!((0.0..=1.0).contains(&t.precision()));
            prop_assert!((0.0..=1.0).contains(&t.recall()));
            prop_assert!(t.tp + t.fp <= key.k as u64 * cell.positions);
            prop_assert!(t.fn_ <= cell.positions);
            let mut sum = Tally::default();
            for tally in cell.per_concept.values() {
                sum.add(tally);
            }
            prop_assert_eq!(&sum, t);
        }

        let ranges = &ec.time_ranges;
        let ks = &ec.top_ks;
        for &group in &ec.type_groups {
            for &novelty in &ec.novelty_modes {
                for &k in ks {
                    for w in ranges.windows(2) {
                        let small = report.cell(&CellKey { group, range: w[0], k, novelty }).unwrap();
                        let large = report.cell(&CellKey { group, range: w[1], k, novelty }).unwrap();
                        prop_assert!(small.totals.tp <= large.totals.tp, "{:?} {:?}", w, group);
                        prop_assert_eq!(small.totals.tp + small.totals.fp, large.totals.tp + large.totals.fp);
                    }
                }
                for &range in ranges {
                    for w in ks.windows(2) {
                        let small = report.cell(&CellKey { group, range, k: w[0], novelty }).unwrap();
                        let large = report.cell(&CellKey { group, range, k: w[1], novelty }).unwrap();
                        prop_assert!(small.totals.recall() <= large.totals.recall());
                    }
                }
            }
        }

        // Every scored position lands in exactly one novelty cell.
        let expected: u64 = c
            .test
            .iter()
            .map(|t| {
                let seq = c.predictor.vocab.encode_timeline(t);
                (1..seq.len().min(c.predictor.max_prefix + 1))
                    .filter(|&j| t.items[j].token.is_concept() && seq[j] != UNK)
                    .count() as u64
            })
            .sum();
        let any = |n| report.cell(&CellKey { group: TypeGroup::All, range: TimeRange::Infinite, k: 1, novelty: n }).unwrap().positions;
        prop_assert_eq!(any(Novelty::New) + any(Novelty::Recurring), expected);
    }
}

#[test]
fn ranges_and_ks_are_ascending_in_the_default_grid() {
    let ec = EvalConfig::default();
    assert!(ec.top_ks.windows(2).all(|w| w[0] < w[1]));
    assert!(ec.time_ranges.windows(2).all(|w| w[0] < w[1]));
}
