//! Hand-traced timelines for small records, shared by the core tests and the
//! acceptance harness.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use chronicle_core::ontology::ConceptRow;
use chronicle_core::timeline::{aggregate_events, build_timeline, Ethnicity, Sex};
use chronicle_core::{AnnotationEvent, BuildConfig, ConceptType, Demographics, Ontology, PatientRecord, Timeline};

pub fn d(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

pub fn ontology() -> Ontology {
    let mut rows = vec![
        ConceptRow::new("root", "root disorder", ConceptType::Disorder, &[]),
        ConceptRow::new("mid", "mid disorder", ConceptType::Disorder, &["root"]),
        ConceptRow::new("leaf", "leaf disorder", ConceptType::Disorder, &["mid"]),
        ConceptRow::new("other", "unrelated finding", ConceptType::Finding, &[]),
    ];
    for i in 0..300 {
        rows.push(ConceptRow::new(&format!("c{i:03}"), &format!("concept {i}"), ConceptType::Disorder, &[]));
    }
    Ontology::from_rows(rows).unwrap()
}

pub fn record(sex: Sex, ethnicity: Ethnicity, birth: &str, death: Option<&str>, events: &[(&str, &str)]) -> PatientRecord {
    let events: Vec<AnnotationEvent> = events.iter().map(|(t, c)| AnnotationEvent::new("p", d(t), c)).collect();
    assemble(sex, ethnicity, birth, death, events)
}

fn assemble(sex: Sex, ethnicity: Ethnicity, birth: &str, death: Option<&str>, events: Vec<AnnotationEvent>) -> PatientRecord {
    let demo = Demographics { sex, ethnicity, birth_date: d(birth), death_date: death.map(d) };
    let demographics: BTreeMap<String, Demographics> = [("p".to_string(), demo)].into();
    aggregate_events(events, &demographics).unwrap().remove(0)
}

pub fn cfg(min_concepts: usize) -> BuildConfig {
    BuildConfig { min_concepts, ..BuildConfig::default() }
}

pub fn spelled(t: &Timeline) -> String {
    t.spellings().join(" ")
}

/// `n` concepts `c000..`, one per day from 2020-01-01.
fn daily_record(sex: Sex, ethnicity: Ethnicity, birth: &str, n: usize) -> PatientRecord {
    let events = (0..n)
        .map(|i| AnnotationEvent::new("p", d("2020-01-01") + Days::new(i as u64), &format!("c{i:03}")))
        .collect();
    assemble(sex, ethnicity, birth, None, events)
}

pub fn daily_tokens(range: std::ops::Range<usize>) -> String {
    range.map(|i| format!("C:c{i:03}")).collect::<Vec<_>>().join(" SEP ")
}

pub struct Golden {
    pub name: &'static str,
    pub record: PatientRecord,
    pub cfg: BuildConfig,
    /// Spelled fragments, in order.
    pub expected: Vec<String>,
}

impl Golden {
    pub fn build(&self) -> Vec<Timeline> {
        build_timeline(&self.record, &ontology(), &self.cfg)
    }

    pub fn matches(&self) -> bool {
        self.build().iter().map(spelled).collect::<Vec<_>>() == self.expected
    }
}

fn g(name: &'static str, record: PatientRecord, cfg: BuildConfig, expected: &[String]) -> Golden {
    Golden { name, record, cfg, expected: expected.to_vec() }
}

pub fn cases() -> Vec<Golden> {
    vec![
        g(
            "three_day_fixture_with_same_day_duplicate",
            record(
                Sex::Female,
                Ethnicity::Black,
                "1980-06-15",
                None,
                &[
                    ("2020-03-01", "c001"),
                    ("2020-03-01", "c002"),
                    ("2020-03-01", "c003"),
                    ("2020-03-01", "c004"),
                    ("2020-03-02", "c005"),
                    ("2020-03-02", "c006"),
                    ("2020-03-02", "c007"),
                    ("2020-03-02", "c008"),
                    ("2020-03-03", "c009"),
                    ("2020-03-03", "c010"),
                    ("2020-03-03", "c011"),
                    ("2020-03-03", "c009"),
                ],
            ),
            cfg(10),
            &["SEX:F ETH:Black AGE:39 C:c001 C:c002 C:c003 C:c004 SEP C:c005 C:c006 C:c007 C:c008 SEP C:c009 C:c010 C:c011".into()],
        ),
        g("five_concepts_are_dropped", daily_record(Sex::Male, Ethnicity::White, "1950-01-01", 5), cfg(10), &[]),
        g(
            "later_ancestors_are_pruned",
            record(
                Sex::Unknown,
                Ethnicity::Asian,
                "1990-01-01",
                None,
                &[("2020-01-01", "leaf"), ("2020-01-05", "root"), ("2020-01-05", "other"), ("2020-01-06", "mid")],
            ),
            cfg(1),
            &["SEX:U ETH:Asian AGE:30 C:leaf SEP C:other".into()],
        ),
        // An ancestor seen first stays, and so does a same-day descendant.
        g(
            "earlier_ancestors_are_kept",
            record(
                Sex::Female,
                Ethnicity::Mixed,
                "1990-01-01",
                None,
                &[("2020-01-01", "root"), ("2020-01-01", "mid"), ("2020-01-02", "leaf"), ("2020-01-03", "root")],
            ),
            cfg(1),
            &["SEX:F ETH:Mixed AGE:30 C:mid C:root SEP C:leaf".into()],
        ),
        g(
            "birthday_between_buckets",
            record(
                Sex::Male,
                Ethnicity::Other,
                "1980-03-02",
                None,
                &[("2021-03-01", "c001"), ("2021-03-02", "c002"), ("2021-03-03", "c003")],
            ),
            cfg(1),
            &["SEX:M ETH:Other AGE:40 C:c001 SEP AGE:41 C:c002 SEP C:c003".into()],
        ),
        g(
            "death_closes_the_timeline",
            record(
                Sex::Female,
                Ethnicity::Unknown,
                "1940-07-01",
                Some("2020-02-10"),
                &[("2020-02-01", "c001"), ("2020-02-03", "c002")],
            ),
            cfg(1),
            &["SEX:F ETH:Unknown AGE:79 C:c001 SEP C:c002 DEATH".into()],
        ),
        g(
            "wide_buckets_anchor_at_the_first_event",
            record(
                Sex::Male,
                Ethnicity::Black,
                "1970-01-01",
                None,
                &[
                    ("2020-01-01", "c002"),
                    ("2020-01-02", "c001"),
                    ("2020-01-03", "c002"),
                    ("2020-01-04", "c002"),
                    ("2020-01-04", "c003"),
                ],
            ),
            BuildConfig { bucket_days: 3, min_concepts: 1, ..BuildConfig::default() },
            &["SEX:M ETH:Black AGE:50 C:c002 C:c001 SEP C:c002 C:c003".into()],
        ),
        g("nine_concepts_are_dropped", daily_record(Sex::Female, Ethnicity::White, "1960-05-05", 9), cfg(10), &[]),
        g(
            "ten_concepts_survive",
            daily_record(Sex::Female, Ethnicity::White, "1960-05-05", 10),
            cfg(10),
            &[format!("SEX:F ETH:White AGE:59 {}", daily_tokens(0..10))],
        ),
        // 2020-06-01 is day 152, the 70th birthday.
        g(
            "exactly_256_concepts_fit",
            daily_record(Sex::Male, Ethnicity::Asian, "1950-06-01", 256),
            cfg(10),
            &[format!("SEX:M ETH:Asian AGE:69 {} SEP AGE:70 {}", daily_tokens(0..152), daily_tokens(152..256))],
        ),
        g(
            "concept_257_spills_into_a_dropped_fragment",
            daily_record(Sex::Male, Ethnicity::Asian, "1950-06-01", 257),
            cfg(10),
            &[format!("SEX:M ETH:Asian AGE:69 {} SEP AGE:70 {}", daily_tokens(0..152), daily_tokens(152..256))],
        ),
        // The separator before c256 is absorbed; the age is the one in force.
        g(
            "second_fragment_gets_its_own_prefix",
            daily_record(Sex::Male, Ethnicity::Asian, "1950-06-01", 266),
            cfg(10),
            &[
                format!("SEX:M ETH:Asian AGE:69 {} SEP AGE:70 {}", daily_tokens(0..152), daily_tokens(152..256)),
                format!("SEX:M ETH:Asian AGE:70 {}", daily_tokens(256..266)),
            ],
        ),
        g(
            "unsorted_events_and_same_day_ties",
            record(
                Sex::Unknown,
                Ethnicity::Other,
                "2000-12-31",
                None,
                &[("2020-05-02", "c003"), ("2020-05-01", "c002"), ("2020-05-01", "c001"), ("2020-05-02", "c000")],
            ),
            cfg(1),
            &["SEX:U ETH:Other AGE:19 C:c001 C:c002 SEP C:c000 C:c003".into()],
        ),
    ]
}

pub fn case(name: &str) -> Golden {
    cases().into_iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no golden case {name}"))
}
