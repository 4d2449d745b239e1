//! JSON Lines readers and writers for events, demographics and timelines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AnnotationEvent, Demographics, Ethnicity, Sex, Timeline, TimelineError};

/// Demographics line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicsRow {
    pub patient_id: String,
    pub sex: Sex,
    pub ethnicity: Ethnicity,
    pub birth_date: NaiveDate,
    pub death_date: Option<NaiveDate>,
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, TimelineError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| TimelineError::Json { line: idx + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<(), TimelineError> {
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(|source| TimelineError::Json { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, TimelineError> {
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>, TimelineError> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<AnnotationEvent>, TimelineError> {
    read_jsonl(open(path.as_ref())?)
}

pub fn write_events(path: impl AsRef<Path>, events: &[AnnotationEvent]) -> Result<(), TimelineError> {
    write_jsonl(create(path.as_ref())?, events)
}

pub fn read_demographics(path: impl AsRef<Path>) -> Result<BTreeMap<String, Demographics>, TimelineError> {
    let rows: Vec<DemographicsRow> = read_jsonl(open(path.as_ref())?)?;
    let mut out = BTreeMap::new();
    for row in rows {
        if row.death_date.is_some_and(|d| d < row.birth_date) {
            return Err(TimelineError::InvalidLifespan(row.patient_id));
        }
        out.insert(
            row.patient_id,
            Demographics {
                sex: row.sex,
                ethnicity: row.ethnicity,
                birth_date: row.birth_date,
                death_date: row.death_date,
            },
        );
    }
    Ok(out)
}

pub fn write_demographics(
    path: impl AsRef<Path>,
    demographics: &BTreeMap<String, Demographics>,
) -> Result<(), TimelineError> {
    let rows: Vec<DemographicsRow> = demographics
        .iter()
        .map(|(id, d)| DemographicsRow {
            patient_id: id.clone(),
            sex: d.sex,
            ethnicity: d.ethnicity,
            birth_date: d.birth_date,
            death_date: d.death_date,
        })
        .collect();
    write_jsonl(create(path.as_ref())?, &rows)
}

pub fn read_timelines(path: impl AsRef<Path>) -> Result<Vec<Timeline>, TimelineError> {
    read_jsonl(open(path.as_ref())?)
}

pub fn write_timelines(path: impl AsRef<Path>, timelines: &[Timeline]) -> Result<(), TimelineError> {
    write_jsonl(create(path.as_ref())?, timelines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeline::{Timeline, TimelineItem, Token};

    #[test]
    fn timeline_line_format() {
        let t = Timeline {
            patient_id: "p1".into(),
            fragment_index: 0,
            items: vec![
                TimelineItem { token: Token::Sex(Sex::Female), t: "2020-01-01".parse().unwrap() },
                TimelineItem { token: Token::Concept("42".into()), t: "2020-01-01".parse().unwrap() },
            ],
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&t)).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"patient_id\":\"p1\",\"fragment\":0,\"items\":[{\"token\":\"SEX:F\",\"t\":\"2020-01-01\"},{\"token\":\"C:42\",\"t\":\"2020-01-01\"}]}\n"
        );
        let back: Vec<Timeline> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![t]);
    }

    #[test]
    fn demographics_line_format() {
        let line = r#"{"patient_id": "p", "sex": "Female", "ethnicity": "Black", "birth_date": "1977-03-02", "death_date": null}"#;
        let rows: Vec<DemographicsRow> = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(rows[0].sex, Sex::Female);
        assert_eq!(rows[0].death_date, None);
        let bad = r#"{"patient_id": "p", "sex": "?", "ethnicity": "Black", "birth_date": "1977-03-02", "death_date": null}"#;
        assert!(matches!(
            read_jsonl::<DemographicsRow, _>(bad.as_bytes()),
            Err(TimelineError::Json { line: 1, .. })
        ));
    }

    #[test]
    fn event_line_format() {
        let line = "{\"patient_id\": \"p\", \"timestamp\": \"2021-05-06\", \"concept\": \"abc\"}\n\n";
        let ev: Vec<AnnotationEvent> = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(ev, vec![AnnotationEvent::new("p", "2021-05-06".parse().unwrap(), "abc")]);
    }
}
