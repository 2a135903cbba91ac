//! Flat-file loading and drug cohort construction.
//!
//! Input files are headerless UTF-8 CSV: therapy rows are
//! `patient_id,drug_code,date` and clinical rows are
//! `patient_id,readcode,date`, dates in ISO-8601. A patient enters the cohort
//! of a target drug on the date of their first prescription of it (the index
//! date); clinical events are then split into a before window
//! `[index - W, index - 1]` and an after window `[index, index + W - 1]`,
//! both inclusive, so the prescription day itself counts as exposed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::readcode::{EventKey, Readcode, Resolution};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: String,
        line: u64,
        message: String,
    },
    #[error("empty cohort: no prescriptions of {drug_code:?}")]
    EmptyCohort { drug_code: String },
}

/// What to do with rows that fail to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    /// Abort on the first malformed row.
    Strict,
    /// Skip malformed rows, counting them.
    Lenient,
}

/// One prescription of one drug to one patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrescriptionRecord {
    pub patient_id: String,
    pub drug_code: String,
    pub date: NaiveDate,
}

/// One coded clinical event for one patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub code: Readcode,
    pub date: NaiveDate,
}

/// A skipped row under lenient ingest.
#[derive(Debug, Clone)]
pub struct RowIssue {
    pub line: u64,
    pub message: String,
}

/// Parsed rows plus whatever was skipped.
#[derive(Debug)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub skipped: Vec<RowIssue>,
}

fn split3(line: &str) -> Option<(&str, &str, &str)> {
    let mut parts = line.split(',');
    let a = parts.next()?;
    let b = parts.next()?;
    let c = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    Some((a, b, c))
}

fn parse_date(text: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map_err(|e| format!("bad date {text:?}: {e}"))
}

/// Parses one `patient_id,drug_code,date` row.
pub fn parse_prescription_row(line: &str) -> Result<PrescriptionRecord, String> {
    let (patient_id, drug_code, date) =
        split3(line).ok_or_else(|| format!("expected 3 fields, got {line:?}"))?;
    let patient_id = patient_id.trim();
    if patient_id.is_empty() {
        return Err("empty patient id".to_string());
    }
    Ok(PrescriptionRecord {
        patient_id: patient_id.to_string(),
        drug_code: drug_code.trim().to_string(),
        date: parse_date(date)?,
    })
}

/// Parses one `patient_id,readcode,date` row, validating the code.
pub fn parse_clinical_row(line: &str) -> Result<ClinicalRecord, String> {
    let (patient_id, code, date) =
        split3(line).ok_or_else(|| format!("expected 3 fields, got {line:?}"))?;
    let patient_id = patient_id.trim();
    if patient_id.is_empty() {
        return Err("empty patient id".to_string());
    }
    Ok(ClinicalRecord {
        patient_id: patient_id.to_string(),
        code: code.parse().map_err(|e| format!("{e}"))?,
        date: parse_date(date)?,
    })
}

fn load_rows<T>(
    path: &Path,
    mode: IngestMode,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Loaded<T>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let lineno = idx as u64 + 1;
        match parse(&line) {
            Ok(record) => records.push(record),
            Err(message) => match mode {
                IngestMode::Strict => {
                    return Err(IngestError::MalformedRow {
                        path: path.display().to_string(),
                        line: lineno,
                        message,
                    })
                }
                IngestMode::Lenient => skipped.push(RowIssue {
                    line: lineno,
                    message,
                }),
            },
        }
    }
    Ok(Loaded { records, skipped })
}

/// Loads a therapy file.
pub fn load_prescriptions(
    path: &Path,
    mode: IngestMode,
) -> Result<Loaded<PrescriptionRecord>, IngestError> {
    load_rows(path, mode, parse_prescription_row)
}

/// Loads a clinical event file.
pub fn load_clinical(path: &Path, mode: IngestMode) -> Result<Loaded<ClinicalRecord>, IngestError> {
    load_rows(path, mode, parse_clinical_row)
}

/// One cohort patient: index date plus the event sets observed in the
/// before/after windows around it.
#[derive(Debug, Clone)]
pub struct CohortRecord {
    pub patient_id: String,
    pub index_date: NaiveDate,
    pub before_events: BTreeSet<EventKey>,
    pub after_events: BTreeSet<EventKey>,
}

/// All patients exposed to one drug, ordered by patient id.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub drug_code: String,
    pub window_days: u32,
    records: Vec<CohortRecord>,
}

impl Cohort {
    pub fn records(&self) -> &[CohortRecord] {
        &self.records
    }

    /// Cohort size N.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Permutes patient order with a seeded shuffle, for randomized grouping.
    ///
    /// Construction order is sorted by patient id; this is the explicit
    /// opt-in deviation behind `--shuffle-seed`, reproducible per seed.
    pub fn shuffle(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.records.shuffle(&mut rng);
    }
}

/// Derives the cohort for `drug_code`: one record per exposed patient, index
/// date at first prescription, event sets keyed at `resolution`.
///
/// Patients with no clinical events still appear, with empty sets. Events are
/// deduplicated per window (a patient either shows an event or not).
pub fn build_cohort(
    prescriptions: &[PrescriptionRecord],
    clinical: &[ClinicalRecord],
    drug_code: &str,
    window_days: u32,
    resolution: Resolution,
) -> Result<Cohort, IngestError> {
    assert!(window_days >= 1, "window must cover at least one day");

    // index date = earliest prescription of the target drug per patient
    let mut index_dates: BTreeMap<&str, NaiveDate> = BTreeMap::new();
    for rx in prescriptions {
        if rx.drug_code != drug_code {
            continue;
        }
        index_dates
            .entry(rx.patient_id.as_str())
            .and_modify(|d| *d = (*d).min(rx.date))
            .or_insert(rx.date);
    }
    if index_dates.is_empty() {
        return Err(IngestError::EmptyCohort {
            drug_code: drug_code.to_string(),
        });
    }

    let mut records: BTreeMap<&str, CohortRecord> = index_dates
        .iter()
        .map(|(&id, &index_date)| {
            (
                id,
                CohortRecord {
                    patient_id: id.to_string(),
                    index_date,
                    before_events: BTreeSet::new(),
                    after_events: BTreeSet::new(),
                },
            )
        })
        .collect();

    let window = i64::from(window_days);
    for event in clinical {
        let Some(record) = records.get_mut(event.patient_id.as_str()) else {
            continue;
        };
        let offset = (event.date - record.index_date).num_days();
        if (-window..0).contains(&offset) {
            record
                .before_events
                .insert(event.code.event_key(resolution));
        } else if (0..window).contains(&offset) {
            record.after_events.insert(event.code.event_key(resolution));
        }
    }

    Ok(Cohort {
        drug_code: drug_code.to_string(),
        window_days,
        records: records.into_values().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn day(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2003, 1, 1).unwrap() + chrono::Days::new(n as u64)
    }

    fn rx(patient: &str, drug: &str, date: NaiveDate) -> PrescriptionRecord {
        PrescriptionRecord {
            patient_id: patient.to_string(),
            drug_code: drug.to_string(),
            date,
        }
    }

    fn ev(patient: &str, code: &str, date: NaiveDate) -> ClinicalRecord {
        ClinicalRecord {
            patient_id: patient.to_string(),
            code: code.parse().unwrap(),
            date,
        }
    }

    #[test]
    fn parses_prescription_row() {
        let r = parse_prescription_row("p001,ATORVA,2003-04-17").unwrap();
        assert_eq!(r.patient_id, "p001");
        assert_eq!(r.drug_code, "ATORVA");
        assert_eq!(r.date, NaiveDate::from_ymd_opt(2003, 4, 17).unwrap());
    }

    #[test]
    fn rejects_impossible_date() {
        assert!(parse_prescription_row("p001,ATORVA,2003-13-40").is_err());
    }

    #[test]
    fn parses_clinical_row() {
        let r = parse_clinical_row("p001,N245.16,2003-05-02").unwrap();
        assert_eq!(r.code.level(), 4);
    }

    #[test]
    fn rejects_bad_code_row() {
        assert!(parse_clinical_row("p001,BADCODE!,2003-05-02").is_err());
    }

    #[test]
    fn lenient_load_skips_and_counts() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "p001,N245.16,2003-05-02").unwrap();
        writeln!(f, "p002,BADCODE!,2003-05-02").unwrap();
        writeln!(f, "p003,N24..00,2003-05-03").unwrap();
        writeln!(f, "p004,H33..00,2003-05-04").unwrap();
        let loaded = load_clinical(f.path(), IngestMode::Lenient).unwrap();
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.skipped[0].line, 2);
    }

    #[test]
    fn strict_load_aborts_with_row_context() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "p001,N245.16,2003-05-02").unwrap();
        writeln!(f, "p002,BADCODE!,2003-05-02").unwrap();
        let err = load_clinical(f.path(), IngestMode::Strict).unwrap_err();
        match err {
            IngestError::MalformedRow { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let loaded = load_prescriptions(f.path(), IngestMode::Strict).unwrap();
        assert!(loaded.records.is_empty());
        assert!(loaded.skipped.is_empty());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err =
            load_prescriptions(Path::new("/nonexistent/x.csv"), IngestMode::Strict).unwrap_err();
        assert!(matches!(err, IngestError::Io { .. }));
    }

    #[test]
    fn index_date_is_first_prescription() {
        let prescriptions = vec![
            rx("p1", "D1", day(130)),
            rx("p1", "D1", day(100)),
            rx("p1", "OTHER", day(50)),
        ];
        let cohort = build_cohort(&prescriptions, &[], "D1", 60, Resolution::FullCode).unwrap();
        assert_eq!(cohort.records()[0].index_date, day(100));
    }

    #[test]
    fn unmatched_drug_is_empty_cohort() {
        let prescriptions = vec![rx("p1", "D1", day(10))];
        let err =
            build_cohort(&prescriptions, &[], "MISSING", 60, Resolution::FullCode).unwrap_err();
        assert!(matches!(err, IngestError::EmptyCohort { .. }));
    }

    /// Hand-enumerated single-patient window oracle: index at day 100, W=60,
    /// before covers days 40..=99 and after covers days 100..=159.
    #[test]
    fn window_boundaries() {
        let prescriptions = vec![rx("p1", "D1", day(100))];
        let cases = [
            (39, false, false), // below lower before bound
            (40, true, false),  // first before day
            (99, true, false),  // last before day
            (100, false, true), // index day counts as after
            (159, false, true), // last after day
            (160, false, false),
        ];
        for (offset, in_before, in_after) in cases {
            let clinical = vec![ev("p1", "N24..00", day(offset))];
            let cohort =
                build_cohort(&prescriptions, &clinical, "D1", 60, Resolution::FullCode).unwrap();
            let record = &cohort.records()[0];
            assert_eq!(record.before_events.len() == 1, in_before, "day {offset}");
            assert_eq!(record.after_events.len() == 1, in_after, "day {offset}");
        }
    }

    #[test]
    fn patient_without_events_keeps_empty_sets() {
        let prescriptions = vec![rx("p1", "D1", day(100)), rx("p2", "D1", day(100))];
        let clinical = vec![ev("p1", "N24..00", day(101))];
        let cohort =
            build_cohort(&prescriptions, &clinical, "D1", 60, Resolution::FullCode).unwrap();
        assert_eq!(cohort.len(), 2);
        let p2 = &cohort.records()[1];
        assert_eq!(p2.patient_id, "p2");
        assert!(p2.before_events.is_empty());
        assert!(p2.after_events.is_empty());
    }

    #[test]
    fn records_sorted_by_patient_id() {
        let prescriptions = vec![
            rx("p9", "D1", day(10)),
            rx("p1", "D1", day(10)),
            rx("p5", "D1", day(10)),
        ];
        let cohort = build_cohort(&prescriptions, &[], "D1", 60, Resolution::FullCode).unwrap();
        let ids: Vec<_> = cohort
            .records()
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect();
        assert_eq!(ids, ["p1", "p5", "p9"]);
    }

    #[test]
    fn level3_resolution_merges_sibling_codes() {
        let prescriptions = vec![rx("p1", "D1", day(100))];
        let clinical = vec![ev("p1", "N245.16", day(101)), ev("p1", "N24..00", day(102))];
        let cohort = build_cohort(&prescriptions, &clinical, "D1", 60, Resolution::Level3).unwrap();
        assert_eq!(cohort.records()[0].after_events.len(), 1);
    }

    #[test]
    fn shuffle_is_reproducible() {
        let prescriptions: Vec<_> = (0..50)
            .map(|i| rx(&format!("p{i:03}"), "D1", day(10)))
            .collect();
        let base = build_cohort(&prescriptions, &[], "D1", 60, Resolution::FullCode).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.shuffle(7);
        b.shuffle(7);
        let order = |c: &Cohort| -> Vec<String> {
            c.records().iter().map(|r| r.patient_id.clone()).collect()
        };
        assert_eq!(order(&a), order(&b));
        let mut c = base.clone();
        c.shuffle(8);
        assert_ne!(order(&a), order(&c));
    }

    prop_compose! {
        fn arb_offsets()(
            window in 1u32..120,
            offsets in proptest::collection::vec(-150i64..150, 0..20),
        ) -> (u32, Vec<i64>) {
            (window, offsets)
        }
    }

    proptest! {
        /// A single event date lands in at most one window, exactly the one
        /// its day offset falls in. (One code CAN appear in both sets, via
        /// separate records on separate days.)
        #[test]
        fn windows_classify_each_date_once((window, offsets) in arb_offsets()) {
            let prescriptions = vec![rx("p1", "D1", day(500))];
            // distinct code per record so each date is traceable
            let codes: Vec<String> = (0..offsets.len())
                .map(|i| format!("N{:02}..0{}", i % 100, i % 10))
                .collect();
            let clinical: Vec<_> = offsets
                .iter()
                .zip(&codes)
                .map(|(&o, code)| ev("p1", code, day(500 + o)))
                .collect();
            let cohort =
                build_cohort(&prescriptions, &clinical, "D1", window, Resolution::FullCode)
                    .unwrap();
            let r = &cohort.records()[0];
            prop_assert!(r.before_events.intersection(&r.after_events).next().is_none());
            let w = i64::from(window);
            for (&o, code) in offsets.iter().zip(&codes) {
                let key = code
                    .parse::<Readcode>()
                    .unwrap()
                    .event_key(Resolution::FullCode);
                prop_assert_eq!(r.before_events.contains(&key), (-w..0).contains(&o));
                prop_assert_eq!(r.after_events.contains(&key), (0..w).contains(&o));
            }
        }

        /// Enlarging the window never removes an event from either set.
        #[test]
        fn window_growth_is_monotone((window, offsets) in arb_offsets()) {
            let prescriptions = vec![rx("p1", "D1", day(500))];
            let clinical: Vec<_> = offsets
                .iter()
                .enumerate()
                .map(|(i, &o)| {
                    // distinct code per offset so sets differ meaningfully
                    ev("p1", &format!("N{:02}..0{}", i % 100, i % 10), day(500 + o))
                })
                .collect();
            let narrow =
                build_cohort(&prescriptions, &clinical, "D1", window, Resolution::FullCode)
                    .unwrap();
            let wide =
                build_cohort(&prescriptions, &clinical, "D1", window + 30, Resolution::FullCode)
                    .unwrap();
            let (n, w) = (&narrow.records()[0], &wide.records()[0]);
            prop_assert!(n.before_events.is_subset(&w.before_events));
            prop_assert!(n.after_events.is_subset(&w.after_events));
        }

        /// Duplicate clinical rows change nothing: occurrence is a set.
        #[test]
        fn duplicate_rows_are_idempotent((window, offsets) in arb_offsets()) {
            let prescriptions = vec![rx("p1", "D1", day(500))];
            let clinical: Vec<_> = offsets
                .iter()
                .map(|&o| ev("p1", "N24..00", day(500 + o)))
                .collect();
            let mut doubled = clinical.clone();
            doubled.extend(clinical.iter().cloned());
            let once =
                build_cohort(&prescriptions, &clinical, "D1", window, Resolution::FullCode)
                    .unwrap();
            let twice =
                build_cohort(&prescriptions, &doubled, "D1", window, Resolution::FullCode)
                    .unwrap();
            prop_assert_eq!(
                &once.records()[0].before_events,
                &twice.records()[0].before_events
            );
            prop_assert_eq!(
                &once.records()[0].after_events,
                &twice.records()[0].after_events
            );
        }
    }
}
