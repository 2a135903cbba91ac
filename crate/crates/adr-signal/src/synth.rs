//! Synthetic cohort generator with known ground truth.
//!
//! Every patient receives one prescription of the synthetic drug at a
//! random index date inside 2003. Each event fires independently per
//! (patient, event, window side): with its baseline rate in the before
//! window, and with min(1, rate * RR) in the after window, where RR is 1
//! unless the event is planted. Draw order is fixed (patients in id order,
//! events in index order, before then after), so a seed fully determines
//! the output bytes.
//!
//! The generator uses the ChaCha8 stream cipher RNG seeded from the 64-bit
//! seed in [`SyntheticSpec`], so runs are reproducible and the algorithm is
//! documented by name.

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::detect::SignalReport;

/// Drug code on every generated prescription.
pub const SYNTH_DRUG_CODE: &str = "SYNTH01";
/// Observation window the generator plants events into, per side.
pub const SYNTH_WINDOW_DAYS: u32 = 60;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {what}")]
    InvalidSpec { what: String },
    #[error("failed to write {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parameters of one synthetic cohort.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_events: usize,
    /// Per-event probability of showing the event in a before window.
    /// One entry per event, each in [0, 0.5].
    pub baseline_rates: Vec<f64>,
    /// (event index, relative risk) pairs; indices distinct, RR > 1.
    pub planted: Vec<(usize, f64)>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spec with one shared baseline rate across all events.
    pub fn uniform(
        n_patients: usize,
        n_events: usize,
        rate: f64,
        planted: Vec<(usize, f64)>,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            n_patients,
            n_events,
            baseline_rates: vec![rate; n_events],
            planted,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |what: String| Err(SynthError::InvalidSpec { what });
        if self.baseline_rates.len() != self.n_events {
            return invalid(format!(
                "expected {} baseline rates, got {}",
                self.n_events,
                self.baseline_rates.len()
            ));
        }
        for (j, &rate) in self.baseline_rates.iter().enumerate() {
            if !(0.0..=0.5).contains(&rate) {
                return invalid(format!(
                    "baseline rate {rate} of event {j} outside [0, 0.5]"
                ));
            }
        }
        let mut seen = HashSet::new();
        for &(idx, rr) in &self.planted {
            if idx >= self.n_events {
                return invalid(format!("planted event index {idx} >= {}", self.n_events));
            }
            if !seen.insert(idx) {
                return invalid(format!("planted event index {idx} repeated"));
            }
            if !(rr > 1.0 && rr.is_finite()) {
                return invalid(format!("relative risk {rr} of event {idx} not > 1"));
            }
        }
        Ok(())
    }
}

/// Planted event keys with their relative risks.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub entries: Vec<(String, f64)>,
}

/// Locations of the three generated files.
#[derive(Debug, Clone)]
pub struct GeneratedPaths {
    pub therapy: PathBuf,
    pub clinical: PathBuf,
    pub truth: PathBuf,
}

const EVENT_CODE_DIGITS: &[u8; 36] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Code of synthetic event `j`: a three-character base-36 stem padded to a
/// valid seven-character code, e.g. index 0 is "000..00".
pub fn event_code(j: usize) -> String {
    assert!(j < 36 * 36 * 36, "event index exceeds the code space");
    let d = |v: usize| char::from(EVENT_CODE_DIGITS[v % 36]);
    format!("{}{}{}..00", d(j / (36 * 36)), d(j / 36), d(j))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, SynthError> {
    let file = std::fs::File::create(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Generates `therapy.csv`, `clinical.csv`, and `truth.csv` under `dir`.
pub fn generate(
    spec: &SyntheticSpec,
    dir: &Path,
) -> Result<(GeneratedPaths, GroundTruth), SynthError> {
    spec.validate()?;
    let paths = GeneratedPaths {
        therapy: dir.join("therapy.csv"),
        clinical: dir.join("clinical.csv"),
        truth: dir.join("truth.csv"),
    };

    let mut rr_of = vec![1.0f64; spec.n_events];
    for &(idx, rr) in &spec.planted {
        rr_of[idx] = rr;
    }
    let codes: Vec<String> = (0..spec.n_events).map(event_code).collect();
    let base = NaiveDate::from_ymd_opt(2003, 1, 1).expect("valid calendar date");

    let mut therapy = create(&paths.therapy)?;
    let mut clinical = create(&paths.clinical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let window = i64::from(SYNTH_WINDOW_DAYS);
    for i in 0..spec.n_patients {
        let patient = format!("p{i:05}");
        let index_date = base + Days::new(rng.random_range(0..365));
        writeln!(therapy, "{patient},{SYNTH_DRUG_CODE},{index_date}")
            .map_err(io_err(&paths.therapy))?;
        for j in 0..spec.n_events {
            let rate = spec.baseline_rates[j];
            if rng.random_bool(rate) {
                let offset = rng.random_range(-window..0);
                let date = index_date + chrono::Duration::days(offset);
                writeln!(clinical, "{patient},{},{date}", codes[j])
                    .map_err(io_err(&paths.clinical))?;
            }
            if rng.random_bool((rate * rr_of[j]).min(1.0)) {
                let offset = rng.random_range(0..window);
                let date = index_date + chrono::Duration::days(offset);
                writeln!(clinical, "{patient},{},{date}", codes[j])
                    .map_err(io_err(&paths.clinical))?;
            }
        }
    }
    therapy.flush().map_err(io_err(&paths.therapy))?;
    clinical.flush().map_err(io_err(&paths.clinical))?;

    let truth = GroundTruth {
        entries: spec
            .planted
            .iter()
            .map(|&(idx, rr)| (event_code(idx), rr))
            .collect(),
    };
    let mut truth_file = create(&paths.truth)?;
    for (key, rr) in &truth.entries {
        writeln!(truth_file, "{key},{rr}").map_err(io_err(&paths.truth))?;
    }
    truth_file.flush().map_err(io_err(&paths.truth))?;
    Ok((paths, truth))
}

/// Fraction of planted events appearing in the report's first `top_k` rows.
/// With nothing planted there is nothing to miss, so recall is 1.
pub fn evaluate_recovery(report: &SignalReport, truth: &GroundTruth, top_k: usize) -> f64 {
    if truth.entries.is_empty() {
        return 1.0;
    }
    let top: HashSet<&str> = report
        .rows
        .iter()
        .take(top_k)
        .map(|r| r.stats.event.key())
        .collect();
    let hits = truth
        .entries
        .iter()
        .filter(|(key, _)| top.contains(key.as_str()))
        .count();
    hits as f64 / truth.entries.len() as f64
}
