//! Batch pipeline that ranks clinical events by their before/after contrast
//! around first exposure to a drug.
//!
//! For every patient prescribed the target drug, a 60-day window on each
//! side of the first prescription yields two binary patient-by-event
//! matrices. Consecutive patient groups are summed into count matrices, a
//! pooled-variance two-sample t-test scores each event's before/after
//! contrast, and events passing the p-value cutoff are ranked into a report
//! alongside their occurrence counts and ratios.
//!
//! Modules follow the data path: [`readcode`] parses the clinical code
//! vocabulary, [`ingest`] loads records and derives cohorts, [`featmat`]
//! builds and groups the matrices, [`stats`] computes the test statistics,
//! [`detect`] ranks and renders reports, [`synth`] generates seeded
//! synthetic cohorts with known ground truth, and [`cli`] wires everything
//! into the `adr-signal` binary.

pub mod cli;
pub mod detect;
pub mod featmat;
pub mod ingest;
pub mod readcode;
pub mod stats;
pub mod synth;
