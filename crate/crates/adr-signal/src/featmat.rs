//! Patient-by-event occurrence matrices and their group aggregation.
//!
//! The before and after windows of a cohort each yield a binary matrix
//! (patient rows, event columns, shared column order). Consecutive blocks of
//! patients are then summed into a grouped count matrix, which is what the
//! per-event test statistics consume.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::ingest::Cohort;
use crate::readcode::EventKey;

#[derive(Debug, Error)]
pub enum FeatmatError {
    #[error("event {key:?} missing from event index")]
    UnknownEvent { key: String },
    #[error("group size {group_size} exceeds patient count {patients}")]
    GroupTooLarge { group_size: usize, patients: usize },
}

/// Which observation window a matrix covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Before,
    After,
}

/// What to do with a trailing block smaller than the group size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemainderPolicy {
    /// Merge the remainder into the final group, keeping every patient.
    Fold,
    /// Discard the remainder.
    Drop,
}

/// Binary patient-by-event occurrence matrix for one window side.
///
/// Cells are stored column-major so column sums and group aggregation walk
/// contiguous memory.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    event_index: Vec<EventKey>,
    patient_index: Vec<String>,
    side: Side,
    cells: Vec<u8>,
}

impl FeatureMatrix {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn n_patients(&self) -> usize {
        self.patient_index.len()
    }

    pub fn n_events(&self) -> usize {
        self.event_index.len()
    }

    pub fn event_index(&self) -> &[EventKey] {
        &self.event_index
    }

    pub fn patient_index(&self) -> &[String] {
        &self.patient_index
    }

    /// Occurrence indicator for patient row `i`, event column `j`.
    pub fn cell(&self, i: usize, j: usize) -> u8 {
        self.cells[j * self.n_patients() + i]
    }

    pub fn column(&self, j: usize) -> &[u8] {
        let n = self.n_patients();
        &self.cells[j * n..(j + 1) * n]
    }

    /// Number of patients showing event `j`: the N_B / N_A of one column.
    pub fn column_sum(&self, j: usize) -> u32 {
        self.column(j).iter().map(|&c| u32::from(c)).sum()
    }
}

/// Group-by-event count matrix: per group, how many of its patients show
/// each event.
#[derive(Debug, Clone)]
pub struct GroupedMatrix {
    event_index: Vec<EventKey>,
    group_sizes: Vec<usize>,
    counts: Vec<u32>,
}

impl GroupedMatrix {
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn n_events(&self) -> usize {
        self.event_index.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn event_index(&self) -> &[EventKey] {
        &self.event_index
    }

    pub fn count(&self, k: usize, j: usize) -> u32 {
        self.counts[j * self.n_groups() + k]
    }

    pub fn column(&self, j: usize) -> &[u32] {
        let g = self.n_groups();
        &self.counts[j * g..(j + 1) * g]
    }

    /// Column as the real-valued sample a test statistic consumes.
    pub fn column_f64(&self, j: usize) -> Vec<f64> {
        self.column(j).iter().map(|&c| f64::from(c)).collect()
    }
}

/// Sorted, deduplicated union of every event seen in either window across
/// the cohort. This is the shared column order of one analysis.
pub fn build_event_index(cohort: &Cohort) -> Vec<EventKey> {
    let mut keys: Vec<EventKey> = cohort
        .records()
        .iter()
        .flat_map(|r| r.before_events.iter().chain(r.after_events.iter()))
        .cloned()
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Builds the binary occurrence matrix for one side. Row order follows the
/// cohort record order; every cohort event must appear in `event_index`.
pub fn build_matrix(
    cohort: &Cohort,
    event_index: &[EventKey],
    side: Side,
) -> Result<FeatureMatrix, FeatmatError> {
    let col_of: HashMap<&EventKey, usize> = event_index
        .iter()
        .enumerate()
        .map(|(j, key)| (key, j))
        .collect();
    let n = cohort.len();
    let mut cells = vec![0u8; n * event_index.len()];
    for (i, record) in cohort.records().iter().enumerate() {
        let events = match side {
            Side::Before => &record.before_events,
            Side::After => &record.after_events,
        };
        for key in events {
            let j = *col_of.get(key).ok_or_else(|| FeatmatError::UnknownEvent {
                key: key.key().to_string(),
            })?;
            cells[j * n + i] = 1;
        }
    }
    Ok(FeatureMatrix {
        event_index: event_index.to_vec(),
        patient_index: cohort
            .records()
            .iter()
            .map(|r| r.patient_id.clone())
            .collect(),
        side,
        cells,
    })
}

/// Sizes of the consecutive patient blocks for `n` patients.
fn block_sizes(
    n: usize,
    group_size: usize,
    policy: RemainderPolicy,
) -> Result<Vec<usize>, FeatmatError> {
    assert!(group_size >= 1, "group size must be at least 1");
    match policy {
        RemainderPolicy::Fold => {
            let g = std::cmp::max(1, n / group_size);
            let mut sizes = vec![group_size; g];
            sizes[g - 1] = n - group_size * (g - 1);
            Ok(sizes)
        }
        RemainderPolicy::Drop => {
            if group_size > n {
                return Err(FeatmatError::GroupTooLarge {
                    group_size,
                    patients: n,
                });
            }
            Ok(vec![group_size; n / group_size])
        }
    }
}

/// Partitions patients in row order into consecutive blocks of `group_size`
/// and sums each block, column by column.
pub fn group_matrix(
    matrix: &FeatureMatrix,
    group_size: usize,
    policy: RemainderPolicy,
) -> Result<GroupedMatrix, FeatmatError> {
    let sizes = block_sizes(matrix.n_patients(), group_size, policy)?;
    let g = sizes.len();
    let mut counts = vec![0u32; g * matrix.n_events()];
    for j in 0..matrix.n_events() {
        let column = matrix.column(j);
        let mut offset = 0;
        for (k, &size) in sizes.iter().enumerate() {
            counts[j * g + k] = column[offset..offset + size]
                .iter()
                .map(|&c| u32::from(c))
                .sum();
            offset += size;
        }
    }
    Ok(GroupedMatrix {
        event_index: matrix.event_index.clone(),
        group_sizes: sizes,
        counts,
    })
}

/// Dumps a grouped matrix as TSV: event keys on the first row, then one row
/// of counts per group.
pub fn write_grouped_tsv(matrix: &GroupedMatrix, out: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<&str> = matrix.event_index().iter().map(|k| k.key()).collect();
    writeln!(out, "{}", header.join("\t"))?;
    for k in 0..matrix.n_groups() {
        let row: Vec<String> = (0..matrix.n_events())
            .map(|j| matrix.count(k, j).to_string())
            .collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}
