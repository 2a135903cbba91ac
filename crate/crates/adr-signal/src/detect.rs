//! Ranking of per-event signal summaries into reports.
//!
//! Three report shapes come out of one stats list: top-K by ascending
//! p-value, top-K by descending R1, and a chapter-filtered list (a stem
//! prefix allowlist, defaulting to the cancer chapters). All three apply the
//! alpha cutoff first.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use crate::readcode::Resolution;
use crate::stats::SignalStats;

/// Stem prefixes covering the cancer chapters of the code hierarchy.
pub const CANCER_PREFIXES: [&str; 3] = ["B", "1J0", "BB"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortKey {
    /// Ascending p-value.
    PValue,
    /// Descending after/before ratio.
    R1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Pretty,
}

/// Knobs of one ranking pass.
#[derive(Debug, Clone)]
pub struct DetectionConfig {
    /// Keep events with p strictly below this cutoff. Must lie in (0, 1].
    pub alpha: f64,
    /// Rows kept after sorting. Must be at least 1.
    pub top_k: usize,
    pub sort_key: SortKey,
    pub resolution: Resolution,
    /// Stem prefix allowlist; None disables chapter filtering.
    pub chapter_filter: Option<Vec<String>>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            alpha: 0.05,
            top_k: 20,
            sort_key: SortKey::PValue,
            resolution: Resolution::FullCode,
            chapter_filter: None,
        }
    }
}

/// Cohort-level facts echoed into the report header.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub drug_code: String,
    pub n_patients: usize,
    pub n_groups: usize,
}

#[derive(Debug, Clone)]
pub struct RankedSignal {
    /// 1-based position under the configured sort.
    pub rank: usize,
    pub stats: SignalStats,
}

#[derive(Debug, Clone)]
pub struct SignalReport {
    pub config: DetectionConfig,
    pub drug_code: String,
    pub n_patients: usize,
    pub n_groups: usize,
    pub rows: Vec<RankedSignal>,
}

/// Total order of one ranking pass: the configured key, then descending
/// after count, then ascending event key. The two tie levels make the order
/// deterministic for any input.
fn compare(a: &SignalStats, b: &SignalStats, key: SortKey) -> Ordering {
    let primary = match key {
        SortKey::PValue => a.p.total_cmp(&b.p),
        SortKey::R1 => b.r1.total_cmp(&a.r1),
    };
    primary
        .then_with(|| b.na.cmp(&a.na))
        .then_with(|| a.event.cmp(&b.event))
}

/// Keeps events with p below alpha, sorts by the configured key, truncates
/// to the top K, and assigns ranks 1..K. An empty report is valid.
pub fn rank_signals(
    stats: &[SignalStats],
    config: &DetectionConfig,
    context: &ReportContext,
) -> SignalReport {
    assert!(
        config.alpha > 0.0 && config.alpha <= 1.0,
        "alpha must lie in (0, 1]"
    );
    assert!(config.top_k >= 1, "top_k must be at least 1");
    let mut kept: Vec<&SignalStats> = stats.iter().filter(|s| s.p < config.alpha).collect();
    kept.sort_by(|a, b| compare(a, b, config.sort_key));
    kept.truncate(config.top_k);
    SignalReport {
        config: config.clone(),
        drug_code: context.drug_code.clone(),
        n_patients: context.n_patients,
        n_groups: context.n_groups,
        rows: kept
            .into_iter()
            .enumerate()
            .map(|(i, s)| RankedSignal {
                rank: i + 1,
                stats: s.clone(),
            })
            .collect(),
    }
}

/// Retains events whose stem starts with any listed prefix. An empty prefix
/// list retains nothing; the empty-string prefix retains everything.
pub fn chapter_filter(stats: &[SignalStats], prefixes: &[String]) -> Vec<SignalStats> {
    stats
        .iter()
        .filter(|s| {
            prefixes
                .iter()
                .any(|p| s.event.stem().starts_with(p.as_str()))
        })
        .cloned()
        .collect()
}

const REPORT_COLUMNS: [&str; 8] = [
    "rank",
    "readcode",
    "description",
    "NB",
    "NA",
    "R1",
    "R2",
    "p",
];

/// One row's cells, formatted: ratios to two decimals, p-value in
/// scientific notation with four significant digits.
fn row_cells(row: &RankedSignal) -> [String; 8] {
    let s = &row.stats;
    [
        row.rank.to_string(),
        s.event.key().to_string(),
        s.description.clone(),
        s.nb.to_string(),
        s.na.to_string(),
        format!("{:.2}", s.r1),
        format!("{:.2}", s.r2),
        format!("{:.3e}", s.p),
    ]
}

/// Renders a report to its textual form. Output is a pure function of the
/// report, so identical reports render to identical bytes.
pub fn render_report(report: &SignalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Tsv => render_tsv(report),
        ReportFormat::Pretty => render_pretty(report),
    }
}

fn render_tsv(report: &SignalReport) -> String {
    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join("\t"));
    out.push('\n');
    for row in &report.rows {
        out.push_str(&row_cells(row).join("\t"));
        out.push('\n');
    }
    out
}

fn render_pretty(report: &SignalReport) -> String {
    let sort = match report.config.sort_key {
        SortKey::PValue => "p-value ascending",
        SortKey::R1 => "R1 descending",
    };
    let mut out = format!(
        "drug {}  patients {}  groups {}  level {}  alpha {}  sort {}\n\n",
        report.drug_code,
        report.n_patients,
        report.n_groups,
        report.config.resolution,
        report.config.alpha,
        sort
    );
    let rows: Vec<[String; 8]> = report.rows.iter().map(row_cells).collect();
    let mut widths: [usize; 8] = REPORT_COLUMNS.map(str::len);
    for cells in &rows {
        for (w, cell) in widths.iter_mut().zip(cells.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    // description stays left-aligned; numbers and codes align right
    let align = |i: usize, cell: &str| -> String {
        if i == 2 {
            format!("{cell:<width$}", width = widths[i])
        } else {
            format!("{cell:>width$}", width = widths[i])
        }
    };
    let header: Vec<String> = REPORT_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, c)| align(i, c))
        .collect();
    out.push_str(header.join("  ").trim_end());
    out.push('\n');
    for cells in &rows {
        let line: Vec<String> = cells.iter().enumerate().map(|(i, c)| align(i, c)).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes a rendered report to `path`.
pub fn write_report(
    report: &SignalReport,
    path: &Path,
    format: ReportFormat,
) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_report(report, format).as_bytes())?;
    file.flush()
}
