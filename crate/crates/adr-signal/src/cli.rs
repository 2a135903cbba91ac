//! Command-line surface: the `detect` pipeline, the `synth` cohort
//! generator, and the `check` self-test over shipped fixtures.
//!
//! Progress and error text go to standard error; reports go to the `--out`
//! file or standard output. Exit codes: 0 success, 1 unusable cohort or
//! failed check, 2 malformed input under strict mode, 3 I/O failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detect::{
    chapter_filter, rank_signals, render_report, write_report, DetectionConfig, ReportContext,
    ReportFormat, SignalReport, SortKey, CANCER_PREFIXES,
};
use crate::featmat::{
    build_event_index, build_matrix, group_matrix, write_grouped_tsv, FeatmatError, GroupedMatrix,
    RemainderPolicy, Side,
};
use crate::ingest::{build_cohort, load_clinical, load_prescriptions, IngestError, IngestMode};
use crate::readcode::{CodeDictionary, Resolution};
use crate::stats::{event_signal, incomplete_beta, ratio_stats, SignalStats};
use crate::synth::{generate, SynthError, SyntheticSpec};

pub const EXIT_OK: i32 = 0;
/// Cohort unusable (empty, too few groups), invalid synth spec, or failed
/// check.
pub const EXIT_UNUSABLE: i32 = 1;
/// Malformed input row under `--strict`.
pub const EXIT_MALFORMED: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Cohort size behind the shipped fixture rows.
pub const REFERENCE_COHORT_SIZE: u32 = 6803;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Featmat(#[from] FeatmatError),
    #[error("cohort of {patients} patients yields {groups} group(s); the test needs at least two")]
    TooFewGroups { patients: usize, groups: usize },
    #[error("missing input file {path}")]
    MissingInput { path: PathBuf },
    #[error("writing {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Ingest(IngestError::EmptyCohort { .. })
            | PipelineError::Featmat(_)
            | PipelineError::TooFewGroups { .. } => EXIT_UNUSABLE,
            PipelineError::Ingest(IngestError::MalformedRow { .. }) => EXIT_MALFORMED,
            PipelineError::Ingest(IngestError::Io { .. })
            | PipelineError::MissingInput { .. }
            | PipelineError::Io { .. } => EXIT_IO,
        }
    }
}

/// One full detection run, library-facing.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub drug_code: String,
    pub therapy: PathBuf,
    pub clinical: PathBuf,
    pub dictionary: Option<PathBuf>,
    pub window_days: u32,
    pub group_size: usize,
    pub remainder_policy: RemainderPolicy,
    pub resolution: Resolution,
    pub alpha: f64,
    pub top_k: usize,
    pub sort_key: SortKey,
    /// Stem prefix allowlist; None disables chapter filtering.
    pub chapter: Option<Vec<String>>,
    pub strict: bool,
    pub shuffle_seed: Option<u64>,
}

impl RunConfig {
    /// Config with the reference defaults: 60-day windows, groups of 100
    /// folding the remainder, full-code events, alpha 0.05, top 20 by
    /// ascending p.
    pub fn new(drug_code: &str, therapy: PathBuf, clinical: PathBuf) -> Self {
        RunConfig {
            drug_code: drug_code.to_string(),
            therapy,
            clinical,
            dictionary: None,
            window_days: 60,
            group_size: 100,
            remainder_policy: RemainderPolicy::Fold,
            resolution: Resolution::FullCode,
            alpha: 0.05,
            top_k: 20,
            sort_key: SortKey::PValue,
            chapter: None,
            strict: false,
            shuffle_seed: None,
        }
    }
}

/// Everything a detection run produces, before rendering.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub report: SignalReport,
    /// Per-event stats for every indexed event, in event-index order,
    /// before filtering and ranking.
    pub all_stats: Vec<SignalStats>,
    pub before_groups: GroupedMatrix,
    pub after_groups: GroupedMatrix,
    pub n_patients: usize,
    pub n_events: usize,
    pub n_groups: usize,
}

/// Runs ingest, matrix construction, per-event statistics, and ranking.
pub fn run_detection(config: &RunConfig) -> Result<DetectionOutcome, PipelineError> {
    for path in [
        Some(&config.therapy),
        Some(&config.clinical),
        config.dictionary.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if !path.is_file() {
            return Err(PipelineError::MissingInput { path: path.clone() });
        }
    }
    let mode = if config.strict {
        IngestMode::Strict
    } else {
        IngestMode::Lenient
    };
    let therapy = load_prescriptions(&config.therapy, mode)?;
    let clinical = load_clinical(&config.clinical, mode)?;
    let dictionary = match &config.dictionary {
        Some(path) => CodeDictionary::load(path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?,
        None => CodeDictionary::new(),
    };

    let mut cohort = build_cohort(
        &therapy.records,
        &clinical.records,
        &config.drug_code,
        config.window_days,
        config.resolution,
    )?;
    if let Some(seed) = config.shuffle_seed {
        cohort.shuffle(seed);
    }

    let event_index = build_event_index(&cohort);
    let before = build_matrix(&cohort, &event_index, Side::Before)
        .expect("event index covers every cohort event");
    let after = build_matrix(&cohort, &event_index, Side::After)
        .expect("event index covers every cohort event");
    let before_groups = group_matrix(&before, config.group_size, config.remainder_policy)?;
    let after_groups = group_matrix(&after, config.group_size, config.remainder_policy)?;
    let n_groups = before_groups.n_groups();
    if n_groups < 2 {
        return Err(PipelineError::TooFewGroups {
            patients: cohort.len(),
            groups: n_groups,
        });
    }

    let n_patients = cohort.len();
    let all_stats: Vec<SignalStats> = (0..event_index.len())
        .into_par_iter()
        .map(|j| {
            event_signal(
                event_index[j].clone(),
                dictionary.describe(&event_index[j]).to_string(),
                &before_groups.column_f64(j),
                &after_groups.column_f64(j),
                before.column_sum(j),
                after.column_sum(j),
                n_patients as u32,
            )
        })
        .collect();

    let detection = DetectionConfig {
        alpha: config.alpha,
        top_k: config.top_k,
        sort_key: config.sort_key,
        resolution: config.resolution,
        chapter_filter: config.chapter.clone(),
    };
    let candidates = match &config.chapter {
        Some(prefixes) => chapter_filter(&all_stats, prefixes),
        None => all_stats.clone(),
    };
    let context = ReportContext {
        drug_code: config.drug_code.clone(),
        n_patients,
        n_groups,
    };
    let report = rank_signals(&candidates, &detection, &context);
    Ok(DetectionOutcome {
        report,
        all_stats,
        before_groups,
        after_groups,
        n_patients,
        n_events: event_index.len(),
        n_groups,
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "adr-signal",
    version,
    about = "Ranks clinical events by before/after contrast around first drug exposure"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the detection pipeline and write a ranked report
    Detect(DetectArgs),
    /// Generate a synthetic cohort with planted signals
    Synth(SynthArgs),
    /// Verify shipped reference fixtures and numeric identities
    Check(CheckArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemainderArg {
    Fold,
    Drop,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelArg {
    /// Distinct seven-character codes
    Full,
    /// Merge events sharing the first three code characters
    #[value(name = "3")]
    Three,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortArg {
    /// Ascending p-value
    P,
    /// Descending after/before ratio
    R1,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    Tsv,
    Pretty,
}

fn parse_alpha(text: &str) -> Result<f64, String> {
    let value: f64 = text.parse().map_err(|_| format!("not a number: {text}"))?;
    if value > 0.0 && value <= 1.0 {
        Ok(value)
    } else {
        Err(format!("alpha must lie in (0, 1], got {value}"))
    }
}

fn parse_positive(text: &str) -> Result<usize, String> {
    let value: usize = text
        .parse()
        .map_err(|_| format!("not an integer: {text}"))?;
    if value >= 1 {
        Ok(value)
    } else {
        Err("must be at least 1".to_string())
    }
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Drug code whose first prescription anchors each patient's windows
    #[arg(long)]
    pub drug: String,
    /// Prescription records CSV: patient_id,drug_code,date
    #[arg(long)]
    pub therapy: PathBuf,
    /// Clinical event records CSV: patient_id,readcode,date
    #[arg(long)]
    pub clinical: PathBuf,
    /// Code description CSV: code,description
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    /// Days in each observation window
    #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(1..))]
    pub window_days: u32,
    /// Patients per group
    #[arg(long, default_value_t = 100, value_parser = parse_positive)]
    pub group_size: usize,
    /// Handling of the trailing partial group
    #[arg(long, value_enum, default_value_t = RemainderArg::Fold)]
    pub remainder: RemainderArg,
    /// Event resolution
    #[arg(long, value_enum, default_value_t = LevelArg::Full)]
    pub level: LevelArg,
    /// p-value cutoff
    #[arg(long, default_value_t = 0.05, value_parser = parse_alpha, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Maximum report rows
    #[arg(long, default_value_t = 20, value_parser = parse_positive)]
    pub top_k: usize,
    /// Ranking key
    #[arg(long, value_enum, default_value_t = SortArg::P)]
    pub sort: SortArg,
    /// Keep only stems starting with these prefixes; the bare flag uses the
    /// cancer chapters
    #[arg(long, num_args = 0..)]
    pub chapter: Option<Vec<String>>,
    /// Report destination (standard output when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    pub format: FormatArg,
    /// Fail on any malformed input row instead of skipping it
    #[arg(long)]
    pub strict: bool,
    /// Shuffle patient order with this seed before grouping
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Directory for grouped-matrix TSV dumps
    #[arg(long)]
    pub dump_matrix: Option<PathBuf>,
    /// Worker threads (falls back to ADR_SIGNAL_THREADS, then all cores)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub patients: usize,
    #[arg(long)]
    pub events: usize,
    /// Shared baseline event rate
    #[arg(long, default_value_t = 0.02)]
    pub rate: f64,
    /// Number of planted signals, spread evenly across the event space
    #[arg(long, default_value_t = 0)]
    pub plant: usize,
    /// Relative risk of every planted signal
    #[arg(long, default_value_t = 4.0)]
    pub rr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving therapy.csv, clinical.csv, and truth.csv
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Reference fixture CSV: table,section,rank,readcode,NB,NA,R1,R2,description
    #[arg(long, default_value = "fixtures/reference_ratios.csv")]
    pub fixtures: PathBuf,
}

/// Parses arguments from the environment and dispatches.
pub fn run() -> i32 {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Detect(args) => cmd_detect(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn report_error(err: &dyn std::error::Error) {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(cause) = source {
        eprintln!("  caused by: {cause}");
        source = cause.source();
    }
}

/// Resolves `--chapter`: absent means no filtering, the bare flag means the
/// cancer chapters, values mean a custom allowlist.
fn chapter_prefixes(flag: Option<Vec<String>>) -> Option<Vec<String>> {
    match flag {
        None => None,
        Some(values) if values.is_empty() => {
            Some(CANCER_PREFIXES.iter().map(|p| p.to_string()).collect())
        }
        Some(values) => Some(values),
    }
}

fn dump_matrices(outcome: &DetectionOutcome, dir: &Path) -> Result<(), PipelineError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, matrix) in [
        ("before_groups.tsv", &outcome.before_groups),
        ("after_groups.tsv", &outcome.after_groups),
    ] {
        let path = dir.join(name);
        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
        let mut writer = std::io::BufWriter::new(file);
        write_grouped_tsv(matrix, &mut writer).map_err(io_err(&path))?;
        writer.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> i32 {
    let threads = args.threads.or_else(|| {
        std::env::var("ADR_SIGNAL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let format = match args.format {
        FormatArg::Tsv => ReportFormat::Tsv,
        FormatArg::Pretty => ReportFormat::Pretty,
    };
    let config = RunConfig {
        drug_code: args.drug,
        therapy: args.therapy,
        clinical: args.clinical,
        dictionary: args.dictionary,
        window_days: args.window_days,
        group_size: args.group_size,
        remainder_policy: match args.remainder {
            RemainderArg::Fold => RemainderPolicy::Fold,
            RemainderArg::Drop => RemainderPolicy::Drop,
        },
        resolution: match args.level {
            LevelArg::Full => Resolution::FullCode,
            LevelArg::Three => Resolution::Level3,
        },
        alpha: args.alpha,
        top_k: args.top_k,
        sort_key: match args.sort {
            SortArg::P => SortKey::PValue,
            SortArg::R1 => SortKey::R1,
        },
        chapter: chapter_prefixes(args.chapter),
        strict: args.strict,
        shuffle_seed: args.shuffle_seed,
    };

    let work = || -> Result<(), PipelineError> {
        let outcome = run_detection(&config)?;
        if let Some(dir) = &args.dump_matrix {
            dump_matrices(&outcome, dir)?;
        }
        match &args.out {
            Some(path) => {
                write_report(&outcome.report, path, format).map_err(|source| PipelineError::Io {
                    path: path.clone(),
                    source,
                })?
            }
            None => {
                let text = render_report(&outcome.report, format);
                std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|source| PipelineError::Io {
                        path: PathBuf::from("<stdout>"),
                        source,
                    })?;
            }
        }
        eprintln!(
            "patients={} events={} groups={} signals={}",
            outcome.n_patients,
            outcome.n_events,
            outcome.n_groups,
            outcome.report.rows.len()
        );
        Ok(())
    };
    let result = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool construction cannot fail for a thread count")
            .install(work),
        None => work(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(err) => {
            report_error(&err);
            err.exit_code()
        }
    }
}

/// Evenly spaced planted event indices; distinct whenever count <= n_events.
fn spread_indices(count: usize, n_events: usize) -> Vec<usize> {
    (0..count).map(|i| i * n_events / count.max(1)).collect()
}

fn cmd_synth(args: SynthArgs) -> i32 {
    let spec = SyntheticSpec::uniform(
        args.patients,
        args.events,
        args.rate,
        spread_indices(args.plant, args.events)
            .into_iter()
            .map(|idx| (idx, args.rr))
            .collect(),
        args.seed,
    );
    if let Err(source) = std::fs::create_dir_all(&args.out_dir) {
        report_error(&PipelineError::Io {
            path: args.out_dir.clone(),
            source,
        });
        return EXIT_IO;
    }
    match generate(&spec, &args.out_dir) {
        Ok((paths, truth)) => {
            eprintln!(
                "patients={} events={} planted={}",
                args.patients,
                args.events,
                truth.entries.len()
            );
            println!("{}", paths.truth.display());
            EXIT_OK
        }
        Err(err) => {
            report_error(&err);
            match err {
                SynthError::InvalidSpec { .. } => EXIT_UNUSABLE,
                SynthError::Io { .. } => EXIT_IO,
            }
        }
    }
}

/// One reference row: a published rank with its counts and ratios.
#[derive(Debug, Clone)]
pub struct FixtureRow {
    pub table: String,
    pub section: String,
    pub rank: u32,
    pub code: String,
    pub nb: u32,
    pub na: u32,
    pub r1: f64,
    pub r2: f64,
    pub description: String,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

/// Loads the reference ratio fixture. Rows are comma-separated with the
/// free-text description last, so only the first eight fields are split.
pub fn load_ratio_fixtures(path: &Path) -> Result<Vec<FixtureRow>, FixtureError> {
    let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: u64, message: String| FixtureError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(9, ',').collect();
        if fields.len() != 9 {
            return Err(malformed(
                line_no,
                format!("expected 9 fields, got {}", fields.len()),
            ));
        }
        let parse_u32 = |field: &str, what: &str| {
            field
                .parse::<u32>()
                .map_err(|_| malformed(line_no, format!("bad {what}: {field:?}")))
        };
        let parse_f64 = |field: &str, what: &str| {
            field
                .parse::<f64>()
                .map_err(|_| malformed(line_no, format!("bad {what}: {field:?}")))
        };
        rows.push(FixtureRow {
            table: fields[0].to_string(),
            section: fields[1].to_string(),
            rank: parse_u32(fields[2], "rank")?,
            code: fields[3].to_string(),
            nb: parse_u32(fields[4], "NB")?,
            na: parse_u32(fields[5], "NA")?,
            r1: parse_f64(fields[6], "R1")?,
            r2: parse_f64(fields[7], "R2")?,
            description: fields[8].to_string(),
        });
    }
    Ok(rows)
}

/// Checks I_x(1,1) = x and the reflection identity on seeded random
/// samples; returns one line per violation.
pub fn beta_identity_failures(samples: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..samples {
        let x: f64 = rng.random_range(0.0..=1.0);
        let a: f64 = rng.random_range(0.1..50.0);
        let b: f64 = rng.random_range(0.1..50.0);
        let uniform = incomplete_beta(1.0, 1.0, x).expect("valid arguments");
        if (uniform - x).abs() > 1e-12 {
            failures.push(format!("sample {i}: I_{x}(1,1) = {uniform}"));
        }
        let lhs = incomplete_beta(a, b, x).expect("valid arguments");
        let rhs = incomplete_beta(b, a, 1.0 - x).expect("valid arguments");
        if (lhs + rhs - 1.0).abs() > 1e-12 {
            failures.push(format!(
                "sample {i}: I_{x}({a},{b}) + I_{}({b},{a}) = {}",
                1.0 - x,
                lhs + rhs
            ));
        }
    }
    failures
}

/// Ratio recomputation failures over fixture rows, one line per violation.
pub fn fixture_failures(rows: &[FixtureRow]) -> Vec<String> {
    let mut failures = Vec::new();
    for row in rows {
        let (r1, r2) = ratio_stats(row.nb, row.na, REFERENCE_COHORT_SIZE);
        let id = format!(
            "table {} section {} rank {} ({})",
            row.table, row.section, row.rank, row.code
        );
        if (r1 - row.r1).abs() > 0.01 + 1e-9 {
            failures.push(format!("{id}: R1 {:.2} recomputed as {r1:.2}", row.r1));
        }
        if (r2 - row.r2).abs() > 0.01 + 1e-9 {
            failures.push(format!("{id}: R2 {:.2} recomputed as {r2:.2}", row.r2));
        }
    }
    failures
}

const CHECK_IDENTITY_SAMPLES: usize = 1000;

fn cmd_check(args: CheckArgs) -> i32 {
    let rows = match load_ratio_fixtures(&args.fixtures) {
        Ok(rows) => rows,
        Err(err @ FixtureError::Io { .. }) => {
            report_error(&err);
            return EXIT_IO;
        }
        Err(err @ FixtureError::Malformed { .. }) => {
            report_error(&err);
            return EXIT_UNUSABLE;
        }
    };
    let mut failures = fixture_failures(&rows);
    failures.extend(beta_identity_failures(CHECK_IDENTITY_SAMPLES, 0));
    if failures.is_empty() {
        println!(
            "check passed: {} fixture rows, {CHECK_IDENTITY_SAMPLES} identity samples",
            rows.len()
        );
        EXIT_OK
    } else {
        for failure in &failures {
            eprintln!("check failed: {failure}");
        }
        EXIT_UNUSABLE
    }
}
