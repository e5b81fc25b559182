//! On-disk layouts: expert case directories, synthesized corpora, truth files
//! and per-case reports.
//!
//! ```text
//! experts/<case_id>/session.json
//! experts/<case_id>/transcript.json
//!
//! corpus/manifest.json
//! corpus/<variant_id>/student.session.json
//! corpus/<variant_id>/student.transcript.json
//! corpus/<variant_id>/truth.json
//!
//! reports/<variant_id>.report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::FeedbackReport;
use crate::gaze::{
    parse_session_with, parse_transcript_with, GazeError, ParseOptions, Parsed, ReaderRole,
    Reading,
};
use crate::synth::{Corpus, Manifest, SyntheticCase};

pub const SESSION_FILE: &str = "session.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const STUDENT_SESSION_FILE: &str = "student.session.json";
pub const STUDENT_TRANSCRIPT_FILE: &str = "student.transcript.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_SUFFIX: &str = ".report.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Gaze { path: PathBuf, source: GazeError },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {message}", path.display())]
    Layout { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn layout(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Layout {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), DatasetError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    serde_json::from_slice(&read(path)?).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one session/transcript pair. Warnings are prefixed with the file.
pub fn read_reading(
    session_path: &Path,
    transcript_path: &Path,
    opts: ParseOptions,
) -> Result<Parsed<Reading>, DatasetError> {
    let session = parse_session_with(&read(session_path)?, opts).map_err(|source| {
        DatasetError::Gaze {
            path: session_path.to_path_buf(),
            source,
        }
    })?;
    let transcript = parse_transcript_with(&read(transcript_path)?, opts).map_err(|source| {
        DatasetError::Gaze {
            path: transcript_path.to_path_buf(),
            source,
        }
    })?;
    let warnings = session
        .warnings
        .iter()
        .map(|w| format!("{}: {w}", session_path.display()))
        .chain(
            transcript
                .warnings
                .iter()
                .map(|w| format!("{}: {w}", transcript_path.display())),
        )
        .collect();
    Ok(Parsed {
        value: Reading::new(session.value, transcript.value),
        warnings,
    })
}

/// Loads every `<case_id>/` directory holding an expert reading, in name order.
pub fn load_expert_dir(dir: &Path, opts: ParseOptions) -> Result<Parsed<Vec<Reading>>, DatasetError> {
    let mut readings = Vec::new();
    let mut warnings = Vec::new();
    for case_dir in subdirs(dir)? {
        let session = case_dir.join(SESSION_FILE);
        let transcript = case_dir.join(TRANSCRIPT_FILE);
        if !session.is_file() && !transcript.is_file() {
            continue;
        }
        let parsed = read_reading(&session, &transcript, opts)?;
        if parsed.value.session.reader_role != ReaderRole::Teacher {
            return Err(layout(&session, "expert readings must have reader_role `teacher`"));
        }
        warnings.extend(parsed.warnings);
        readings.push(parsed.value);
    }
    if readings.is_empty() {
        return Err(layout(dir, "no expert cases found"));
    }
    Ok(Parsed {
        value: readings,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub finding_label: String,
    /// Kept as text so unknown labels surface at evaluation time.
    pub error_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub variant_id: String,
    pub base_case_id: String,
    pub injected: Vec<TruthEntry>,
}

impl From<&SyntheticCase> for Truth {
    fn from(case: &SyntheticCase) -> Self {
        Self {
            variant_id: case.variant_id.clone(),
            base_case_id: case.base_case_id.clone(),
            injected: case
                .ground_truth
                .iter()
                .map(|i| TruthEntry {
                    finding_label: i.finding_label.clone(),
                    error_type: i.error_type.to_string(),
                })
                .collect(),
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for case in &corpus.cases {
        let dir = out_dir.join(&case.variant_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write(&dir.join(STUDENT_SESSION_FILE), &case.student_session.to_json())?;
        write(&dir.join(STUDENT_TRANSCRIPT_FILE), &case.student_transcript.to_json())?;
        write(&dir.join(TRUTH_FILE), &pretty(&Truth::from(case)))?;
    }
    write(&out_dir.join(MANIFEST_FILE), &corpus.manifest.to_json())
}

/// A student case ready for analysis.
#[derive(Debug, Clone)]
pub struct StudentCase {
    pub variant_id: String,
    pub student: Reading,
}

fn read_student(dir: &Path, variant_id: String, opts: ParseOptions) -> Result<Parsed<StudentCase>, DatasetError> {
    let parsed = read_reading(
        &dir.join(STUDENT_SESSION_FILE),
        &dir.join(STUDENT_TRANSCRIPT_FILE),
        opts,
    )?;
    Ok(Parsed {
        value: StudentCase {
            variant_id,
            student: parsed.value,
        },
        warnings: parsed.warnings,
    })
}

/// Loads a corpus directory (listed by its manifest) or a single case
/// directory holding `student.session.json`.
pub fn load_students(path: &Path, opts: ParseOptions) -> Result<Parsed<Vec<StudentCase>>, DatasetError> {
    if path.join(STUDENT_SESSION_FILE).is_file() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".to_string());
        let one = read_student(path, name, opts)?;
        return Ok(Parsed {
            value: vec![one.value],
            warnings: one.warnings,
        });
    }
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(layout(path, "neither a student case nor a corpus with a manifest"));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    let mut warnings = Vec::new();
    for entry in manifest.cases {
        let parsed = read_student(&path.join(&entry.variant_id), entry.variant_id, opts)?;
        warnings.extend(parsed.warnings);
        cases.push(parsed.value);
    }
    Ok(Parsed {
        value: cases,
        warnings,
    })
}

pub fn read_manifest(corpus_dir: &Path) -> Result<Manifest, DatasetError> {
    read_json(&corpus_dir.join(MANIFEST_FILE))
}

/// Truth files under `dir`, keyed by variant id.
pub fn load_truths(dir: &Path) -> Result<BTreeMap<String, Truth>, DatasetError> {
    let mut out = BTreeMap::new();
    let mut candidates = subdirs(dir)?;
    candidates.push(dir.to_path_buf());
    for d in candidates {
        let path = d.join(TRUTH_FILE);
        if path.is_file() {
            let truth: Truth = read_json(&path)?;
            if out.insert(truth.variant_id.clone(), truth).is_some() {
                return Err(layout(&path, "duplicate variant id"));
            }
        }
    }
    Ok(out)
}

pub fn report_path(dir: &Path, variant_id: &str) -> PathBuf {
    dir.join(format!("{variant_id}{REPORT_SUFFIX}"))
}

pub fn write_report(dir: &Path, variant_id: &str, report: &FeedbackReport) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = report_path(dir, variant_id);
    write(&path, &report.to_json())?;
    Ok(path)
}

/// Reports under `dir`, keyed by the variant id in their file name.
pub fn load_reports(dir: &Path) -> Result<BTreeMap<String, FeedbackReport>, DatasetError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(variant) = name.strip_suffix(REPORT_SUFFIX) {
            out.insert(variant.to_string(), read_json(&path)?);
        }
    }
    Ok(out)
}
