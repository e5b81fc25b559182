//! Gaze sessions and report transcripts.
//!
//! A [`GazeSession`] is the time-ordered fixation record of one reader on one
//! case; each fixation contributes four feature columns (x, y, onset,
//! duration). A [`Transcript`] holds the dictated report as timestamped
//! sentences, some of which are labeled with a diagnostic finding.
//!
//! Both types are only constructed through validating parsers, so every
//! instance satisfies its invariants. Validation failures carry the JSON path
//! of the offending field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Number of feature columns contributed by a fixation.
pub const FIXATION_FEATURES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum GazeError {
    #[error("malformed JSON at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error("invalid value at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl GazeError {
    /// JSON path of the field that failed.
    pub fn path(&self) -> &str {
        match self {
            GazeError::Malformed { path, .. } | GazeError::Invalid { path, .. } => path,
        }
    }

    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        GazeError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReaderRole {
    Teacher,
    Student,
}

impl fmt::Display for ReaderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReaderRole::Teacher => f.write_str("teacher"),
            ReaderRole::Student => f.write_str("student"),
        }
    }
}

/// One fixation in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub onset_ms: u64,
    pub duration_ms: u64,
}

impl Fixation {
    /// Twice the temporal midpoint, kept integral so window tests are exact.
    pub fn doubled_midpoint(&self) -> i128 {
        2 * self.onset_ms as i128 + self.duration_ms as i128
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }

    pub fn features(&self) -> [f64; FIXATION_FEATURES] {
        [self.x, self.y, self.onset_ms as f64, self.duration_ms as f64]
    }

    fn validate(&self, path: &str) -> Result<(), GazeError> {
        for (name, v) in [("x", self.x), ("y", self.y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GazeError::invalid(
                    format!("{path}.{name}"),
                    format!("coordinate {v} outside [0, 1]"),
                ));
            }
        }
        if self.duration_ms == 0 {
            return Err(GazeError::invalid(
                format!("{path}.duration_ms"),
                "duration must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GazeSession {
    pub case_id: String,
    pub reader_role: ReaderRole,
    pub fixations: Vec<Fixation>,
}

impl GazeSession {
    /// Builds a session, stably sorting fixations by onset.
    pub fn new(
        case_id: impl Into<String>,
        reader_role: ReaderRole,
        mut fixations: Vec<Fixation>,
    ) -> Result<Self, GazeError> {
        for (k, fx) in fixations.iter().enumerate() {
            fx.validate(&format!("fixations[{k}]"))?;
        }
        fixations.sort_by_key(|f| f.onset_ms);
        Ok(Self {
            case_id: case_id.into(),
            reader_role,
            fixations,
        })
    }

    /// Number of time steps (rows of the gaze matrix).
    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    /// The t × 4 gaze matrix, one row per fixation.
    pub fn matrix(&self) -> Vec<[f64; FIXATION_FEATURES]> {
        self.fixations.iter().map(Fixation::features).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("session serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sentence {
    pub index: u32,
    pub text: String,
    pub begin_ms: u64,
    pub end_ms: u64,
    pub finding_label: Option<String>,
}

impl Sentence {
    pub fn doubled_center(&self) -> i128 {
        self.begin_ms as i128 + self.end_ms as i128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub case_id: String,
    pub reader_role: ReaderRole,
    pub sentences: Vec<Sentence>,
}

impl Transcript {
    /// Builds a transcript: normalizes labels, stably sorts by `begin_ms`, and
    /// checks window ordering, overlap, and label uniqueness.
    pub fn new(
        case_id: impl Into<String>,
        reader_role: ReaderRole,
        mut sentences: Vec<Sentence>,
    ) -> Result<Self, GazeError> {
        for (k, s) in sentences.iter_mut().enumerate() {
            if s.begin_ms >= s.end_ms {
                return Err(GazeError::invalid(
                    format!("sentences[{k}].end_ms"),
                    format!("begin_ms {} must be < end_ms {}", s.begin_ms, s.end_ms),
                ));
            }
            if let Some(label) = s.finding_label.take() {
                let norm = normalize_label(&label);
                if norm.is_empty() {
                    return Err(GazeError::invalid(
                        format!("sentences[{k}].finding_label"),
                        "finding label is empty",
                    ));
                }
                s.finding_label = Some(norm);
            }
        }

        // Paths below refer to input positions, so remember them before sorting.
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.sort_by_key(|&k| sentences[k].begin_ms);

        let mut seen = HashSet::new();
        for &k in &order {
            if let Some(label) = &sentences[k].finding_label {
                if !seen.insert(label.clone()) {
                    return Err(GazeError::invalid(
                        format!("sentences[{k}].finding_label"),
                        format!("duplicate finding label `{label}`"),
                    ));
                }
            }
        }

        let labeled: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&k| sentences[k].finding_label.is_some())
            .collect();
        for pair in labeled.windows(2) {
            let (a, b) = (&sentences[pair[0]], &sentences[pair[1]]);
            // Windows may touch at an endpoint but not share an interior.
            if b.begin_ms < a.end_ms {
                return Err(GazeError::invalid(
                    format!("sentences[{}].begin_ms", pair[1]),
                    format!(
                        "finding window [{}, {}] overlaps [{}, {}]",
                        b.begin_ms, b.end_ms, a.begin_ms, a.end_ms
                    ),
                ));
            }
        }

        let mut slots: Vec<Option<Sentence>> = sentences.into_iter().map(Some).collect();
        let sentences = order
            .into_iter()
            .map(|k| slots[k].take().expect("each index taken once"))
            .collect();
        Ok(Self {
            case_id: case_id.into(),
            reader_role,
            sentences,
        })
    }

    /// Finding-labeled sentences in transcript order.
    pub fn findings(&self) -> impl Iterator<Item = (&str, &Sentence)> {
        self.sentences
            .iter()
            .filter_map(|s| s.finding_label.as_deref().map(|l| (l, s)))
    }

    pub fn finding_count(&self) -> usize {
        self.findings().count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }
}

/// Lowercases and trims a finding label.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject unknown keys instead of warning about them.
    pub strict: bool,
}

/// A parsed value plus non-fatal diagnostics (unknown keys in lenient mode).
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawSession {
    case_id: String,
    reader_role: ReaderRole,
    fixations: Vec<RawFixation>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawFixation {
    x: f64,
    y: f64,
    onset_ms: u64,
    duration_ms: u64,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawTranscript {
    case_id: String,
    reader_role: ReaderRole,
    sentences: Vec<RawSentence>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawSentence {
    index: u32,
    text: String,
    begin_ms: u64,
    end_ms: u64,
    #[serde(default)]
    finding_label: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

fn decode<T: serde::de::DeserializeOwned>(raw: &[u8]) -> Result<T, GazeError> {
    let de = &mut serde_json::Deserializer::from_slice(raw);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        GazeError::Malformed {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

fn check_extra(
    extra: &BTreeMap<String, Value>,
    prefix: &str,
    opts: ParseOptions,
    warnings: &mut Vec<String>,
) -> Result<(), GazeError> {
    for key in extra.keys() {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        if opts.strict {
            return Err(GazeError::invalid(path, "unknown key"));
        }
        warnings.push(format!("ignoring unknown key `{path}`"));
    }
    Ok(())
}

/// Parses a session file leniently (unknown keys ignored).
pub fn parse_session(raw: &[u8]) -> Result<GazeSession, GazeError> {
    parse_session_with(raw, ParseOptions::default()).map(|p| p.value)
}

pub fn parse_session_with(
    raw: &[u8],
    opts: ParseOptions,
) -> Result<Parsed<GazeSession>, GazeError> {
    let raw: RawSession = decode(raw)?;
    let mut warnings = Vec::new();
    check_extra(&raw.extra, "", opts, &mut warnings)?;
    let mut fixations = Vec::with_capacity(raw.fixations.len());
    for (k, f) in raw.fixations.into_iter().enumerate() {
        check_extra(&f.extra, &format!("fixations[{k}]"), opts, &mut warnings)?;
        fixations.push(Fixation {
            x: f.x,
            y: f.y,
            onset_ms: f.onset_ms,
            duration_ms: f.duration_ms,
        });
    }
    let value = GazeSession::new(raw.case_id, raw.reader_role, fixations)?;
    Ok(Parsed { value, warnings })
}

/// Parses a transcript file leniently (unknown keys ignored).
pub fn parse_transcript(raw: &[u8]) -> Result<Transcript, GazeError> {
    parse_transcript_with(raw, ParseOptions::default()).map(|p| p.value)
}

pub fn parse_transcript_with(
    raw: &[u8],
    opts: ParseOptions,
) -> Result<Parsed<Transcript>, GazeError> {
    let raw: RawTranscript = decode(raw)?;
    let mut warnings = Vec::new();
    check_extra(&raw.extra, "", opts, &mut warnings)?;
    let mut sentences = Vec::with_capacity(raw.sentences.len());
    for (k, s) in raw.sentences.into_iter().enumerate() {
        check_extra(&s.extra, &format!("sentences[{k}]"), opts, &mut warnings)?;
        sentences.push(Sentence {
            index: s.index,
            text: s.text,
            begin_ms: s.begin_ms,
            end_ms: s.end_ms,
            finding_label: s.finding_label,
        });
    }
    let value = Transcript::new(raw.case_id, raw.reader_role, sentences)?;
    Ok(Parsed { value, warnings })
}

/// A session together with its transcript for one reader.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub session: GazeSession,
    pub transcript: Transcript,
}

impl Reading {
    pub fn new(session: GazeSession, transcript: Transcript) -> Self {
        Self {
            session,
            transcript,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }
}

/// Cross-checks a teacher reading against a student reading.
pub fn validate_pair(teacher: &Reading, student: &Reading) -> ValidationReport {
    let mut issues = Vec::new();
    let mut error = |message: String| {
        issues.push(Issue {
            severity: Severity::Error,
            message,
        })
    };

    for (who, r) in [("teacher", teacher), ("student", student)] {
        if r.session.case_id != r.transcript.case_id {
            error(format!(
                "{who} session case_id `{}` differs from transcript case_id `{}`",
                r.session.case_id, r.transcript.case_id
            ));
        }
    }
    if teacher.session.case_id != student.session.case_id {
        error(format!(
            "case_id mismatch: teacher `{}` vs student `{}`",
            teacher.session.case_id, student.session.case_id
        ));
    }
    for (expected, r) in [(ReaderRole::Teacher, teacher), (ReaderRole::Student, student)] {
        for (what, role) in [
            ("session", r.session.reader_role),
            ("transcript", r.transcript.reader_role),
        ] {
            if role != expected {
                error(format!("{expected} {what} has reader_role `{role}`"));
            }
        }
    }

    for (who, r) in [("teacher", teacher), ("student", student)] {
        if r.session.is_empty() {
            issues.push(Issue {
                severity: Severity::Warning,
                message: format!("{who} session has no fixations"),
            });
        }
    }

    let ok = !issues.iter().any(|i| i.severity == Severity::Error);
    ValidationReport { ok, issues }
}
