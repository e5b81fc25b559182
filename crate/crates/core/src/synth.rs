//! Simulated student readings derived from expert readings.
//!
//! Each transformation plants one perceptual error on one expert finding and
//! drops or rewrites the matching report sentence so the student misses it:
//!
//! * missed fixation: the finding's fixations and its sentence are removed;
//! * reduced fixation: the finding's fixation durations are halved (floor,
//!   minimum 1 ms) and its sentence is removed;
//! * incomplete knowledge: gaze is untouched and the sentence is replaced by a
//!   plausible misreading taken from a [`DistractorTable`].
//!
//! [`generate_corpus`] draws a balanced, seeded corpus. All randomness comes
//! from one `ChaCha8Rng` seeded with the corpus seed and consumed in a fixed
//! order (error types in label order, then draws in sequence), so the same
//! seed and experts give the same corpus.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::ErrorType;
use crate::gaze::{normalize_label, GazeError, GazeSession, ReaderRole, Reading, Transcript};
use crate::graph::{map_fixations, GraphError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gaze(#[from] GazeError),
    #[error("case `{case}` has no finding `{finding}`")]
    UnknownFinding { case: String, finding: String },
    #[error("finding `{finding}` in case `{case}` has no mapped fixations")]
    NoFixations { case: String, finding: String },
    #[error("no distractor available for finding `{0}`")]
    NoDistractor(String),
    #[error("distractor `{distractor}` collides with a finding of case `{case}`")]
    DistractorCollision { case: String, distractor: String },
    #[error("`{0}` is not an injectable error type")]
    NotInjectable(ErrorType),
    #[error("finding `{0}` injected more than once")]
    DuplicateInjection(String),
    #[error("expert case `{0}` appears more than once")]
    DuplicateCase(String),
    #[error("errors per case must be at least 1")]
    ZeroErrorsPerCase,
    #[error("no expert case has {needed} eligible finding(s) for {error_type}")]
    InsufficientEligible { error_type: ErrorType, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Injection {
    pub finding_label: String,
    pub error_type: ErrorType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distractor {
    pub label: String,
    pub text: String,
}

/// Misreadings keyed by the finding they replace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistractorTable(BTreeMap<String, Vec<Distractor>>);

const BUILTIN_DISTRACTORS: &str = include_str!("../data/distractors.v1.json");

impl DistractorTable {
    /// The small table shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_DISTRACTORS).expect("bundled distractor table parses")
    }

    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        let raw: BTreeMap<String, Vec<Distractor>> = serde_json::from_str(raw)?;
        let mut table = Self::default();
        for (finding, options) in raw {
            for d in options {
                table.insert(&finding, d);
            }
        }
        Ok(table)
    }

    pub fn insert(&mut self, finding: &str, distractor: Distractor) {
        let d = Distractor {
            label: normalize_label(&distractor.label),
            text: distractor.text,
        };
        self.0.entry(normalize_label(finding)).or_default().push(d);
    }

    pub fn candidates(&self, finding: &str) -> &[Distractor] {
        self.0.get(finding).map(Vec::as_slice).unwrap_or_default()
    }

    /// First candidate whose label is not already taken.
    pub fn pick(&self, finding: &str, taken: &BTreeSet<String>) -> Option<&Distractor> {
        self.candidates(finding)
            .iter()
            .find(|d| !taken.contains(&d.label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticCase {
    pub base_case_id: String,
    pub variant_id: String,
    pub injected: Vec<Injection>,
    pub student_session: GazeSession,
    pub student_transcript: Transcript,
    pub ground_truth: Vec<Injection>,
}

impl SyntheticCase {
    pub fn student(&self) -> Reading {
        Reading::new(self.student_session.clone(), self.student_transcript.clone())
    }

    /// Distinct injected error types in label order.
    pub fn truth_labels(&self) -> Vec<ErrorType> {
        ErrorType::LABELS
            .into_iter()
            .filter(|t| self.ground_truth.iter().any(|i| i.error_type == *t))
            .collect()
    }
}

pub fn halve_duration(duration_ms: u64) -> u64 {
    (duration_ms / 2).max(1)
}

enum Edit<'a> {
    Remove,
    Halve,
    Relabel(&'a Distractor),
}

fn apply(
    expert: &Reading,
    edits: &[(String, ErrorType, Edit<'_>)],
    tolerance_ms: u64,
) -> Result<SyntheticCase, SynthError> {
    let case = expert.session.case_id.clone();
    let mapping = map_fixations(&expert.session, &expert.transcript, tolerance_ms)?;
    let mut taken: BTreeSet<String> = expert
        .transcript
        .findings()
        .map(|(l, _)| l.to_string())
        .collect();

    let mut fixations: Vec<Option<_>> = expert.session.fixations.iter().copied().map(Some).collect();
    let mut sentences: Vec<Option<_>> = expert.transcript.sentences.iter().cloned().map(Some).collect();
    let mut seen = BTreeSet::new();
    let mut injected = Vec::with_capacity(edits.len());

    for (finding, error_type, edit) in edits {
        if *error_type == ErrorType::None {
            return Err(SynthError::NotInjectable(*error_type));
        }
        if !seen.insert(finding.as_str()) {
            return Err(SynthError::DuplicateInjection(finding.clone()));
        }
        let unknown = || SynthError::UnknownFinding {
            case: case.clone(),
            finding: finding.clone(),
        };
        let members = mapping.findings.get(finding).ok_or_else(unknown)?;
        if members.is_empty() {
            return Err(SynthError::NoFixations {
                case: case.clone(),
                finding: finding.clone(),
            });
        }
        let sentence = expert
            .transcript
            .sentences
            .iter()
            .position(|s| s.finding_label.as_deref() == Some(finding))
            .ok_or_else(unknown)?;

        match edit {
            Edit::Remove => {
                for &i in members {
                    fixations[i] = None;
                }
                sentences[sentence] = None;
            }
            Edit::Halve => {
                for &i in members {
                    if let Some(f) = fixations[i].as_mut() {
                        f.duration_ms = halve_duration(f.duration_ms);
                    }
                }
                sentences[sentence] = None;
            }
            Edit::Relabel(d) => {
                if !taken.insert(d.label.clone()) {
                    return Err(SynthError::DistractorCollision {
                        case: case.clone(),
                        distractor: d.label.clone(),
                    });
                }
                if let Some(s) = sentences[sentence].as_mut() {
                    s.text = d.text.clone();
                    s.finding_label = Some(d.label.clone());
                }
            }
        }
        injected.push(Injection {
            finding_label: finding.clone(),
            error_type: *error_type,
        });
    }

    let student_session = GazeSession::new(
        case.clone(),
        ReaderRole::Student,
        fixations.into_iter().flatten().collect(),
    )?;
    let student_transcript = Transcript::new(
        case.clone(),
        ReaderRole::Student,
        sentences.into_iter().flatten().collect(),
    )?;
    let variant_id = format!(
        "{case}.{}",
        injected
            .iter()
            .map(|i| format!("{}.{}", i.error_type, i.finding_label.replace(' ', "-")))
            .join(".")
    );
    Ok(SyntheticCase {
        base_case_id: case,
        variant_id,
        ground_truth: injected.clone(),
        injected,
        student_session,
        student_transcript,
    })
}

pub fn synth_missed_fixation(
    expert: &Reading,
    finding: &str,
    tolerance_ms: u64,
) -> Result<SyntheticCase, SynthError> {
    let finding = normalize_label(finding);
    apply(
        expert,
        &[(finding, ErrorType::MissedFixation, Edit::Remove)],
        tolerance_ms,
    )
}

pub fn synth_reduced_fixation(
    expert: &Reading,
    finding: &str,
    tolerance_ms: u64,
) -> Result<SyntheticCase, SynthError> {
    let finding = normalize_label(finding);
    apply(
        expert,
        &[(finding, ErrorType::BriefFixation, Edit::Halve)],
        tolerance_ms,
    )
}

pub fn synth_incomplete_knowledge(
    expert: &Reading,
    finding: &str,
    distractor: &Distractor,
    tolerance_ms: u64,
) -> Result<SyntheticCase, SynthError> {
    let finding = normalize_label(finding);
    let distractor = Distractor {
        label: normalize_label(&distractor.label),
        text: distractor.text.clone(),
    };
    apply(
        expert,
        &[(finding, ErrorType::KnowledgeGap, Edit::Relabel(&distractor))],
        tolerance_ms,
    )
}

/// Applies several injections to one expert reading. Distractors come from
/// `table`, skipping labels the expert already reports.
pub fn inject(
    expert: &Reading,
    injections: &[Injection],
    table: &DistractorTable,
    tolerance_ms: u64,
) -> Result<SyntheticCase, SynthError> {
    let mut taken: BTreeSet<String> = expert
        .transcript
        .findings()
        .map(|(l, _)| l.to_string())
        .collect();
    let mut edits = Vec::with_capacity(injections.len());
    for inj in injections {
        let finding = normalize_label(&inj.finding_label);
        let edit = match inj.error_type {
            ErrorType::MissedFixation => Edit::Remove,
            ErrorType::BriefFixation => Edit::Halve,
            ErrorType::KnowledgeGap => {
                let d = table
                    .pick(&finding, &taken)
                    .ok_or_else(|| SynthError::NoDistractor(finding.clone()))?;
                taken.insert(d.label.clone());
                Edit::Relabel(d)
            }
            ErrorType::None => return Err(SynthError::NotInjectable(ErrorType::None)),
        };
        edits.push((finding, inj.error_type, edit));
    }
    apply(expert, &edits, tolerance_ms)
}

/// Findings of `expert` that `error_type` can be injected into.
pub fn eligible_findings(
    expert: &Reading,
    error_type: ErrorType,
    table: &DistractorTable,
    tolerance_ms: u64,
) -> Result<Vec<String>, SynthError> {
    let mapping = map_fixations(&expert.session, &expert.transcript, tolerance_ms)?;
    let taken: BTreeSet<String> = mapping.findings.keys().cloned().collect();
    Ok(mapping
        .findings
        .iter()
        .filter(|(_, members)| !members.is_empty())
        .map(|(label, _)| label)
        .filter(|label| match error_type {
            ErrorType::KnowledgeGap => table.pick(label, &taken).is_some(),
            ErrorType::None => false,
            _ => true,
        })
        .cloned()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub per_type_count: usize,
    pub errors_per_case: usize,
    pub tolerance_ms: u64,
}

impl CorpusSpec {
    pub fn new(seed: u64, per_type_count: usize) -> Self {
        Self {
            seed,
            per_type_count,
            errors_per_case: 1,
            tolerance_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub variant_id: String,
    pub base_case_id: String,
    pub error_type: ErrorType,
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub prng: String,
    pub per_type_count: usize,
    pub errors_per_case: usize,
    pub tolerance_ms: u64,
    pub counts: IndexMap<ErrorType, usize>,
    pub cases: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub cases: Vec<SyntheticCase>,
    pub manifest: Manifest,
}

/// Draws `per_type_count` cases of each error type. Every case of a type
/// injects `errors_per_case` findings of that type into one expert reading.
///
/// Candidate (case, findings) units are enumerated in case-id order, shuffled,
/// and consumed cyclically, reshuffling at the start of every pass. Expert
/// cases with too few eligible findings for a type are skipped for that type.
pub fn generate_corpus(
    experts: &[Reading],
    spec: &CorpusSpec,
    table: &DistractorTable,
) -> Result<Corpus, SynthError> {
    let k = spec.errors_per_case;
    if k == 0 {
        return Err(SynthError::ZeroErrorsPerCase);
    }
    let mut experts: Vec<&Reading> = experts.iter().collect();
    experts.sort_by(|a, b| a.session.case_id.cmp(&b.session.case_id));
    if let Some(w) = experts
        .windows(2)
        .find(|w| w[0].session.case_id == w[1].session.case_id)
    {
        return Err(SynthError::DuplicateCase(w[0].session.case_id.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drawn: Vec<(usize, ErrorType, Vec<String>)> = Vec::new();
    for error_type in ErrorType::LABELS {
        let mut units: Vec<(usize, Vec<String>)> = Vec::new();
        for (ci, expert) in experts.iter().enumerate() {
            let eligible = eligible_findings(expert, error_type, table, spec.tolerance_ms)?;
            units.extend(
                eligible
                    .into_iter()
                    .combinations(k)
                    .map(|combo| (ci, combo)),
            );
        }
        if units.is_empty() {
            if spec.per_type_count == 0 {
                continue;
            }
            return Err(SynthError::InsufficientEligible {
                error_type,
                needed: k,
            });
        }
        let mut order: Vec<usize> = (0..units.len()).collect();
        for i in 0..spec.per_type_count {
            if i % units.len() == 0 {
                order.shuffle(&mut rng);
            }
            let (ci, findings) = &units[order[i % units.len()]];
            drawn.push((*ci, error_type, findings.clone()));
        }
    }

    drawn.sort_by(|a, b| {
        let key = |d: &(usize, ErrorType, Vec<String>)| (d.0, d.1, d.2.clone());
        key(a).cmp(&key(b))
    });

    let mut cases = Vec::with_capacity(drawn.len());
    let mut entries = Vec::with_capacity(drawn.len());
    let mut serial: BTreeMap<(usize, ErrorType), usize> = BTreeMap::new();
    for (ci, error_type, findings) in drawn {
        let expert = experts[ci];
        let injections: Vec<Injection> = findings
            .iter()
            .map(|f| Injection {
                finding_label: f.clone(),
                error_type,
            })
            .collect();
        let mut case = inject(expert, &injections, table, spec.tolerance_ms)?;
        let n = serial.entry((ci, error_type)).or_default();
        *n += 1;
        case.variant_id = format!("{}.{}.{:02}", case.base_case_id, error_type, n);
        entries.push(ManifestEntry {
            variant_id: case.variant_id.clone(),
            base_case_id: case.base_case_id.clone(),
            error_type,
            findings,
        });
        cases.push(case);
    }

    let counts = ErrorType::LABELS
        .into_iter()
        .map(|t| (t, entries.iter().filter(|e| e.error_type == t).count()))
        .collect();
    Ok(Corpus {
        cases,
        manifest: Manifest {
            seed: spec.seed,
            prng: "chacha8".to_string(),
            per_type_count: spec.per_type_count,
            errors_per_case: k,
            tolerance_ms: spec.tolerance_ms,
            counts,
            cases: entries,
        },
    })
}
