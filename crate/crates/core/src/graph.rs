//! Thought graphs: fixations aligned to dictated findings.
//!
//! Each fixation is assigned to the finding sentence whose (tolerance-widened)
//! dictation window contains the fixation's temporal midpoint. Fixations of one
//! finding form a subgraph, linked as a path in onset order; everything else
//! lands in the residual pool without edges.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::gaze::{Fixation, GazeSession, ReaderRole, Transcript};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("case mismatch: session `{session}` vs transcript `{transcript}`")]
    CaseMismatch { session: String, transcript: String },
    #[error("reader role mismatch: session {session} vs transcript {transcript}")]
    RoleMismatch {
        session: ReaderRole,
        transcript: ReaderRole,
    },
    #[error("unknown finding `{0}`")]
    UnknownFinding(String),
}

/// Partition of fixation indices into findings and residual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FixationMapping {
    /// Finding label to fixation indices, in transcript order.
    pub findings: IndexMap<String, Vec<usize>>,
    pub residual: Vec<usize>,
}

pub fn map_fixations(
    session: &GazeSession,
    transcript: &Transcript,
    tolerance_ms: u64,
) -> Result<FixationMapping, GraphError> {
    if session.case_id != transcript.case_id {
        return Err(GraphError::CaseMismatch {
            session: session.case_id.clone(),
            transcript: transcript.case_id.clone(),
        });
    }
    if session.reader_role != transcript.reader_role {
        return Err(GraphError::RoleMismatch {
            session: session.reader_role,
            transcript: transcript.reader_role,
        });
    }

    let tol = tolerance_ms as i128;
    let windows: Vec<(&str, i128, i128, i128)> = transcript
        .findings()
        .map(|(label, s)| {
            (
                label,
                2 * (s.begin_ms as i128 - tol),
                2 * (s.end_ms as i128 + tol),
                s.doubled_center(),
            )
        })
        .collect();

    let mut findings: IndexMap<String, Vec<usize>> = windows
        .iter()
        .map(|(label, ..)| (label.to_string(), Vec::new()))
        .collect();
    let mut residual = Vec::new();

    for (i, fx) in session.fixations.iter().enumerate() {
        let mid = fx.doubled_midpoint();
        // Nearest window center wins; `min_by_key` keeps the earliest on ties.
        let best = windows
            .iter()
            .enumerate()
            .filter(|(_, (_, lo, hi, _))| *lo <= mid && mid <= *hi)
            .min_by_key(|(_, (.., center))| (mid - center).abs())
            .map(|(w, _)| w);
        match best {
            Some(w) => findings[w].push(i),
            None => residual.push(i),
        }
    }

    Ok(FixationMapping { findings, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub onset_ms: u64,
    pub duration_ms: u64,
}

impl Node {
    pub fn fixation(&self) -> Fixation {
        Fixation {
            x: self.x,
            y: self.y,
            onset_ms: self.onset_ms,
            duration_ms: self.duration_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtGraph {
    pub case_id: String,
    pub reader_role: ReaderRole,
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
    pub subgraphs: IndexMap<String, Vec<usize>>,
    pub residual: Vec<usize>,
}

pub fn build_thought_graph(
    session: &GazeSession,
    transcript: &Transcript,
    tolerance_ms: u64,
) -> Result<ThoughtGraph, GraphError> {
    let mapping = map_fixations(session, transcript, tolerance_ms)?;
    let nodes = session
        .fixations
        .iter()
        .enumerate()
        .map(|(index, f)| Node {
            index,
            x: f.x,
            y: f.y,
            onset_ms: f.onset_ms,
            duration_ms: f.duration_ms,
        })
        .collect();
    // Session fixations are onset-sorted, so member lists already are too.
    let edges = mapping
        .findings
        .values()
        .flat_map(|members| members.windows(2).map(|w| (w[0], w[1])))
        .collect();
    Ok(ThoughtGraph {
        case_id: session.case_id.clone(),
        reader_role: session.reader_role,
        nodes,
        edges,
        subgraphs: mapping.findings,
        residual: mapping.residual,
    })
}

impl ThoughtGraph {
    /// Number of finding subgraphs (n).
    pub fn subgraph_count(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.subgraphs.keys().map(String::as_str)
    }

    pub fn members(&self, label: &str) -> Option<Vec<&Node>> {
        self.subgraphs
            .get(label)
            .map(|idx| idx.iter().map(|&i| &self.nodes[i]).collect())
    }

    pub fn residual_nodes(&self) -> Vec<&Node> {
        self.residual.iter().map(|&i| &self.nodes[i]).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.min_x <= x && x <= self.max_x && self.min_y <= y && y <= self.max_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphSummary {
    pub finding_label: String,
    pub fixation_count: usize,
    pub total_dwell_ms: u64,
    pub centroid: Option<(f64, f64)>,
    pub bounding_box: Option<BoundingBox>,
}

/// Dwell, duration-weighted centroid, and extent of a set of fixations.
pub fn summarize_nodes<'a>(
    label: &str,
    nodes: impl IntoIterator<Item = &'a Node>,
) -> SubgraphSummary {
    let nodes: Vec<&Node> = nodes.into_iter().collect();
    let total_dwell_ms: u64 = nodes.iter().map(|n| n.duration_ms).sum();
    let (centroid, bounding_box) = if nodes.is_empty() {
        (None, None)
    } else {
        let w = total_dwell_ms as f64;
        let cx = nodes.iter().map(|n| n.x * n.duration_ms as f64).sum::<f64>() / w;
        let cy = nodes.iter().map(|n| n.y * n.duration_ms as f64).sum::<f64>() / w;
        let bbox = nodes.iter().fold(
            BoundingBox {
                min_x: f64::INFINITY,
                min_y: f64::INFINITY,
                max_x: f64::NEG_INFINITY,
                max_y: f64::NEG_INFINITY,
            },
            |b, n| BoundingBox {
                min_x: b.min_x.min(n.x),
                min_y: b.min_y.min(n.y),
                max_x: b.max_x.max(n.x),
                max_y: b.max_y.max(n.y),
            },
        );
        // Rounding can push a weighted mean one ulp past the extreme members.
        let cx = cx.clamp(bbox.min_x, bbox.max_x);
        let cy = cy.clamp(bbox.min_y, bbox.max_y);
        (Some((cx, cy)), Some(bbox))
    };
    SubgraphSummary {
        finding_label: label.to_string(),
        fixation_count: nodes.len(),
        total_dwell_ms,
        centroid,
        bounding_box,
    }
}

pub fn summarize_subgraph(
    graph: &ThoughtGraph,
    finding_label: &str,
) -> Result<SubgraphSummary, GraphError> {
    let members = graph
        .members(finding_label)
        .ok_or_else(|| GraphError::UnknownFinding(finding_label.to_string()))?;
    Ok(summarize_nodes(finding_label, members))
}

/// Decides whether a teacher finding and a student finding are the same.
pub trait FindingMatcher: Send + Sync {
    fn is_match(&self, teacher_label: &str, student_label: &str) -> bool;
}

/// Exact equality of normalized labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatcher;

impl FindingMatcher for ExactMatcher {
    fn is_match(&self, teacher_label: &str, student_label: &str) -> bool {
        teacher_label == student_label
    }
}

/// Maps aliases onto canonical labels before comparing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable {
    aliases: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            aliases: pairs
                .into_iter()
                .map(|(a, c)| {
                    (
                        crate::gaze::normalize_label(&a),
                        crate::gaze::normalize_label(&c),
                    )
                })
                .collect(),
        }
    }

    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.aliases.get(label).map(String::as_str).unwrap_or(label)
    }
}

impl FindingMatcher for SynonymTable {
    fn is_match(&self, teacher_label: &str, student_label: &str) -> bool {
        self.canonical(teacher_label) == self.canonical(student_label)
    }
}

/// An explicit teacher → student label assignment, e.g. produced by a model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExplicitMatches {
    pub pairs: BTreeMap<String, Option<String>>,
}

impl FindingMatcher for ExplicitMatches {
    fn is_match(&self, teacher_label: &str, student_label: &str) -> bool {
        matches!(self.pairs.get(teacher_label), Some(Some(s)) if s == student_label)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FindingDiff {
    pub missed: Vec<String>,
    pub extra: Vec<String>,
}

pub fn diff_findings(
    teacher: &ThoughtGraph,
    student: &ThoughtGraph,
    matcher: &dyn FindingMatcher,
) -> FindingDiff {
    let missed = teacher
        .labels()
        .filter(|t| !student.labels().any(|s| matcher.is_match(t, s)))
        .map(str::to_string)
        .collect();
    let extra = student
        .labels()
        .filter(|s| !teacher.labels().any(|t| matcher.is_match(t, s)))
        .map(str::to_string)
        .collect();
    FindingDiff { missed, extra }
}
