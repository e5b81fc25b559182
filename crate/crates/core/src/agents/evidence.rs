//! Locally computed gaze evidence and the deterministic classification ladder.

use serde::{Deserialize, Serialize};

use crate::gaze::Fixation;
use crate::graph::SubgraphSummary;

use super::ErrorType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Euclidean radius around the teacher centroid, in normalized units.
    pub radius: f64,
    /// Student dwell below this fraction of teacher dwell counts as brief.
    pub dwell_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            radius: 0.1,
            dwell_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub overlap_fixations: u64,
    pub student_dwell_ms: u64,
    pub teacher_dwell_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_ratio: Option<f64>,
}

impl Evidence {
    pub fn new(overlap_fixations: u64, student_dwell_ms: u64, teacher_dwell_ms: u64) -> Self {
        let dwell_ratio =
            (teacher_dwell_ms > 0).then(|| student_dwell_ms as f64 / teacher_dwell_ms as f64);
        Self {
            overlap_fixations,
            student_dwell_ms,
            teacher_dwell_ms,
            dwell_ratio,
        }
    }

    /// Student fixations within `radius` of the teacher centroid, and their dwell.
    pub fn measure<'a>(
        teacher: &SubgraphSummary,
        student_view: impl IntoIterator<Item = &'a Fixation>,
        thresholds: &Thresholds,
    ) -> Self {
        let (count, dwell) = match teacher.centroid {
            None => (0, 0),
            Some((cx, cy)) => student_view
                .into_iter()
                .filter(|f| f.distance_to(cx, cy) <= thresholds.radius)
                .fold((0, 0), |(n, d), f| (n + 1, d + f.duration_ms)),
        };
        Self::new(count, dwell, teacher.total_dwell_ms)
    }

    /// Pools of one finding are disjoint, so overlap adds up; teacher dwell is shared.
    pub fn merge<'a>(records: impl IntoIterator<Item = &'a Evidence>) -> Self {
        let (n, s, t) = records.into_iter().fold((0, 0, 0), |(n, s, t), e| {
            (
                n + e.overlap_fixations,
                s + e.student_dwell_ms,
                t.max(e.teacher_dwell_ms),
            )
        });
        Self::new(n, s, t)
    }

    /// The decision ladder: no overlap, then too little dwell, then knowledge.
    /// Returns `None` when the teacher has no dwell to compare against.
    pub fn classify(&self, thresholds: &Thresholds) -> Option<ErrorType> {
        if self.teacher_dwell_ms == 0 {
            return None;
        }
        Some(if self.overlap_fixations == 0 {
            ErrorType::MissedFixation
        } else if (self.student_dwell_ms as f64)
            < thresholds.dwell_fraction * self.teacher_dwell_ms as f64
        {
            ErrorType::BriefFixation
        } else {
            ErrorType::KnowledgeGap
        })
    }

    pub fn describe(&self, thresholds: &Thresholds) -> String {
        match self.classify(thresholds) {
            None => "the teacher dictated this finding without fixating on it, so gaze cannot \
                     be compared; treated as a knowledge gap"
                .to_string(),
            Some(ErrorType::MissedFixation) => format!(
                "no student fixation within {:.3} of the teacher's gaze centroid; the region \
                 was never fixated",
                thresholds.radius
            ),
            Some(kind) => {
                let ratio = self.dwell_ratio.unwrap_or_default();
                let verdict = if kind == ErrorType::BriefFixation {
                    format!("below {:.2}: looked, but too briefly", thresholds.dwell_fraction)
                } else {
                    format!(
                        "at least {:.2}: gaze was adequate, so the miss points to interpretation",
                        thresholds.dwell_fraction
                    )
                };
                format!(
                    "{} student fixation(s) near the finding, dwell {} ms vs teacher {} ms \
                     (ratio {:.3}, {})",
                    self.overlap_fixations,
                    self.student_dwell_ms,
                    self.teacher_dwell_ms,
                    ratio,
                    verdict
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("teacher subgraph has no fixations")]
pub struct EmptyTeacherSubgraph;

/// Classifies one missed finding from gaze alone.
pub fn reference_classify(
    teacher: &SubgraphSummary,
    student_view: &[Fixation],
    thresholds: &Thresholds,
) -> Result<ErrorType, EmptyTeacherSubgraph> {
    if teacher.fixation_count == 0 {
        return Err(EmptyTeacherSubgraph);
    }
    Evidence::measure(teacher, student_view, thresholds)
        .classify(thresholds)
        .ok_or(EmptyTeacherSubgraph)
}
