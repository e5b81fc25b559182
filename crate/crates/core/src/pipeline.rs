//! Batch analysis of student cases against their expert readings.

use std::collections::BTreeMap;
use std::time::Instant;

use futures::stream::{self, StreamExt};

use crate::agents::{run_case_traced, AgentError, AnalysisConfig, CaseRun};
use crate::dataset::StudentCase;
use crate::gateway::{Gateway, LogRecord, RunLog};
use crate::gaze::Reading;

pub const DEFAULT_MAX_PARALLEL_CASES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("no expert reading for case `{0}`")]
    MissingTeacher(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug)]
pub struct CaseResult {
    pub variant_id: String,
    pub outcome: Result<CaseRun, CaseError>,
    pub elapsed_ms: u64,
}

/// Runs every student case, at most `max_parallel_cases` at a time, and
/// returns results in input order. `progress` sees each case as it finishes.
///
/// When `log` is given, each case also gets a `Case` record holding its wall
/// time minus the backend latency attributed to it.
pub async fn analyze_cases(
    teachers: &[Reading],
    students: &[StudentCase],
    gateway: Option<&Gateway>,
    config: &AnalysisConfig,
    max_parallel_cases: usize,
    log: Option<&RunLog>,
    mut progress: impl FnMut(&CaseResult),
) -> Vec<CaseResult> {
    let by_case: BTreeMap<&str, &Reading> = teachers
        .iter()
        .map(|r| (r.session.case_id.as_str(), r))
        .collect();

    let mut pending = stream::iter(students.iter().enumerate())
        .map(|(i, case)| {
            let by_case = &by_case;
            async move {
                let start = Instant::now();
                let scoped = gateway.map(|g| g.scoped(case.variant_id.clone()));
                let base = case.student.session.case_id.as_str();
                let outcome = match by_case.get(base) {
                    None => Err(CaseError::MissingTeacher(base.to_string())),
                    Some(teacher) => run_case_traced(teacher, &case.student, scoped.as_ref(), config)
                        .await
                        .map_err(CaseError::from),
                };
                let elapsed_ms = start.elapsed().as_millis() as u64;
                if let Some(log) = log {
                    let spent = scoped.as_ref().map_or(0, Gateway::spent_ms);
                    log.record(LogRecord::Case {
                        case_id: case.variant_id.clone(),
                        local_ms: elapsed_ms.saturating_sub(spent),
                    });
                }
                (
                    i,
                    CaseResult {
                        variant_id: case.variant_id.clone(),
                        outcome,
                        elapsed_ms,
                    },
                )
            }
        })
        .buffer_unordered(max_parallel_cases.max(1));

    let mut done = Vec::with_capacity(students.len());
    while let Some((i, result)) = pending.next().await {
        progress(&result);
        done.push((i, result));
    }
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}
