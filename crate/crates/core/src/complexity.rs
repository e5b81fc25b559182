//! Error complexity and agent recruitment.
//!
//! The number of missed findings is `delta_n = |n_teacher - n_student|` and the
//! error complexity is `c_error = delta_n * n_student`, the number of
//! (missed teacher subgraph, student subgraph) comparisons. Agents are recruited
//! linearly in `c_error`, optionally capped.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::graph::{diff_findings, FindingMatcher, ThoughtGraph};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ComplexityError {
    #[error("case mismatch: teacher `{teacher}` vs student `{student}`")]
    CaseMismatch { teacher: String, student: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecruitmentPolicy {
    /// One agent per missed finding.
    ByErrorCount,
    /// One agent per subgraph comparison.
    #[default]
    ByComplexity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub kind: RecruitmentPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_cap: Option<usize>,
}

impl AgentPolicy {
    pub fn by_complexity() -> Self {
        Self {
            kind: RecruitmentPolicy::ByComplexity,
            agent_cap: None,
        }
    }

    pub fn by_error_count() -> Self {
        Self {
            kind: RecruitmentPolicy::ByErrorCount,
            agent_cap: None,
        }
    }

    pub fn with_cap(mut self, cap: Option<usize>) -> Self {
        self.agent_cap = cap;
        self
    }

    fn capped(&self, n: usize) -> usize {
        self.agent_cap.map_or(n, |cap| n.min(cap))
    }
}

/// Number of missed findings from subgraph counts.
pub fn delta_n(n_teacher: usize, n_student: usize) -> usize {
    n_teacher.abs_diff(n_student)
}

pub fn error_complexity(n_teacher: usize, n_student: usize) -> usize {
    delta_n(n_teacher, n_student) * n_student
}

/// Agents recruited for a given complexity, missed-finding count, and policy.
///
/// Under `ByComplexity` a zero complexity recruits nobody.
pub fn agent_count(policy: &AgentPolicy, c_error: usize, missed: usize) -> usize {
    match policy.kind {
        RecruitmentPolicy::ByComplexity => policy.capped(c_error),
        RecruitmentPolicy::ByErrorCount => policy.capped(missed),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityAssessment {
    pub n_teacher: usize,
    pub n_student: usize,
    pub delta_n: usize,
    pub c_error: usize,
    pub n_agents: usize,
    pub missed: Vec<String>,
    pub extra: Vec<String>,
    pub policy: AgentPolicy,
}

pub fn assess(
    teacher: &ThoughtGraph,
    student: &ThoughtGraph,
    matcher: &dyn FindingMatcher,
    policy: AgentPolicy,
) -> Result<ComplexityAssessment, ComplexityError> {
    if teacher.case_id != student.case_id {
        return Err(ComplexityError::CaseMismatch {
            teacher: teacher.case_id.clone(),
            student: student.case_id.clone(),
        });
    }
    let diff = diff_findings(teacher, student, matcher);
    let n_teacher = teacher.subgraph_count();
    let n_student = student.subgraph_count();
    let c_error = error_complexity(n_teacher, n_student);
    Ok(ComplexityAssessment {
        n_teacher,
        n_student,
        delta_n: delta_n(n_teacher, n_student),
        c_error,
        n_agents: agent_count(&policy, c_error, diff.missed.len()),
        missed: diff.missed,
        extra: diff.extra,
        policy,
    })
}

/// Which slice of the student's gaze a comparison task looks at.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StudentPool {
    Subgraph(String),
    /// Fixations mapped to no student finding.
    Residual,
    /// The student has neither subgraphs nor residual fixations.
    Empty,
}

const RESIDUAL: &str = "RESIDUAL";
const EMPTY: &str = "EMPTY";

impl fmt::Display for StudentPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StudentPool::Subgraph(label) => f.write_str(label),
            StudentPool::Residual => f.write_str(RESIDUAL),
            StudentPool::Empty => f.write_str(EMPTY),
        }
    }
}

// Labels are normalized to lowercase, so the uppercase markers cannot collide.
impl Serialize for StudentPool {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StudentPool {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            RESIDUAL => StudentPool::Residual,
            EMPTY => StudentPool::Empty,
            _ => StudentPool::Subgraph(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTask {
    pub task_id: String,
    pub missed_finding_label: String,
    pub student_pool: StudentPool,
    pub agent_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonPlan {
    pub n_agents: usize,
    pub tasks: Vec<ComparisonTask>,
    /// Missed findings for which no agent was recruited.
    pub unassigned: Vec<String>,
}

impl ComparisonPlan {
    /// Tasks grouped by agent slot, each group in task order.
    pub fn by_slot(&self) -> Vec<Vec<&ComparisonTask>> {
        let mut slots = vec![Vec::new(); self.n_agents];
        for t in &self.tasks {
            slots[t.agent_slot].push(t);
        }
        slots
    }
}

fn student_pools(student: &ThoughtGraph) -> Vec<StudentPool> {
    let mut pools: Vec<StudentPool> = student
        .labels()
        .map(|l| StudentPool::Subgraph(l.to_string()))
        .collect();
    if !student.residual.is_empty() {
        pools.push(StudentPool::Residual);
    }
    if pools.is_empty() {
        pools.push(StudentPool::Empty);
    }
    pools
}

/// Pairs every missed finding with every student pool and assigns agent slots.
pub fn plan_comparisons(
    assessment: &ComplexityAssessment,
    _teacher: &ThoughtGraph,
    student: &ThoughtGraph,
) -> ComparisonPlan {
    let n_agents = assessment.n_agents;
    if n_agents == 0 {
        return ComparisonPlan {
            n_agents,
            tasks: Vec::new(),
            unassigned: assessment.missed.clone(),
        };
    }

    let pools = student_pools(student);
    let mut tasks = Vec::with_capacity(assessment.missed.len() * pools.len());
    for (f, finding) in assessment.missed.iter().enumerate() {
        for pool in &pools {
            let k = tasks.len();
            let agent_slot = match assessment.policy.kind {
                RecruitmentPolicy::ByComplexity => k % n_agents,
                RecruitmentPolicy::ByErrorCount => f % n_agents,
            };
            tasks.push(ComparisonTask {
                task_id: format!("t{k:04}"),
                missed_finding_label: finding.clone(),
                student_pool: pool.clone(),
                agent_slot,
            });
        }
    }
    ComparisonPlan {
        n_agents,
        tasks,
        unassigned: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::{Fixation, GazeSession, ReaderRole, Sentence, Transcript};
    use crate::graph::{build_thought_graph, ExactMatcher};

    fn graph(role: ReaderRole, labels: &[&str], residual: usize) -> ThoughtGraph {
        let sentences = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Sentence {
                index: i as u32,
                text: l.to_string(),
                begin_ms: i as u64 * 1000,
                end_ms: i as u64 * 1000 + 500,
                finding_label: Some(l.to_string()),
            })
            .collect();
        // Residual fixations sit well after every window.
        let fixations = (0..residual)
            .map(|k| Fixation {
                x: 0.5,
                y: 0.5,
                onset_ms: 1_000_000 + k as u64 * 100,
                duration_ms: 50,
            })
            .collect();
        build_thought_graph(
            &GazeSession::new("c", role, fixations).unwrap(),
            &Transcript::new("c", role, sentences).unwrap(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn identical_findings_recruit_nobody() {
        let labels = ["a", "b", "c", "d", "e", "f", "g"];
        let t = graph(ReaderRole::Teacher, &labels, 0);
        let s = graph(ReaderRole::Student, &labels, 0);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_complexity()).unwrap();
        assert_eq!((a.delta_n, a.c_error, a.n_agents), (0, 0, 0));
        let p = plan_comparisons(&a, &t, &s);
        assert!(p.tasks.is_empty() && p.unassigned.is_empty());
    }

    #[test]
    fn five_versus_three() {
        let t = graph(ReaderRole::Teacher, &["a", "b", "c", "d", "e"], 0);
        let s = graph(ReaderRole::Student, &["a", "b", "c"], 0);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_complexity()).unwrap();
        assert_eq!((a.delta_n, a.c_error, a.n_agents), (2, 6, 6));
        assert_eq!(plan_comparisons(&a, &t, &s).tasks.len(), 6);
    }

    #[test]
    fn two_missed_against_one_subgraph() {
        let t = graph(ReaderRole::Teacher, &["a", "b", "c"], 0);
        let s = graph(ReaderRole::Student, &["a"], 0);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_complexity()).unwrap();
        let p = plan_comparisons(&a, &t, &s);
        let got: Vec<(&str, String, usize)> = p
            .tasks
            .iter()
            .map(|t| (t.missed_finding_label.as_str(), t.student_pool.to_string(), t.agent_slot))
            .collect();
        assert_eq!(got, vec![("b", "a".into(), 0), ("c", "a".into(), 1)]);
    }

    #[test]
    fn residual_pool_adds_a_task() {
        let t = graph(ReaderRole::Teacher, &["a", "b"], 0);
        let s = graph(ReaderRole::Student, &["a"], 2);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_complexity()).unwrap();
        assert_eq!((a.c_error, a.n_agents), (1, 1));
        let p = plan_comparisons(&a, &t, &s);
        let pools: Vec<&StudentPool> = p.tasks.iter().map(|t| &t.student_pool).collect();
        assert_eq!(pools, vec![&StudentPool::Subgraph("a".into()), &StudentPool::Residual]);
        // Two tasks round-robin onto the single agent.
        assert!(p.tasks.iter().all(|t| t.agent_slot == 0));
    }

    #[test]
    fn by_error_count_groups_tasks_per_finding() {
        let t = graph(ReaderRole::Teacher, &["a", "b", "c", "d"], 0);
        let s = graph(ReaderRole::Student, &["a", "b"], 1);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_error_count()).unwrap();
        assert_eq!(a.n_agents, 2);
        let p = plan_comparisons(&a, &t, &s);
        assert_eq!(p.tasks.len(), 6);
        for task in &p.tasks {
            let expected = if task.missed_finding_label == "c" { 0 } else { 1 };
            assert_eq!(task.agent_slot, expected);
        }
        assert_eq!(p.by_slot()[1].len(), 3);
    }

    #[test]
    fn empty_student_view_under_error_count() {
        let t = graph(ReaderRole::Teacher, &["a", "b"], 0);
        let s = graph(ReaderRole::Student, &[], 0);
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_error_count()).unwrap();
        let p = plan_comparisons(&a, &t, &s);
        assert_eq!(p.tasks.len(), 2);
        assert!(p.tasks.iter().all(|t| t.student_pool == StudentPool::Empty));

        // The same case under complexity recruitment has c_error 0.
        let a = assess(&t, &s, &ExactMatcher, AgentPolicy::by_complexity()).unwrap();
        let p = plan_comparisons(&a, &t, &s);
        assert!(p.tasks.is_empty());
        assert_eq!(p.unassigned, vec!["a", "b"]);
    }

    #[test]
    fn cap_limits_agents() {
        let t = graph(ReaderRole::Teacher, &["a", "b", "c", "d", "e"], 0);
        let s = graph(ReaderRole::Student, &["a", "b", "c"], 0);
        let policy = AgentPolicy::by_complexity().with_cap(Some(4));
        let a = assess(&t, &s, &ExactMatcher, policy).unwrap();
        assert_eq!(a.n_agents, 4);
        let p = plan_comparisons(&a, &t, &s);
        let slots: Vec<usize> = p.tasks.iter().map(|t| t.agent_slot).collect();
        assert_eq!(slots, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn case_mismatch() {
        let t = graph(ReaderRole::Teacher, &["a"], 0);
        let mut s = graph(ReaderRole::Student, &["a"], 0);
        s.case_id = "other".into();
        assert!(assess(&t, &s, &ExactMatcher, AgentPolicy::default()).is_err());
    }

    #[test]
    fn pool_serialization() {
        let json = serde_json::to_string(&[
            StudentPool::Subgraph("opacity".into()),
            StudentPool::Residual,
            StudentPool::Empty,
        ])
        .unwrap();
        assert_eq!(json, r#"["opacity","RESIDUAL","EMPTY"]"#);
        let back: Vec<StudentPool> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[1], StudentPool::Residual);
    }

    proptest::proptest! {
        #[test]
        fn formulas_hold(n_t in 0usize..60, n_s in 0usize..60) {
            proptest::prop_assert_eq!(delta_n(n_t, n_s), delta_n(n_s, n_t));
            proptest::prop_assert_eq!(error_complexity(n_t, n_s), n_t.abs_diff(n_s) * n_s);
        }

        #[test]
        fn agents_monotone_in_delta(n_s in 0usize..30, d in 0usize..30) {
            let p = AgentPolicy::by_complexity();
            let lo = agent_count(&p, delta_n(n_s + d, n_s) * n_s, d);
            let hi = agent_count(&p, delta_n(n_s + d + 1, n_s) * n_s, d + 1);
            proptest::prop_assert!(lo <= hi);
        }
    }
}
