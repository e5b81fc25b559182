//! Principal coordinator, perceptual error teacher (PET) agents, and the
//! consolidator.
//!
//! [`run_case`] builds both thought graphs, assesses error complexity, fans the
//! resulting comparison tasks out to PET agents with bounded concurrency, and
//! folds their verdicts into a [`FeedbackReport`]. PET agents either prompt a
//! model ([`PetMode::Llm`]) or apply the deterministic evidence ladder
//! ([`PetMode::Reference`]). Evidence counters are always computed locally.

mod evidence;
pub mod prompt;

use std::fmt;

use futures::stream::{self, StreamExt};
use indexmap::IndexMap;
use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::complexity::{
    assess, plan_comparisons, AgentPolicy, ComparisonPlan, ComparisonTask, ComplexityAssessment,
    ComplexityError, StudentPool,
};
use crate::gateway::{ChatRequest, Gateway, GatewayError, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::gaze::{Fixation, Reading};
use crate::graph::{
    build_thought_graph, summarize_nodes, ExplicitMatches, FindingMatcher, GraphError, Node,
    SynonymTable, ThoughtGraph,
};

pub use evidence::{reference_classify, EmptyTeacherSubgraph, Evidence, Thresholds};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Complexity(#[from] ComplexityError),
    #[error("backend call failed: {0}")]
    Backend(#[from] GatewayError),
    #[error("llm mode requires a backend")]
    NoBackend,
    #[error("unparseable matcher reply after repair: {0}")]
    MatcherReply(String),
    #[error("no verdict for missed finding `{0}`")]
    MissingVerdict(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    MissedFixation,
    BriefFixation,
    KnowledgeGap,
    None,
}

impl ErrorType {
    /// The three perceptual-error labels, in report and matrix order.
    pub const LABELS: [ErrorType; 3] = [
        ErrorType::MissedFixation,
        ErrorType::BriefFixation,
        ErrorType::KnowledgeGap,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorType::MissedFixation => "missed_fixation",
            ErrorType::BriefFixation => "brief_fixation",
            ErrorType::KnowledgeGap => "knowledge_gap",
            ErrorType::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ErrorType::MissedFixation,
            ErrorType::BriefFixation,
            ErrorType::KnowledgeGap,
            ErrorType::None,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PetVerdict {
    pub task_id: String,
    pub missed_finding_label: String,
    pub student_pool: StudentPool,
    pub error_type: ErrorType,
    pub rationale: String,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingFeedback {
    pub error_type: ErrorType,
    pub rationale: String,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub schema_version: String,
    pub case_id: String,
    pub assessment: ComplexityAssessment,
    pub per_finding: IndexMap<String, FindingFeedback>,
    pub consolidated_error_types: Vec<ErrorType>,
}

impl FeedbackReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetMode {
    Llm,
    #[default]
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherMode {
    #[default]
    Exact,
    LlmMatcher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub tolerance_ms: u64,
    pub policy: AgentPolicy,
    pub mode: PetMode,
    pub matcher: MatcherMode,
    pub synonyms: SynonymTable,
    pub thresholds: Thresholds,
    pub communication: bool,
    /// Defaults to the number of recruited agents.
    pub max_parallel_agents: Option<usize>,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tolerance_ms: 0,
            policy: AgentPolicy::default(),
            mode: PetMode::default(),
            matcher: MatcherMode::default(),
            synonyms: SynonymTable::default(),
            thresholds: Thresholds::default(),
            communication: false,
            max_parallel_agents: None,
            model_id: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl AnalysisConfig {
    fn request(&self, case_id: &str, tag: String, messages: Vec<crate::gateway::ChatMessage>) -> ChatRequest {
        ChatRequest::new(self.model_id.clone(), messages)
            .temperature(self.temperature)
            .max_tokens(self.max_tokens)
            .tag(tag)
            .case(case_id)
    }
}

/// Output of the principal coordinator.
#[derive(Debug, Clone)]
pub struct PrincipalOutcome {
    pub teacher: ThoughtGraph,
    pub student: ThoughtGraph,
    pub assessment: ComplexityAssessment,
    pub plan: ComparisonPlan,
}

/// Builds both graphs, matches findings, and plans the comparisons.
pub async fn run_principal(
    teacher: &Reading,
    student: &Reading,
    config: &AnalysisConfig,
    gateway: Option<&Gateway>,
) -> Result<PrincipalOutcome, AgentError> {
    let tg = build_thought_graph(&teacher.session, &teacher.transcript, config.tolerance_ms)?;
    let sg = build_thought_graph(&student.session, &student.transcript, config.tolerance_ms)?;

    let assessment = match config.matcher {
        MatcherMode::Exact => assess(&tg, &sg, &config.synonyms, config.policy)?,
        MatcherMode::LlmMatcher => {
            let gateway = gateway.ok_or(AgentError::NoBackend)?;
            let matches = llm_match(&tg, &sg, config, gateway).await?;
            assess(&tg, &sg, &matches as &dyn FindingMatcher, config.policy)?
        }
    };
    let plan = plan_comparisons(&assessment, &tg, &sg);
    Ok(PrincipalOutcome {
        teacher: tg,
        student: sg,
        assessment,
        plan,
    })
}

async fn llm_match(
    teacher: &ThoughtGraph,
    student: &ThoughtGraph,
    config: &AnalysisConfig,
    gateway: &Gateway,
) -> Result<ExplicitMatches, AgentError> {
    let tl: Vec<&str> = teacher.labels().collect();
    let sl: Vec<&str> = student.labels().collect();
    let tag = format!("{}/match", teacher.case_id);
    let messages = prompt::matcher_messages(&teacher.case_id, &tl, &sl);
    let reply = gateway
        .chat(&config.request(&teacher.case_id, tag.clone(), messages.clone()))
        .await?;
    let err = match prompt::parse_matches(&reply.text, &tl, &sl) {
        Ok(pairs) => return Ok(ExplicitMatches { pairs }),
        Err(e) => e,
    };
    let retry = prompt::repair_messages(messages, &reply.text, &err);
    let reply = gateway
        .chat(&config.request(&teacher.case_id, format!("{tag}/repair"), retry))
        .await?;
    prompt::parse_matches(&reply.text, &tl, &sl)
        .map(|pairs| ExplicitMatches { pairs })
        .map_err(AgentError::MatcherReply)
}

fn pool_nodes<'g>(student: &'g ThoughtGraph, pool: &StudentPool) -> Vec<&'g Node> {
    match pool {
        StudentPool::Subgraph(label) => student.members(label).unwrap_or_default(),
        StudentPool::Residual => student.residual_nodes(),
        StudentPool::Empty => Vec::new(),
    }
}

fn fixations(nodes: &[&Node]) -> Vec<Fixation> {
    nodes.iter().map(|n| n.fixation()).collect()
}

/// Evidence for one missed teacher finding against one student view.
pub fn task_evidence(
    teacher: &ThoughtGraph,
    finding: &str,
    view: &[&Node],
    thresholds: &Thresholds,
) -> Evidence {
    let teacher_nodes = teacher.members(finding).unwrap_or_default();
    let summary = summarize_nodes(finding, teacher_nodes);
    Evidence::measure(&summary, &fixations(view), thresholds)
}

/// Runs one PET agent on one comparison task.
///
/// A reply that still fails to parse after one repair turn yields a `none`
/// verdict with a diagnostic rationale; backend failures are returned.
pub async fn run_pet(
    task: &ComparisonTask,
    teacher: &ThoughtGraph,
    student: &ThoughtGraph,
    gateway: Option<&Gateway>,
    config: &AnalysisConfig,
    bulletin: Option<&[PetVerdict]>,
) -> Result<PetVerdict, AgentError> {
    let finding = task.missed_finding_label.as_str();
    let view = pool_nodes(student, &task.student_pool);
    let teacher_nodes = teacher.members(finding).unwrap_or_default();
    let summary = summarize_nodes(finding, teacher_nodes.iter().copied());
    let evidence = Evidence::measure(&summary, &fixations(&view), &config.thresholds);

    let (error_type, rationale) = match config.mode {
        PetMode::Reference => {
            let error_type = reference_classify(&summary, &fixations(&view), &config.thresholds)
                .unwrap_or(ErrorType::KnowledgeGap);
            let why = format!(
                "vs {}: {}",
                task.student_pool,
                evidence.describe(&config.thresholds)
            );
            (error_type, why)
        }
        PetMode::Llm => {
            let gateway = gateway.ok_or(AgentError::NoBackend)?;
            let messages = prompt::pet_messages(&prompt::PetPromptInput {
                case_id: &teacher.case_id,
                task_id: &task.task_id,
                finding,
                teacher_summary: &summary,
                teacher_nodes: &teacher_nodes,
                pool: &task.student_pool,
                pool_nodes: &view,
                student,
                bulletin,
            });
            llm_verdict(&teacher.case_id, &task.task_id, messages, gateway, config).await?
        }
    };
    Ok(PetVerdict {
        task_id: task.task_id.clone(),
        missed_finding_label: finding.to_string(),
        student_pool: task.student_pool.clone(),
        error_type,
        rationale,
        evidence,
    })
}

async fn llm_verdict(
    case_id: &str,
    task_id: &str,
    messages: Vec<crate::gateway::ChatMessage>,
    gateway: &Gateway,
    config: &AnalysisConfig,
) -> Result<(ErrorType, String), AgentError> {
    let tag = format!("{case_id}/{task_id}");
    let reply = gateway
        .chat(&config.request(case_id, tag.clone(), messages.clone()))
        .await?;
    let err = match prompt::parse_verdict(&reply.text) {
        Ok(v) => return Ok((v.error_type, v.rationale)),
        Err(e) => e,
    };
    let retry = prompt::repair_messages(messages, &reply.text, &err);
    let reply = gateway
        .chat(&config.request(case_id, format!("{tag}/repair"), retry))
        .await?;
    Ok(match prompt::parse_verdict(&reply.text) {
        Ok(v) => (v.error_type, v.rationale),
        Err(e) => (
            ErrorType::None,
            format!("unparseable model verdict after one repair attempt: {e}"),
        ),
    })
}

/// How one finding's several verdicts reduce to one error type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    /// Apply the evidence ladder to the merged evidence.
    Evidence,
    /// Majority vote; ties broken by the merged-evidence ladder.
    Majority,
}

impl From<PetMode> for MergeRule {
    fn from(mode: PetMode) -> Self {
        match mode {
            PetMode::Reference => MergeRule::Evidence,
            PetMode::Llm => MergeRule::Majority,
        }
    }
}

fn canonical_order(a: &PetVerdict, b: &PetVerdict) -> std::cmp::Ordering {
    (&a.task_id, &a.missed_finding_label, &a.student_pool, a.error_type, &a.rationale)
        .cmp(&(&b.task_id, &b.missed_finding_label, &b.student_pool, b.error_type, &b.rationale))
        .then_with(|| {
            let key = |e: &Evidence| (e.overlap_fixations, e.student_dwell_ms, e.teacher_dwell_ms);
            key(&a.evidence).cmp(&key(&b.evidence))
        })
}

/// Reduces one finding's verdicts to a single error type.
pub fn merge_finding(
    verdicts: &[&PetVerdict],
    rule: MergeRule,
    thresholds: &Thresholds,
) -> (ErrorType, Evidence) {
    let merged = Evidence::merge(verdicts.iter().map(|v| &v.evidence));
    let ladder = merged.classify(thresholds).unwrap_or(ErrorType::KnowledgeGap);
    let error_type = match rule {
        MergeRule::Evidence => ladder,
        MergeRule::Majority => {
            let mut votes: IndexMap<ErrorType, usize> = IndexMap::new();
            for v in verdicts {
                *votes.entry(v.error_type).or_default() += 1;
            }
            let top = votes.values().copied().max().unwrap_or(0);
            let mut tied: Vec<ErrorType> = votes
                .into_iter()
                .filter(|&(_, n)| n == top)
                .map(|(t, _)| t)
                .collect();
            tied.sort();
            if tied.contains(&ladder) {
                ladder
            } else {
                tied.first().copied().unwrap_or(ladder)
            }
        }
    };
    (error_type, merged)
}

/// Folds verdicts into the case report: one entry per missed finding, and the
/// case-level union of detected error types.
pub fn consolidate(
    verdicts: &[PetVerdict],
    assessment: &ComplexityAssessment,
    case_id: &str,
    rule: MergeRule,
    thresholds: &Thresholds,
) -> Result<FeedbackReport, AgentError> {
    let mut sorted: Vec<&PetVerdict> = verdicts.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));

    let mut per_finding = IndexMap::new();
    for finding in &assessment.missed {
        let own: Vec<&PetVerdict> = sorted
            .iter()
            .copied()
            .filter(|v| &v.missed_finding_label == finding)
            .collect();
        if own.is_empty() {
            return Err(AgentError::MissingVerdict(finding.clone()));
        }
        let (error_type, evidence) = merge_finding(&own, rule, thresholds);
        let rationale = own
            .iter()
            .map(|v| v.rationale.as_str())
            .unique()
            .join("\n");
        per_finding.insert(
            finding.clone(),
            FindingFeedback {
                error_type,
                rationale,
                evidence,
            },
        );
    }

    let consolidated_error_types = ErrorType::LABELS
        .into_iter()
        .filter(|t| per_finding.values().any(|f| f.error_type == *t))
        .collect();
    Ok(FeedbackReport {
        schema_version: SCHEMA_VERSION.to_string(),
        case_id: case_id.to_string(),
        assessment: assessment.clone(),
        per_finding,
        consolidated_error_types,
    })
}

/// Verdict issued by the principal itself for a missed finding that no agent
/// was recruited for: the evidence ladder over the student's whole scanpath.
fn principal_verdict(
    index: usize,
    c_error: usize,
    finding: &str,
    teacher: &ThoughtGraph,
    student: &ThoughtGraph,
    thresholds: &Thresholds,
) -> PetVerdict {
    let all: Vec<&Node> = student.nodes.iter().collect();
    let evidence = task_evidence(teacher, finding, &all, thresholds);
    let error_type = evidence
        .classify(thresholds)
        .unwrap_or(ErrorType::KnowledgeGap);
    PetVerdict {
        task_id: format!("p{index:04}"),
        missed_finding_label: finding.to_string(),
        student_pool: StudentPool::Empty,
        error_type,
        rationale: format!(
            "no agents recruited (error complexity {c_error}); principal check over the \
             full scanpath: {}",
            evidence.describe(thresholds)
        ),
        evidence,
    }
}

/// Everything one case run produced.
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub report: FeedbackReport,
    pub plan: ComparisonPlan,
    pub verdicts: Vec<PetVerdict>,
    /// PET agent executions (comparison tasks run).
    pub pet_invocations: usize,
}

pub async fn run_case(
    teacher: &Reading,
    student: &Reading,
    gateway: Option<&Gateway>,
    config: &AnalysisConfig,
) -> Result<FeedbackReport, AgentError> {
    run_case_traced(teacher, student, gateway, config)
        .await
        .map(|r| r.report)
}

pub async fn run_case_traced(
    teacher: &Reading,
    student: &Reading,
    gateway: Option<&Gateway>,
    config: &AnalysisConfig,
) -> Result<CaseRun, AgentError> {
    let principal = run_principal(teacher, student, config, gateway).await?;
    let PrincipalOutcome {
        teacher: tg,
        student: sg,
        assessment,
        plan,
    } = principal;

    let mut verdicts = if config.communication {
        // The bulletin orders agents causally: strictly by task id.
        let mut posted: Vec<PetVerdict> = Vec::with_capacity(plan.tasks.len());
        for task in &plan.tasks {
            let v = run_pet(task, &tg, &sg, gateway, config, Some(&posted)).await?;
            posted.push(v);
        }
        posted
    } else {
        let parallel = config
            .max_parallel_agents
            .unwrap_or(plan.n_agents)
            .max(1);
        let slots = plan.by_slot();
        let results: Vec<Result<Vec<PetVerdict>, AgentError>> = stream::iter(slots)
            .map(|tasks| {
                let (tg, sg) = (&tg, &sg);
                async move {
                    let mut out = Vec::with_capacity(tasks.len());
                    for task in tasks {
                        out.push(run_pet(task, tg, sg, gateway, config, None).await?);
                    }
                    Ok(out)
                }
            })
            .buffer_unordered(parallel)
            .collect()
            .await;
        let mut all = Vec::new();
        for r in results {
            all.extend(r?);
        }
        all
    };
    let pet_invocations = verdicts.len();

    verdicts.extend(
        plan.unassigned
            .iter()
            .enumerate()
            .map(|(i, f)| principal_verdict(i, assessment.c_error, f, &tg, &sg, &config.thresholds)),
    );

    let report = consolidate(
        &verdicts,
        &assessment,
        &tg.case_id,
        config.mode.into(),
        &config.thresholds,
    )?;
    verdicts.sort_by(canonical_order);
    Ok(CaseRun {
        report,
        plan,
        verdicts,
        pet_invocations,
    })
}
