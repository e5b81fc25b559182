//! Versioned prompt templates and reply parsing.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use minijinja::{context, Environment};
use serde::{Deserialize, Serialize};

use crate::complexity::StudentPool;
use crate::gateway::ChatMessage;
use crate::graph::{Node, SubgraphSummary, ThoughtGraph};

use super::{ErrorType, PetVerdict};

pub const PET_TEMPLATE_VERSION: &str = "pet/v1";
pub const MATCHER_TEMPLATE_VERSION: &str = "matcher/v1";

const PET_SYSTEM: &str = include_str!("../../templates/pet_system.v1.txt");
const MATCHER_SYSTEM: &str = include_str!("../../templates/matcher_system.v1.txt");

static TEMPLATES: LazyLock<Environment<'static>> = LazyLock::new(|| {
    let mut env = Environment::new();
    env.set_keep_trailing_newline(true);
    env.add_template("pet_user", include_str!("../../templates/pet_user.v1.j2"))
        .expect("pet template parses");
    env.add_template("matcher_user", include_str!("../../templates/matcher_user.v1.j2"))
        .expect("matcher template parses");
    env.add_template("repair", include_str!("../../templates/repair.v1.j2"))
        .expect("repair template parses");
    env
});

fn render(name: &str, ctx: minijinja::Value) -> String {
    TEMPLATES
        .get_template(name)
        .and_then(|t| t.render(ctx))
        .expect("bundled templates render with their own context")
}

#[derive(Serialize)]
struct FixationRow {
    x: String,
    y: String,
    onset_ms: u64,
    duration_ms: u64,
}

impl From<&Node> for FixationRow {
    fn from(n: &Node) -> Self {
        Self {
            x: format!("{:.3}", n.x),
            y: format!("{:.3}", n.y),
            onset_ms: n.onset_ms,
            duration_ms: n.duration_ms,
        }
    }
}

#[derive(Serialize)]
struct ScanpathRow {
    x: String,
    y: String,
    duration_ms: u64,
    pool: String,
}

#[derive(Serialize)]
struct BulletinRow<'a> {
    task_id: &'a str,
    finding: &'a str,
    pool: String,
    error_type: &'a str,
    rationale: &'a str,
}

/// Everything a PET prompt shows for one comparison task.
pub struct PetPromptInput<'a> {
    pub case_id: &'a str,
    pub task_id: &'a str,
    pub finding: &'a str,
    pub teacher_summary: &'a SubgraphSummary,
    pub teacher_nodes: &'a [&'a Node],
    pub pool: &'a StudentPool,
    pub pool_nodes: &'a [&'a Node],
    pub student: &'a ThoughtGraph,
    /// `Some` when agents share a bulletin; may be empty.
    pub bulletin: Option<&'a [PetVerdict]>,
}

fn student_scanpath(student: &ThoughtGraph) -> Vec<ScanpathRow> {
    let mut owner = vec![String::from("RESIDUAL"); student.nodes.len()];
    for (label, members) in &student.subgraphs {
        for &i in members {
            owner[i] = label.clone();
        }
    }
    student
        .nodes
        .iter()
        .zip(owner)
        .map(|(n, pool)| ScanpathRow {
            x: format!("{:.3}", n.x),
            y: format!("{:.3}", n.y),
            duration_ms: n.duration_ms,
            pool,
        })
        .collect()
}

pub fn pet_messages(input: &PetPromptInput<'_>) -> Vec<ChatMessage> {
    let s = input.teacher_summary;
    let teacher = context! {
        fixation_count => s.fixation_count,
        total_dwell_ms => s.total_dwell_ms,
        centroid => s.centroid.map(|(x, y)| format!("{x:.3}, {y:.3}")),
        bbox_x => s.bounding_box.map(|b| format!("{:.3}-{:.3}", b.min_x, b.max_x)),
        bbox_y => s.bounding_box.map(|b| format!("{:.3}-{:.3}", b.min_y, b.max_y)),
    };
    let bulletin: Vec<BulletinRow> = input
        .bulletin
        .unwrap_or_default()
        .iter()
        .map(|v| BulletinRow {
            task_id: &v.task_id,
            finding: &v.missed_finding_label,
            pool: v.student_pool.to_string(),
            error_type: v.error_type.as_str(),
            rationale: &v.rationale,
        })
        .collect();
    let user = render(
        "pet_user",
        context! {
            case_id => input.case_id,
            task_id => input.task_id,
            finding => input.finding,
            teacher => teacher,
            teacher_fixations => input.teacher_nodes.iter().map(|n| FixationRow::from(*n)).collect::<Vec<_>>(),
            pool => input.pool.to_string(),
            pool_fixations => input.pool_nodes.iter().map(|n| FixationRow::from(*n)).collect::<Vec<_>>(),
            scanpath => student_scanpath(input.student),
            communication => input.bulletin.is_some(),
            bulletin => bulletin,
        },
    );
    vec![ChatMessage::system(PET_SYSTEM.trim_end()), ChatMessage::user(user)]
}

pub fn matcher_messages(
    case_id: &str,
    teacher_labels: &[&str],
    student_labels: &[&str],
) -> Vec<ChatMessage> {
    let user = render(
        "matcher_user",
        context! { case_id, teacher_labels, student_labels },
    );
    vec![ChatMessage::system(MATCHER_SYSTEM.trim_end()), ChatMessage::user(user)]
}

/// Follow-up turn asking the model to fix an unparseable reply.
pub fn repair_messages(
    mut messages: Vec<ChatMessage>,
    bad_reply: &str,
    error: &str,
) -> Vec<ChatMessage> {
    messages.push(ChatMessage::assistant(bad_reply));
    messages.push(ChatMessage::user(render("repair", context! { error })));
    messages
}

/// The outermost `{ ... }` span of a reply, tolerating prose and code fences.
fn json_span(reply: &str) -> Result<&str, String> {
    let start = reply.find('{').ok_or("no JSON object in reply")?;
    let end = reply.rfind('}').ok_or("unterminated JSON object")?;
    if end < start {
        return Err("unterminated JSON object".into());
    }
    Ok(&reply[start..=end])
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct VerdictReply {
    pub error_type: ErrorType,
    #[serde(default)]
    pub rationale: String,
}

pub fn parse_verdict(reply: &str) -> Result<VerdictReply, String> {
    serde_json::from_str(json_span(reply)?).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct MatchReply {
    matches: Vec<MatchPair>,
}

#[derive(Deserialize)]
struct MatchPair {
    teacher: String,
    student: Option<String>,
}

/// Parses a matcher reply into teacher → student assignments, rejecting
/// labels that are not in either list and student labels used twice.
/// Teacher labels the reply leaves out are unmatched.
pub fn parse_matches(
    reply: &str,
    teacher_labels: &[&str],
    student_labels: &[&str],
) -> Result<BTreeMap<String, Option<String>>, String> {
    let parsed: MatchReply =
        serde_json::from_str(json_span(reply)?).map_err(|e| e.to_string())?;
    let mut out: BTreeMap<String, Option<String>> = teacher_labels
        .iter()
        .map(|t| (t.to_string(), None))
        .collect();
    let mut used = HashSet::new();
    for pair in parsed.matches {
        let teacher = crate::gaze::normalize_label(&pair.teacher);
        if !out.contains_key(&teacher) {
            return Err(format!("unknown expert finding `{}`", pair.teacher));
        }
        let student = pair.student.map(|s| crate::gaze::normalize_label(&s));
        if let Some(s) = &student {
            if !student_labels.contains(&s.as_str()) {
                return Err(format!("unknown student finding `{s}`"));
            }
            if !used.insert(s.clone()) {
                return Err(format!("student finding `{s}` matched twice"));
            }
        }
        out.insert(teacher, student);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_from_fenced_reply() {
        let reply = "Let me think.\n```json\n{\"error_type\": \"brief_fixation\", \"rationale\": \"short\"}\n```";
        let v = parse_verdict(reply).unwrap();
        assert_eq!(v.error_type, ErrorType::BriefFixation);
        assert_eq!(v.rationale, "short");
        assert!(parse_verdict("{\"error_type\": \"tired\"}").is_err());
        assert!(parse_verdict("no idea").is_err());
    }

    #[test]
    fn matches_validate_labels() {
        let t = ["effusion", "nodule"];
        let s = ["fluid"];
        let m = parse_matches(
            r#"{"matches":[{"teacher":"Effusion","student":"fluid"}]}"#,
            &t,
            &s,
        )
        .unwrap();
        assert_eq!(m["effusion"].as_deref(), Some("fluid"));
        assert_eq!(m["nodule"], None);
        assert!(parse_matches(r#"{"matches":[{"teacher":"x","student":null}]}"#, &t, &s).is_err());
        assert!(parse_matches(
            r#"{"matches":[{"teacher":"effusion","student":"fluid"},{"teacher":"nodule","student":"fluid"}]}"#,
            &t,
            &s
        )
        .is_err());
    }

    #[test]
    fn matcher_prompt_lists_labels() {
        let m = matcher_messages("c1", &["a", "b"], &[]);
        assert!(m[1].content.starts_with("Case: c1\nTask: match-findings\n"));
        assert!(m[1].content.contains("- b\n"));
        assert!(m[1].content.contains("- (none)"));
    }
}
