//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gazetutor::agents::{
    consolidate, run_case, run_case_traced, AnalysisConfig, CaseRun, ErrorType, MergeRule,
    PetMode,
};
use gazetutor::complexity::{AgentPolicy, RecruitmentPolicy};
use gazetutor::dataset::{load_expert_dir, StudentCase, Truth};
use gazetutor::eval::{build_matrix, score, LabelMatrix};
use gazetutor::gateway::{
    wire_payload, BackendReply, ChatBackend, ChatMessage, ChatRequest, Gateway, GatewayError,
    RemoteBackend, RemoteConfig, RetryPolicy, RunLog, ScriptEntry, ScriptedBackend,
    DEFAULT_TEMPERATURE,
};
use gazetutor::gaze::{Fixation, GazeSession, ParseOptions, ReaderRole, Reading, Sentence, Transcript};
use gazetutor::graph::build_thought_graph;
use gazetutor::pipeline::analyze_cases;
use gazetutor::synth::{generate_corpus, halve_duration, Corpus, CorpusSpec, DistractorTable};

/// Runtime budgets and score thresholds.
const FORMULA_PAIRS: usize = 1000;
const FORMULA_BUDGET: Duration = Duration::from_secs(1);
const CLOSED_LOOP_PER_TYPE: usize = 10;
const CLOSED_LOOP_BUDGET: Duration = Duration::from_secs(10);
const MIN_TYPE_RECOVERY: f64 = 0.9;
const MIN_SUBSET_ACCURACY: f64 = 0.9;
const MAX_HAMMING_LOSS: f64 = 0.05;
const ORACLE_MATRICES: usize = 200;
const ORACLE_TOLERANCE: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(5);
const PERMUTATIONS: usize = 50;
const ABLATION_CASES: usize = 100;
const SEED: u64 = 20_241_016;

type Outcome = Result<String, String>;
type Criterion = std::pin::Pin<Box<dyn std::future::Future<Output = Outcome>>>;
/// Name, scripted replies, expected call count, expected success.
type FaultCase = (&'static str, Vec<Result<&'static str, GatewayError>>, u32, bool);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/experts")
}

fn experts() -> Vec<Reading> {
    load_expert_dir(&fixtures(), ParseOptions { strict: true })
        .expect("fixture experts load")
        .value
}

fn students(corpus: &Corpus) -> Vec<StudentCase> {
    corpus
        .cases
        .iter()
        .map(|c| StudentCase {
            variant_id: c.variant_id.clone(),
            student: c.student(),
        })
        .collect()
}

/// A reading with one fixation inside each finding's window, plus a few
/// residual fixations after the last window.
fn random_reading(rng: &mut ChaCha8Rng, role: ReaderRole, labels: &[String]) -> Reading {
    let mut fixations = Vec::new();
    let mut sentences = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let begin = k as u64 * 1000;
        sentences.push(Sentence {
            index: k as u32,
            text: format!("{label}."),
            begin_ms: begin,
            end_ms: begin + 900,
            finding_label: Some(label.clone()),
        });
        fixations.push(Fixation {
            x: rng.random(),
            y: rng.random(),
            onset_ms: begin + 100,
            duration_ms: rng.random_range(50..600),
        });
    }
    let tail = labels.len() as u64 * 1000;
    for j in 0..rng.random_range(0..3u64) {
        fixations.push(Fixation {
            x: rng.random(),
            y: rng.random(),
            onset_ms: tail + 200 * j,
            duration_ms: 150,
        });
    }
    Reading::new(
        GazeSession::new("rand", role, fixations).unwrap(),
        Transcript::new("rand", role, sentences).unwrap(),
    )
}

/// Teacher findings f0.., student findings sharing `shared` of them plus extras.
fn random_pair(rng: &mut ChaCha8Rng, max_n: usize) -> (Reading, Reading, usize, usize, usize) {
    let n_t = rng.random_range(0..=max_n);
    let n_s = rng.random_range(0..=max_n);
    let shared = rng.random_range(0..=n_t.min(n_s));
    let teacher_labels: Vec<String> = (0..n_t).map(|k| format!("f{k}")).collect();
    let mut student_labels: Vec<String> = teacher_labels[..shared].to_vec();
    student_labels.extend((shared..n_s).map(|k| format!("x{k}")));
    student_labels.shuffle(rng);
    let t = random_reading(rng, ReaderRole::Teacher, &teacher_labels);
    let s = random_reading(rng, ReaderRole::Student, &student_labels);
    (t, s, n_t, n_s, n_t - shared)
}

async fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let config = AnalysisConfig::default();
    let start = Instant::now();
    let mut zero = 0;
    for _ in 0..FORMULA_PAIRS {
        let (t, s, n_t, n_s, _) = random_pair(&mut rng, 50);
        let want_delta = (n_t as i64 - n_s as i64).unsigned_abs() as usize;
        let want_c = want_delta * n_s;
        let tg = build_thought_graph(&t.session, &t.transcript, 0).unwrap();
        let sg = build_thought_graph(&s.session, &s.transcript, 0).unwrap();
        let a = gazetutor::complexity::assess(&tg, &sg, &config.synonyms, config.policy).unwrap();
        ensure!(
            (a.n_teacher, a.n_student, a.delta_n, a.c_error) == (n_t, n_s, want_delta, want_c),
            "n_T={n_t} n_S={n_s}: got delta {} c_error {}",
            a.delta_n,
            a.c_error
        );
        ensure!(a.n_agents == want_c, "agent count {} != {want_c}", a.n_agents);
        if want_c == 0 {
            zero += 1;
            let run = run_case_traced(&t, &s, None, &config).await.unwrap();
            ensure!(
                run.plan.n_agents == 0 && run.pet_invocations == 0,
                "n_T={n_t} n_S={n_s}: {} agents, {} PET runs with zero complexity",
                run.plan.n_agents,
                run.pet_invocations
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < FORMULA_BUDGET, "took {elapsed:?}");
    Ok(format!("{FORMULA_PAIRS} pairs, {zero} with zero complexity, {elapsed:.2?}"))
}

async fn criterion_2() -> Outcome {
    let labels = |n: usize| (0..n).map(|k| format!("f{k}")).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_reading(&mut rng, ReaderRole::Teacher, &labels(5));
    let mut s = random_reading(&mut rng, ReaderRole::Student, &labels(3));
    // No residual: drop anything after the last window.
    s.session.fixations.retain(|f| f.onset_ms < 3000);
    let run = run_case_traced(&t, &s, None, &AnalysisConfig::default()).await.unwrap();
    let a = &run.report.assessment;
    ensure!(
        (a.delta_n, a.c_error, a.n_agents) == (2, 6, 6),
        "delta {} c_error {} agents {}",
        a.delta_n,
        a.c_error,
        a.n_agents
    );
    ensure!(run.plan.tasks.len() == 6, "{} tasks", run.plan.tasks.len());
    Ok("delta 2, complexity 6, 6 agents, 6 tasks".into())
}

async fn criterion_3() -> Outcome {
    let experts = experts();
    ensure!(experts.len() >= 3, "only {} expert cases", experts.len());
    let start = Instant::now();
    let spec = CorpusSpec::new(SEED, CLOSED_LOOP_PER_TYPE);
    let corpus = generate_corpus(&experts, &spec, &DistractorTable::builtin()).map_err(|e| e.to_string())?;
    let bases: BTreeSet<&str> = corpus.cases.iter().map(|c| c.base_case_id.as_str()).collect();
    let results = analyze_cases(
        &experts,
        &students(&corpus),
        None,
        &AnalysisConfig::default(),
        4,
        None,
        |_| {},
    )
    .await;

    let mut hits = [0usize; 3];
    let mut reports = Vec::new();
    for (case, result) in corpus.cases.iter().zip(results) {
        let run = result.outcome.map_err(|e| format!("{}: {e}", case.variant_id))?;
        let inj = &case.injected[0];
        let got = run.report.per_finding.get(&inj.finding_label).map(|f| f.error_type);
        if got == Some(inj.error_type) {
            hits[ErrorType::LABELS.iter().position(|t| *t == inj.error_type).unwrap()] += 1;
        }
        reports.push((case.variant_id.clone(), run.report));
    }
    let truths = corpus
        .cases
        .iter()
        .map(|c| (c.variant_id.clone(), Truth::from(c)))
        .collect();
    let m = build_matrix(reports.iter().map(|(id, r)| (id, r)), &truths).map_err(|e| e.to_string())?;
    let s = score(&m).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let frac = |k: usize| hits[k] as f64 / CLOSED_LOOP_PER_TYPE as f64;
    ensure!(hits[0] == CLOSED_LOOP_PER_TYPE, "missed fixation recovered {}/10", hits[0]);
    ensure!(frac(1) >= MIN_TYPE_RECOVERY, "brief fixation recovered {}/10", hits[1]);
    ensure!(frac(2) >= MIN_TYPE_RECOVERY, "knowledge gap recovered {}/10", hits[2]);
    ensure!(s.subset_accuracy >= MIN_SUBSET_ACCURACY, "subset accuracy {}", s.subset_accuracy);
    ensure!(s.hamming_loss <= MAX_HAMMING_LOSS, "hamming loss {}", s.hamming_loss);
    ensure!(elapsed < CLOSED_LOOP_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{} cases from {} experts; recovered {}/{}/{}; accuracy {:.3}, hamming {:.3}, {elapsed:.2?}",
        corpus.cases.len(),
        bases.len(),
        hits[0],
        hits[1],
        hits[2],
        s.subset_accuracy,
        s.hamming_loss
    ))
}

/// Brute-force tally: (accuracy, precision, recall, f1, hamming).
fn tally(t: &[Vec<u8>], p: &[Vec<u8>]) -> [f64; 5] {
    let n = t.len() as f64;
    let exact = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64;
    let mut wrong = 0.0;
    let mut macro_sums = [0.0; 3];
    for j in 0..3 {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..t.len() {
            match (t[i][j], p[i][j]) {
                (1, 1) => tp += 1.0,
                (0, 1) => fp += 1.0,
                (1, 0) => fn_ += 1.0,
                _ => {}
            }
            if t[i][j] != p[i][j] {
                wrong += 1.0;
            }
        }
        let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let re = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if tp + fp + fn_ > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        macro_sums[0] += pr;
        macro_sums[1] += re;
        macro_sums[2] += f1;
    }
    [
        exact / n,
        macro_sums[0] / 3.0,
        macro_sums[1] / 3.0,
        macro_sums[2] / 3.0,
        wrong / (3.0 * n),
    ]
}

async fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_MATRICES {
        let n = rng.random_range(1..=10);
        let mut row = || (0..3).map(|_| rng.random_range(0..=1u8)).collect::<Vec<_>>();
        let t: Vec<Vec<u8>> = (0..n).map(|_| row()).collect();
        let p: Vec<Vec<u8>> = (0..n).map(|_| row()).collect();
        let cases = (0..n).map(|i| format!("c{i}")).collect();
        let s = score(&LabelMatrix::new(cases, t.clone(), p.clone())).unwrap();
        let got = [s.subset_accuracy, s.macro_precision, s.macro_recall, s.macro_f1, s.hamming_loss];
        for (g, w) in got.iter().zip(tally(&t, &p)) {
            worst = worst.max((g - w).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= ORACLE_TOLERANCE, "max deviation {worst:e}");
    ensure!(elapsed < ORACLE_BUDGET, "took {elapsed:?}");
    Ok(format!("{ORACLE_MATRICES} matrices, max deviation {worst:e}, {elapsed:.2?}"))
}

/// Scripted replies keyed by case and task, cycling through every answer.
fn verdict_script(experts: &[Reading]) -> Arc<ScriptedBackend> {
    let answers = ["missed_fixation", "brief_fixation", "knowledge_gap", "none"];
    let mut entries = Vec::new();
    for (ci, e) in experts.iter().enumerate() {
        for task in 0..32 {
            let answer = answers[(ci + task) % answers.len()];
            entries.push(ScriptEntry {
                matcher: format!("Case: {}\nTask: t{task:04}\n", e.session.case_id),
                reply: format!(r#"{{"error_type":"{answer}","rationale":"scripted answer {task}"}}"#),
            });
        }
    }
    Arc::new(ScriptedBackend::new(entries))
}

async fn scripted_reports(experts: &[Reading], cases: &[StudentCase], parallel_agents: usize) -> Result<String, String> {
    let gateway = Gateway::new(verdict_script(experts));
    let config = AnalysisConfig {
        mode: PetMode::Llm,
        model_id: "scripted".into(),
        max_parallel_agents: Some(parallel_agents),
        ..AnalysisConfig::default()
    };
    let mut out = String::new();
    for r in analyze_cases(experts, cases, Some(&gateway), &config, 4, None, |_| {}).await {
        let run = r.outcome.map_err(|e| format!("{}: {e}", r.variant_id))?;
        out.push_str(&run.report.to_json());
    }
    Ok(out)
}

async fn criterion_5() -> Outcome {
    let experts = experts();
    let corpus = generate_corpus(&experts, &CorpusSpec::new(SEED, 5), &DistractorTable::builtin())
        .map_err(|e| e.to_string())?;
    let cases = students(&corpus);

    // Consolidation under shuffled arrival, for both merge rules.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 5);
    let gateway = Gateway::new(verdict_script(&experts));
    let llm = AnalysisConfig {
        mode: PetMode::Llm,
        model_id: "scripted".into(),
        ..AnalysisConfig::default()
    };
    let mut checked = 0;
    for (config, rule) in [(AnalysisConfig::default(), MergeRule::Evidence), (llm, MergeRule::Majority)] {
        let g = (config.mode == PetMode::Llm).then_some(&gateway);
        for r in analyze_cases(&experts, &cases, g, &config, 4, None, |_| {}).await {
            let run: CaseRun = r.outcome.map_err(|e| e.to_string())?;
            let mut verdicts = run.verdicts.clone();
            let base = run.report.to_json();
            for _ in 0..PERMUTATIONS {
                verdicts.shuffle(&mut rng);
                let again = consolidate(
                    &verdicts,
                    &run.report.assessment,
                    &run.report.case_id,
                    rule,
                    &config.thresholds,
                )
                .map_err(|e| e.to_string())?;
                ensure!(again.to_json() == base, "{}: consolidation depends on arrival order", r.variant_id);
            }
            checked += 1;
        }
    }

    let reference = scripted_reports(&experts, &cases, 1).await?;
    for parallel in [1, 2, 8] {
        let got = scripted_reports(&experts, &cases, parallel).await?;
        ensure!(got == reference, "scripted reports differ at max_parallel_agents={parallel}");
    }
    Ok(format!(
        "{checked} cases x {PERMUTATIONS} permutations; scripted reports identical for 1/2/8 agents"
    ))
}

fn same_fixation(a: &Fixation, b: &Fixation) -> bool {
    a.x.to_bits() == b.x.to_bits()
        && a.y.to_bits() == b.y.to_bits()
        && a.onset_ms == b.onset_ms
        && a.duration_ms == b.duration_ms
}

async fn criterion_6() -> Outcome {
    let experts = experts();
    let table = DistractorTable::builtin();
    let mut checked = 0;
    for errors_per_case in [1, 2] {
        let spec = CorpusSpec {
            errors_per_case,
            ..CorpusSpec::new(SEED ^ 6, 20)
        };
        let corpus = generate_corpus(&experts, &spec, &table).map_err(|e| e.to_string())?;
        for case in &corpus.cases {
            let expert = experts
                .iter()
                .find(|e| e.session.case_id == case.base_case_id)
                .unwrap();
            let mapping =
                gazetutor::graph::map_fixations(&expert.session, &expert.transcript, 0).unwrap();
            let target_type = case.injected[0].error_type;
            let targets: BTreeSet<usize> = case
                .injected
                .iter()
                .flat_map(|i| mapping.findings[&i.finding_label].iter().copied())
                .collect();
            let target_labels: BTreeSet<&str> =
                case.injected.iter().map(|i| i.finding_label.as_str()).collect();
            let id = &case.variant_id;

            // Fixations.
            let student = &case.student_session.fixations;
            match target_type {
                ErrorType::MissedFixation => {
                    let kept: Vec<&Fixation> = expert
                        .session
                        .fixations
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !targets.contains(i))
                        .map(|(_, f)| f)
                        .collect();
                    ensure!(kept.len() == student.len(), "{id}: wrong fixation count");
                    ensure!(kept.iter().zip(student).all(|(a, b)| same_fixation(a, b)), "{id}: non-target fixation changed");
                }
                ErrorType::BriefFixation => {
                    ensure!(expert.session.fixations.len() == student.len(), "{id}: fixation count changed");
                    for (i, (e, s)) in expert.session.fixations.iter().zip(student).enumerate() {
                        let want = if targets.contains(&i) {
                            Fixation {
                                duration_ms: halve_duration(e.duration_ms),
                                ..*e
                            }
                        } else {
                            *e
                        };
                        ensure!(same_fixation(&want, s), "{id}: fixation {i} not as expected");
                    }
                }
                _ => {
                    let a = serde_json::to_vec(&expert.session.fixations).unwrap();
                    let b = serde_json::to_vec(student).unwrap();
                    ensure!(a == b, "{id}: knowledge variant changed fixations");
                }
            }

            // Sentences not tied to an injected finding are untouched.
            let untouched: Vec<&Sentence> = expert
                .transcript
                .sentences
                .iter()
                .filter(|s| !s.finding_label.as_deref().is_some_and(|l| target_labels.contains(l)))
                .collect();
            let student_untouched: Vec<&Sentence> = case
                .student_transcript
                .sentences
                .iter()
                .filter(|s| untouched.iter().any(|u| u.index == s.index))
                .collect();
            ensure!(untouched == student_untouched, "{id}: non-target sentence changed");
            checked += 1;
        }
    }
    Ok(format!("{checked} synthetic cases checked"))
}

async fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 7);
    for _ in 0..ABLATION_CASES {
        let (t, s, n_t, n_s, missed) = random_pair(&mut rng, 20);
        let c_error = n_t.abs_diff(n_s) * n_s;
        let cap = rng.random_bool(0.5).then(|| rng.random_range(1..=10));
        let policies = [
            (AgentPolicy { kind: RecruitmentPolicy::ByErrorCount, agent_cap: None }, missed),
            (
                AgentPolicy { kind: RecruitmentPolicy::ByComplexity, agent_cap: cap },
                cap.map_or(c_error, |c| c_error.min(c)),
            ),
        ];
        for (policy, want) in policies {
            let config = AnalysisConfig { policy, ..AnalysisConfig::default() };
            let run = run_case_traced(&t, &s, None, &config).await.unwrap();
            ensure!(
                run.plan.n_agents == want,
                "{:?} on n_T={n_t} n_S={n_s}: {} agents, expected {want}",
                policy.kind,
                run.plan.n_agents
            );
            let slots: BTreeSet<usize> = run.plan.tasks.iter().map(|t| t.agent_slot).collect();
            ensure!(slots.iter().all(|&k| k < want.max(1)), "slot out of range");
            ensure!(run.pet_invocations == run.plan.tasks.len(), "PET runs differ from task count");
        }
    }

    // Communication changes only the bulletin block.
    let experts = experts();
    let expert = experts.iter().find(|e| e.transcript.finding_count() >= 4).unwrap();
    let finding = expert.transcript.findings().next().unwrap().0.to_string();
    let case = gazetutor::synth::synth_missed_fixation(expert, &finding, 0).map_err(|e| e.to_string())?;
    let mut prompts = Vec::new();
    for communication in [false, true] {
        let backend = verdict_script(&experts);
        let config = AnalysisConfig {
            mode: PetMode::Llm,
            model_id: "scripted".into(),
            communication,
            ..AnalysisConfig::default()
        };
        run_case(expert, &case.student(), Some(&Gateway::new(backend.clone())), &config)
            .await
            .map_err(|e| e.to_string())?;
        let mut seen: Vec<(String, String)> = backend
            .requests()
            .into_iter()
            .map(|r| (r.request_tag.clone(), r.user_content()))
            .collect();
        seen.sort();
        prompts.push(seen);
    }
    ensure!(prompts[0].len() == prompts[1].len() && prompts[0].len() >= 2, "prompt counts differ");
    let marker = "\n\nBulletin from other agents on this case:";
    for ((tag, off), (_, on)) in prompts[0].iter().zip(&prompts[1]) {
        ensure!(!off.contains(marker), "{tag}: bulletin present with communication off");
        let cut = on.find(marker).ok_or(format!("{tag}: bulletin missing"))?;
        ensure!(on[..cut] == *off.trim_end_matches('\n'), "{tag}: prompt differs outside the bulletin");
    }
    Ok(format!(
        "{ABLATION_CASES} random cases under both policies; {} prompt pairs differ only in the bulletin",
        prompts[0].len()
    ))
}

struct FaultInjector {
    script: Vec<Result<&'static str, GatewayError>>,
    calls: AtomicU32,
}

impl FaultInjector {
    fn new(script: Vec<Result<&'static str, GatewayError>>) -> Arc<Self> {
        Arc::new(Self { script, calls: AtomicU32::new(0) })
    }
}

#[async_trait]
impl ChatBackend for FaultInjector {
    fn backend_id(&self) -> &str {
        "fault-injector"
    }

    async fn call(&self, _: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
        self.script[n.min(self.script.len() - 1)]
            .clone()
            .map(|t| BackendReply { text: t.into(), token_usage: None })
    }
}

#[derive(Default)]
struct Captured {
    authorization: Vec<String>,
    bodies: Vec<serde_json::Value>,
}

async fn mock_server(status: u16) -> (String, Arc<Mutex<Captured>>) {
    use axum::{extract::State, http::HeaderMap, http::StatusCode, routing::post, Json, Router};
    let captured = Arc::new(Mutex::new(Captured::default()));
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                move |State(c): State<Arc<Mutex<Captured>>>, headers: HeaderMap, Json(body): Json<serde_json::Value>| async move {
                    let mut c = c.lock().unwrap();
                    c.authorization.push(
                        headers
                            .get("authorization")
                            .and_then(|v| v.to_str().ok())
                            .unwrap_or_default()
                            .to_string(),
                    );
                    c.bodies.push(body);
                    let reply = serde_json::json!({
                        "choices": [{"message": {"role": "assistant", "content": "{\"ok\":true}"}}],
                        "usage": {"prompt_tokens": 3, "completion_tokens": 2}
                    });
                    (StatusCode::from_u16(status).unwrap(), Json(reply))
                },
            ),
        )
        .with_state(captured.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), captured)
}

async fn criterion_8() -> Outcome {
    // Default temperature on every path a request can take.
    let req = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
    ensure!(req.temperature == 0.2 && DEFAULT_TEMPERATURE == 0.2, "default temperature {}", req.temperature);
    ensure!(wire_payload(&req)["temperature"] == serde_json::json!(0.2), "payload temperature");
    ensure!(AnalysisConfig::default().temperature == 0.2, "analysis default temperature");

    // Retry counts against injected faults.
    ensure!(RetryPolicy::default().max_attempts == 3, "default attempts");
    let fast = RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(4),
    };
    let transport = || GatewayError::Transport("connection reset".into());
    let cases: Vec<FaultCase> = vec![
        ("success", vec![Ok("a")], 1, true),
        ("two transport faults", vec![Err(transport()), Err(transport()), Ok("a")], 3, true),
        ("429 then success", vec![Err(GatewayError::RateLimited), Ok("a")], 2, true),
        ("persistent timeouts", vec![Err(GatewayError::Timeout(Duration::from_secs(1)))], 3, false),
        ("auth failure", vec![Err(GatewayError::Auth(401))], 1, false),
        ("bad request", vec![Err(GatewayError::Status { code: 400, body: String::new() })], 1, false),
    ];
    for (name, script, want_calls, want_ok) in cases {
        let stub = FaultInjector::new(script);
        let log = Arc::new(RunLog::in_memory());
        let gw = Gateway::new(stub.clone()).retry(fast.clone()).log(log.clone());
        let result = gw.chat(&req).await;
        let calls = stub.calls.load(Ordering::SeqCst);
        ensure!(calls == want_calls, "{name}: {calls} calls, expected {want_calls}");
        ensure!(result.is_ok() == want_ok, "{name}: unexpected outcome {result:?}");
        ensure!(log.records().len() == want_calls as usize, "{name}: journal size");
        if !want_ok && want_calls == 3 {
            ensure!(
                matches!(result, Err(GatewayError::Exhausted { attempts: 3, .. })),
                "{name}: not exhausted after 3 attempts"
            );
        }
    }

    // Credentials stay out of logs, errors and debug output.
    let secret = "sk-acceptance-7f3a9c1e5b";
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("run_log.jsonl");
    let log = Arc::new(RunLog::append_to(&log_path).unwrap());
    let mut sent_temperature = None;
    for status in [200, 401] {
        let (base_url, captured) = mock_server(status).await;
        let config = RemoteConfig {
            base_url,
            api_key_env: "GAZETUTOR_ACCEPTANCE_KEY".into(),
            timeout: Duration::from_secs(5),
        };
        let backend = Arc::new(RemoteBackend::with_key(&config, secret.to_string()).unwrap());
        ensure!(!format!("{backend:?}").contains(secret), "debug output leaks the key");
        let gw = Gateway::new(backend).retry(fast.clone()).log(log.clone());
        let result = gw.chat(&req.clone().case("acceptance")).await;
        let c = captured.lock().unwrap();
        ensure!(c.authorization.iter().all(|a| *a == format!("Bearer {secret}")), "bearer header");
        if status == 401 {
            ensure!(matches!(result, Err(GatewayError::Auth(401))), "401 not an auth error: {result:?}");
            ensure!(c.bodies.len() == 1, "auth failure retried");
            ensure!(!result.unwrap_err().to_string().contains(secret), "error leaks the key");
        } else {
            ensure!(result.is_ok(), "mock call failed: {result:?}");
            sent_temperature = c.bodies[0]["temperature"].as_f64();
        }
    }
    ensure!(sent_temperature == Some(0.2), "wire temperature {sent_temperature:?}");
    drop(log);
    let journal = std::fs::read_to_string(&log_path).unwrap();
    ensure!(journal.lines().count() == 2, "journal has {} lines", journal.lines().count());
    ensure!(!journal.contains(secret), "run log contains the API key");
    Ok("temperature 0.2 on the wire; attempt counts 1/3/2/3/1/1; key absent from logs".into())
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let criteria: [(&str, Criterion); 8] = [
        ("complexity formulas and zero-agent rule", Box::pin(criterion_1())),
        ("worked complexity example", Box::pin(criterion_2())),
        ("closed-loop synthesis and analysis", Box::pin(criterion_3())),
        ("metric oracle equivalence", Box::pin(criterion_4())),
        ("determinism and order independence", Box::pin(criterion_5())),
        ("synthesis invariance", Box::pin(criterion_6())),
        ("ablation plumbing", Box::pin(criterion_7())),
        ("gateway discipline", Box::pin(criterion_8())),
    ];
    let mut failed = 0;
    for (k, (name, fut)) in criteria.into_iter().enumerate() {
        match rt.block_on(fut) {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
