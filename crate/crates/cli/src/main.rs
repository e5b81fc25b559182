mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use gazetutor::agents::{run_principal, MatcherMode, PetMode};
use gazetutor::dataset::{
    load_expert_dir, load_reports, load_students, load_truths, read_reading, write_corpus,
    write_report, StudentCase,
};
use gazetutor::eval::{build_matrix, score, time_stats};
use gazetutor::gateway::{read_run_log, ChatBackend, Gateway, RemoteBackend, RunLog, ScriptedBackend};
use gazetutor::gaze::{validate_pair, ParseOptions, Reading};
use gazetutor::graph::build_thought_graph;
use gazetutor::pipeline::{analyze_cases, CaseError};
use gazetutor::synth::{generate_corpus, CorpusSpec, DistractorTable};

use config::{BackendConfig, ConfigArgs, RunConfig};

const RUN_LOG_FILE: &str = "run_log.jsonl";

#[derive(Parser)]
#[command(
    name = "gazetutor",
    version,
    about = "Explain a student's missed radiology findings from gaze and dictation"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Align a gaze session with its transcript and print the thought graph
    BuildGraph {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        /// Write the graph here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reject unknown keys in input files
        #[arg(long)]
        strict: bool,
    },
    /// Generate a balanced corpus of simulated student cases
    Synthesize {
        /// Directory of `<case_id>/session.json` + `transcript.json`
        #[arg(long)]
        experts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_type: usize,
        #[arg(long, default_value_t = 1)]
        errors_per_case: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Compare student cases with expert readings and write feedback reports
    Analyze {
        #[arg(long)]
        experts: PathBuf,
        /// A corpus directory or a single student case directory
        #[arg(long)]
        students: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print each case's assessment and comparison plan without running agents
        #[arg(long)]
        explain_plan: bool,
        #[arg(long)]
        strict: bool,
    },
    /// Score feedback reports against truth files
    Evaluate {
        #[arg(long)]
        reports: PathBuf,
        /// Corpus directory holding `<variant>/truth.json`
        #[arg(long)]
        truth: PathBuf,
        /// Run log for latency statistics; defaults to the one beside the reports
        #[arg(long)]
        run_log: Option<PathBuf>,
        /// Also write the metrics as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error paired with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    /// Bad input or configuration: exit 2.
    fn input(self) -> Result<T, Failure>;
    /// Backend or internal failure: exit 1.
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 2,
            error: e.into(),
        })
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 1,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let cfg = RunConfig::resolve(&cli.config).input()?;
    if cli.config.print_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    let Some(command) = cli.command else {
        return Err(anyhow!("no command given; see --help")).input();
    };
    match command {
        Command::BuildGraph {
            session,
            transcript,
            out,
            strict,
        } => build_graph(&cfg, &session, &transcript, out.as_deref(), strict),
        Command::Synthesize {
            experts,
            out,
            per_type,
            errors_per_case,
            strict,
        } => synthesize(&cfg, &experts, &out, per_type, errors_per_case, strict),
        Command::Analyze {
            experts,
            students,
            out,
            explain_plan,
            strict,
        } => {
            let rt = tokio::runtime::Runtime::new().internal()?;
            rt.block_on(analyze(&cfg, &experts, &students, out.as_deref(), explain_plan, strict))
        }
        Command::Evaluate {
            reports,
            truth,
            run_log,
            out,
        } => evaluate(&reports, &truth, run_log.as_deref(), out.as_deref()),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn build_graph(
    cfg: &RunConfig,
    session: &Path,
    transcript: &Path,
    out: Option<&Path>,
    strict: bool,
) -> Result<u8, Failure> {
    let parsed = read_reading(session, transcript, ParseOptions { strict }).input()?;
    warn_all(&parsed.warnings);
    let r = parsed.value;
    let graph = build_thought_graph(&r.session, &r.transcript, cfg.tolerance_ms).input()?;
    match out {
        Some(path) => fs::write(path, graph.to_json())
            .with_context(|| format!("writing {}", path.display()))
            .internal()?,
        None => print!("{}", graph.to_json()),
    }
    Ok(0)
}

fn distractors(cfg: &RunConfig) -> anyhow::Result<DistractorTable> {
    match &cfg.distractor_table_path {
        None => Ok(DistractorTable::builtin()),
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DistractorTable::from_json(&raw).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn synthesize(
    cfg: &RunConfig,
    experts: &Path,
    out: &Path,
    per_type: usize,
    errors_per_case: usize,
    strict: bool,
) -> Result<u8, Failure> {
    let experts = load_expert_dir(experts, ParseOptions { strict }).input()?;
    warn_all(&experts.warnings);
    let spec = CorpusSpec {
        seed: cfg.seed,
        per_type_count: per_type,
        errors_per_case,
        tolerance_ms: cfg.tolerance_ms,
    };
    let corpus = generate_corpus(&experts.value, &spec, &distractors(cfg).input()?).input()?;
    write_corpus(&corpus, out).internal()?;
    eprintln!(
        "wrote {} cases ({} per type) from {} expert cases to {} (seed {})",
        corpus.cases.len(),
        per_type,
        experts.value.len(),
        out.display(),
        cfg.seed
    );
    Ok(0)
}

fn gateway(cfg: &RunConfig, log: Option<Arc<RunLog>>) -> Result<Option<Gateway>, Failure> {
    let needed = cfg.mode == PetMode::Llm || cfg.matcher == MatcherMode::LlmMatcher;
    let Some(backend) = cfg.backend.as_ref().filter(|_| needed) else {
        return Ok(None);
    };
    let backend: Arc<dyn ChatBackend> = match backend {
        BackendConfig::Scripted { script_path, .. } => {
            let raw = fs::read(script_path)
                .with_context(|| format!("reading {}", script_path.display()))
                .input()?;
            Arc::new(
                ScriptedBackend::from_json(&raw)
                    .with_context(|| format!("parsing {}", script_path.display()))
                    .input()?,
            )
        }
        BackendConfig::Remote { .. } => {
            let remote = backend.remote().expect("remote backend config");
            Arc::new(RemoteBackend::from_env(&remote).input()?)
        }
    };
    let mut g = Gateway::new(backend).concurrency(cfg.max_concurrent_calls);
    if let Some(log) = log {
        g = g.log(log);
    }
    Ok(Some(g))
}

/// Pairs every student case with its expert, dropping cases that fail
/// validation. Returns the usable pairs and whether any case was dropped.
fn pair_cases(experts: &[Reading], students: Vec<StudentCase>) -> (Vec<StudentCase>, bool) {
    let mut keep = Vec::with_capacity(students.len());
    let mut dropped = false;
    for case in students {
        let base = &case.student.session.case_id;
        let Some(teacher) = experts.iter().find(|e| &e.session.case_id == base) else {
            eprintln!("error: {}: no expert reading for case `{base}`", case.variant_id);
            dropped = true;
            continue;
        };
        let report = validate_pair(teacher, &case.student);
        for issue in &report.issues {
            eprintln!("{:?}: {}: {}", issue.severity, case.variant_id, issue.message);
        }
        if report.ok {
            keep.push(case);
        } else {
            dropped = true;
        }
    }
    (keep, dropped)
}

async fn analyze(
    cfg: &RunConfig,
    experts: &Path,
    students: &Path,
    out: Option<&Path>,
    explain_plan: bool,
    strict: bool,
) -> Result<u8, Failure> {
    let opts = ParseOptions { strict };
    let experts = load_expert_dir(experts, opts).input()?;
    warn_all(&experts.warnings);
    let loaded = load_students(students, opts).input()?;
    warn_all(&loaded.warnings);
    let experts = experts.value;
    let analysis = cfg.analysis().input()?;
    let (cases, dropped) = pair_cases(&experts, loaded.value);

    if explain_plan {
        let gw = gateway(cfg, None)?;
        let mut plans = Vec::with_capacity(cases.len());
        for case in &cases {
            let teacher = experts
                .iter()
                .find(|e| e.session.case_id == case.student.session.case_id)
                .expect("paired above");
            let p = run_principal(teacher, &case.student, &analysis, gw.as_ref())
                .await
                .internal()?;
            plans.push(serde_json::json!({
                "variant_id": case.variant_id,
                "assessment": p.assessment,
                "plan": p.plan,
            }));
        }
        println!("{}", serde_json::to_string_pretty(&plans).internal()?);
        return Ok(if dropped { 2 } else { 0 });
    }

    let out = out
        .ok_or_else(|| anyhow!("--out is required unless --explain-plan is given"))
        .input()?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .internal()?;
    let log_path = out.join(RUN_LOG_FILE);
    if log_path.exists() {
        fs::remove_file(&log_path)
            .with_context(|| format!("replacing {}", log_path.display()))
            .internal()?;
    }
    let log = Arc::new(
        RunLog::append_to(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))
            .internal()?,
    );
    let gw = gateway(cfg, Some(log.clone()))?;

    let total = cases.len();
    let mut finished = 0;
    let mut write_error = None;
    let results = analyze_cases(
        &experts,
        &cases,
        gw.as_ref(),
        &analysis,
        cfg.max_parallel_cases,
        Some(&log),
        |r| {
            finished += 1;
            let status = match &r.outcome {
                Ok(run) => {
                    if let Err(e) = write_report(out, &r.variant_id, &run.report) {
                        write_error.get_or_insert(e);
                    }
                    let types: Vec<&str> = run
                        .report
                        .consolidated_error_types
                        .iter()
                        .map(|t| t.as_str())
                        .collect();
                    if types.is_empty() {
                        "no errors".to_string()
                    } else {
                        types.join(", ")
                    }
                }
                Err(e) => format!("failed: {e}"),
            };
            eprintln!(
                "[{finished:>w$}/{total}] {}: {status} ({} ms)",
                r.variant_id,
                r.elapsed_ms,
                w = total.to_string().len()
            );
        },
    )
    .await;
    if let Some(e) = write_error {
        return Err(e).internal();
    }

    let failed_backend = results.iter().any(|r| matches!(r.outcome, Err(CaseError::Agent(_))));
    let failed_input = dropped
        || results
            .iter()
            .any(|r| matches!(r.outcome, Err(CaseError::MissingTeacher(_))));
    let ok = results.iter().filter(|r| r.outcome.is_ok()).count();
    eprintln!("{ok}/{total} reports written to {}", out.display());
    Ok(if failed_input {
        2
    } else if failed_backend {
        1
    } else {
        0
    })
}

fn evaluate(
    reports: &Path,
    truth: &Path,
    run_log: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let reports_by_id = load_reports(reports).input()?;
    if reports_by_id.is_empty() {
        return Err(anyhow!("no reports found in {}", reports.display())).input();
    }
    let truths = load_truths(truth).input()?;
    let matrix = build_matrix(reports_by_id.iter(), &truths).input()?;
    let mut metrics = score(&matrix).input()?;

    let default_log = reports.join(RUN_LOG_FILE);
    let log_path = run_log.or(default_log.exists().then_some(default_log.as_path()));
    if let Some(path) = log_path {
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .input()?;
        let records = read_run_log(&raw)
            .with_context(|| format!("parsing {}", path.display()))
            .input()?;
        metrics.latency = time_stats(&records);
    }

    print!("{}", metrics.to_table());
    if let Some(path) = out {
        fs::write(path, metrics.to_json())
            .with_context(|| format!("writing {}", path.display()))
            .internal()?;
    }
    Ok(0)
}
