//! `modelhub`: operator CLI over the service API. Every subcommand is one
//! HTTP call. Exit codes: 0 success, 1 operation error, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use modelhub_client::{
    AggregateQuery, AnalyzeRequest, AuditVerdict, Client, ClientError, ModelRecord, ScoreRequest, Source,
    DEFAULT_SERVICE_URL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Tab-separated with a header; tabs, newlines and backslashes escaped.
    Plain,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "modelhub", about = "Operate a model hub service")]
struct Cli {
    #[arg(long, global = true, env = "MODELHUB_URL", default_value = DEFAULT_SERVICE_URL)]
    service_url: String,
    #[arg(long, global = true, value_enum, default_value_t = Format::Plain)]
    format: Format,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Register, list and run models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run one image and prompt through a model.
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        version: Option<String>,
        #[arg(long)]
        deadline_ms: Option<u64>,
    },
    #[command(subcommand)]
    Cases(CasesCmd),
    #[command(subcommand)]
    Score(ScoreCmd),
    #[command(subcommand)]
    Scores(ScoresCmd),
    #[command(subcommand)]
    Telemetry(TelemetryCmd),
    #[command(subcommand)]
    Audit(AuditCmd),
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long)]
    model: String,
    #[arg(long)]
    version: String,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    Register {
        #[arg(long, conflicts_with = "local_path", required_unless_present = "local_path")]
        repo_id: Option<String>,
        #[arg(long)]
        local_path: Option<String>,
        #[arg(long)]
        display_name: Option<String>,
        #[arg(long)]
        version: String,
    },
    List {
        #[arg(long)]
        status: Option<String>,
    },
    Acquire(Target),
    Start {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        replicas: Option<usize>,
    },
    Stop(Target),
    /// Blue-green swap of a running model to `--version`.
    Swap(Target),
}

#[derive(Debug, Subcommand)]
enum CasesCmd {
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory image paths are relative to; defaults to the
        /// manifest's directory.
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ScoreCmd {
    Submit {
        #[arg(long)]
        case: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        version: String,
        #[arg(long, allow_negative_numbers = true)]
        score: i64,
        #[arg(long)]
        clinician: Option<String>,
        #[arg(long, default_value = "")]
        comment: String,
    },
}

#[derive(Debug, Subcommand)]
enum ScoresCmd {
    /// Write the score CSV to stdout or `--output`.
    Export {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    Aggregate {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        clinician: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum TelemetryCmd {
    Show {
        #[arg(long)]
        model: String,
        #[arg(long)]
        from_ms: Option<i64>,
        #[arg(long)]
        to_ms: Option<i64>,
    },
}

#[derive(Debug, Subcommand)]
enum AuditCmd {
    Verify,
}

/// A failed command: what to print on stderr and the exit code.
struct Failure {
    code: String,
    message: String,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let message = match &e {
            ClientError::Api { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Self {
            code: e.error_code().to_owned(),
            message,
        }
    }
}

fn local_io(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: "LocalIo".into(),
        message: format!("{}: {e}", path.display()),
    }
}

/// Strips short flags so only `--long` forms are accepted.
fn long_only(cmd: Command) -> Command {
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_owned()).collect();
    let mut cmd = cmd
        .disable_help_flag(true)
        .disable_help_subcommand(true)
        .arg(Arg::new("help").long("help").action(ArgAction::Help).help("Print help"));
    for name in names {
        cmd = cmd.mut_subcommand(name, long_only);
    }
    cmd
}

pub fn command() -> Command {
    long_only(Cli::command())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let runtime = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "{}", serde_json::json!({"error_code": "LocalIo", "message": e.to_string()}));
            return EXIT_FAILED;
        }
    };
    let client = Client::new(&cli.service_url);
    match runtime.block_on(execute(&client, cli.format, cli.command)) {
        Ok(output) => {
            let _ = out.write_all(output.text.as_bytes());
            output.exit
        }
        Err(f) => {
            let _ = writeln!(err, "{}", serde_json::json!({"error_code": f.code, "message": f.message}));
            EXIT_FAILED
        }
    }
}

struct Output {
    text: String,
    exit: i32,
}

impl From<String> for Output {
    fn from(text: String) -> Self {
        Self { text, exit: EXIT_OK }
    }
}

const RECORD_HEADER: [&str; 6] = ["model_id", "version", "status", "display_name", "image_ref", "weights_digest"];

fn record_row(r: &ModelRecord) -> Vec<String> {
    vec![
        r.model_id.clone(),
        r.version.clone(),
        r.status.to_string(),
        r.display_name.clone(),
        r.image_ref.clone(),
        r.weights_digest.clone().unwrap_or_default(),
    ]
}

async fn execute(client: &Client, format: Format, cmd: Cmd) -> Result<Output, Failure> {
    let table = |header: &[&str], rows: Vec<Vec<String>>| render(format, header, &rows);
    let records = |rs: Vec<ModelRecord>| table(&RECORD_HEADER, rs.iter().map(record_row).collect());
    Ok(match cmd {
        Cmd::Model(m) => match m {
            ModelCmd::Register {
                repo_id,
                local_path,
                display_name,
                version,
            } => {
                let source = match (repo_id, local_path) {
                    (Some(repo), _) => Source::Hub(repo),
                    (None, Some(path)) => Source::Local(absolute(&path)),
                    (None, None) => unreachable!("clap requires one source"),
                };
                records(vec![client.register(&source, display_name.as_deref(), &version).await?])
            }
            ModelCmd::List { status } => {
                let views = client.list_models(status.as_deref()).await?;
                records(views.into_iter().map(|v| v.record).collect())
            }
            ModelCmd::Acquire(t) => records(vec![client.acquire(&t.model, &t.version).await?]),
            ModelCmd::Start { target, replicas } => {
                records(vec![client.start(&target.model, &target.version, replicas).await?])
            }
            ModelCmd::Stop(t) => records(vec![client.stop(&t.model, &t.version).await?]),
            ModelCmd::Swap(t) => {
                let r = client.swap(&t.model, &t.version).await?;
                table(
                    &["model_id", "old_version", "new_version", "drained_jobs"],
                    vec![vec![t.model, r.old_version, r.new_version, r.drained_jobs.to_string()]],
                )
            }
        },
        Cmd::Analyze {
            image,
            prompt,
            model,
            version,
            deadline_ms,
        } => {
            let bytes = std::fs::read(&image).map_err(|e| local_io(&image, e))?;
            let file_name = image
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let r = client
                .analyze(AnalyzeRequest {
                    model_id: model,
                    version,
                    prompt,
                    image: bytes,
                    file_name,
                    deadline_ms,
                })
                .await?;
            table(
                &["job_id", "model_id", "version", "replica_id", "latency_ms", "audit_id", "output_text"],
                vec![vec![
                    r.job_id,
                    r.model_id,
                    r.version,
                    r.replica_id,
                    r.latency_ms.to_string(),
                    r.audit_id,
                    r.output_text,
                ]],
            )
        }
        Cmd::Cases(CasesCmd::Ingest { manifest, base_dir }) => {
            let text = std::fs::read_to_string(&manifest).map_err(|e| local_io(&manifest, e))?;
            let base = base_dir.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
            let base = std::path::absolute(&base).map_err(|e| local_io(&base, e))?;
            let summary = client.ingest_cases(&text, &base).await?;
            table(&["case_id"], summary.case_ids.into_iter().map(|id| vec![id]).collect())
        }
        Cmd::Score(ScoreCmd::Submit {
            case,
            model,
            version,
            score,
            clinician,
            comment,
        }) => {
            let e = client
                .submit_score(&ScoreRequest {
                    clinician_id: clinician,
                    case_id: case,
                    model_id: model,
                    version,
                    score,
                    comment,
                })
                .await?;
            table(
                &["score_id", "clinician_id", "case_id", "model_id", "version", "score", "rubric_label"],
                vec![vec![
                    e.score_id,
                    e.clinician_id,
                    e.case_id,
                    e.model_id,
                    e.version,
                    e.score.to_string(),
                    e.rubric_label,
                ]],
            )
        }
        Cmd::Scores(ScoresCmd::Export { output }) => {
            let doc = client.export_scores_csv().await?;
            match output {
                Some(path) => {
                    std::fs::write(&path, &doc).map_err(|e| local_io(&path, e))?;
                    format!("{}\n", path.display())
                }
                None => doc,
            }
        }
        Cmd::Scores(ScoresCmd::Aggregate {
            dataset,
            model,
            clinician,
        }) => {
            let d = client
                .aggregate(&AggregateQuery {
                    dataset,
                    model_id: model,
                    clinician_id: clinician,
                })
                .await?;
            let rows = (0..5)
                .map(|s| vec![s.to_string(), d.counts[s].to_string(), format!("{:.2}", d.percentages[s])])
                .collect();
            table(&["score", "count", "percent"], rows)
        }
        Cmd::Telemetry(TelemetryCmd::Show { model, from_ms, to_ms }) => {
            let rows = client.telemetry(&model, from_ms, to_ms).await?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            table(
                &["ts_ms", "gpu_util_pct", "mem_bytes", "p50_ms", "p95_ms", "p99_ms"],
                rows.into_iter()
                    .map(|r| {
                        vec![
                            r.ts_ms.to_string(),
                            r.gpu_util_pct.to_string(),
                            r.mem_bytes.to_string(),
                            opt(r.p50_ms),
                            opt(r.p95_ms),
                            opt(r.p99_ms),
                        ]
                    })
                    .collect(),
            )
        }
        Cmd::Audit(AuditCmd::Verify) => {
            let verdict = client.verify_audit().await?;
            let exit = match verdict {
                AuditVerdict::Ok { .. } => EXIT_OK,
                AuditVerdict::BrokenAt { .. } => EXIT_FAILED,
            };
            let text = match format {
                Format::Plain => format!("{verdict}\n"),
                Format::Csv => {
                    let (name, n) = match verdict {
                        AuditVerdict::Ok { entries } => ("Ok", entries),
                        AuditVerdict::BrokenAt { seq } => ("BrokenAt", seq),
                    };
                    render(format, &["verdict", "n"], &[vec![name.into(), n.to_string()]])
                }
            };
            return Ok(Output { text, exit });
        }
    }
    .into())
}

fn absolute(path: &str) -> String {
    std::path::absolute(path)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| path.to_owned())
}

pub fn render(format: Format, header: &[&str], rows: &[Vec<String>]) -> String {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header).expect("in-memory write");
            for row in rows {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
        Format::Plain => {
            let mut out = header.join("\t");
            out.push('\n');
            for row in rows {
                let cells: Vec<String> = row.iter().map(|c| escape(c)).collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
            out
        }
    }
}

fn escape(cell: &str) -> String {
    cell.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}
