use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vidscript_cli::episodes::{make_environment, EnvKind, DEFAULT_GRID_WIDTH};
use vidscript_cli::hub::Hub;
use vidscript_cli::options::{self, BackendChoice, JobOptions, PackOptions};
use vidscript_cli::server::{self, AppState, HubSink, ServiceConfig};
use vidscript_core::agent::{environment_from_name, replay_episode, run_episode, EpisodeHooks, EpisodeLog, Steering};
use vidscript_core::pipeline::{EventSink, PipelineEvent};
use vidscript_core::timecode::format_hms;
use vidscript_core::{AgentAction, EnvironmentSpec, Stage};

#[derive(Parser)]
#[command(name = "vidscript", version, about = "Turn videos into timestamped scripts and query them")]
struct Cli {
    /// Job and artifact store.
    #[arg(long, global = true, env = "VIDSCRIPT_STORE", default_value = "vidscript-data/store.jsonl")]
    store: PathBuf,
    /// Which model services to call.
    #[arg(long, global = true, value_enum, default_value = "mock")]
    backend: BackendChoice,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline on a video file.
    Process {
        file: PathBuf,
        #[command(flatten)]
        pack: PackOptions,
        #[command(flatten)]
        job: JobOptions,
        /// Write script.json, script.txt and the AD track here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask a question about one or more processed videos.
    Qa {
        /// One or more job ids, then the question.
        #[arg(required = true, num_args = 2.., value_name = "ARGS")]
        args: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Find the moments of a video that match a description.
    Locate {
        job_id: String,
        query: String,
        #[arg(short, default_value_t = 3)]
        k: usize,
    },
    /// Run an agent episode in a bundled environment.
    Agent {
        #[arg(long, value_enum)]
        env: EnvKind,
        #[arg(long = "max-steps", default_value_t = 20)]
        max_steps: usize,
        /// Review every proposed action on the terminal.
        #[arg(long)]
        interactive: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GRID_WIDTH)]
        width: usize,
        /// Episode log destination.
        #[arg(long, default_value = "episode.ndjson")]
        log: PathBuf,
    },
    /// Re-apply a logged episode and check every outcome matches.
    Replay { episode_log: PathBuf },
    /// Serve the HTTP API and the console.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Jobs processed at the same time.
        #[arg(long = "max-jobs", default_value_t = 2)]
        max_jobs: usize,
        #[arg(long = "console-dir", env = "VIDSCRIPT_CONSOLE_DIR", default_value = "console")]
        console_dir: PathBuf,
        /// How long an interactive episode waits for an operator.
        #[arg(long = "review-timeout", default_value_t = 600)]
        review_timeout_s: u64,
    },
}

/// Progress lines on stderr while a job runs in the foreground.
struct Progress;

impl EventSink for Progress {
    fn emit(&self, event: &PipelineEvent) {
        match event {
            PipelineEvent::StageChanged { stage, .. } => eprintln!("stage {stage}"),
            PipelineEvent::ClipDescribed { completed, total, from_cache, .. } => {
                let cached = if *from_cache { " (cached)" } else { "" };
                eprintln!("  clip {completed}/{total}{cached}");
            }
            PipelineEvent::JobFailed { error, .. } => eprintln!("failed at {}: {} {}", error.stage, error.code, error.message),
        }
    }
}

fn process(cli: &Cli, file: &Path, pack: &PackOptions, job: &JobOptions, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let pipeline = options::open_pipeline(&cli.store, options::backends(cli.backend)?)?.with_sink(Arc::new(Progress));
    let pack = pack.build()?;
    let job_id = pipeline.submit_job(file, pack, job.to_config())?;
    let done = pipeline.run_to_completion(&job_id)?;
    println!("{job_id}");
    if done.stage != Stage::Done {
        if let Some(e) = &done.error {
            eprintln!("error: {} at {}: {}", e.code, e.stage, e.message);
        }
        return Ok(ExitCode::FAILURE);
    }
    let script = pipeline.get_script(&job_id)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("script.json"), pipeline.script_payload(&job_id)?)?;
            let mut text = script.render_entries();
            text.push('\n');
            std::fs::write(dir.join("script.txt"), text)?;
            if done.config.ad {
                let track = pipeline.ad_track(&job_id)?;
                std::fs::write(dir.join("ad.vtt"), &track.vtt)?;
                std::fs::write(dir.join("ad_report.json"), serde_json::to_string_pretty(&track.report)?)?;
            }
            eprintln!("wrote {}", dir.display());
        }
        None => println!("{}", script.render_entries()),
    }
    Ok(ExitCode::SUCCESS)
}

fn qa(cli: &Cli, args: &[String], json: bool) -> anyhow::Result<ExitCode> {
    let (question, job_ids) = args.split_last().expect("clap requires two values");
    let pipeline = options::open_pipeline(&cli.store, options::backends(cli.backend)?)?;
    let answer = pipeline.qa(job_ids, question)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&answer)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("{}", answer.text.trim());
    for c in &answer.citations {
        let mark = if c.resolved { "ok" } else { "UNRESOLVED" };
        println!("  [{} @ {} - {}] {mark}", c.video_id, format_hms(c.start_s), format_hms(c.end_s));
    }
    if answer.discarded_citations > 0 {
        println!("  ({} citation(s) to unknown videos dropped)", answer.discarded_citations);
    }
    println!("verified: {}", if answer.verified { "yes" } else { "no" });
    Ok(ExitCode::SUCCESS)
}

fn locate(cli: &Cli, job_id: &str, query: &str, k: usize) -> anyhow::Result<ExitCode> {
    let pipeline = options::open_pipeline(&cli.store, options::backends(cli.backend)?)?;
    for m in pipeline.locate(job_id, query, k)? {
        println!("[{} @ {} - {}] {}", m.video_id, format_hms(m.start_s), format_hms(m.end_s), m.snippet);
    }
    Ok(ExitCode::SUCCESS)
}

/// Terminal review: enter approves, `q` aborts, an action name overrides.
struct TerminalReview<R> {
    input: R,
    spec: EnvironmentSpec,
}

impl<R: BufRead> EpisodeHooks for TerminalReview<R> {
    fn review(&mut self, step: usize, window: &[f64], proposed: &AgentAction) -> Steering {
        loop {
            eprintln!("step {step} window {window:?}");
            eprintln!("  proposed {}  ({})", proposed.call_text(), proposed.rationale);
            eprint!("  [enter] approve, q abort, or one of {}: ", self.spec.action_names().join(", "));
            let _ = std::io::stderr().flush();
            let mut line = String::new();
            if self.input.read_line(&mut line).unwrap_or(0) == 0 {
                return Steering::Abort;
            }
            match line.trim() {
                "" | "y" => return Steering::Approve,
                "q" => return Steering::Abort,
                name if self.spec.action(name).is_some() => return Steering::Override(name.to_string()),
                other => eprintln!("  {other:?} is not an action"),
            }
        }
    }
}

fn agent(cli: &Cli, kind: EnvKind, max_steps: usize, interactive: bool, seed: u64, width: usize, log: &Path) -> anyhow::Result<ExitCode> {
    let backends = options::backends(cli.backend)?;
    let mut env = make_environment(kind, seed, width);
    let episode = if interactive {
        let mut hooks = TerminalReview { input: BufReader::new(std::io::stdin()), spec: env.spec() };
        run_episode(env.as_mut(), backends.lmm.as_ref(), max_steps, &mut hooks)?
    } else {
        run_episode(env.as_mut(), backends.lmm.as_ref(), max_steps, &mut vidscript_core::agent::NoHooks)?
    };
    for s in &episode.steps {
        println!("{:>3} {:<28} {}", s.step, s.action.call_text(), s.outcome.message);
    }
    episode.write_to(std::fs::File::create(log).with_context(|| format!("creating {}", log.display()))?)?;
    eprintln!("{} steps, log written to {}", episode.len(), log.display());
    Ok(ExitCode::SUCCESS)
}

fn replay(path: &Path) -> anyhow::Result<ExitCode> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let log = EpisodeLog::read_from(BufReader::new(file))?;
    let Some(mut env) = environment_from_name(&log.header.environment) else {
        bail!("cannot rebuild environment {:?}", log.header.environment);
    };
    match replay_episode(&log, env.as_mut()) {
        Ok(()) => {
            println!("replayed {} steps in {}: outcomes match", log.len(), log.header.environment);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("replay diverged: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

async fn serve(cli: &Cli, host: &str, port: u16, config: ServiceConfig) -> anyhow::Result<ExitCode> {
    let hub = Arc::new(Hub::new());
    let pipeline = options::open_pipeline(&cli.store, options::backends(cli.backend)?)?.with_sink(Arc::new(HubSink(hub.clone())));
    let state = AppState::new(Arc::new(pipeline), hub, &config);
    let resumed = state.resume_unfinished()?;
    if resumed > 0 {
        tracing::info!(resumed, "resuming unfinished jobs");
    }
    let app = server::router(state, &config.console_dir);
    let listener = tokio::net::TcpListener::bind((host, port)).await.with_context(|| format!("binding {host}:{port}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Process { file, pack, job, out } => process(cli, file, pack, job, out.as_deref()),
        Command::Qa { args, json } => qa(cli, args, *json),
        Command::Locate { job_id, query, k } => locate(cli, job_id, query, *k),
        Command::Agent { env, max_steps, interactive, seed, width, log } => {
            agent(cli, *env, *max_steps, *interactive, *seed, *width, log)
        }
        Command::Replay { episode_log } => replay(episode_log),
        Command::Serve { host, port, max_jobs, console_dir, review_timeout_s } => {
            let data_dir = cli.store.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
            let config = ServiceConfig {
                data_dir,
                console_dir: console_dir.clone(),
                max_jobs: *max_jobs,
                review_timeout: Duration::from_secs(*review_timeout_s),
            };
            tokio::runtime::Runtime::new()?.block_on(serve(cli, host, *port, config))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("VIDSCRIPT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
