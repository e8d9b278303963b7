//! The `eager` command line.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
//! valid request fails at run time. Every output is a function of the inputs
//! and `--seed`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use eager_core::detection::detect_batch;
use eager_core::evalkit::{
    generate, run_detection_experiment, run_mitigation_grid, run_retrieval_experiment,
    sweep_thresholds, DetectionExperiment, GeneratedTrace, GeneratorConfig, MetricReport,
};
use eager_core::knowledge::{load_kb, save_kb, KnowledgeBase};
use eager_core::representation::{
    load_model, save_model, FeaturizerConfig, ModelConfig, RepresentationModel,
};
use eager_core::trace::{read_traces, write_traces, ReasoningTrace, SystemProfile};
use eager_core::training::{train, LossConfig, OptimizerKind, TrainConfig};

use crate::config::ServiceConfig;
use crate::state::AppState;

#[derive(Debug, Parser)]
#[command(
    name = "eager",
    version,
    about = "Step-wise failure detection for multi-agent reasoning traces"
)]
pub struct Cli {
    /// Service configuration (TOML).
    #[arg(long, global = true, env = "EAGER_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Model file; overrides the configuration.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Knowledge base file; overrides the configuration.
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus.
    Gen(GenArgs),
    /// Train the reasoning and trace encoders.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Detect failures in a batch of traces.
    Detect(DetectArgs),
    /// Run the HTTP sidecar.
    Serve,
    /// Knowledge base maintenance.
    #[command(subcommand)]
    Kb(KbCommand),
}

#[derive(Debug, Args)]
pub struct CorpusShape {
    #[arg(long, default_value = "synthetic")]
    pub profile: SystemProfile,
    /// Base questions; each yields `--variants` traces.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub variants: usize,
    #[arg(long, default_value_t = 0.3)]
    pub failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub question_offset: usize,
}

impl CorpusShape {
    fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_base_questions: self.n,
            variants_per_question: self.variants,
            failure_rate: self.failure_rate,
            question_offset: self.question_offset,
            seed,
            ..GeneratorConfig::for_profile(self.profile)
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub shape: CorpusShape,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each trace's clean counterfactual, in the same order.
    #[arg(long)]
    pub clean_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the model (defaults to `--model`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from an existing model instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_groups: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = false)]
    pub sgd: bool,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: u32,
    #[arg(long, default_value_t = 128)]
    pub hidden_dim: u32,
    #[arg(long, default_value_t = 128)]
    pub trace_hidden_dim: u32,
    #[arg(long, default_value_t = 4096)]
    pub vocab_buckets: u32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_intra: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_inter: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_rank: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
    /// Per-epoch losses as JSON Lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Include wall-clock latency in the table (not reproducible).
    #[arg(long)]
    pub latency: bool,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub theta_fine: Option<f64>,
    #[arg(long)]
    pub theta_coarse: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Leave-one-out retrieval of same-question traces.
    Retrieval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Knowledge from part of the corpus, detection on the held-out rest.
    Detection {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        kb_fraction: f64,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        /// Save the seeded knowledge base here.
        #[arg(long)]
        kb_out: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Recovery rates against a scripted runtime.
    Mitigation {
        /// Traces to mitigate (generated when omitted).
        #[arg(long, requires = "clean")]
        corpus: Option<PathBuf>,
        /// Clean counterfactuals of `--corpus`, as written by `gen --clean-out`.
        #[arg(long, requires = "corpus")]
        clean: Option<PathBuf>,
        #[command(flatten)]
        shape: CorpusShape,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.9")]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        budget: Vec<u32>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Grid search over detection thresholds by F1.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        kb_fraction: f64,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.70,0.75,0.80,0.85,0.90,0.95"
        )]
        fine: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.70,0.75,0.80,0.85,0.90,0.95"
        )]
        coarse: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Traces to check (JSON Lines).
    #[arg(long)]
    pub batch: PathBuf,
    /// Verdicts as JSON Lines (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    /// Keep measured per-verdict latency (zeroed otherwise, so output is reproducible).
    #[arg(long)]
    pub latency: bool,
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Replace the knowledge base with a JSON Lines export.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write the knowledge base as JSON Lines.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-embed every entry with `--model` from its source traces.
    RebuildEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the rebuilt knowledge (defaults to in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Invalid(e) | CliError::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

trait Classify<T> {
    fn invalid(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
    fn runtime(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Invalid(e.into().context(what())))
    }

    fn runtime(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into().context(what())))
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(anyhow!(msg.into()))
}

struct Ctx {
    config: ServiceConfig,
    seed: u64,
}

impl Ctx {
    fn model(&self) -> Result<RepresentationModel, CliError> {
        let path = &self.config.model_path;
        load_model(path).invalid(|| format!("loading model {}", path.display()))
    }

    fn kb(&self, model: &RepresentationModel) -> Result<KnowledgeBase, CliError> {
        let path = &self.config.kb_path;
        let kb = load_kb(path).invalid(|| format!("loading knowledge base {}", path.display()))?;
        kb.check_version(model.version)
            .invalid(|| format!("knowledge base {}", path.display()))?;
        Ok(kb)
    }

    fn detection(
        &self,
        t: &ThresholdArgs,
    ) -> Result<eager_core::detection::DetectionConfig, CliError> {
        let mut d = self.config.detection_config();
        d.theta_fine = t.theta_fine.unwrap_or(d.theta_fine);
        d.theta_coarse = t.theta_coarse.unwrap_or(d.theta_coarse);
        d.k_neighbors = t.k.unwrap_or(d.k_neighbors);
        d.validate().invalid(|| "detection thresholds".into())?;
        Ok(d)
    }
}

fn corpus(path: &Path) -> Result<Vec<ReasoningTrace>, CliError> {
    read_traces(path).invalid(|| format!("reading traces {}", path.display()))
}

fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .runtime(|| "writing to stdout".into())
}

fn emit_report(report: &MetricReport, args: &ReportArgs) -> Result<(), CliError> {
    if args.json {
        emit(&(report.to_json() + "\n"))
    } else {
        emit(&report.render(args.latency))
    }
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config =
        ServiceConfig::load(cli.config.as_deref()).invalid(|| "loading configuration".into())?;
    if let Some(m) = cli.model {
        config.model_path = m;
    }
    if let Some(k) = cli.kb {
        config.kb_path = k;
    }
    let ctx = Ctx {
        config,
        seed: cli.seed,
    };
    match cli.command {
        Command::Gen(args) => cmd_gen(&ctx, args),
        Command::Train(args) => cmd_train(&ctx, args),
        Command::Eval(cmd) => cmd_eval(&ctx, cmd),
        Command::Detect(args) => cmd_detect(&ctx, args),
        Command::Serve => cmd_serve(ctx.config),
        Command::Kb(cmd) => cmd_kb(&ctx, cmd),
    }
}

fn cmd_gen(ctx: &Ctx, args: GenArgs) -> Result<(), CliError> {
    let corpus =
        generate(&args.shape.generator(ctx.seed)).invalid(|| "generator configuration".into())?;
    let traces: Vec<ReasoningTrace> = corpus.iter().map(|g| g.trace.clone()).collect();
    write_traces(&args.out, &traces).runtime(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.clean_out {
        let clean: Vec<ReasoningTrace> = corpus.iter().map(|g| g.clean.clone()).collect();
        write_traces(path, &clean).runtime(|| format!("writing {}", path.display()))?;
    }
    let failed = traces
        .iter()
        .filter(|t| t.label.as_ref().is_some_and(|l| l.failed))
        .count();
    eprintln!(
        "wrote {} traces ({failed} failed) to {}",
        traces.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: TrainArgs) -> Result<(), CliError> {
    let traces = corpus(&args.corpus)?;
    let init = match &args.init {
        Some(p) => load_model(p).invalid(|| format!("loading model {}", p.display()))?,
        None => RepresentationModel::init(
            ModelConfig {
                embed_dim: args.embed_dim,
                hidden_dim: args.hidden_dim,
                trace_hidden_dim: args.trace_hidden_dim,
                seed: ctx.seed,
            },
            FeaturizerConfig {
                vocab_buckets: args.vocab_buckets,
            },
        )
        .invalid(|| "model configuration".into())?,
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_groups: args.batch_groups,
        learning_rate: args.lr,
        optimizer: if args.sgd {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Adam
        },
        seed: ctx.seed,
    };
    train_cfg
        .validate()
        .invalid(|| "training configuration".into())?;
    let loss_cfg = LossConfig::new(
        args.lambda_intra,
        args.lambda_inter,
        args.lambda_rank,
        args.tau,
        args.margin,
    )
    .invalid(|| "loss configuration".into())?;
    let (model, report) =
        train(&traces, &init, &train_cfg, &loss_cfg).runtime(|| "training".into())?;
    let out = args.out.unwrap_or_else(|| ctx.config.model_path.clone());
    save_model(&model, &out).runtime(|| format!("writing model {}", out.display()))?;
    if let Some(log) = &args.log {
        std::fs::write(log, report.to_jsonl()).runtime(|| format!("writing {}", log.display()))?;
    }
    emit(&report.to_log())?;
    eprintln!(
        "model version {} written to {}",
        model.version,
        out.display()
    );
    Ok(())
}

fn generated_from_files(
    corpus_path: &Path,
    clean_path: &Path,
) -> Result<Vec<GeneratedTrace>, CliError> {
    let traces = corpus(corpus_path)?;
    let clean = corpus(clean_path)?;
    if traces.len() != clean.len() {
        return Err(invalid(format!(
            "{} has {} traces but {} has {}",
            corpus_path.display(),
            traces.len(),
            clean_path.display(),
            clean.len()
        )));
    }
    traces
        .into_iter()
        .zip(clean)
        .map(|(trace, clean)| {
            if trace.trace_id != clean.trace_id {
                return Err(invalid(format!(
                    "trace {} is paired with clean trace {}",
                    trace.trace_id, clean.trace_id
                )));
            }
            Ok(GeneratedTrace { trace, clean })
        })
        .collect()
}

fn cmd_eval(ctx: &Ctx, cmd: EvalCommand) -> Result<(), CliError> {
    let model = ctx.model()?;
    match cmd {
        EvalCommand::Retrieval {
            corpus: path,
            ks,
            report,
        } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(invalid("--ks must list cutoffs >= 1"));
            }
            let r = run_retrieval_experiment(&corpus(&path)?, &model, &ks)
                .runtime(|| "retrieval evaluation".into())?;
            emit_report(&r, &report)
        }
        EvalCommand::Detection {
            corpus: path,
            kb_fraction,
            thresholds,
            kb_out,
            report,
        } => {
            let exp = DetectionExperiment {
                kb_fraction,
                detection: ctx.detection(&thresholds)?,
                seed: ctx.seed,
            };
            let run = run_detection_experiment(&corpus(&path)?, &model, &exp)
                .runtime(|| "detection evaluation".into())?;
            if let Some(out) = &kb_out {
                save_kb(&run.kb, out).runtime(|| format!("writing {}", out.display()))?;
            }
            emit_report(&run.report, &report)
        }
        EvalCommand::Mitigation {
            corpus: path,
            clean,
            shape,
            p,
            budget,
            trials,
            thresholds,
            report,
        } => {
            let generated = match (&path, &clean) {
                (Some(c), Some(k)) => generated_from_files(c, k)?,
                _ => generate(&shape.generator(ctx.seed))
                    .invalid(|| "generator configuration".into())?,
            };
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(invalid("--p values must lie in [0, 1]"));
            }
            let det = ctx.detection(&thresholds)?;
            let r = run_mitigation_grid(&generated, &model, &p, &budget, trials, ctx.seed, det)
                .runtime(|| "mitigation evaluation".into())?;
            emit_report(&r, &report)
        }
        EvalCommand::Sweep {
            corpus: path,
            kb_fraction,
            fine,
            coarse,
            json,
        } => {
            let exp = DetectionExperiment {
                kb_fraction,
                detection: ctx.config.detection_config(),
                seed: ctx.seed,
            };
            let r = sweep_thresholds(&corpus(&path)?, &model, &exp, &fine, &coarse)
                .runtime(|| "threshold sweep".into())?;
            if json {
                emit(&(serde_json::to_string_pretty(&r).expect("sweep serializes") + "\n"))
            } else {
                let mut text = String::from("theta_fine  theta_coarse      F1\n");
                for c in &r.cells {
                    text.push_str(&format!(
                        "{:>10.2}  {:>12.2}  {:>6.4}\n",
                        c.theta_fine, c.theta_coarse, c.f1
                    ));
                }
                text.push_str(&format!(
                    "best: theta_fine {:.2}, theta_coarse {:.2}, F1 {:.4}\n",
                    r.best.theta_fine, r.best.theta_coarse, r.best.f1
                ));
                emit(&text)
            }
        }
    }
}

fn cmd_detect(ctx: &Ctx, args: DetectArgs) -> Result<(), CliError> {
    let model = ctx.model()?;
    let kb = ctx.kb(&model)?;
    let det = ctx.detection(&args.thresholds)?;
    let traces = corpus(&args.batch)?;
    let mut verdicts = detect_batch(&traces, &model, &kb, &det).runtime(|| "detection".into())?;
    if !args.latency {
        for v in verdicts.iter_mut().flat_map(|tv| tv.verdicts.iter_mut()) {
            v.latency_us = 0;
        }
    }
    let mut text = String::new();
    for v in &verdicts {
        text.push_str(&serde_json::to_string(v).expect("verdicts serialize"));
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, text).runtime(|| format!("writing {}", p.display())),
        None => emit(&text),
    }
}

fn cmd_serve(config: ServiceConfig) -> Result<(), CliError> {
    config
        .validate()
        .invalid(|| "service configuration".into())?;
    let addr = config.listen_addr().invalid(|| "listen address".into())?;
    let state = Arc::new(AppState::from_config(config).invalid(|| "loading service state".into())?);
    let rt = tokio::runtime::Runtime::new().runtime(|| "starting async runtime".into())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, "serving");
        crate::serve(state, listener, shutdown_signal()).await
    })
    .map_err(CliError::Runtime)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn cmd_kb(ctx: &Ctx, cmd: KbCommand) -> Result<(), CliError> {
    let model = ctx.model()?;
    let path = &ctx.config.kb_path;
    match cmd {
        KbCommand::Import { input } => {
            let file = File::open(&input).invalid(|| format!("opening {}", input.display()))?;
            let kb = KnowledgeBase::import_text(BufReader::new(file))
                .invalid(|| format!("parsing {}", input.display()))?;
            kb.check_version(model.version)
                .invalid(|| format!("importing {}", input.display()))?;
            save_kb(&kb, path).runtime(|| format!("writing {}", path.display()))?;
            eprintln!(
                "imported {} fine and {} coarse entries into {}",
                kb.fine().len(),
                kb.coarse().len(),
                path.display()
            );
            Ok(())
        }
        KbCommand::Export { out } => {
            let kb = ctx.kb(&model)?;
            match out {
                Some(p) => {
                    let file = File::create(&p).runtime(|| format!("creating {}", p.display()))?;
                    let mut w = BufWriter::new(file);
                    kb.export_text(&mut w)
                        .and_then(|_| w.flush())
                        .runtime(|| format!("writing {}", p.display()))
                }
                None => {
                    let mut buf = Vec::new();
                    kb.export_text(&mut buf).runtime(|| "exporting".into())?;
                    emit(&String::from_utf8(buf).expect("export is UTF-8"))
                }
            }
        }
        KbCommand::RebuildEmbeddings {
            corpus: traces_path,
            out,
        } => {
            let kb =
                load_kb(path).invalid(|| format!("loading knowledge base {}", path.display()))?;
            let traces: HashMap<String, ReasoningTrace> = corpus(&traces_path)?
                .into_iter()
                .map(|t| (t.trace_id.clone(), t))
                .collect();
            let rebuilt = kb
                .rebuild_embeddings(&model, &traces)
                .invalid(|| "rebuilding embeddings".into())?;
            let out = out.unwrap_or_else(|| path.clone());
            save_kb(&rebuilt, &out).runtime(|| format!("writing {}", out.display()))?;
            eprintln!(
                "re-embedded {} fine and {} coarse entries for model version {}",
                rebuilt.fine().len(),
                rebuilt.coarse().len(),
                model.version
            );
            Ok(())
        }
    }
}
