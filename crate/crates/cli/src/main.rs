//! `pharmakit`: one entry point for every pipeline stage.

mod config;
mod fixtures;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use run::{Failure, Kind, Run};
use stages::{check_inputs, Stage};

#[derive(Parser)]
#[command(name = "pharmakit", version, about = "Desk-scale domain LLM pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// `dotted.key=value`; the value parses as JSON, else as a string.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    Datapipe(Common),
    TokTrain(Common),
    TokMerge(Common),
    Pretrain(Common),
    Sft(Common),
    RmTrain(Common),
    Ppo(Common),
    EvalExam(Common),
    EvalBleu(Common),
    Report(Common),
    /// Every stage in order inside one run directory.
    Pipeline(Common),
    /// Writes the shipped fixture set and its config.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn kind_of(e: &anyhow::Error) -> (&'static str, u8) {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return match f.kind {
            Kind::Config => ("config", 2),
            Kind::MissingInput => ("missing_input", 3),
            Kind::Aborted => ("aborted", 4),
        };
    }
    match e.downcast_ref::<pharmakit::Error>() {
        Some(pharmakit::Error::TrainingAborted { .. }) => ("aborted", 4),
        _ => ("runtime", 1),
    }
}

/// Runs `stages` in one run directory; the manifest is written even on failure.
fn run_stages(name: &str, stages: &[Stage], common: &Common) -> Result<Value> {
    let loaded = config::load(&common.config, &common.overrides, common.seed)
        .map_err(|e| Failure::new(Kind::Config, format!("{e:#}")))?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let mut cfg = loaded.config.clone();
    let required: Vec<_> = match stages {
        [one] => one.inputs(&cfg),
        _ => Stage::ALL.iter().flat_map(|s| s.inputs(&cfg)).filter(|(k, _)| !is_artifact(k)).collect(),
    };
    check_inputs(&required)?;
    let mut run = Run::create(&common.out_dir, &loaded.hash)?;
    let mut summaries = serde_json::Map::new();
    for s in stages {
        match s.run(&mut cfg, &mut run) {
            Ok(v) => {
                summaries.insert(s.name().to_string(), v);
            }
            Err(e) => {
                let status = if kind_of(&e).0 == "aborted" { "aborted" } else { "failed" };
                run.finish(name, status, &loaded)?;
                return Err(e.context(format!("stage {} (run directory {})", s.name(), run.dir.display())));
            }
        }
    }
    let manifest = run.finish(name, "ok", &loaded)?;
    Ok(json!({
        "command": name,
        "run_dir": run.dir,
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "outputs": manifest.outputs,
        "summary": summaries,
    }))
}

/// Paths a full pipeline produces itself rather than reading.
fn is_artifact(key: &str) -> bool {
    matches!(
        key,
        "paths.clean_corpus"
            | "paths.base_tokenizer"
            | "paths.domain_tokenizer"
            | "paths.tokenizer"
            | "paths.pretrained"
            | "paths.sft_model"
            | "paths.reward_model"
            | "paths.policy"
            | "paths.exam_report"
            | "paths.bleu_report"
    )
}

fn dispatch(cmd: Command) -> Result<Value> {
    let one = |s: Stage, c: Common| run_stages(s.name(), &[s], &c);
    match cmd {
        Command::Datapipe(c) => one(Stage::Datapipe, c),
        Command::TokTrain(c) => one(Stage::TokTrain, c),
        Command::TokMerge(c) => one(Stage::TokMerge, c),
        Command::Pretrain(c) => one(Stage::Pretrain, c),
        Command::Sft(c) => one(Stage::Sft, c),
        Command::RmTrain(c) => one(Stage::RmTrain, c),
        Command::Ppo(c) => one(Stage::Ppo, c),
        Command::EvalExam(c) => one(Stage::EvalExam, c),
        Command::EvalBleu(c) => one(Stage::EvalBleu, c),
        Command::Report(c) => one(Stage::Report, c),
        Command::Pipeline(c) => run_stages("pipeline", &Stage::ALL, &c),
        Command::Fixtures { out_dir, seed } => {
            let files = fixtures::write_all(&out_dir, seed)?;
            Ok(json!({ "command": "fixtures", "out_dir": out_dir, "files": files }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = kind_of(&e);
            let record = json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
