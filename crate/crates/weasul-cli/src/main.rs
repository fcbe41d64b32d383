//! Operator entry point: corpus generation, pretraining, the full training
//! loop, simulation/annotation dumps, evaluation, and a chat REPL.

mod config;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use config::AppConfig;
use manifest::ManifestBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use weasul::corpus::{
    self, extract_state_action_pairs, load_corpus, starter_utterances, truncate_state, Corpus,
    Speaker, Utterance,
};
use weasul::model;
use weasul::numkit::ParamStore;
use weasul::quality::{self, QualityScores};
use weasul::simulation::{
    self, categorize, select_action, PairSource, ScoreTriple, WeakDataset, WeakPair,
};
use weasul::{metrics, trainer, Error, Result};

#[derive(Parser)]
#[command(name = "weasul", version, about = "Weakly supervised dialogue policy training")]
struct Cli {
    /// Worker count for fan-out stages (fallback: WEASUL_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus as JSONL.
    GenCorpus {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        sessions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly pretrain the agent (with quality heads) and the user model.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full training loop from pretrained checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Roll out self-play episodes and dump the annotated weak dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate the corpus' state-action pairs with the quality modules.
    Annotate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus; metric JSON goes to stdout.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Interactive inspection REPL against a checkpoint.
    Chat {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let workers = match resolve_workers(cli.workers) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, workers) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let workers = match flag {
        Some(w) => w,
        None => match std::env::var("WEASUL_WORKERS") {
            Ok(v) => v
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("WEASUL_WORKERS is not a count: {v:?}")))?,
            Err(_) => 1,
        },
    };
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(workers)
}

fn load_app_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p),
        None => Ok(AppConfig::default()),
    }
}

fn load_corpus_with(cfg: &AppConfig, path: &Path) -> Result<Corpus> {
    load_corpus(path, cfg.corpus.vocab_limit)
}

/// Prefers the trained "best" checkpoints, falling back to the pretraining
/// ones.
fn load_agent_user(dir: &Path) -> Result<(ParamStore, ParamStore)> {
    let pick = |best: &str, base: &str| -> Result<ParamStore> {
        let best_path = dir.join(best);
        let base_path = dir.join(base);
        let path = if best_path.is_file() {
            best_path
        } else if base_path.is_file() {
            base_path
        } else {
            return Err(Error::Checkpoint(format!(
                "no checkpoint {base} or {best} in {}; run `weasul pretrain` first",
                dir.display()
            )));
        };
        ParamStore::load(&path)
    };
    Ok((
        pick(trainer::AGENT_BEST_CKPT, trainer::AGENT_CKPT)?,
        pick(trainer::USER_BEST_CKPT, trainer::USER_CKPT)?,
    ))
}

fn run(command: Command, workers: usize) -> Result<()> {
    match command {
        Command::GenCorpus { seed, sessions, out } => gen_corpus(seed, sessions, &out, workers),
        Command::Pretrain { config, corpus, out_dir } => {
            pretrain(&load_app_config(&config)?, &corpus, &out_dir, workers)
        }
        Command::Train { config, corpus, dir } => {
            train(&load_app_config(&config)?, &corpus, &dir, workers)
        }
        Command::Simulate { config, corpus, dir, episodes, seed, out } => {
            simulate(&load_app_config(&config)?, &corpus, &dir, episodes, seed, &out, workers)
        }
        Command::Annotate { config, corpus, dir, out } => {
            annotate(&load_app_config(&config)?, &corpus, &dir, &out, workers)
        }
        Command::Evaluate { config, checkpoint, corpus } => {
            evaluate(&load_app_config(&config)?, &checkpoint, &corpus, workers)
        }
        Command::Chat { config, checkpoint, corpus, seed, transcript } => {
            let transcript = transcript
                .unwrap_or_else(|| checkpoint.with_file_name("chat_transcript.json"));
            chat(&load_app_config(&config)?, &checkpoint, &corpus, seed, &transcript, workers)
        }
    }
}

fn gen_corpus(seed: u64, sessions: usize, out: &Path, workers: usize) -> Result<()> {
    let raw = corpus::generate_toy_corpus(seed, sessions, &corpus::ToyConfig::default());
    corpus::write_raw_sessions(&raw, out)?;
    let mut manifest = ManifestBuilder::new("gen-corpus", &AppConfig::default(), workers);
    manifest.seed("corpus", seed);
    manifest.output(out)?;
    manifest.write(&manifest::sibling(out))?;
    println!("wrote {sessions} sessions to {}", out.display());
    Ok(())
}

fn pretrain(cfg: &AppConfig, corpus_path: &Path, out_dir: &Path, workers: usize) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let report = trainer::pretrain(&corpus, &mcfg, &cfg.train, out_dir)?;
    std::fs::write(out_dir.join("effective_config.toml"), cfg.dump()?)?;
    let mut manifest = ManifestBuilder::new("pretrain", cfg, workers);
    manifest.seed("train", cfg.train.seed);
    manifest.input(corpus_path)?;
    for name in [
        trainer::AGENT_CKPT,
        trainer::USER_CKPT,
        trainer::AGENT_FISHER_CKPT,
        trainer::USER_FISHER_CKPT,
    ] {
        manifest.output(&out_dir.join(name))?;
    }
    manifest.write(&out_dir.join("pretrain_manifest.json"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(cfg: &AppConfig, corpus_path: &Path, dir: &Path, workers: usize) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let run = trainer::train(&corpus, &mcfg, &cfg.train, dir)?;
    let mut manifest = ManifestBuilder::new("train", cfg, workers);
    manifest.seed("train", cfg.train.seed);
    manifest.input(corpus_path)?;
    for name in run.checkpoints.values() {
        manifest.output(&dir.join(name))?;
    }
    manifest.output(&dir.join(trainer::MANIFEST_FILE))?;
    manifest.iterations(&run.iterations);
    manifest.write(&dir.join("train_manifest.json"))?;
    println!("{}", serde_json::to_string_pretty(&run)?);
    Ok(())
}

fn simulate(
    cfg: &AppConfig,
    corpus_path: &Path,
    dir: &Path,
    episodes: usize,
    seed: u64,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let (agent, user) = load_agent_user(dir)?;
    let starters = starter_utterances(&corpus.sessions);
    let sim = cfg.sim_config(corpus.stats.average_turns, seed);
    let (dataset, trajectories) = simulation::collect_weak_dataset(
        &agent,
        &user,
        &mcfg,
        &corpus.vocab,
        &starters,
        &[],
        episodes,
        &sim,
        seed,
    )?;
    simulation::write_weak_dataset(&dataset, out)?;
    let mut manifest = ManifestBuilder::new("simulate", cfg, workers);
    manifest.seed("simulate", seed);
    manifest.input(corpus_path)?;
    manifest.output(out)?;
    manifest.write(&manifest::sibling(out))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "episodes": trajectories.len(),
            "very_high": dataset.v.len(),
            "high": dataset.h.len(),
            "low": dataset.l.len(),
        }))?
    );
    Ok(())
}

fn annotate(
    cfg: &AppConfig,
    corpus_path: &Path,
    dir: &Path,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let (agent, _) = load_agent_user(dir)?;
    let mut dataset = WeakDataset::default();
    for session in &corpus.sessions {
        let mut prev_agent: Option<Utterance> = None;
        for (turn, (state, action)) in extract_state_action_pairs(session).into_iter().enumerate() {
            let scores = quality::annotate(&agent, &mcfg, &state, &action, prev_agent.as_ref())?;
            let triple = ScoreTriple::from(&scores);
            let mut next_state = state.clone();
            next_state.push(action.clone());
            let pair = WeakPair {
                episode: -1,
                turn,
                state,
                next_state: truncate_state(&next_state),
                category: categorize(&triple),
                scores: triple,
                source: PairSource::Corpus,
                action: action.clone(),
            };
            match pair.category {
                simulation::RewardCategory::VeryHigh => dataset.v.push(pair),
                simulation::RewardCategory::High => dataset.h.push(pair),
                simulation::RewardCategory::Low => dataset.l.push(pair),
            }
            prev_agent = Some(action);
        }
    }
    simulation::write_weak_dataset(&dataset, out)?;
    let mut manifest = ManifestBuilder::new("annotate", cfg, workers);
    manifest.input(corpus_path)?;
    manifest.output(out)?;
    manifest.write(&manifest::sibling(out))?;
    println!("annotated {} pairs to {}", dataset.len(), out.display());
    Ok(())
}

fn evaluate(cfg: &AppConfig, checkpoint: &Path, corpus_path: &Path, workers: usize) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let store = ParamStore::load(checkpoint)?;
    let pairs: Vec<_> = corpus
        .sessions
        .iter()
        .flat_map(|s| extract_state_action_pairs(s))
        .collect();
    let report = metrics::evaluate_model(&store, &mcfg, &pairs, mcfg.max_tokens)?;
    let mut manifest = ManifestBuilder::new("evaluate", cfg, workers);
    manifest.input(corpus_path)?;
    manifest.input(checkpoint)?;
    manifest.write(&manifest::sibling(checkpoint))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct TranscriptTurn {
    speaker: Speaker,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<QualityScores>,
}

fn chat(
    cfg: &AppConfig,
    checkpoint: &Path,
    corpus_path: &Path,
    seed: u64,
    transcript_path: &Path,
    workers: usize,
) -> Result<()> {
    let corpus = load_corpus_with(cfg, corpus_path)?;
    let mcfg = cfg.model_config(corpus.vocab.len());
    let agent = ParamStore::load(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: Vec<Utterance> = Vec::new();
    let mut transcript: Vec<TranscriptTurn> = Vec::new();

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    writeln!(stdout, "weasul chat (type /quit to exit)")?;
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        let tokens: Vec<usize> = corpus::tokenize(line)
            .iter()
            .map(|t| corpus.vocab.id(t))
            .collect();
        let user_utt = Utterance {
            speaker: Speaker::User,
            text: line.to_string(),
            tokens,
        };
        transcript.push(TranscriptTurn {
            speaker: Speaker::User,
            text: user_utt.text.clone(),
            scores: None,
        });
        history.push(user_utt);

        let state = truncate_state(&history);
        let enc = model::encode_state_value(&agent, &mcfg, &state)?;
        let mut decode = cfg.decode_config(seed.wrapping_add(history.len() as u64));
        decode.explore_rate = cfg.train.explore_rate;
        let result = model::top_k_generate(&agent, &mcfg, &enc, &state, &decode)?;
        let tokens = if result.candidates.is_empty() {
            model::greedy_decode(&agent, &mcfg, &enc, decode.max_tokens, false)?
        } else {
            select_action(&result.candidates, decode.explore_rate, decode.exploit_top, &mut rng)?
                .0
                .tokens
                .clone()
        };
        let reply = Utterance {
            speaker: Speaker::Agent,
            text: corpus.vocab.decode(&tokens),
            tokens,
        };
        let prev_agent = history.iter().rev().find(|u| u.speaker == Speaker::Agent).cloned();
        let scores = quality::annotate(&agent, &mcfg, &state, &reply, prev_agent.as_ref())?;
        writeln!(stdout, "agent: {}", reply.text)?;
        writeln!(stdout, "scores: {}", serde_json::to_string(&scores)?)?;
        transcript.push(TranscriptTurn {
            speaker: Speaker::Agent,
            text: reply.text.clone(),
            scores: Some(scores),
        });
        history.push(reply);
    }

    let json = serde_json::to_string_pretty(&transcript)?;
    std::fs::write(transcript_path, json)?;
    let mut manifest = ManifestBuilder::new("chat", cfg, workers);
    manifest.seed("chat", seed);
    manifest.input(checkpoint)?;
    manifest.output(transcript_path)?;
    manifest.write(&manifest::sibling(transcript_path))?;
    writeln!(stdout, "transcript written to {}", transcript_path.display())?;
    Ok(())
}
