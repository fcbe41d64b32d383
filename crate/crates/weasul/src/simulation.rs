//! Agent-user self-play: episode rollout with termination rules,
//! exploration-exploitation action selection, weak annotation of the
//! collected pairs, and reward-category filtering.

use crate::corpus::{truncate_state, Speaker, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, DecodeConfig, GenerationCandidate, ModelConfig};
use crate::numkit::ParamStore;
use crate::quality::{self, QualityScores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const DEFAULT_DULL_PHRASES: [&str; 9] = [
    "i don't know",
    "i am not sure",
    "i'm not sure",
    "i don't understand",
    "what do you mean",
    "i can't say",
    "i have no idea",
    "nothing",
    "ok",
];

pub const MAX_EPISODE_UTTERANCES: usize = 20;
const REPETITION_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Hard cap on total utterances per episode.
    pub max_utterances: usize,
    /// Dull/repetitive rules fire only after this many utterances
    /// (the corpus average).
    pub min_turns_for_rules: f64,
    pub dull_phrases: Vec<String>,
    pub decode: DecodeConfig,
    /// Per-utterance decode cap for the user model.
    pub user_max_tokens: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_utterances: MAX_EPISODE_UTTERANCES,
            min_turns_for_rules: 0.0,
            dull_phrases: DEFAULT_DULL_PHRASES.iter().map(|s| s.to_string()).collect(),
            decode: DecodeConfig::default(),
            user_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    Dull,
    Repetitive,
    MaxTurns,
    UserEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionTag {
    Explore,
    Exploit,
}

#[derive(Debug, Clone)]
pub struct TurnRecord {
    pub state: Vec<Utterance>,
    pub utterance: Utterance,
    /// Present on agent turns only.
    pub selection: Option<SelectionTag>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub starter: Utterance,
    pub turns: Vec<TurnRecord>,
    pub termination: TerminationReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardCategory {
    Low,
    High,
    VeryHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Simulated,
    Corpus,
}

/// Annotation scores as serialized; the pre-sigmoid vector is recoverable
/// via [`recover_pre_sigmoid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub sr: f64,
    pub coh: f64,
    pub cf: Option<f64>,
}

impl From<&QualityScores> for ScoreTriple {
    fn from(q: &QualityScores) -> Self {
        ScoreTriple { sr: q.sr, coh: q.coh, cf: q.cf }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// (sr logit, negated coherence logit, raw cosine); 0 in the undefined
/// flow slot. Inverts the sigmoid/affine maps used at annotation time.
pub fn recover_pre_sigmoid(s: &ScoreTriple) -> [f64; 3] {
    [logit(s.sr), logit(s.coh), s.cf.map(|c| 2.0 * c - 1.0).unwrap_or(0.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPair {
    /// Episode index; -1 for corpus-sourced pairs.
    pub episode: i64,
    /// Turn index of the action within its episode.
    pub turn: usize,
    pub state: Vec<Utterance>,
    pub action: Utterance,
    pub next_state: Vec<Utterance>,
    pub scores: ScoreTriple,
    pub category: RewardCategory,
    pub source: PairSource,
}

#[derive(Debug, Clone, Default)]
pub struct WeakDataset {
    pub v: Vec<WeakPair>,
    pub h: Vec<WeakPair>,
    pub l: Vec<WeakPair>,
}

impl WeakDataset {
    pub fn len(&self) -> usize {
        self.v.len() + self.h.len() + self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &WeakPair> {
        self.v.iter().chain(&self.h).chain(&self.l)
    }
}

/// Explore with probability `explore_rate` (uniform over all candidates);
/// otherwise exploit uniformly over the top `exploit_top` ranks.
pub fn select_action<'a>(
    candidates: &'a [GenerationCandidate],
    explore_rate: f64,
    exploit_top: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a GenerationCandidate, SelectionTag)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to select from".into()));
    }
    if rng.gen_bool(explore_rate) {
        let i = rng.gen_range(0..candidates.len());
        Ok((&candidates[i], SelectionTag::Explore))
    } else {
        let top = exploit_top.min(candidates.len());
        let i = rng.gen_range(0..top);
        Ok((&candidates[i], SelectionTag::Exploit))
    }
}

/// True iff any phrase occurs as a contiguous token subsequence of the
/// utterance (both sides tokenized identically).
pub fn is_dull(utterance: &Utterance, phrases: &[String]) -> Result<bool> {
    if phrases.is_empty() {
        return Err(Error::Invalid("dull phrase list must be non-empty".into()));
    }
    let text_tokens = crate::corpus::tokenize(&utterance.text);
    for phrase in phrases {
        let p = crate::corpus::tokenize(phrase);
        if p.is_empty() || p.len() > text_tokens.len() {
            continue;
        }
        if text_tokens.windows(p.len()).any(|w| w == p.as_slice()) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Unigram multiset overlap over the longer length, strictly above 0.8.
pub fn is_repetitive(u1: &Utterance, u2: &Utterance) -> bool {
    if u1.tokens.is_empty() || u2.tokens.is_empty() {
        return false;
    }
    let mut counts = std::collections::HashMap::new();
    for &t in &u1.tokens {
        *counts.entry(t).or_insert(0i64) += 1;
    }
    let mut overlap = 0usize;
    for &t in &u2.tokens {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            *c -= 1;
            overlap += 1;
        }
    }
    let max_len = u1.tokens.len().max(u2.tokens.len());
    overlap as f64 / max_len as f64 > REPETITION_THRESHOLD
}

/// Thresholded bucketing; an undefined flow score is excluded from the
/// decision.
pub fn categorize(scores: &ScoreTriple) -> RewardCategory {
    let mut considered = vec![scores.sr, scores.coh];
    if let Some(cf) = scores.cf {
        considered.push(cf);
    }
    if considered.iter().all(|&s| s >= 0.8) {
        RewardCategory::VeryHigh
    } else if considered.iter().all(|&s| s >= 0.6) {
        RewardCategory::High
    } else {
        RewardCategory::Low
    }
}

/// One self-play episode from a starter user utterance.
pub fn run_episode(
    agent: &ParamStore,
    user: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    starter: &Utterance,
    sim: &SimConfig,
    seed: u64,
) -> Result<Trajectory> {
    if starter.speaker != Speaker::User {
        return Err(Error::Invalid("starter must be a user utterance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = vec![starter.clone()];
    let mut turns = Vec::new();
    let termination;
    loop {
        // agent turn
        let state = truncate_state(&history);
        let enc = model::encode_state_value(agent, cfg, &state)?;
        let mut decode = sim.decode.clone();
        decode.seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(history.len() as u64);
        let result = model::top_k_generate(agent, cfg, &enc, &state, &decode)?;
        let (tokens, tag) = if result.candidates.is_empty() {
            (model::greedy_decode(agent, cfg, &enc, decode.max_tokens, false)?, SelectionTag::Exploit)
        } else {
            let (cand, tag) = select_action(
                &result.candidates,
                decode.explore_rate,
                decode.exploit_top,
                &mut rng,
            )?;
            (cand.tokens.clone(), tag)
        };
        let action = Utterance {
            speaker: Speaker::Agent,
            text: vocab.decode(&tokens),
            tokens,
        };
        let prev_agent = history.iter().rev().find(|u| u.speaker == Speaker::Agent).cloned();
        turns.push(TurnRecord {
            state,
            utterance: action.clone(),
            selection: Some(tag),
        });
        history.push(action.clone());

        let rules_active = history.len() as f64 > sim.min_turns_for_rules;
        if rules_active && is_dull(&action, &sim.dull_phrases)? {
            termination = TerminationReason::Dull;
            break;
        }
        if rules_active {
            if let Some(prev) = &prev_agent {
                if is_repetitive(prev, &action) {
                    termination = TerminationReason::Repetitive;
                    break;
                }
            }
        }
        if history.len() >= sim.max_utterances {
            termination = TerminationReason::MaxTurns;
            break;
        }

        // user turn
        let user_state = truncate_state(&history);
        let (reply, ended) = model::user_act(user, cfg, vocab, &user_state, sim.user_max_tokens)?;
        if ended {
            termination = TerminationReason::UserEnded;
            break;
        }
        let reply = reply.expect("non-ended user turn carries an utterance");
        if reply.tokens.is_empty() {
            termination = TerminationReason::UserEnded;
            break;
        }
        turns.push(TurnRecord { state: user_state, utterance: reply.clone(), selection: None });
        history.push(reply);
        if history.len() >= sim.max_utterances {
            termination = TerminationReason::MaxTurns;
            break;
        }
    }
    Ok(Trajectory { starter: starter.clone(), turns, termination })
}

fn annotate_trajectory(
    quality_store: &ParamStore,
    cfg: &ModelConfig,
    episode: i64,
    trajectory: &Trajectory,
) -> Result<Vec<WeakPair>> {
    let mut pairs = Vec::new();
    // full history to derive next states
    let mut history = vec![trajectory.starter.clone()];
    for t in &trajectory.turns {
        history.push(t.utterance.clone());
    }
    let mut offset = 1; // starter
    let mut prev_agent: Option<Utterance> = None;
    for (turn_idx, t) in trajectory.turns.iter().enumerate() {
        offset += 1;
        if t.utterance.speaker != Speaker::Agent {
            continue;
        }
        let scores = quality::annotate(
            quality_store,
            cfg,
            &t.state,
            &t.utterance,
            prev_agent.as_ref(),
        )?;
        // next state: history through the following user reply, or the final
        // state when the episode ended here
        let next_end = (offset + 1).min(history.len());
        let next_state = truncate_state(&history[..next_end]);
        let triple = ScoreTriple::from(&scores);
        pairs.push(WeakPair {
            episode,
            turn: turn_idx,
            state: t.state.clone(),
            action: t.utterance.clone(),
            next_state,
            category: categorize(&triple),
            scores: triple,
            source: PairSource::Simulated,
        });
        prev_agent = Some(t.utterance.clone());
    }
    Ok(pairs)
}

/// Runs `n_episodes`, annotates every agent pair, buckets by category, and
/// appends the corpus-sourced pairs `d_h` to VeryHigh.
#[allow(clippy::too_many_arguments)]
pub fn collect_weak_dataset(
    agent: &ParamStore,
    user: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    starters: &[Utterance],
    d_h: &[(Vec<Utterance>, Utterance)],
    n_episodes: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<(WeakDataset, Vec<Trajectory>)> {
    if n_episodes > 0 && starters.is_empty() {
        return Err(Error::Invalid("no starter utterances".into()));
    }
    let mut dataset = WeakDataset::default();
    let mut trajectories = Vec::with_capacity(n_episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for episode in 0..n_episodes {
        let starter = &starters[rng.gen_range(0..starters.len())];
        let ep_seed = seed.wrapping_add(1 + episode as u64);
        let trajectory = run_episode(agent, user, cfg, vocab, starter, sim, ep_seed)?;
        for pair in annotate_trajectory(agent, cfg, episode as i64, &trajectory)? {
            match pair.category {
                RewardCategory::VeryHigh => dataset.v.push(pair),
                RewardCategory::High => dataset.h.push(pair),
                RewardCategory::Low => dataset.l.push(pair),
            }
        }
        trajectories.push(trajectory);
    }
    for (turn, (state, action)) in d_h.iter().enumerate() {
        let mut next_state = state.clone();
        next_state.push(action.clone());
        let scores = quality::annotate(agent, cfg, state, action, None)?;
        let triple = ScoreTriple::from(&scores);
        dataset.v.push(WeakPair {
            episode: -1,
            turn,
            state: state.clone(),
            action: action.clone(),
            next_state: truncate_state(&next_state),
            scores: triple,
            category: RewardCategory::VeryHigh,
            source: PairSource::Corpus,
        });
    }
    Ok((dataset, trajectories))
}

pub fn write_weak_dataset(dataset: &WeakDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for pair in dataset.all_pairs() {
        let line = serde_json::to_string(pair)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weak_dataset(path: &Path) -> Result<WeakDataset> {
    let f = std::fs::File::open(path)?;
    let r = BufReader::new(f);
    let mut dataset = WeakDataset::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: WeakPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        for s in [pair.scores.sr, pair.scores.coh].iter().chain(&pair.scores.cf) {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("score {s} outside [0, 1]"),
                });
            }
        }
        match pair.category {
            RewardCategory::VeryHigh => dataset.v.push(pair),
            RewardCategory::High => dataset.h.push(pair),
            RewardCategory::Low => dataset.l.push(pair),
        }
    }
    Ok(dataset)
}
