//! Dialogue data model, JSONL corpus ingestion, the synthetic toy corpus
//! generator, vocabulary management, and corpus statistics.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Maximum number of utterances kept in a state; older turns slide out.
pub const MAX_STATE_UTTERANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::User => Speaker::Agent,
            Speaker::Agent => Speaker::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSession {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Token<->id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: IndexMap<String, usize>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Dedicated end-of-dialog token the user model emits to close a session.
pub const EOD: usize = 4;
pub const RESERVED_TOKENS: usize = 5;

const RESERVED_STRINGS: [&str; RESERVED_TOKENS] = ["<pad>", "<bos>", "<eos>", "<unk>", "<eod>"];

impl Vocab {
    /// Builds a vocabulary from token counts, keeping the `limit` most
    /// frequent content tokens (ties broken lexicographically).
    pub fn from_counts(counts: &IndexMap<String, u64>, limit: usize) -> Vocab {
        let mut entries: Vec<(&String, &u64)> = counts.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        entries.truncate(limit);
        let mut tokens: Vec<String> = RESERVED_STRINGS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t.clone()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub average_turns: f64,
    pub session_count: usize,
    pub token_histogram: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sessions: Vec<DialogueSession>,
    pub vocab: Vocab,
    pub stats: CorpusStats,
}

/// A session before tokenization: speaker-tagged raw text turns.
#[derive(Debug, Clone)]
pub struct RawSession {
    pub id: String,
    pub turns: Vec<(Speaker, String)>,
}

#[derive(Serialize, Deserialize)]
struct SessionJson {
    id: String,
    dialogue: Vec<TurnJson>,
}

#[derive(Serialize, Deserialize)]
struct TurnJson {
    speaker: Speaker,
    text: String,
}

/// Lowercases, splits on whitespace, and breaks punctuation into standalone
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() || ch == '\'' && !word.is_empty() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Corpus {
    /// Normalizes raw sessions (merging consecutive same-speaker turns,
    /// dropping a leading agent turn), builds the vocabulary from the
    /// `vocab_limit` most frequent tokens, and tokenizes everything.
    pub fn from_raw(raw: Vec<RawSession>, vocab_limit: usize) -> Result<Corpus> {
        if raw.is_empty() {
            return Err(Error::Invalid("empty corpus".into()));
        }
        let mut normalized: Vec<(String, Vec<(Speaker, Vec<String>, String)>)> = Vec::new();
        for (line, session) in raw.into_iter().enumerate() {
            let turns = normalize_session(&session).map_err(|msg| Error::Parse {
                line: line + 1,
                msg: format!("session {}: {}", session.id, msg),
            })?;
            normalized.push((session.id, turns));
        }

        let mut counts: IndexMap<String, u64> = IndexMap::new();
        for (_, turns) in &normalized {
            for (_, words, _) in turns {
                for w in words {
                    *counts.entry(w.clone()).or_insert(0) += 1;
                }
            }
        }
        let vocab = Vocab::from_counts(&counts, vocab_limit);

        let mut sessions = Vec::with_capacity(normalized.len());
        let mut histogram = vec![0u64; vocab.len()];
        let mut total_turns = 0usize;
        for (id, turns) in normalized {
            let utterances: Vec<Utterance> = turns
                .into_iter()
                .map(|(speaker, words, text)| {
                    let tokens = vocab.encode(&words);
                    for &t in &tokens {
                        histogram[t] += 1;
                    }
                    Utterance { speaker, tokens, text }
                })
                .collect();
            total_turns += utterances.len();
            sessions.push(DialogueSession { id, utterances });
        }
        let stats = CorpusStats {
            average_turns: total_turns as f64 / sessions.len() as f64,
            session_count: sessions.len(),
            token_histogram: histogram,
        };
        Ok(Corpus { sessions, vocab, stats })
    }
}

fn normalize_session(
    session: &RawSession,
) -> std::result::Result<Vec<(Speaker, Vec<String>, String)>, String> {
    // merge consecutive same-speaker turns with a space separator
    let mut merged: Vec<(Speaker, String)> = Vec::new();
    for (speaker, text) in &session.turns {
        match merged.last_mut() {
            Some((last, acc)) if last == speaker => {
                acc.push(' ');
                acc.push_str(text);
            }
            _ => merged.push((*speaker, text.clone())),
        }
    }
    if merged.first().map(|(s, _)| *s) == Some(Speaker::Agent) {
        merged.remove(0);
    }
    if merged.len() < 2 {
        return Err("fewer than 2 utterances after normalization".into());
    }
    let mut out = Vec::with_capacity(merged.len());
    for (speaker, text) in merged {
        let words = tokenize(&text);
        if words.is_empty() {
            return Err("empty utterance".into());
        }
        out.push((speaker, words, text));
    }
    Ok(out)
}

/// Loads a JSONL corpus (one session per line) and builds its vocabulary.
pub fn load_corpus(path: &Path, vocab_limit: usize) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SessionJson = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        raw.push(RawSession {
            id: parsed.id,
            turns: parsed
                .dialogue
                .into_iter()
                .map(|t| (t.speaker, t.text))
                .collect(),
        });
    }
    if raw.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    Corpus::from_raw(raw, vocab_limit)
}

pub fn write_corpus(sessions: &[DialogueSession], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for s in sessions {
        let json = SessionJson {
            id: s.id.clone(),
            dialogue: s
                .utterances
                .iter()
                .map(|u| TurnJson { speaker: u.speaker, text: u.text.clone() })
                .collect(),
        };
        writeln!(file, "{}", serde_json::to_string(&json)?)?;
    }
    Ok(())
}

pub fn write_raw_sessions(sessions: &[RawSession], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for s in sessions {
        let json = SessionJson {
            id: s.id.clone(),
            dialogue: s
                .turns
                .iter()
                .map(|(speaker, text)| TurnJson { speaker: *speaker, text: text.clone() })
                .collect(),
        };
        writeln!(file, "{}", serde_json::to_string(&json)?)?;
    }
    Ok(())
}

/// Toy corpus generation knobs.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    /// Target mean utterance count per session.
    pub average_turns: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { average_turns: 8.0 }
    }
}

const TOPICS: &[(&str, [&str; 6])] = &[
    ("weather", ["sunny", "rain", "cloudy", "storm", "wind", "snow"]),
    ("food", ["pizza", "bread", "cheese", "soup", "salad", "rice"]),
    ("music", ["guitar", "piano", "drums", "song", "melody", "band"]),
    ("sports", ["soccer", "tennis", "running", "swimming", "goal", "race"]),
    ("movies", ["actor", "comedy", "drama", "scene", "cinema", "thriller"]),
    ("books", ["novel", "poetry", "author", "story", "chapter", "library"]),
    ("travel", ["train", "beach", "mountain", "city", "journey", "hotel"]),
    ("work", ["office", "meeting", "project", "deadline", "coffee", "desk"]),
    ("pets", ["dog", "cat", "bird", "fish", "puppy", "kitten"]),
    ("garden", ["flower", "tree", "grass", "seed", "rose", "leaf"]),
    ("games", ["chess", "puzzle", "cards", "dice", "board", "player"]),
    ("school", ["teacher", "lesson", "homework", "class", "exam", "notebook"]),
];

const ADJECTIVES: &[&str] = &["nice", "wonderful", "great", "interesting"];

/// Deterministically generates templated sessions: greeting, a run of
/// question/answer exchanges on one topic, farewell. The grammar spans well
/// under 200 word types so a tiny model can measurably learn it.
pub fn generate_toy_corpus(seed: u64, n_sessions: usize, config: &ToyConfig) -> Vec<RawSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_qa = ((config.average_turns - 4.0) / 2.0).round().max(0.0) as i64;
    let mut sessions = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let (topic, words) = TOPICS[rng.gen_range(0..TOPICS.len())];
        let n_qa = (mean_qa + rng.gen_range(-1..=1)).max(0) as usize;
        let mut turns = Vec::new();

        let greet_u = ["hello there", "hi friend", "good morning"];
        let greet_a = ["hello how are you today", "hi friend how are you"];
        turns.push((Speaker::User, greet_u[rng.gen_range(0..greet_u.len())].to_string()));
        turns.push((Speaker::Agent, greet_a[rng.gen_range(0..greet_a.len())].to_string()));

        for _ in 0..n_qa {
            let w = words[rng.gen_range(0..words.len())];
            let question = match rng.gen_range(0..3) {
                0 => format!("what do you think about {w} ?"),
                1 => format!("tell me about {w}"),
                _ => format!("do you like {w} ?"),
            };
            let answer = match rng.gen_range(0..3) {
                0 => {
                    let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
                    format!("i think {w} is really {adj}")
                }
                1 => {
                    let w2 = words[rng.gen_range(0..words.len())];
                    format!("i like {w} and {w2} very much")
                }
                _ => format!("{w} is the best {topic}"),
            };
            turns.push((Speaker::User, question));
            turns.push((Speaker::Agent, answer));
        }

        let bye_u = ["goodbye now", "see you later"];
        let bye_a = ["take care friend bye", "goodbye see you later friend"];
        turns.push((Speaker::User, bye_u[rng.gen_range(0..bye_u.len())].to_string()));
        turns.push((Speaker::Agent, bye_a[rng.gen_range(0..bye_a.len())].to_string()));

        sessions.push(RawSession { id: format!("toy-{seed}-{i}"), turns });
    }
    sessions
}

/// Convenience: generate and tokenize a toy corpus in one step.
pub fn toy_corpus(seed: u64, n_sessions: usize, config: &ToyConfig, vocab_limit: usize) -> Result<Corpus> {
    Corpus::from_raw(generate_toy_corpus(seed, n_sessions, config), vocab_limit)
}

/// Uniform sample of `k` distinct sessions, seed-deterministic.
pub fn sample_dialogues(
    sessions: &[DialogueSession],
    k: usize,
    seed: u64,
) -> Result<Vec<DialogueSession>> {
    if k > sessions.len() {
        return Err(Error::Invalid(format!(
            "cannot sample {k} from {} sessions",
            sessions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..sessions.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k);
    Ok(idx.into_iter().map(|i| sessions[i].clone()).collect())
}

/// Slides a state window: keep the most recent `MAX_STATE_UTTERANCES`
/// utterances, then drop a leading agent turn so the window still opens with
/// the user side.
pub fn truncate_state(utterances: &[Utterance]) -> Vec<Utterance> {
    let start = utterances.len().saturating_sub(MAX_STATE_UTTERANCES);
    let mut window = &utterances[start..];
    if window.first().map(|u| u.speaker) == Some(Speaker::Agent) {
        window = &window[1..];
    }
    window.to_vec()
}

/// One (state, action) pair per agent utterance; the state is the truncated
/// prefix ending in the preceding user utterance.
pub fn extract_state_action_pairs(session: &DialogueSession) -> Vec<(Vec<Utterance>, Utterance)> {
    let mut pairs = Vec::new();
    for (i, u) in session.utterances.iter().enumerate() {
        if u.speaker == Speaker::Agent {
            pairs.push((truncate_state(&session.utterances[..i]), u.clone()));
        }
    }
    pairs
}

/// Marker utterance for the user simulator's end-of-dialog decision.
pub fn end_of_dialog_utterance() -> Utterance {
    Utterance {
        speaker: Speaker::User,
        tokens: vec![EOD],
        text: RESERVED_STRINGS[EOD].to_string(),
    }
}

/// Training pairs for the user simulator: one per user utterance with a
/// preceding agent turn, plus a terminal pair teaching the end-of-dialog
/// signal on the full session.
pub fn extract_user_pairs(session: &DialogueSession) -> Vec<(Vec<Utterance>, Utterance)> {
    let mut pairs = Vec::new();
    for (i, u) in session.utterances.iter().enumerate() {
        if u.speaker == Speaker::User && i > 0 {
            pairs.push((truncate_state(&session.utterances[..i]), u.clone()));
        }
    }
    pairs.push((
        truncate_state(&session.utterances),
        end_of_dialog_utterance(),
    ));
    pairs
}

/// The first user utterance of each session.
pub fn starter_utterances(sessions: &[DialogueSession]) -> Vec<Utterance> {
    sessions
        .iter()
        .map(|s| s.utterances[0].clone())
        .collect()
}
