//! The three weak-annotation modules — semantic relevance, semantic
//! coherence, consistent flow — with their negative-sample constructors,
//! losses, the joint objective, and annotation-time scoring.

use crate::corpus::{Corpus, Speaker, Utterance};
use crate::embedder;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::numkit::{NodeId, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SR_W1: &str = "q.sr.w1";
pub const SR_B1: &str = "q.sr.b1";
pub const SR_W2: &str = "q.sr.w2";
pub const SR_B2: &str = "q.sr.b2";
pub const COH_W: &str = "q.coh.w";
pub const COH_B: &str = "q.coh.b";

const SR_HIDDEN: usize = 128;

#[derive(Debug, Clone)]
pub struct QualityConfig {
    /// Flow hinge margin.
    pub delta: f64,
    /// Weight of the quality terms in the joint objective.
    pub alpha: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig { delta: 0.54, alpha: 0.5 }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.4..=0.7).contains(&self.delta) {
            return Err(Error::Invalid(format!("delta {} outside [0.4, 0.7]", self.delta)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Invalid(format!("alpha {} must be non-negative", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionTag {
    Genuine,
    ReplaceLeft,
    ReplaceRight,
    ShuffleLeft,
    ShuffleRight,
    ReplaceUtterance,
    BigramShuffle,
}

#[derive(Debug, Clone)]
pub struct SrSample {
    pub left: Vec<Utterance>,
    pub right: Vec<Utterance>,
    pub label: f64,
    pub tag: CorruptionTag,
}

#[derive(Debug, Clone)]
pub struct CohSample {
    pub context: Vec<Utterance>,
    pub corrupted_index: usize,
    pub labels: Vec<f64>,
    pub tag: CorruptionTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub sr: f64,
    pub coh: f64,
    /// Undefined on the first agent turn.
    pub cf: Option<f64>,
    /// (sr logit, negated coherence logit, raw cosine); 0 where undefined.
    pub pre_sigmoid: [f64; 3],
}

pub fn init_quality(store: &mut ParamStore, d_model: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert_normal(SR_W1, d_model, SR_HIDDEN, 0.1, rng)?;
    store.insert_zeros(SR_B1, 1, SR_HIDDEN)?;
    store.insert_normal(SR_W2, SR_HIDDEN, 1, 0.1, rng)?;
    store.insert_zeros(SR_B2, 1, 1)?;
    store.insert_normal(COH_W, d_model, 1, 0.1, rng)?;
    store.insert_zeros(COH_B, 1, 1)?;
    Ok(())
}

/// Corrupted sequences lose speaker alternation; roles are reassigned by
/// position so the shared encoder accepts them.
fn with_positional_roles(utterances: &[Utterance]) -> Vec<Utterance> {
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut u = u.clone();
            u.speaker = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
            u
        })
        .collect()
}

/// A random piece of `len` consecutive utterances; falls back to
/// independently sampled utterances when no session is long enough.
fn sample_piece(corpus: &Corpus, len: usize, rng: &mut ChaCha8Rng) -> Vec<Utterance> {
    for _ in 0..200 {
        let s = &corpus.sessions[rng.gen_range(0..corpus.sessions.len())];
        if s.utterances.len() >= len {
            let start = rng.gen_range(0..=s.utterances.len() - len);
            return s.utterances[start..start + len].to_vec();
        }
    }
    (0..len)
        .map(|_| {
            let s = &corpus.sessions[rng.gen_range(0..corpus.sessions.len())];
            s.utterances[rng.gen_range(0..s.utterances.len())].clone()
        })
        .collect()
}

fn shuffle_differs(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    debug_assert!(len >= 2);
    loop {
        let mut perm: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// One genuine split plus a replacement negative and a shuffle negative.
pub fn make_sr_samples(context: &[Utterance], corpus: &Corpus, seed: u64) -> Result<Vec<SrSample>> {
    let n = context.len();
    if n < 2 {
        return Err(Error::Invalid(format!("context of {n} utterances cannot be split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..n);
    let left = with_positional_roles(&context[..b]);
    let right = with_positional_roles(&context[b..]);
    let mut samples = vec![SrSample {
        left: left.clone(),
        right: right.clone(),
        label: 1.0,
        tag: CorruptionTag::Genuine,
    }];

    // replacement negative: a foreign same-length piece on one side
    let replace_left = rng.gen_bool(0.5);
    if replace_left {
        let piece = with_positional_roles(&sample_piece(corpus, left.len(), &mut rng));
        samples.push(SrSample {
            left: piece,
            right: right.clone(),
            label: 0.0,
            tag: CorruptionTag::ReplaceLeft,
        });
    } else {
        let piece = with_positional_roles(&sample_piece(corpus, right.len(), &mut rng));
        samples.push(SrSample {
            left: left.clone(),
            right: piece,
            label: 0.0,
            tag: CorruptionTag::ReplaceRight,
        });
    }

    // shuffle negative needs a side with >= 2 utterances; resample the
    // boundary when the chosen side is too short, and fall back to a second
    // replacement when no boundary admits one (contexts of exactly 2)
    let mut shuffle_boundary = None;
    if n > 2 {
        for _ in 0..20 {
            let sb = rng.gen_range(1..n);
            let shuffle_left = rng.gen_bool(0.5);
            let side_len = if shuffle_left { sb } else { n - sb };
            if side_len >= 2 {
                shuffle_boundary = Some((sb, shuffle_left));
                break;
            }
        }
        if shuffle_boundary.is_none() {
            let sb = n / 2;
            shuffle_boundary = Some((sb, sb >= 2));
        }
    }
    match shuffle_boundary {
        Some((sb, true)) => {
            let perm = shuffle_differs(&mut rng, sb);
            let shuffled: Vec<Utterance> = perm.iter().map(|&i| context[i].clone()).collect();
            samples.push(SrSample {
                left: with_positional_roles(&shuffled),
                right: with_positional_roles(&context[sb..]),
                label: 0.0,
                tag: CorruptionTag::ShuffleLeft,
            });
        }
        Some((sb, false)) => {
            let side = &context[sb..];
            let perm = shuffle_differs(&mut rng, side.len());
            let shuffled: Vec<Utterance> = perm.iter().map(|&i| side[i].clone()).collect();
            samples.push(SrSample {
                left: with_positional_roles(&context[..sb]),
                right: with_positional_roles(&shuffled),
                label: 0.0,
                tag: CorruptionTag::ShuffleRight,
            });
        }
        None => {
            let piece = with_positional_roles(&sample_piece(corpus, right.len(), &mut rng));
            samples.push(SrSample {
                left: left.clone(),
                right: piece,
                label: 0.0,
                tag: CorruptionTag::ReplaceRight,
            });
        }
    }
    Ok(samples)
}

/// Relevance head logit on the CLS summary of the concatenated pieces.
pub fn sr_logit(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    left: &[Utterance],
    right: &[Utterance],
) -> Result<NodeId> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::Invalid("relevance pieces must be non-empty".into()));
    }
    let mut joined = left.to_vec();
    joined.extend_from_slice(right);
    let joined = with_positional_roles(&joined);
    let enc = model::encode_state(tape, store, cfg, &joined)?;
    let w1 = tape.param(store, SR_W1)?;
    let b1 = tape.param(store, SR_B1)?;
    let w2 = tape.param(store, SR_W2)?;
    let b2 = tape.param(store, SR_B2)?;
    let h = tape.matmul(enc.cls, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h)?;
    let z = tape.matmul(h, w2)?;
    tape.add_bias(z, b2)
}

pub fn sr_score(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    left: &[Utterance],
    right: &[Utterance],
) -> Result<NodeId> {
    let z = sr_logit(tape, store, cfg, left, right)?;
    tape.sigmoid(z)
}

pub fn sr_score_value(
    store: &ParamStore,
    cfg: &ModelConfig,
    left: &[Utterance],
    right: &[Utterance],
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = sr_score(&mut tape, store, cfg, left, right)?;
    tape.value(s).scalar_value()
}

/// Mean binary cross-entropy over relevance samples.
pub fn sr_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[SrSample],
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::Invalid("relevance loss needs at least one sample".into()));
    }
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let g = sr_score(tape, store, cfg, &s.left, &s.right)?;
        let term = if s.label > 0.5 {
            let lg = tape.log(g)?;
            tape.scale(lg, -1.0)?
        } else {
            let one = tape.scalar(1.0);
            let inv = tape.sub(one, g)?;
            let lg = tape.log(inv)?;
            tape.scale(lg, -1.0)?
        };
        terms.push(term);
    }
    let stacked = tape.concat_cols(&terms)?;
    tape.mean(stacked)
}

/// One agent utterance corrupted by replacement or bigram shuffle.
pub fn make_coh_samples(context: &[Utterance], corpus: &Corpus, seed: u64) -> Result<CohSample> {
    let agent_positions: Vec<usize> = context
        .iter()
        .enumerate()
        .filter(|(_, u)| u.speaker == Speaker::Agent)
        .map(|(i, _)| i)
        .collect();
    if agent_positions.is_empty() {
        return Err(Error::Invalid("context has no agent utterance to corrupt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = agent_positions[rng.gen_range(0..agent_positions.len())];
    let use_shuffle = rng.gen_bool(0.5) && context[t].tokens.len() > 2;
    let mut corrupted = context.to_vec();
    let tag;
    if use_shuffle {
        // permute the utterance's bigrams (chunks of two tokens)
        let tokens = &context[t].tokens;
        let chunks: Vec<&[usize]> = tokens.chunks(2).collect();
        let perm = shuffle_differs(&mut rng, chunks.len());
        let new_tokens: Vec<usize> = perm.iter().flat_map(|&i| chunks[i].iter().copied()).collect();
        corrupted[t].tokens = new_tokens;
        corrupted[t].text.clear();
        tag = CorruptionTag::BigramShuffle;
    } else {
        let mut replacement = sample_piece(corpus, 1, &mut rng).remove(0);
        replacement.speaker = Speaker::Agent;
        corrupted[t] = replacement;
        tag = CorruptionTag::ReplaceUtterance;
    }
    let labels = (0..context.len()).map(|i| if i == t { 0.0 } else { 1.0 }).collect();
    Ok(CohSample {
        context: with_positional_roles(&corrupted),
        corrupted_index: t,
        labels,
        tag,
    })
}

fn coherence_logits(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    context: &[Utterance],
) -> Result<NodeId> {
    let enc = model::encode_state(tape, store, cfg, context)?;
    let w = tape.param(store, COH_W)?;
    let b = tape.param(store, COH_B)?;
    let mut logits = Vec::with_capacity(enc.utterance_hidden.len());
    for &h in &enc.utterance_hidden {
        let z = tape.matmul(h, w)?;
        logits.push(tape.add_bias(z, b)?);
    }
    tape.concat_cols(&logits)
}

/// Softmax probabilities over per-utterance incoherence logits: the
/// module's belief about which slot breaks the context.
pub fn coh_slot_probs(
    store: &ParamStore,
    cfg: &ModelConfig,
    context: &[Utterance],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let logits = coherence_logits(&mut tape, store, cfg, context)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Softmax over per-utterance incoherence logits; negative log probability
/// at the corrupted index.
pub fn coh_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &CohSample,
) -> Result<NodeId> {
    if sample.corrupted_index >= sample.context.len() {
        return Err(Error::Invalid("corrupted index out of range".into()));
    }
    let logits = coherence_logits(tape, store, cfg, &sample.context)?;
    tape.cross_entropy_rows(logits, &[sample.corrupted_index])
}

/// Annotation-time coherence: high when the incoherence logit is low.
pub fn coh_score_from_logit(logit: f64) -> f64 {
    1.0 / (1.0 + logit.exp())
}

/// Cosine similarity of two utterance vectors.
pub fn cf_similarity(store: &ParamStore, a_prev: &Utterance, a_curr: &Utterance) -> Result<f64> {
    let mut tape = Tape::new();
    let va = embedder::embed_utterance(&mut tape, store, a_prev)?;
    let vb = embedder::embed_utterance(&mut tape, store, a_curr)?;
    let c = tape.cosine(va, vb)?;
    tape.value(c).scalar_value()
}

/// Triplet hinge on the flow cosine: the genuine successor must beat a
/// random utterance by the margin.
pub fn cf_loss(
    tape: &mut Tape,
    store: &ParamStore,
    qcfg: &QualityConfig,
    a_prev: &Utterance,
    a_curr: &Utterance,
    v_random: &Utterance,
) -> Result<NodeId> {
    let anchor = embedder::embed_utterance(tape, store, a_prev)?;
    let pos = embedder::embed_utterance(tape, store, a_curr)?;
    let neg = embedder::embed_utterance(tape, store, v_random)?;
    let g_pos = tape.cosine(anchor, pos)?;
    let g_neg = tape.cosine(anchor, neg)?;
    let margin = tape.scalar(qcfg.delta);
    let gap = tape.sub(margin, g_pos)?;
    let gap = tape.add(gap, g_neg)?;
    tape.relu(gap)
}

/// Inputs to the joint pretraining objective for one batch of pairs.
pub struct QualityBatch<'a> {
    /// (state, agent response) pairs.
    pub pairs: &'a [(Vec<Utterance>, Utterance)],
    pub corpus: &'a Corpus,
    pub seed: u64,
}

/// L_full = L_a + alpha * (L_sr + L_coh + L_cf), each term averaged over
/// the pairs that support it.
pub fn joint_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    qcfg: &QualityConfig,
    batch: &QualityBatch,
) -> Result<NodeId> {
    qcfg.validate()?;
    if batch.pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
    let mut gen_terms = Vec::new();
    let mut sr_samples = Vec::new();
    let mut coh_terms = Vec::new();
    let mut cf_terms = Vec::new();
    for (i, (state, action)) in batch.pairs.iter().enumerate() {
        gen_terms.push(model::nll_loss(tape, store, cfg, state, &action.tokens)?);
        let mut full = state.clone();
        full.push(action.clone());
        let sub_seed = batch.seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        sr_samples.extend(make_sr_samples(&full, batch.corpus, sub_seed)?);
        let coh = make_coh_samples(&full, batch.corpus, sub_seed ^ 1)?;
        coh_terms.push(coh_loss(tape, store, cfg, &coh)?);
        let prev_agent = state.iter().rev().find(|u| u.speaker == Speaker::Agent);
        if let Some(prev) = prev_agent {
            let v_random = sample_piece(batch.corpus, 1, &mut rng).remove(0);
            cf_terms.push(cf_loss(tape, store, qcfg, prev, action, &v_random)?);
        }
    }
    let l_a = {
        let stacked = tape.concat_cols(&gen_terms)?;
        tape.mean(stacked)?
    };
    if qcfg.alpha == 0.0 {
        return Ok(l_a);
    }
    let l_sr = sr_loss(tape, store, cfg, &sr_samples)?;
    let l_coh = {
        let stacked = tape.concat_cols(&coh_terms)?;
        tape.mean(stacked)?
    };
    let mut quality = tape.add(l_sr, l_coh)?;
    if !cf_terms.is_empty() {
        let stacked = tape.concat_cols(&cf_terms)?;
        let l_cf = tape.mean(stacked)?;
        quality = tape.add(quality, l_cf)?;
    }
    let scaled = tape.scale(quality, qcfg.alpha)?;
    tape.add(l_a, scaled)
}

/// Scores one state-action pair with all three modules.
pub fn annotate(
    store: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
    action: &Utterance,
    prev_agent: Option<&Utterance>,
) -> Result<QualityScores> {
    // relevance: the state as left piece, the action as right piece
    let mut tape = Tape::new();
    let z = sr_logit(&mut tape, store, cfg, state, std::slice::from_ref(action))?;
    let sr_logit_v = tape.value(z).scalar_value()?;
    let sr = 1.0 / (1.0 + (-sr_logit_v).exp());

    // coherence: incoherence logit of the action inside the full context
    let mut full = state.to_vec();
    full.push(action.clone());
    let full = with_positional_roles(&full);
    let mut tape = Tape::new();
    let logits = coherence_logits(&mut tape, store, cfg, &full)?;
    let ell = tape.value(logits).at(0, full.len() - 1);
    let coh = coh_score_from_logit(ell);

    let (cf, raw_cos) = match prev_agent {
        Some(prev) => {
            let c = cf_similarity(store, prev, action)?;
            (Some((c + 1.0) / 2.0), c)
        }
        None => (None, 0.0),
    };
    Ok(QualityScores {
        sr,
        coh,
        cf,
        pre_sigmoid: [sr_logit_v, -ell, raw_cos],
    })
}
