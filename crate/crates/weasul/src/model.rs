//! Shared encoder-decoder architecture for the dialogue policy and the user
//! simulator: context encoding, token-level decoding, sequence likelihoods,
//! and diverse top-K generation with simplified dynamic blocking.

use crate::corpus::{Speaker, Utterance, Vocab, BOS, EOD, EOS, PAD};
use crate::embedder::{self, TOKEN_TABLE};
use crate::error::{Error, Result};
use crate::numkit::{NodeId, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NEG_INF: f64 = -1e30;

/// Architecture dimensions. `desk` is the working configuration;
/// `full_scale` preserves production-sized dimensions for reference.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            ff_hidden: 128,
            max_tokens: 64,
            vocab_size,
        }
    }

    /// Full-scale reference preset {L=6, H=768, A=2}.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            layers: 6,
            heads: 2,
            ff_hidden: 3072,
            max_tokens: 64,
            vocab_size,
        }
    }
}

/// Beam/selection settings for diverse top-K generation.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub max_tokens: usize,
    pub top_k: usize,
    pub exploit_top: usize,
    pub explore_rate: f64,
    pub blocking_enabled: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_tokens: 64,
            top_k: 7,
            exploit_top: 2,
            explore_rate: 0.6,
            blocking_enabled: true,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exploit_top < 1 || self.exploit_top > self.top_k {
            return Err(Error::Invalid(format!(
                "exploit_top {} outside 1..={}",
                self.exploit_top, self.top_k
            )));
        }
        if !(0.0..=1.0).contains(&self.explore_rate) {
            return Err(Error::Invalid(format!(
                "explore_rate {} outside [0, 1]",
                self.explore_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCandidate {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub rank: usize,
    /// Bigrams this candidate was constrained against (empty when blocking
    /// is disabled).
    pub blocked: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct TopKResult {
    pub candidates: Vec<GenerationCandidate>,
    /// Fewer than K distinct candidates could be produced.
    pub short_set: bool,
}

/// Encoder output handles on the current tape.
pub struct EncoderState {
    /// (n+1) x d hidden matrix; row 0 is the pooled CLS slot.
    pub all: NodeId,
    pub cls: NodeId,
    pub utterance_hidden: Vec<NodeId>,
    /// Softmax nodes of every attention head, for introspection.
    pub attention: Vec<NodeId>,
}

pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d_model;
    let dk = d / cfg.heads;
    embedder::init_embedder(store, cfg.vocab_size, d, rng)?;
    store.insert_normal("enc.cls", 1, d, 0.1, rng)?;
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for w in ["wq", "wk", "wv"] {
                store.insert_normal(&format!("enc.l{l}.h{h}.{w}"), d, dk, 0.1, rng)?;
            }
        }
        store.insert_normal(&format!("enc.l{l}.wo"), d, d, 0.1, rng)?;
        store.insert_zeros(&format!("enc.l{l}.bo"), 1, d)?;
        store.insert_normal(&format!("enc.l{l}.w1"), d, cfg.ff_hidden, 0.1, rng)?;
        store.insert_zeros(&format!("enc.l{l}.b1"), 1, cfg.ff_hidden)?;
        store.insert_normal(&format!("enc.l{l}.w2"), cfg.ff_hidden, d, 0.1, rng)?;
        store.insert_zeros(&format!("enc.l{l}.b2"), 1, d)?;
    }
    store.insert_normal("dec.pos", cfg.max_tokens + 1, d, 0.1, rng)?;
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for w in ["wq", "wk", "wv"] {
                store.insert_normal(&format!("dec.l{l}.h{h}.{w}"), d, dk, 0.1, rng)?;
                store.insert_normal(&format!("dec.l{l}.c{h}.{w}"), d, dk, 0.1, rng)?;
            }
        }
        store.insert_normal(&format!("dec.l{l}.wo"), d, d, 0.1, rng)?;
        store.insert_zeros(&format!("dec.l{l}.bo"), 1, d)?;
        store.insert_normal(&format!("dec.l{l}.co"), d, d, 0.1, rng)?;
        store.insert_zeros(&format!("dec.l{l}.cbo"), 1, d)?;
        store.insert_normal(&format!("dec.l{l}.w1"), d, cfg.ff_hidden, 0.1, rng)?;
        store.insert_zeros(&format!("dec.l{l}.b1"), 1, cfg.ff_hidden)?;
        store.insert_normal(&format!("dec.l{l}.w2"), cfg.ff_hidden, d, 0.1, rng)?;
        store.insert_zeros(&format!("dec.l{l}.b2"), 1, d)?;
    }
    store.insert_normal("dec.out_w", d, cfg.vocab_size, 0.02, rng)?;
    store.insert_zeros("dec.out_b", 1, cfg.vocab_size)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    head_tag: char,
    queries: NodeId,
    keys_values: NodeId,
    mask: Option<&Tensor>,
    attention_out: &mut Vec<NodeId>,
) -> Result<NodeId> {
    let dk = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = tape.param(store, &format!("{prefix}.{head_tag}{h}.wq"))?;
        let wk = tape.param(store, &format!("{prefix}.{head_tag}{h}.wk"))?;
        let wv = tape.param(store, &format!("{prefix}.{head_tag}{h}.wv"))?;
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys_values, wk)?;
        let v = tape.matmul(keys_values, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            let mc = tape.constant(m.clone());
            scores = tape.add(scores, mc)?;
        }
        let probs = tape.softmax_rows(scores)?;
        attention_out.push(probs);
        heads.push(tape.matmul(probs, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let (wo, bo) = if head_tag == 'c' {
        (format!("{prefix}.co"), format!("{prefix}.cbo"))
    } else {
        (format!("{prefix}.wo"), format!("{prefix}.bo"))
    };
    let wo = tape.param(store, &wo)?;
    let bo = tape.param(store, &bo)?;
    let proj = tape.matmul(cat, wo)?;
    let proj = tape.add_bias(proj, bo)?;
    tape.add(queries, proj)
}

fn feed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    tape.add(x, h)
}

/// Transformer encoder over a positioned utterance sequence; a learned CLS
/// slot is prepended and its final hidden is the pooled summary E_CLS.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    positioned: NodeId,
) -> Result<EncoderState> {
    let n = tape.value(positioned).rows();
    let cls = tape.param(store, "enc.cls")?;
    let mut x = tape.concat_rows(&[cls, positioned])?;
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let prefix = format!("enc.l{l}");
        x = attention_block(tape, store, cfg, &prefix, 'h', x, x, None, &mut attention)?;
        x = feed_forward(tape, store, &prefix, x)?;
    }
    let cls_out = tape.pick_row(x, 0)?;
    let mut utterance_hidden = Vec::with_capacity(n);
    for i in 0..n {
        utterance_hidden.push(tape.pick_row(x, i + 1)?);
    }
    Ok(EncoderState { all: x, cls: cls_out, utterance_hidden, attention })
}

/// Embeds a state (utterance embedder + position encoding) and encodes it.
pub fn encode_state(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
) -> Result<EncoderState> {
    let positioned = embedder::embed_context(tape, store, state)?;
    encode(tape, store, cfg, positioned)
}

/// Forward-only encoder run; returns the hidden matrix value for reuse
/// across decode steps.
pub fn encode_state_value(store: &ParamStore, cfg: &ModelConfig, state: &[Utterance]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = encode_state(&mut tape, store, cfg, state)?;
    Ok(tape.value(enc.all).clone())
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = NEG_INF;
        }
    }
    Tensor::new(vec![n, n], data).expect("mask construction")
}

/// Decoder forward over `input_tokens` with cross-attention to the encoder
/// hiddens; returns the N x V logits node.
pub fn decode_logits(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    encoder_all: NodeId,
    input_tokens: &[usize],
) -> Result<NodeId> {
    if input_tokens.is_empty() {
        return Err(Error::Invalid("decoder needs at least one input token".into()));
    }
    if input_tokens.len() > cfg.max_tokens + 1 {
        return Err(Error::Invalid(format!(
            "decoder input of {} tokens exceeds cap {}",
            input_tokens.len(),
            cfg.max_tokens + 1
        )));
    }
    for &t in input_tokens {
        if t >= cfg.vocab_size {
            return Err(Error::Invalid(format!("token {t} outside vocab {}", cfg.vocab_size)));
        }
    }
    let n = input_tokens.len();
    let table = tape.param(store, TOKEN_TABLE)?;
    let tok = tape.gather_rows(table, input_tokens)?;
    let pos_table = tape.param(store, "dec.pos")?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mask = causal_mask(n);
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let prefix = format!("dec.l{l}");
        x = attention_block(tape, store, cfg, &prefix, 'h', x, x, Some(&mask), &mut attention)?;
        x = attention_block(tape, store, cfg, &prefix, 'c', x, encoder_all, None, &mut attention)?;
        x = feed_forward(tape, store, &prefix, x)?;
    }
    let out_w = tape.param(store, "dec.out_w")?;
    let out_b = tape.param(store, "dec.out_b")?;
    let logits = tape.matmul(x, out_w)?;
    tape.add_bias(logits, out_b)
}

/// Teacher-forced log probability of `targets` given `input_tokens`.
pub fn sequence_log_prob(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    encoder_all: NodeId,
    input_tokens: &[usize],
    targets: &[usize],
) -> Result<NodeId> {
    let logits = decode_logits(tape, store, cfg, encoder_all, input_tokens)?;
    let nll = tape.cross_entropy_rows(logits, targets)?;
    tape.scale(nll, -1.0)
}

fn teacher_forcing(response: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut resp = response.to_vec();
    if resp.last() == Some(&EOS) {
        resp.pop();
    }
    if resp.is_empty() {
        return Err(Error::Invalid("empty response".into()));
    }
    let mut input = vec![BOS];
    input.extend(&resp);
    let mut targets = resp;
    targets.push(EOS);
    Ok((input, targets))
}

/// Sum over decoder steps of log p(a_j | a_<j, s), including the closing EOS.
pub fn response_log_prob(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
    response: &[usize],
) -> Result<NodeId> {
    let (input, targets) = teacher_forcing(response)?;
    let enc = encode_state(tape, store, cfg, state)?;
    sequence_log_prob(tape, store, cfg, enc.all, &input, &targets)
}

/// Token-summed negative log likelihood of the response (the generation loss).
pub fn nll_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
    response: &[usize],
) -> Result<NodeId> {
    let lp = response_log_prob(tape, store, cfg, state, response)?;
    tape.scale(lp, -1.0)
}

/// Forward-only response log probability.
pub fn response_log_prob_value(
    store: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
    response: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = response_log_prob(&mut tape, store, cfg, state, response)?;
    tape.value(lp).scalar_value()
}

#[derive(Debug, Clone, Copy)]
struct StepMask {
    allow_eod: bool,
    first_step: bool,
}

fn step_log_probs(
    store: &ParamStore,
    cfg: &ModelConfig,
    encoder_all: &Tensor,
    prefix: &[usize],
    mask: StepMask,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = tape.constant(encoder_all.clone());
    let mut input = vec![BOS];
    input.extend(prefix);
    let logits = decode_logits(&mut tape, store, cfg, enc, &input)?;
    let row = tape.value(logits).row(input.len() - 1).to_vec();
    let mut masked = row;
    masked[PAD] = NEG_INF;
    masked[BOS] = NEG_INF;
    if !mask.allow_eod || !mask.first_step {
        // END-OF-DIALOG is only meaningful as the user's very first token
        if EOD < masked.len() {
            masked[EOD] = NEG_INF;
        }
    }
    if mask.first_step {
        masked[EOS] = NEG_INF;
    }
    let lse = crate::numkit::log_sum_exp(&masked);
    Ok(masked.into_iter().map(|x| x - lse).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic argmax decoding until EOS or the token cap.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    encoder_all: &Tensor,
    max_tokens: usize,
    allow_eod: bool,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    while out.len() < max_tokens {
        let lp = step_log_probs(
            store,
            cfg,
            encoder_all,
            &out,
            StepMask { allow_eod, first_step: out.is_empty() },
        )?;
        let t = argmax(&lp);
        if t == EOS {
            break;
        }
        out.push(t);
        if t == EOD {
            break;
        }
    }
    Ok(out)
}

/// Collects bigrams appearing in the agent's own prior utterances.
fn agent_bigrams(context: &[Utterance]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for u in context.iter().filter(|u| u.speaker == Speaker::Agent) {
        for w in u.tokens.windows(2) {
            let pair = (w[0], w[1]);
            if !out.contains(&pair) {
                out.push(pair);
            }
        }
    }
    out
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    slot: usize,
}

/// Diverse top-K generation: beam search of width 2K where each beam lane
/// carries its own randomly sampled set of blocked bigrams drawn from the
/// agent's prior utterances in the context. A blocked bigram's second token
/// is masked whenever its first token was just emitted.
pub fn top_k_generate(
    store: &ParamStore,
    cfg: &ModelConfig,
    encoder_all: &Tensor,
    context: &[Utterance],
    decode: &DecodeConfig,
) -> Result<TopKResult> {
    decode.validate()?;
    let k = decode.top_k;
    let width = 2 * k;
    let max_tokens = decode.max_tokens.min(cfg.max_tokens);

    let pool = agent_bigrams(context);
    let blocked_sets: Vec<Vec<(usize, usize)>> = (0..width)
        .map(|slot| {
            if !decode.blocking_enabled {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(
                decode.seed ^ (slot as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            pool.iter()
                .filter(|_| rng.gen_bool(0.5))
                .cloned()
                .collect()
        })
        .collect();

    // seed the beam: top `width` first tokens, lane i gets blocked set i
    let first = step_log_probs(
        store,
        cfg,
        encoder_all,
        &[],
        StepMask { allow_eod: false, first_step: true },
    )?;
    let mut order: Vec<usize> = (0..first.len()).collect();
    order.sort_by(|&a, &b| first[b].partial_cmp(&first[a]).unwrap().then(a.cmp(&b)));
    let mut live: Vec<Hypothesis> = order
        .into_iter()
        .filter(|&t| first[t] > NEG_INF / 2.0)
        .take(width)
        .enumerate()
        .map(|(slot, t)| Hypothesis { tokens: vec![t], log_prob: first[t], slot })
        .collect();
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut expansions: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            if hyp.tokens.len() >= max_tokens {
                finished.push(hyp.clone());
                continue;
            }
            let lp = step_log_probs(
                store,
                cfg,
                encoder_all,
                &hyp.tokens,
                StepMask { allow_eod: false, first_step: false },
            )?;
            let last = *hyp.tokens.last().unwrap();
            for (t, &tlp) in lp.iter().enumerate() {
                if tlp <= NEG_INF / 2.0 {
                    continue;
                }
                if blocked_sets[hyp.slot].contains(&(last, t)) {
                    continue;
                }
                if t == EOS {
                    finished.push(Hypothesis {
                        tokens: hyp.tokens.clone(),
                        log_prob: hyp.log_prob + tlp,
                        slot: hyp.slot,
                    });
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(t);
                    expansions.push(Hypothesis {
                        tokens,
                        log_prob: hyp.log_prob + tlp,
                        slot: hyp.slot,
                    });
                }
            }
        }
        expansions.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        expansions.truncate(width);
        live = expansions;
        if finished.len() >= width * 2 {
            break;
        }
    }

    finished.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let mut candidates: Vec<GenerationCandidate> = Vec::new();
    for h in finished {
        if candidates.iter().any(|c| c.tokens == h.tokens) {
            continue;
        }
        candidates.push(GenerationCandidate {
            tokens: h.tokens,
            log_prob: h.log_prob,
            rank: candidates.len() + 1,
            blocked: blocked_sets[h.slot].clone(),
        });
        if candidates.len() == k {
            break;
        }
    }
    let short_set = candidates.len() < k;
    Ok(TopKResult { candidates, short_set })
}

/// One user turn: greedy decode with the end-of-dialog token enabled. The
/// end flag is true only when END-OF-DIALOG is the very first token, in
/// which case the response is empty; mid-utterance END-OF-DIALOG is treated
/// as EOS.
pub fn user_act(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocab,
    user_state: &[Utterance],
    max_tokens: usize,
) -> Result<(Option<Utterance>, bool)> {
    let enc = encode_state_value(store, cfg, user_state)?;
    let mut tokens = greedy_decode(store, cfg, &enc, max_tokens, true)?;
    if tokens.first() == Some(&EOD) {
        return Ok((None, true));
    }
    if let Some(pos) = tokens.iter().position(|&t| t == EOD) {
        tokens.truncate(pos);
    }
    let text = vocab.decode(&tokens);
    Ok((
        Some(Utterance { speaker: Speaker::User, tokens, text }),
        false,
    ))
}
