//! Automatic evaluation: perplexity, corpus BLEU-4 with add-one smoothing,
//! pooled distinct-n, and embedding-based average/greedy/extrema similarity
//! over the learned token table. Embedding values are comparable across
//! checkpoints of this system only.

use crate::corpus::Utterance;
use crate::embedder::TOKEN_TABLE;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::numkit::{ParamStore, Tape};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl: f64,
    pub bleu4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub emb_average: f64,
    pub emb_greedy: f64,
    pub emb_extrema: f64,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
}

/// exp(total NLL / total target tokens); targets include the closing EOS.
pub fn perplexity(
    store: &ParamStore,
    cfg: &ModelConfig,
    pairs: &[(Vec<Utterance>, Utterance)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for (state, response) in pairs {
        let mut tape = Tape::new();
        let nll = model::nll_loss(&mut tape, store, cfg, state, &response.tokens)?;
        total_nll += tape.value(nll).scalar_value()?;
        total_tokens += response.tokens.len() + 1;
    }
    Ok(ppl_from_totals(total_nll, total_tokens))
}

pub fn ppl_from_totals(total_nll: f64, total_tokens: usize) -> f64 {
    (total_nll / total_tokens as f64).exp()
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with n = 1..4, brevity penalty, and add-one smoothing on
/// zero match counts.
pub fn bleu4(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("empty BLEU input".into()));
    }
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &cc {
                totals[n - 1] += count;
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut log_score = 0.0;
    for n in 0..4 {
        let (m, t) = if matches[n] == 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if t == 0 {
            return Err(Error::Invalid(format!("no {}-grams in candidates", n + 1)));
        }
        log_score += 0.25 * ((m as f64).ln() - (t as f64).ln());
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_score.exp())
}

/// Distinct n-grams over the pooled utterance set.
pub fn distinct_n(utterances: &[Vec<usize>], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Invalid(format!("distinct-n defined for n in {{1, 2}}, got {n}")));
    }
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for u in utterances {
        if u.len() >= n {
            for w in u.windows(n) {
                seen.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no n-grams in utterance pool".into()));
    }
    Ok(seen.len() as f64 / total as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn token_rows<'a>(table: &'a crate::numkit::Tensor, tokens: &[usize]) -> Vec<&'a [f64]> {
    tokens.iter().map(|&t| table.row(t)).collect()
}

fn mean_vector(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        for (o, &v) in out.iter_mut().zip(*r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

fn extrema_vector(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0f64; d];
    for r in rows {
        for (i, &v) in r.iter().enumerate() {
            if v.abs() > out[i].abs() {
                out[i] = v;
            }
        }
    }
    out
}

fn greedy_direction(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let mut acc = 0.0;
    for f in from {
        let best = to
            .iter()
            .map(|t| cosine(f, t))
            .fold(f64::NEG_INFINITY, f64::max);
        acc += best;
    }
    acc / from.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingMetrics {
    pub average: f64,
    pub greedy: f64,
    pub extrema: f64,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
}

/// Mean over pairs of AVG/GRE/EXT similarity on the token table; pairs with
/// an empty side are skipped and counted.
pub fn embedding_metrics(
    store: &ParamStore,
    candidates: &[Vec<usize>],
    references: &[Vec<usize>],
) -> Result<EmbeddingMetrics> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let table = store.value(TOKEN_TABLE)?;
    let mut avg = 0.0;
    let mut gre = 0.0;
    let mut ext = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (c, r) in candidates.iter().zip(references) {
        if c.is_empty() || r.is_empty() {
            skipped += 1;
            continue;
        }
        let cr = token_rows(table, c);
        let rr = token_rows(table, r);
        avg += cosine(&mean_vector(&cr), &mean_vector(&rr));
        gre += 0.5 * (greedy_direction(&cr, &rr) + greedy_direction(&rr, &cr));
        ext += cosine(&extrema_vector(&cr), &extrema_vector(&rr));
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Invalid("all embedding pairs were empty".into()));
    }
    Ok(EmbeddingMetrics {
        average: avg / evaluated as f64,
        greedy: gre / evaluated as f64,
        extrema: ext / evaluated as f64,
        pairs_evaluated: evaluated,
        pairs_skipped: skipped,
    })
}

/// Full report: greedy responses against references over an eval pair set.
pub fn evaluate_model(
    store: &ParamStore,
    cfg: &ModelConfig,
    pairs: &[(Vec<Utterance>, Utterance)],
    max_tokens: usize,
) -> Result<MetricReport> {
    let ppl = perplexity(store, cfg, pairs)?;
    let mut candidates = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    for (state, response) in pairs {
        let enc = model::encode_state_value(store, cfg, state)?;
        candidates.push(model::greedy_decode(store, cfg, &enc, max_tokens, false)?);
        references.push(response.tokens.clone());
    }
    let bleu = bleu4(&candidates, &references)?;
    let d1 = distinct_n(&candidates, 1)?;
    let d2 = distinct_n(&candidates, 2).unwrap_or(0.0);
    let emb = embedding_metrics(store, &candidates, &references)?;
    Ok(MetricReport {
        ppl,
        bleu4: bleu,
        distinct1: d1,
        distinct2: d2,
        emb_average: emb.average,
        emb_greedy: emb.greedy,
        emb_extrema: emb.extrema,
        pairs_evaluated: emb.pairs_evaluated,
        pairs_skipped: emb.pairs_skipped,
    })
}
