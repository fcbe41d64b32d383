//! Trainable sentence embedder (mean-pooled token embeddings through one
//! affine+tanh layer) and role-parity position embeddings. Stands in for a
//! pretrained sentence encoder behind the same interface.

use crate::corpus::{Speaker, Utterance, MAX_STATE_UTTERANCES};
use crate::error::{Error, Result};
use crate::numkit::{NodeId, ParamStore, Tape};
use rand_chacha::ChaCha8Rng;

pub const TOKEN_TABLE: &str = "embed.tokens";
pub const AFFINE_W: &str = "embed.w";
pub const AFFINE_B: &str = "embed.b";
pub const POSITION_TABLE: &str = "embed.pos";

pub fn init_embedder(
    store: &mut ParamStore,
    vocab_size: usize,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_normal(TOKEN_TABLE, vocab_size, d_model, 0.1, rng)?;
    store.insert_normal(AFFINE_W, d_model, d_model, 0.1, rng)?;
    store.insert_zeros(AFFINE_B, 1, d_model)?;
    store.insert_normal(POSITION_TABLE, MAX_STATE_UTTERANCES, d_model, 0.1, rng)?;
    Ok(())
}

/// Mean of learned token embeddings through one affine+tanh layer. Output
/// components are bounded in (-1, 1) by the tanh.
pub fn embed_utterance(tape: &mut Tape, store: &ParamStore, utterance: &Utterance) -> Result<NodeId> {
    if utterance.tokens.is_empty() {
        return Err(Error::Invalid("cannot embed empty utterance".into()));
    }
    let table = tape.param(store, TOKEN_TABLE)?;
    let rows = tape.gather_rows(table, &utterance.tokens)?;
    let pooled = tape.mean_rows(rows)?;
    let w = tape.param(store, AFFINE_W)?;
    let b = tape.param(store, AFFINE_B)?;
    let affine = tape.matmul(pooled, w)?;
    let affine = tape.add_bias(affine, b)?;
    tape.tanh(affine)
}

/// Adds the learned position table to a stack of utterance vectors. Roles
/// must match index parity: user at odd 1-based positions, agent at even.
pub fn position_encode(
    tape: &mut Tape,
    store: &ParamStore,
    vectors: &[NodeId],
    roles: &[Speaker],
) -> Result<NodeId> {
    if vectors.len() != roles.len() {
        return Err(Error::Invalid("vectors/roles length mismatch".into()));
    }
    if vectors.len() > MAX_STATE_UTTERANCES {
        return Err(Error::Invalid(format!(
            "sequence of {} utterances exceeds the {} cap",
            vectors.len(),
            MAX_STATE_UTTERANCES
        )));
    }
    for (i, role) in roles.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
        if *role != expected {
            return Err(Error::Invalid(format!(
                "role parity mismatch at position {}: expected {:?}",
                i + 1,
                expected
            )));
        }
    }
    let stacked = tape.concat_rows(vectors)?;
    let table = tape.param(store, POSITION_TABLE)?;
    let indices: Vec<usize> = (0..vectors.len()).collect();
    let pos = tape.gather_rows(table, &indices)?;
    tape.add(stacked, pos)
}

/// Embeds each utterance of a state and applies position encoding.
pub fn embed_context(tape: &mut Tape, store: &ParamStore, state: &[Utterance]) -> Result<NodeId> {
    if state.is_empty() {
        return Err(Error::Invalid("cannot embed empty context".into()));
    }
    let mut vectors = Vec::with_capacity(state.len());
    let mut roles = Vec::with_capacity(state.len());
    for u in state {
        vectors.push(embed_utterance(tape, store, u)?);
        roles.push(u.speaker);
    }
    position_encode(tape, store, &vectors, &roles)
}

/// Plain-value utterance vector (no gradient consumers); used by the flow
/// module at annotation time and by embedding metrics.
pub fn utterance_vector(store: &ParamStore, utterance: &Utterance) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let id = embed_utterance(&mut tape, store, utterance)?;
    Ok(tape.value(id).data().to_vec())
}
