//! Shaped reward estimator: the scoring network g over (state, action)
//! features, the shaping network h over pre-sigmoid annotation scores,
//! discounted returns, the Boltzmann form for enumerable test spaces, and
//! the three-way bucket gradient update.

use crate::corpus::Utterance;
use crate::embedder;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::numkit::{log_sum_exp, NodeId, ParamStore, Tape, Tensor};
use crate::simulation::{recover_pre_sigmoid, WeakPair};
use rand_chacha::ChaCha8Rng;

pub const G_W1: &str = "g.w1";
pub const G_B1: &str = "g.b1";
pub const G_W2: &str = "g.w2";
pub const G_B2: &str = "g.b2";
pub const G_W3: &str = "g.w3";
pub const G_B3: &str = "g.b3";
pub const H_W1: &str = "h.w1";
pub const H_B1: &str = "h.b1";
pub const H_W2: &str = "h.w2";
pub const H_B2: &str = "h.b2";

const L2_PENALTY: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RewardConfig {
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { gamma: 0.95 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedReward {
    pub value: f64,
    pub g: f64,
    pub gamma_h_next: f64,
    pub h_prev: f64,
}

/// Frozen per-pair inputs to the reward networks.
#[derive(Debug, Clone)]
pub struct RewardInput {
    /// concat(E_CLS of the state, action utterance vector), length 2d.
    pub features: Vec<f64>,
    /// Pre-sigmoid score vector of the pair itself (feeds h at s_{t+1}).
    pub pre_sigmoid: [f64; 3],
}

/// g gets two hidden layers (128, 64); h gets the literal width-1 hidden
/// layer.
pub fn init_reward(store: &mut ParamStore, d_model: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert_normal(G_W1, 2 * d_model, 128, 0.1, rng)?;
    store.insert_zeros(G_B1, 1, 128)?;
    store.insert_normal(G_W2, 128, 64, 0.1, rng)?;
    store.insert_zeros(G_B2, 1, 64)?;
    store.insert_normal(G_W3, 64, 1, 0.1, rng)?;
    store.insert_zeros(G_B3, 1, 1)?;
    store.insert_normal(H_W1, 3, 1, 0.1, rng)?;
    store.insert_zeros(H_B1, 1, 1)?;
    store.insert_normal(H_W2, 1, 1, 0.1, rng)?;
    store.insert_zeros(H_B2, 1, 1)?;
    Ok(())
}

/// Features for a weak pair: state summary from the frozen agent encoder
/// plus the action's utterance vector; pre-sigmoid recovered from the
/// stored scores.
pub fn reward_input(agent: &ParamStore, cfg: &ModelConfig, pair: &WeakPair) -> Result<RewardInput> {
    pair_input(agent, cfg, &pair.state, &pair.action, recover_pre_sigmoid(&pair.scores))
}

pub fn pair_input(
    agent: &ParamStore,
    cfg: &ModelConfig,
    state: &[Utterance],
    action: &Utterance,
    pre_sigmoid: [f64; 3],
) -> Result<RewardInput> {
    let mut tape = Tape::new();
    let enc = model::encode_state(&mut tape, agent, cfg, state)?;
    let mut features = tape.value(enc.cls).data().to_vec();
    features.extend(embedder::utterance_vector(agent, action)?);
    Ok(RewardInput { features, pre_sigmoid })
}

fn g_node(tape: &mut Tape, store: &ParamStore, features: &[f64]) -> Result<NodeId> {
    let x = tape.constant(Tensor::vector(features)?);
    let w1 = tape.param(store, G_W1)?;
    let b1 = tape.param(store, G_B1)?;
    let w2 = tape.param(store, G_W2)?;
    let b2 = tape.param(store, G_B2)?;
    let w3 = tape.param(store, G_W3)?;
    let b3 = tape.param(store, G_B3)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    let h = tape.tanh(h)?;
    let z = tape.matmul(h, w3)?;
    tape.add_bias(z, b3)
}

fn h_node(tape: &mut Tape, store: &ParamStore, pre_sigmoid: &[f64; 3]) -> Result<NodeId> {
    let x = tape.constant(Tensor::vector(pre_sigmoid)?);
    let w1 = tape.param(store, H_W1)?;
    let b1 = tape.param(store, H_B1)?;
    let w2 = tape.param(store, H_W2)?;
    let b2 = tape.param(store, H_B2)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h)?;
    let z = tape.matmul(h, w2)?;
    tape.add_bias(z, b2)
}

/// Differentiable f = g(s, a) + gamma * h(s') - h(s) on the given tape;
/// `prev_pre_sigmoid` of None means the episode-initial zero vector.
pub fn f_node(
    tape: &mut Tape,
    store: &ParamStore,
    rcfg: &RewardConfig,
    input: &RewardInput,
    prev_pre_sigmoid: Option<[f64; 3]>,
) -> Result<NodeId> {
    let g = g_node(tape, store, &input.features)?;
    let h_next = h_node(tape, store, &input.pre_sigmoid)?;
    let h_prev = h_node(tape, store, &prev_pre_sigmoid.unwrap_or([0.0; 3]))?;
    let scaled = tape.scale(h_next, rcfg.gamma)?;
    let sum = tape.add(g, scaled)?;
    tape.sub(sum, h_prev)
}

/// Forward-only shaped reward with its components.
pub fn f_shaped(
    store: &ParamStore,
    rcfg: &RewardConfig,
    input: &RewardInput,
    prev_pre_sigmoid: Option<[f64; 3]>,
) -> Result<ShapedReward> {
    rcfg.validate()?;
    let mut tape = Tape::new();
    let g = g_node(&mut tape, store, &input.features)?;
    let h_next = h_node(&mut tape, store, &input.pre_sigmoid)?;
    let h_prev = h_node(&mut tape, store, &prev_pre_sigmoid.unwrap_or([0.0; 3]))?;
    let g = tape.value(g).scalar_value()?;
    let h_next = tape.value(h_next).scalar_value()?;
    let h_prev = tape.value(h_prev).scalar_value()?;
    Ok(ShapedReward {
        value: g + rcfg.gamma * h_next - h_prev,
        g,
        gamma_h_next: rcfg.gamma * h_next,
        h_prev,
    })
}

/// Shaped rewards along one episode's ordered agent pairs; each pair's
/// h(s_t) consumes the previous pair's pre-sigmoid vector.
pub fn episode_shaped_rewards(
    store: &ParamStore,
    rcfg: &RewardConfig,
    inputs: &[RewardInput],
) -> Result<Vec<ShapedReward>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut prev: Option<[f64; 3]> = None;
    for input in inputs {
        out.push(f_shaped(store, rcfg, input, prev)?);
        prev = Some(input.pre_sigmoid);
    }
    Ok(out)
}

/// Return-to-go: sum over t >= k of gamma^(t-k) * r_t.
pub fn discounted_return(rewards: &[f64], gamma: f64, from: usize) -> Result<f64> {
    if from >= rewards.len() {
        return Err(Error::Invalid(format!(
            "return start {from} outside trajectory of {}",
            rewards.len()
        )));
    }
    let mut acc = 0.0;
    let mut weight = 1.0;
    for &r in &rewards[from..] {
        acc += weight * r;
        weight *= gamma;
    }
    Ok(acc)
}

/// Exact Boltzmann probabilities over an enumerable return set,
/// log-sum-exp stabilized.
pub fn boltzmann_distribution(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(Error::Invalid("empty return set".into()));
    }
    let z = log_sum_exp(returns);
    Ok(returns.iter().map(|&r| (r - z).exp()).collect())
}

/// The ascent surrogate 0.5*mean_H f + mean_V f - mean_L f - l2*|w|^2,
/// whose gradient is the three-way bucket rule.
pub fn reward_surrogate(
    tape: &mut Tape,
    store: &ParamStore,
    rcfg: &RewardConfig,
    h_bucket: &[RewardInput],
    v_bucket: &[RewardInput],
    l_bucket: &[RewardInput],
    l2: f64,
) -> Result<NodeId> {
    if h_bucket.is_empty() && v_bucket.is_empty() && l_bucket.is_empty() {
        return Err(Error::Invalid("all reward buckets are empty".into()));
    }
    let bucket_mean = |tape: &mut Tape, bucket: &[RewardInput]| -> Result<Option<NodeId>> {
        if bucket.is_empty() {
            return Ok(None);
        }
        let mut terms = Vec::with_capacity(bucket.len());
        for input in bucket {
            terms.push(f_node(tape, store, rcfg, input, None)?);
        }
        let stacked = tape.concat_cols(&terms)?;
        Ok(Some(tape.mean(stacked)?))
    };
    let mut total = tape.scalar(0.0);
    if let Some(m) = bucket_mean(tape, h_bucket)? {
        let half = tape.scale(m, 0.5)?;
        total = tape.add(total, half)?;
    }
    if let Some(m) = bucket_mean(tape, v_bucket)? {
        total = tape.add(total, m)?;
    }
    if let Some(m) = bucket_mean(tape, l_bucket)? {
        let neg = tape.scale(m, -1.0)?;
        total = tape.add(total, neg)?;
    }
    if l2 > 0.0 {
        let mut sq_terms = Vec::new();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let p = tape.param(store, &name)?;
            let pp = tape.mul(p, p)?;
            sq_terms.push(tape.sum(pp)?);
        }
        let stacked = tape.concat_cols(&sq_terms)?;
        let norm = tape.sum(stacked)?;
        let penalty = tape.scale(norm, -l2)?;
        total = tape.add(total, penalty)?;
    }
    Ok(total)
}

/// One Adam ascent step on the bucket surrogate (bucket weights 0.5 / 1 /
/// -1 plus the L2 term).
pub fn reward_objective_grad_step(
    store: &mut ParamStore,
    rcfg: &RewardConfig,
    h_bucket: &[RewardInput],
    v_bucket: &[RewardInput],
    l_bucket: &[RewardInput],
    lr: f64,
) -> Result<()> {
    rcfg.validate()?;
    let mut tape = Tape::new();
    let objective = reward_surrogate(&mut tape, store, rcfg, h_bucket, v_bucket, l_bucket, L2_PENALTY)?;
    // ascend: minimize the negated surrogate
    let loss = tape.scale(objective, -1.0)?;
    let grads = tape.backward(loss)?;
    store.zero_grads();
    tape.accumulate_param_grads(&grads, store)?;
    store.adam_step(lr)
}

/// Monitoring: mean f over V and H minus mean f over L.
pub fn pairwise_margin(
    store: &ParamStore,
    rcfg: &RewardConfig,
    h_bucket: &[RewardInput],
    v_bucket: &[RewardInput],
    l_bucket: &[RewardInput],
) -> Result<f64> {
    if (h_bucket.is_empty() && v_bucket.is_empty()) || l_bucket.is_empty() {
        return Err(Error::Invalid("pairwise margin needs both sides populated".into()));
    }
    let mut pos = 0.0;
    for input in h_bucket.iter().chain(v_bucket) {
        pos += f_shaped(store, rcfg, input, None)?.value;
    }
    pos /= (h_bucket.len() + v_bucket.len()) as f64;
    let mut neg = 0.0;
    for input in l_bucket {
        neg += f_shaped(store, rcfg, input, None)?.value;
    }
    neg /= l_bucket.len() as f64;
    Ok(pos - neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use rand::{Rng, SeedableRng};

    const D: usize = 8;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_reward(&mut s, D, &mut rng).unwrap();
        s
    }

    fn random_input(rng: &mut ChaCha8Rng) -> RewardInput {
        RewardInput {
            features: (0..2 * D).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            pre_sigmoid: [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
            ],
        }
    }

    #[test]
    fn decomposition_identity_holds() {
        let s = store(1);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let input = random_input(&mut rng);
            let prev = Some([rng.gen_range(-1.0..1.0), 0.3, -0.2]);
            let f = f_shaped(&s, &rcfg, &input, prev).unwrap();
            assert!((f.value - (f.g + f.gamma_h_next - f.h_prev)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_h_reduces_to_g() {
        let mut s = store(3);
        *s.value_mut(H_W2).unwrap() = Tensor::zeros(1, 1);
        *s.value_mut(H_B2).unwrap() = Tensor::zeros(1, 1);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_input(&mut rng);
        let f = f_shaped(&s, &rcfg, &input, Some([1.0, -1.0, 0.5])).unwrap();
        assert_eq!(f.value, f.g);
        assert_eq!(f.gamma_h_next, 0.0);
        assert_eq!(f.h_prev, 0.0);
    }

    #[test]
    fn constant_h_cancels_at_gamma_one() {
        let mut s = store(5);
        // h(x) = w2 * tanh(b1) + b2 regardless of x
        *s.value_mut(H_W1).unwrap() = Tensor::zeros(3, 1);
        *s.value_mut(H_B1).unwrap() = Tensor::scalar(0.7);
        let rcfg = RewardConfig { gamma: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_input(&mut rng);
        let f = f_shaped(&s, &rcfg, &input, Some([2.0, -3.0, 0.1])).unwrap();
        assert!((f.value - f.g).abs() < 1e-12);
    }

    #[test]
    fn hand_shaped_value() {
        // g=0.5, h(s')=1, h(s)=2, gamma=0.95 -> 0.5 + 0.95 - 2 = -0.55
        let value: f64 = 0.5 + 0.95 * 1.0 - 2.0;
        assert!((value + 0.55).abs() < 1e-12);
        // and the struct reproduces the same arithmetic
        let f = ShapedReward { value, g: 0.5, gamma_h_next: 0.95, h_prev: 2.0 };
        assert!((f.value - (f.g + f.gamma_h_next - f.h_prev)).abs() < 1e-12);
    }

    #[test]
    fn discounted_return_hand_values() {
        assert_eq!(discounted_return(&[3.0], 0.9, 0).unwrap(), 3.0);
        assert!((discounted_return(&[1.0, 1.0], 0.5, 0).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(discounted_return(&[2.0, 9.0, 9.0], 0.0, 0).unwrap(), 2.0);
        assert_eq!(discounted_return(&[1.0, 2.0], 0.5, 1).unwrap(), 2.0);
        assert!(discounted_return(&[1.0], 0.5, 1).is_err());
    }

    #[test]
    fn boltzmann_hand_values() {
        let p = boltzmann_distribution(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = boltzmann_distribution(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(boltzmann_distribution(&[]).is_err());
    }

    #[test]
    fn boltzmann_normalizes_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = boltzmann_distribution(&r).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
            let shift = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let q = boltzmann_distribution(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l_only_step_decreases_f() {
        let mut s = store(8);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_input(&mut rng);
        let before = f_shaped(&s, &rcfg, &input, None).unwrap().value;
        reward_objective_grad_step(&mut s, &rcfg, &[], &[], std::slice::from_ref(&input), 1e-3)
            .unwrap();
        let after = f_shaped(&s, &rcfg, &input, None).unwrap().value;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn identical_pair_in_v_and_l_cancels() {
        let s = store(10);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_input(&mut rng);
        let mut tape = Tape::new();
        let obj = reward_surrogate(
            &mut tape,
            &s,
            &rcfg,
            &[],
            std::slice::from_ref(&input),
            std::slice::from_ref(&input),
            0.0,
        )
        .unwrap();
        let grads = tape.backward(obj).unwrap();
        let mut s2 = s.clone();
        s2.zero_grads();
        tape.accumulate_param_grads(&grads, &mut s2).unwrap();
        for name in s2.names().map(str::to_string).collect::<Vec<_>>() {
            for &g in s2.grad(&name).unwrap().data() {
                assert!(g.abs() < 1e-12, "{name} grad {g}");
            }
        }
    }

    #[test]
    fn all_buckets_empty_is_an_error() {
        let mut s = store(12);
        let rcfg = RewardConfig::default();
        assert!(reward_objective_grad_step(&mut s, &rcfg, &[], &[], &[], 1e-3).is_err());
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut s = store(13);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h: Vec<RewardInput> = (0..2).map(|_| random_input(&mut rng)).collect();
        let v: Vec<RewardInput> = (0..2).map(|_| random_input(&mut rng)).collect();
        let l: Vec<RewardInput> = (0..2).map(|_| random_input(&mut rng)).collect();
        let report = grad_check(
            |tape, store| reward_surrogate(tape, store, &rcfg, &h, &v, &l, L2_PENALTY),
            &mut s,
            1e-5,
            1e-4,
            4,
            15,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn shaping_telescopes_at_gamma_one() {
        let s = store(16);
        let rcfg = RewardConfig { gamma: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h_of = |x: &[f64; 3]| -> f64 {
            let mut tape = Tape::new();
            let n = h_node(&mut tape, &s, x).unwrap();
            tape.value(n).scalar_value().unwrap()
        };
        for _ in 0..100 {
            let len = rng.gen_range(1..8);
            let inputs: Vec<RewardInput> = (0..len).map(|_| random_input(&mut rng)).collect();
            let rewards = episode_shaped_rewards(&s, &rcfg, &inputs).unwrap();
            let shaping_sum: f64 = rewards.iter().map(|r| r.gamma_h_next - r.h_prev).sum();
            let expect = h_of(&inputs.last().unwrap().pre_sigmoid) - h_of(&[0.0; 3]);
            assert!((shaping_sum - expect).abs() < 1e-9, "{shaping_sum} vs {expect}");
        }
    }

    #[test]
    fn training_separates_a_separable_toy_set() {
        let mut s = store(18);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // positives cluster at +0.8, negatives at -0.8 in feature space
        let make = |center: f64, rng: &mut ChaCha8Rng| RewardInput {
            features: (0..2 * D).map(|_| center + rng.gen_range(-0.1..0.1)).collect(),
            pre_sigmoid: [center, center, center / 2.0],
        };
        let v: Vec<RewardInput> = (0..8).map(|_| make(0.8, &mut rng)).collect();
        let h: Vec<RewardInput> = (0..8).map(|_| make(0.6, &mut rng)).collect();
        let l: Vec<RewardInput> = (0..8).map(|_| make(-0.8, &mut rng)).collect();
        for _ in 0..200 {
            reward_objective_grad_step(&mut s, &rcfg, &h, &v, &l, 0.05).unwrap();
        }
        let margin = pairwise_margin(&s, &rcfg, &h, &v, &l).unwrap();
        assert!(margin > 1.0, "margin {margin}");
    }

    #[test]
    fn margin_is_zero_for_identical_features() {
        let s = store(20);
        let rcfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_input(&mut rng);
        let m = pairwise_margin(
            &s,
            &rcfg,
            &[],
            std::slice::from_ref(&input),
            std::slice::from_ref(&input),
        )
        .unwrap();
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn gamma_validation() {
        assert!(RewardConfig { gamma: 0.0 }.validate().is_err());
        assert!(RewardConfig { gamma: 1.2 }.validate().is_err());
        assert!(RewardConfig { gamma: 1.0 }.validate().is_ok());
        assert!(RewardConfig::default().validate().is_ok());
    }
}
