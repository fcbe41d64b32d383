//! Minimal reverse-mode automatic differentiation and parameter management.
//! Every trainable loss in the crate is built from these primitives.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{log_sum_exp, Grads, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_normalized_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(&data).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            let out = tape.value(y).data();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(out.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn cosine_self_similarity() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(&[0.3, -1.2, 2.0]).unwrap());
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.value(c).scalar_value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(&[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        tape.accumulate_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_norm_sq_is_identity() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(&[1.5, -0.5, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(half).unwrap();
        tape.accumulate_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[1.5, -0.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::vector(&[1.0]).unwrap()).unwrap();
        store.insert("unused", Tensor::vector(&[1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "used").unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        tape.accumulate_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
    }

    fn two_layer_net(tape: &mut Tape, store: &ParamStore) -> crate::error::Result<NodeId> {
        let x = tape.constant(Tensor::vector(&[0.4, -0.7, 1.1, 0.2]).unwrap());
        let w1 = tape.param(store, "w1")?;
        let b1 = tape.param(store, "b1")?;
        let w2 = tape.param(store, "w2")?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.tanh(h)?;
        let out = tape.matmul(h, w2)?;
        let sq = tape.mul(out, out)?;
        tape.sum(sq)
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert_normal("w1", 4, 6, 0.5, &mut rng).unwrap();
        store.insert_normal("b1", 1, 6, 0.5, &mut rng).unwrap();
        store.insert_normal("w2", 6, 1, 0.5, &mut rng).unwrap();
        let report = grad_check(two_layer_net, &mut store, 1e-5, 1e-6, 8, 42).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_negative_control() {
        // Emulates a broken backward: the analytic pass (first call) sees a
        // scaled loss, finite-difference evaluations see the true one.
        let first = Cell::new(true);
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(&[0.7, -0.3]).unwrap()).unwrap();
        let report = grad_check(
            |tape, store| {
                let p = tape.param(store, "p")?;
                let sq = tape.mul(p, p)?;
                let s = tape.sum(sq)?;
                if first.replace(false) {
                    tape.scale(s, 2.0)
                } else {
                    Ok(s)
                }
            },
            &mut store,
            1e-5,
            1e-4,
            2,
            1,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn backward_is_deterministic() {
        let build = |store: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(store, "p").unwrap();
            let w = tape.param(store, "w").unwrap();
            let h = tape.matmul(p, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let sm = tape.softmax_rows(h).unwrap();
            let s = tape.sum(sm).unwrap();
            let e = tape.exp(s).unwrap();
            let grads = tape.backward(e).unwrap();
            let mut out = Vec::new();
            for id in 0..tape.len() {
                if let Some(g) = grads.of(id) {
                    out.extend_from_slice(g.data());
                }
            }
            out
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert_normal("p", 1, 4, 1.0, &mut rng).unwrap();
        store.insert_normal("w", 4, 4, 1.0, &mut rng).unwrap();
        let a = build(&store);
        let b = build(&store);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(&[1.0, -2.0]).unwrap()).unwrap();
        store.adam_step(0.1).unwrap();
        assert_eq!(store.value("p").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_descends_against_constant_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut prev = 1.0;
        for _ in 0..5 {
            store.accumulate_grad("p", &Tensor::scalar(1.0)).unwrap();
            store.adam_step(0.1).unwrap();
            let cur = store.value("p").unwrap().data()[0];
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(&[0.8, -0.6, 0.4]).unwrap()).unwrap();
        let mut last = f64::MAX;
        for _ in 0..200 {
            store.zero_grads();
            let mut tape = Tape::new();
            let p = tape.param(&store, "p").unwrap();
            let sq = tape.mul(p, p).unwrap();
            let s = tape.sum(sq).unwrap();
            let loss = tape.scale(s, 0.5).unwrap();
            last = tape.value(loss).scalar_value().unwrap();
            let grads = tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&grads, &mut store).unwrap();
            store.adam_step(0.05).unwrap();
        }
        assert!(last < 1e-4, "final loss {last}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(0.0)).unwrap();
        // overflow the accumulator to infinity
        store.accumulate_grad("theta", &Tensor::scalar(1e308)).unwrap();
        store.accumulate_grad("theta", &Tensor::scalar(1e308)).unwrap();
        let err = store.adam_step(0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.insert_normal("a.w", 3, 5, 0.33, &mut rng).unwrap();
        store.insert_normal("b.bias", 1, 7, 1.7, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ck");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.step_count(), store.step_count());
        for name in store.names() {
            let a = store.value(name).unwrap().data();
            let b = loaded.value(name).unwrap().data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 3, vec![0.2, -1.0, 0.5, 2.0, 0.0, -0.3]).unwrap());
        let ce = tape.cross_entropy_rows(logits, &[2, 0]).unwrap();
        let rows = [[0.2, -1.0, 0.5], [2.0, 0.0, -0.3]];
        let expected: f64 = (log_sum_exp(&rows[0]) - 0.5) + (log_sum_exp(&rows[1]) - 2.0);
        assert!((tape.value(ce).scalar_value().unwrap() - expected).abs() < 1e-12);
    }
}
