//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::Result;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares tape gradients of a scalar loss against central finite
/// differences on sampled parameter coordinates.
///
/// The loss builder must be deterministic given the store contents. Relative
/// error is `|a - n| / max(1, |a|, |n|)` so near-zero gradients are compared
/// absolutely, which keeps finite-difference round-off from dominating.
pub fn grad_check<F>(
    mut loss: F,
    params: &mut ParamStore,
    epsilon: f64,
    tolerance: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_grads(&mut loss, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();

    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let mut checked = 0;
    for name in names {
        let len = params.value(&name)?.len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        coords.truncate(samples_per_param.min(len));
        for idx in coords {
            let orig = params.value(&name)?.data()[idx];
            params.value_mut(&name)?.data_mut()[idx] = orig + epsilon;
            let up = eval(&mut loss, params)?;
            params.value_mut(&name)?.data_mut()[idx] = orig - epsilon;
            let down = eval(&mut loss, params)?;
            params.value_mut(&name)?.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[&name].get(idx).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        tolerance,
    })
}

fn eval<F>(loss: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let root = loss(&mut tape, params)?;
    tape.value(root).scalar_value()
}

fn analytic_grads<F>(loss: &mut F, params: &mut ParamStore) -> Result<IndexMap<String, Vec<f64>>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let root = loss(&mut tape, params)?;
    let grads = tape.backward(root)?;
    tape.accumulate_param_grads(&grads, params)?;
    let out = params
        .names()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .into_iter()
        .map(|name| {
            let g = params.grad(&name).unwrap().data().to_vec();
            (name, g)
        })
        .collect();
    params.zero_grads();
    Ok(out)
}
