use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::backbone::ops::{scalar, to_f64_vec};
use crate::error::{Error, Result};
use crate::rng;

/// Relative errors below this magnitude of gradient are measured absolutely.
const REL_FLOOR: f64 = 1e-7;

/// Compares the autodiff gradient of `loss_fn` with central differences of
/// width `2·step` at `probe_count` seeded coordinates. Returns the largest
/// relative error `|a − n| / max(|a|, |n|, 1e-7)`.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], probe_count: usize, step: f64, seed: u64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if params.iter().any(|p| p.dtype() != DType::F64) {
        return Err(Error::invalid("gradient checks run in double precision only"));
    }
    let total: usize = params.iter().map(|p| p.elem_count()).sum();
    if total == 0 {
        return Err(Error::invalid("no parameters to check"));
    }
    let vars = params.iter().map(|p| Var::from_tensor(p)).collect::<candle_core::Result<Vec<_>>>()?;
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = loss_fn(&live)?.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => to_f64_vec(g),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect::<Result<_>>()?;

    let mut r = rng::stream(seed, &[0x6772_6164]);
    let mut worst = 0f64;
    for _ in 0..probe_count {
        let mut flat = r.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].elem_count() {
            flat -= params[which].elem_count();
            which += 1;
        }
        let base = to_f64_vec(&params[which])?;
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[flat] += delta;
            let mut moved = params.to_vec();
            moved[which] = Tensor::from_vec(v, params[which].dims(), params[which].device())?;
            scalar(&loss_fn(&moved)?)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        let a = analytic[which][flat];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
