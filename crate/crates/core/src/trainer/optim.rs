//! Decoupled-weight-decay Adam on candle tensors.

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moments, one per parameter.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Parameters that receive weight decay.
    pub decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &[Var], decay_mask: Vec<bool>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let m = params.iter().map(|p| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            v: m.clone(),
            m,
            decay_mask,
        })
    }

    /// Gradients in parameter order; missing gradients become zeros.
    /// Detached, so the moments never hold on to a backward graph.
    pub fn collect_grads(params: &[Var], grads: &GradStore) -> Result<Vec<Tensor>> {
        Ok(params
            .iter()
            .map(|p| match grads.get(p.as_tensor()) {
                Some(g) => Ok(g.detach()),
                None => p.zeros_like(),
            })
            .collect::<candle_core::Result<Vec<_>>>()?)
    }

    /// Global L2 norm of a gradient list.
    pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
        let mut sq = 0f64;
        for g in grads {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }

    /// One update at 1-based step `t`. Gradients are clipped to `clip` global
    /// norm when `clip > 0`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &[Var], grads: &[Tensor], t: u64, lr: f64, weight_decay: f64, clip: f64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let norm = Self::global_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = p.as_tensor().detach();
            if self.decay_mask[i] && weight_decay > 0.0 {
                next = (next * (1.0 - lr * weight_decay))?;
            }
            next = (next - (update * lr)?)?;
            p.set(&next)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(&[p.clone()], vec![false], 0.9, 0.999, 1e-12).unwrap();
        let g = Tensor::new(&[0.5f64, -3.0], &Device::Cpu).unwrap();
        opt.step(&[p.clone()], &[g], 1, 0.1, 0.0, 0.0).unwrap();
        let v = p.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-9 && (v[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled_and_clipping_reports_raw_norm() {
        let p = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(&[p.clone()], vec![true], 0.9, 0.999, 1e-8).unwrap();
        let g = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        opt.step(&[p.clone()], &[g], 1, 0.1, 0.5, 3.0).unwrap();
        assert!((p.as_tensor().to_vec1::<f64>().unwrap()[0] - 1.9).abs() < 1e-12);
        let g = Tensor::new(&[30.0f64], &Device::Cpu).unwrap();
        assert_eq!(opt.step(&[p.clone()], &[g], 2, 0.1, 0.0, 3.0).unwrap(), 30.0);
    }
}
