//! Two-dimensional rotary position embedding.
//!
//! The first half of each head's channels is rotated by the patch row, the
//! second half by the patch column. Within each half, channel `j` pairs with
//! channel `j + hd/4`, and pair `j` turns at frequency `base^(-j / (hd/4))`.
//! Prefix tokens (class, registers) are left unrotated.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RopeTables {
    /// `[tokens, head_dim]`
    pub cos: Tensor,
    pub sin: Tensor,
    /// `[head_dim, head_dim]` pair-swap with sign: `(a, b) -> (-b, a)`.
    pub swap: Tensor,
}

fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || head_dim % 4 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs a head dim divisible by 4, got {head_dim}"
        )));
    }
    Ok(())
}

/// Per-channel rotation angle for a token at `(row, col)`.
pub fn angles(head_dim: usize, base: f64, row: f64, col: f64) -> Vec<f64> {
    let quarter = head_dim / 4;
    let mut out = vec![0.0; head_dim];
    for j in 0..quarter {
        let freq = base.powf(-(j as f64) / quarter as f64);
        out[j] = row * freq;
        out[j + quarter] = row * freq;
        out[2 * quarter + j] = col * freq;
        out[3 * quarter + j] = col * freq;
    }
    out
}

fn swap_matrix(head_dim: usize) -> Vec<f64> {
    let quarter = head_dim / 4;
    let mut m = vec![0.0; head_dim * head_dim];
    for half in 0..2 {
        for j in 0..quarter {
            let a = half * 2 * quarter + j;
            let b = a + quarter;
            // (q·M)[a] = -q[b], (q·M)[b] = q[a]
            m[b * head_dim + a] = -1.0;
            m[a * head_dim + b] = 1.0;
        }
    }
    m
}

impl RopeTables {
    /// Tables for `prefix` unrotated tokens followed by a `rows × cols` patch grid.
    pub fn new(head_dim: usize, base: f64, prefix: usize, rows: usize, cols: usize, dtype: DType) -> Result<Self> {
        let coords: Vec<(f64, f64)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r as f64, c as f64)))
            .collect();
        Self::for_coords(head_dim, base, prefix, &coords, dtype)
    }

    pub fn for_coords(head_dim: usize, base: f64, prefix: usize, coords: &[(f64, f64)], dtype: DType) -> Result<Self> {
        check_head_dim(head_dim)?;
        let n = prefix + coords.len();
        let mut cos = vec![1.0; n * head_dim];
        let mut sin = vec![0.0; n * head_dim];
        for (t, &(r, c)) in coords.iter().enumerate() {
            let row = (prefix + t) * head_dim;
            for (k, a) in angles(head_dim, base, r, c).into_iter().enumerate() {
                cos[row + k] = a.cos();
                sin[row + k] = a.sin();
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            cos: Tensor::from_vec(cos, (n, head_dim), &dev)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (n, head_dim), &dev)?.to_dtype(dtype)?,
            swap: Tensor::from_vec(swap_matrix(head_dim), (head_dim, head_dim), &dev)?.to_dtype(dtype)?,
        })
    }

    /// Rotates `x: [..., tokens, head_dim]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let hd = *dims.last().unwrap();
        let rows = x.elem_count() / hd;
        let swapped = x.contiguous()?.reshape((rows, hd))?.matmul(&self.swap)?.reshape(dims)?;
        Ok((x.broadcast_mul(&self.cos)? + swapped.broadcast_mul(&self.sin)?)?)
    }
}

/// Rotates queries and keys at explicit grid coordinates (no prefix tokens).
/// `queries`/`keys`: `[..., tokens, head_dim]`, one coordinate per token.
pub fn rope_rotate(queries: &Tensor, keys: &Tensor, grid_coords: &[(f64, f64)], base: f64) -> Result<(Tensor, Tensor)> {
    let hd = *queries.dims().last().unwrap();
    let tables = RopeTables::for_coords(hd, base, 0, grid_coords, queries.dtype())?;
    Ok((tables.apply(queries)?, tables.apply(keys)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::from_vec(v, (1, n), &Device::Cpu).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        (a * b).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn origin_is_identity() {
        let q = randn(16, 1);
        let (rq, _) = rope_rotate(&q, &q, &[(0.0, 0.0)], 100.0).unwrap();
        assert_eq!(rq.to_vec2::<f64>().unwrap(), q.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn rotation_preserves_norm() {
        for seed in 0..10 {
            let q = randn(32, seed);
            let (rq, _) = rope_rotate(&q, &q, &[(3.0, 5.0)], 100.0).unwrap();
            assert!((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_depend_only_on_offset() {
        let q = randn(16, 7);
        let k = randn(16, 8);
        let score = |p1: (f64, f64), p2: (f64, f64)| {
            let (rq, _) = rope_rotate(&q, &q, &[p1], 100.0).unwrap();
            let (_, rk) = rope_rotate(&k, &k, &[p2], 100.0).unwrap();
            dot(&rq, &rk)
        };
        let base = score((1.0, 2.0), (0.0, 0.0));
        for (p1, p2) in [((3.0, 4.0), (2.0, 2.0)), ((6.0, 2.0), (5.0, 0.0)), ((1.0, 7.0), (0.0, 5.0))] {
            assert!((score(p1, p2) - base).abs() < 1e-10);
        }
        assert!((score((0.0, 0.0), (1.0, 2.0)) - base).abs() > 1e-6);
    }

    #[test]
    fn head_dim_must_split_in_quarters() {
        let q = randn(6, 1);
        assert!(matches!(rope_rotate(&q, &q, &[(0.0, 0.0)], 100.0), Err(Error::Config(_))));
    }
}
