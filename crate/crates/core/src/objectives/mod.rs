//! Loss terms for teacher–student training and the Sinkhorn assignment.
//!
//! Every loss takes and returns candle tensors so it can sit inside the
//! training graph. Teacher-side inputs are detached on entry.

mod gradcheck;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::ops::{l2_normalize, log_softmax_last, scalar, to_f64_vec};
use crate::error::{Error, Result};

pub use gradcheck::grad_check;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_k: f64,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub infonce_temp: f64,
    pub koleo_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_k: 0.1,
            lambda_g: 0.7,
            lambda_c: 0.25,
            student_temp: 0.1,
            teacher_temp: 0.07,
            infonce_temp: 0.1,
            koleo_eps: 1e-6,
            sinkhorn_iters: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("student_temp", self.student_temp),
            ("teacher_temp", self.teacher_temp),
            ("infonce_temp", self.infonce_temp),
            ("koleo_eps", self.koleo_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_k", self.lambda_k),
            ("lambda_g", self.lambda_g),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be non-negative, got {v}")));
            }
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("loss.sinkhorn_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms in training order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub image: f64,
    pub patch: f64,
    pub koleo: f64,
    pub gram: f64,
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image: f64,
    pub patch: f64,
    pub koleo: f64,
    pub gram: f64,
    pub contrast: f64,
    pub total: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("image", self.image),
            ("patch", self.patch),
            ("koleo", self.koleo),
            ("gram", self.gram),
            ("contrast", self.contrast),
        ]
    }
}

/// Weighted sum of the five terms; the Gram term counts only when `gram_active`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, gram_active: bool) -> Result<LossBreakdown> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite ({v})")));
        }
    }
    let g = if gram_active { 1.0 } else { 0.0 };
    let total = parts.image
        + weights.lambda_p * parts.patch
        + weights.lambda_k * parts.koleo
        + weights.lambda_g * parts.gram * g
        + weights.lambda_c * parts.contrast;
    Ok(LossBreakdown {
        image: parts.image,
        patch: parts.patch,
        koleo: parts.koleo,
        gram: parts.gram,
        contrast: parts.contrast,
        total,
    })
}

/// Loss terms still attached to the graph.
#[derive(Clone, Debug)]
pub struct LossTensors {
    pub image: Tensor,
    pub patch: Tensor,
    pub koleo: Tensor,
    pub gram: Option<Tensor>,
    pub contrast: Tensor,
}

impl LossTensors {
    /// Differentiable total plus the scalar breakdown. Terms with zero weight
    /// are kept out of the graph.
    pub fn combine(&self, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
        let parts = LossParts {
            image: scalar(&self.image)?,
            patch: scalar(&self.patch)?,
            koleo: scalar(&self.koleo)?,
            gram: match &self.gram {
                Some(g) => scalar(g)?,
                None => 0.0,
            },
            contrast: scalar(&self.contrast)?,
        };
        let breakdown = total_loss(&parts, weights, self.gram.is_some())?;
        let mut total = self.image.clone();
        for (t, w) in [
            (Some(&self.patch), weights.lambda_p),
            (Some(&self.koleo), weights.lambda_k),
            (self.gram.as_ref(), weights.lambda_g),
            (Some(&self.contrast), weights.lambda_c),
        ] {
            if let Some(t) = t {
                if w != 0.0 {
                    total = (total + (t * w)?)?;
                }
            }
        }
        Ok((total, breakdown))
    }
}

/// Balanced soft assignments on plain row-major `[b, k]` logits.
pub fn sinkhorn(logits: &[f64], b: usize, k: usize, teacher_temp: f64, n_iters: usize) -> Result<Vec<f64>> {
    if b < 2 || k < 2 || logits.len() != b * k {
        return Err(Error::invalid(format!(
            "sinkhorn needs a [B, K] matrix with B, K >= 2 (got {} values for {b}x{k})",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sinkhorn received NaN or Inf logits".into()));
    }
    // A global shift cancels under normalization and keeps exp in range.
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logits.iter().map(|v| ((v - max) / teacher_temp).exp()).collect();
    let col_target = b as f64 / k as f64;
    for _ in 0..n_iters {
        for c in 0..k {
            let s: f64 = (0..b).map(|r| q[r * k + c]).sum();
            if s > 0.0 {
                let f = col_target / s;
                (0..b).for_each(|r| q[r * k + c] *= f);
            }
        }
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
    }
    Ok(q)
}

/// Sinkhorn–Knopp assignments for `[B, K]` teacher logits. Detached.
pub fn sinkhorn_assign(teacher_logits: &Tensor, teacher_temp: f64, n_iters: usize) -> Result<Tensor> {
    let (b, k) = teacher_logits.dims2()?;
    let q = sinkhorn(&to_f64_vec(teacher_logits)?, b, k, teacher_temp, n_iters)?;
    Ok(Tensor::from_vec(q, (b, k), &Device::Cpu)?.to_dtype(teacher_logits.dtype())?)
}

fn pair_matrix(rows: usize, cols: usize, pairs: &[(usize, usize)], dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; rows * cols];
    for &(r, c) in pairs {
        if r >= rows || c >= cols {
            return Err(Error::invalid(format!("pair ({r}, {c}) outside a {rows}x{cols} grid")));
        }
        m[r * cols + c] += 1.0;
    }
    Ok(Tensor::from_vec(m, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy `−Σ_k q_k log p_k` over `(teacher, student)` index pairs,
/// with `p = softmax(student_logits / student_temp)`.
pub fn image_loss(
    teacher_q: &Tensor,
    student_logits: &Tensor,
    pairs: &[(usize, usize)],
    student_temp: f64,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::invalid("image loss needs at least one teacher/student pair"));
    }
    let q = teacher_q.detach();
    let (nt, k) = q.dims2()?;
    let (ns, ks) = student_logits.dims2()?;
    if k != ks {
        return Err(Error::Shape(format!("teacher has {k} prototypes, student {ks}")));
    }
    let logp = log_softmax_last(&(student_logits / student_temp)?)?;
    let ce = q.matmul(&logp.t()?)?.neg()?;
    let weight = pair_matrix(nt, ns, pairs, ce.dtype())?;
    Ok(((ce * weight)?.sum_all()? / pairs.len() as f64)?)
}

/// One masked student patch aligned with the teacher patch it reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchMatch {
    pub student_crop: usize,
    pub teacher_crop: usize,
    pub patch: usize,
}

/// `(1/M) Σ ‖h(p_s) − p_t‖²` over the matched patches; zero when `M = 0`.
/// `student_proj: [Ns, P, d]`, `teacher: [Nt, P, d]`.
pub fn patch_loss(student_proj: &Tensor, teacher: &Tensor, matches: &[PatchMatch]) -> Result<Tensor> {
    let (ns, p, d) = student_proj.dims3()?;
    let (nt, pt, dt) = teacher.dims3()?;
    if p != pt || d != dt {
        return Err(Error::Alignment(format!(
            "student patches [{p}, {d}] vs teacher patches [{pt}, {dt}]"
        )));
    }
    if matches.is_empty() {
        return Ok(Tensor::zeros((), student_proj.dtype(), &Device::Cpu)?);
    }
    let mut si = Vec::with_capacity(matches.len());
    let mut ti = Vec::with_capacity(matches.len());
    for m in matches {
        if m.student_crop >= ns || m.teacher_crop >= nt || m.patch >= p {
            return Err(Error::Alignment(format!(
                "patch {} of crops ({}, {}) lies outside the {ns}/{nt} crops of {p} patches",
                m.patch, m.student_crop, m.teacher_crop
            )));
        }
        si.push((m.student_crop * p + m.patch) as u32);
        ti.push((m.teacher_crop * p + m.patch) as u32);
    }
    let dev = Device::Cpu;
    let s = student_proj.reshape((ns * p, d))?.index_select(&Tensor::new(si, &dev)?, 0)?;
    let t = teacher.detach().reshape((nt * p, d))?.index_select(&Tensor::new(ti, &dev)?, 0)?;
    Ok(((s - t)?.sqr()?.sum_all()? / matches.len() as f64)?)
}

/// Nearest other row of each row (Euclidean on the given vectors); ties go to
/// the lower index.
pub fn nearest_neighbours(rows: &[f64], n: usize, d: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let a = &rows[i * d..(i + 1) * d];
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let b = &rows[j * d..(j + 1) * d];
                let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect()
}

/// Kozachenko–Leonenko regularizer `−(1/B) Σ log(ρ_i + ε)` on L2-normalized rows.
pub fn koleo_loss(embeddings: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, d) = embeddings.dims2()?;
    if b < 2 {
        return Err(Error::invalid(format!("koleo loss needs at least 2 embeddings, got {b}")));
    }
    let z = l2_normalize(embeddings)?;
    let nn = nearest_neighbours(&to_f64_vec(&z)?, b, d);
    let idx = Tensor::new(nn.iter().map(|&j| j as u32).collect::<Vec<_>>(), &Device::Cpu)?;
    let diff = (&z - z.index_select(&idx, 0)?)?;
    // The tiny floor keeps the square root differentiable for duplicates.
    let rho = (diff.sqr()?.sum(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(((rho + eps)?.log()?.mean_all()?.neg())?)
}

fn centered_gram(p: &Tensor) -> Result<Tensor> {
    let c = p.broadcast_sub(&p.mean_keepdim(D::Minus2)?)?;
    Ok(c.matmul(&c.transpose(D::Minus1, D::Minus2)?.contiguous()?)?)
}

/// `‖P_s P_sᵀ − P_G P_Gᵀ‖²_F / N²` after centering across patches. Inputs are
/// `[N, D]` or batched `[B, N, D]` (averaged over the batch).
pub fn gram_loss(student_patches: &Tensor, gram_patches: &Tensor) -> Result<Tensor> {
    let (sd, gd) = (student_patches.dims(), gram_patches.dims());
    let n_axis = sd.len().checked_sub(2).ok_or_else(|| Error::Shape("gram loss needs rank >= 2".into()))?;
    if sd.len() != gd.len() || sd[..=n_axis] != gd[..=n_axis] {
        return Err(Error::Shape(format!("gram loss inputs {sd:?} vs {gd:?}")));
    }
    let n = sd[n_axis] as f64;
    let diff = (centered_gram(student_patches)? - centered_gram(&gram_patches.detach())?)?;
    let per_item = diff.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
    Ok((per_item.mean_all()? / (n * n))?)
}

/// In-batch InfoNCE. Positives of anchor `i` are the other rows sharing its
/// label; the denominator runs over every `k ≠ i`. `anchors` defaults to all rows.
pub fn infonce_loss(embeddings: &Tensor, labels: &[usize], tau: f64, anchors: Option<&[usize]>) -> Result<Tensor> {
    let (n, _) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let all: Vec<usize> = (0..n).collect();
    let anchors = anchors.unwrap_or(&all);
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch("no InfoNCE anchors".into()));
    }
    let mut pos = vec![0f64; anchors.len() * n];
    let mut others = vec![0f64; anchors.len() * n];
    for (a, &i) in anchors.iter().enumerate() {
        if i >= n {
            return Err(Error::invalid(format!("anchor {i} out of range")));
        }
        let mut np = 0;
        for j in (0..n).filter(|&j| j != i) {
            others[a * n + j] = 1.0;
            if labels[j] == labels[i] {
                pos[a * n + j] = 1.0;
                np += 1;
            }
        }
        if np == 0 || np == n - 1 {
            return Err(Error::DegenerateBatch(format!(
                "anchor {i} has {np} positives among {} other embeddings",
                n - 1
            )));
        }
    }
    let dtype = embeddings.dtype();
    let dev = Device::Cpu;
    let z = l2_normalize(embeddings)?;
    let idx = Tensor::new(anchors.iter().map(|&i| i as u32).collect::<Vec<_>>(), &dev)?;
    let sims = (z.index_select(&idx, 0)?.matmul(&z.t()?)? / tau)?;
    let shift = sims.max_keepdim(D::Minus1)?.detach();
    let e = sims.broadcast_sub(&shift)?.exp()?;
    let pos = Tensor::from_vec(pos, (anchors.len(), n), &dev)?.to_dtype(dtype)?;
    let others = Tensor::from_vec(others, (anchors.len(), n), &dev)?.to_dtype(dtype)?;
    let num = (&e * pos)?.sum(D::Minus1)?.log()?;
    let den = (&e * others)?.sum(D::Minus1)?.log()?;
    Ok((den - num)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows = v.len();
        let cols = v[0].len();
        Tensor::from_vec(v.concat(), (rows, cols), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn sinkhorn_uniform_and_identity() {
        let q = sinkhorn(&vec![0.3; 12], 3, 4, 0.07, 3).unwrap();
        assert!(q.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let q = sinkhorn(&[10.0, 0.0, 0.0, 10.0], 2, 2, 0.07, 3).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-9 && q[1].abs() < 1e-9);
        assert!(q[2].abs() < 1e-9 && (q[3] - 1.0).abs() < 1e-9);
        assert!(sinkhorn(&[f64::NAN, 0.0, 0.0, 0.0], 2, 2, 0.07, 3).is_err());
        assert!(sinkhorn(&[0.0, 0.0], 1, 2, 0.07, 3).is_err());
    }

    #[test]
    fn image_loss_values() {
        let q = t2(&[&[0.0, 1.0, 0.0, 0.0]]);
        let p = t2(&[&[0.0; 4]]);
        assert!((val(&image_loss(&q, &p, &[(0, 0)], 0.1).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let q = t2(&[&[0.25; 4]]);
        assert!((val(&image_loss(&q, &p, &[(0, 0)], 0.1).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let q = t2(&[&[1.0, 0.0, 0.0, 0.0]]);
        let p = t2(&[&[1.0, 0.0, 0.0, 0.0]]);
        assert!(val(&image_loss(&q, &p, &[(0, 0)], 0.1).unwrap()) < 1e-3);
        assert!(image_loss(&q, &p, &[], 0.1).is_err());
    }

    #[test]
    fn patch_loss_values() {
        let s = Tensor::from_vec(vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0], (1, 2, 3), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], (1, 2, 3), &Device::Cpu).unwrap();
        let m = |patch| PatchMatch { student_crop: 0, teacher_crop: 0, patch };
        assert_eq!(val(&patch_loss(&s, &t, &[m(0)]).unwrap()), 25.0);
        assert_eq!(val(&patch_loss(&s, &t, &[m(1)]).unwrap()), 0.0);
        assert_eq!(val(&patch_loss(&s, &t, &[]).unwrap()), 0.0);
        assert!(matches!(patch_loss(&s, &t, &[m(2)]), Err(Error::Alignment(_))));
    }

    #[test]
    fn koleo_values() {
        let eps = 1e-6;
        let z = t2(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!((val(&koleo_loss(&z, eps).unwrap()) + (2.0 + eps).ln()).abs() < 1e-12);
        let a = 2.0 * std::f64::consts::PI / 3.0;
        let z = t2(&[&[1.0, 0.0], &[a.cos(), a.sin()], &[(2.0 * a).cos(), (2.0 * a).sin()]]);
        assert!((val(&koleo_loss(&z, eps).unwrap()) + (3f64.sqrt() + eps).ln()).abs() < 1e-9);
        let z = t2(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = val(&koleo_loss(&z, eps).unwrap());
        assert!((v + eps.ln()).abs() < 1e-5 && v.is_finite());
        assert!(koleo_loss(&t2(&[&[1.0, 0.0]]), eps).is_err());
    }

    #[test]
    fn gram_values() {
        let s = t2(&[&[1.0], &[-1.0]]);
        let g = t2(&[&[0.0], &[0.0]]);
        assert_eq!(val(&gram_loss(&s, &g).unwrap()), 1.0);
        assert_eq!(val(&gram_loss(&s, &s).unwrap()), 0.0);
        assert_eq!(val(&gram_loss(&s, &s.neg().unwrap()).unwrap()), 0.0);
        assert!(gram_loss(&s, &t2(&[&[0.0], &[0.0], &[1.0]])).is_err());
    }

    #[test]
    fn infonce_values() {
        let z = t2(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let labels = [0, 0, 1];
        let v = val(&infonce_loss(&z, &labels, 1.0, Some(&[0])).unwrap());
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        let v = val(&infonce_loss(&z, &labels, 0.1, Some(&[0])).unwrap());
        assert!((v - (1.0 + (-10f64).exp()).ln()).abs() < 1e-12);
        // Anchor 2 has no positive.
        assert!(matches!(infonce_loss(&z, &labels, 1.0, None), Err(Error::DegenerateBatch(_))));
        let z = t2(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let v = val(&infonce_loss(&z, &[0, 0, 1, 1], 0.1, None).unwrap());
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_values() {
        let w = LossWeights::default();
        let ones = LossParts { image: 1.0, patch: 1.0, koleo: 1.0, gram: 1.0, contrast: 1.0 };
        assert_eq!(total_loss(&ones, &w, true).unwrap().total, 3.05);
        assert_eq!(total_loss(&ones, &w, false).unwrap().total, 2.35);
        assert_eq!(total_loss(&LossParts::default(), &w, true).unwrap().total, 0.0);
        let bad = LossParts { koleo: f64::NAN, ..ones };
        let err = total_loss(&bad, &w, true).unwrap_err().to_string();
        assert!(err.contains("koleo"));
    }
}
