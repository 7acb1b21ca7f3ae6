use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ema_update, TrainConfig, TrainState};
use crate::backbone::{encode, ibot_project, images_to_tensor, prototype_logits, ParamSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objectives::{
    gram_loss, image_loss, infonce_loss, koleo_loss, patch_loss, sinkhorn_assign, LossBreakdown, LossTensors,
    PatchMatch,
};
use crate::views::{CropRecord, MultiCropBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Zero-based index of the step that produced these values.
    pub step: u64,
    pub image: f64,
    pub patch: f64,
    pub koleo: f64,
    pub gram: f64,
    pub contrast: f64,
    pub total: f64,
    pub lr: f64,
    pub momentum: f64,
    pub grad_norm: f64,
    pub gram_active: bool,
}

fn crop_tensors(crops: &[CropRecord], dtype: DType) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Image> = crops.iter().map(|c| &c.image).collect();
    let x = images_to_tensor(&images, dtype)?;
    let p = crops[0].mask.len();
    let mask: Vec<f32> = crops
        .iter()
        .flat_map(|c| c.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    let mask = Tensor::from_vec(mask, (crops.len(), p), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((x, mask))
}

/// Teacher/student index pairs for the image loss. Teachers are the global
/// crops; students are the globals followed by the locals. Every student crop
/// of the same material is paired with every teacher crop, except the
/// teacher's own crop.
pub fn image_loss_pairs(batch: &MultiCropBatch) -> Vec<(usize, usize)> {
    let g = batch.global_labels();
    let l = batch.local_labels();
    let students: Vec<usize> = g.iter().chain(&l).copied().collect();
    let mut pairs = Vec::new();
    for (t, &lt) in g.iter().enumerate() {
        for (s, &ls) in students.iter().enumerate() {
            if ls == lt && s != t {
                pairs.push((t, s));
            }
        }
    }
    pairs
}

/// All loss terms for one batch. Only `student` can receive gradients; the
/// teacher and Gram teacher are read as constants.
pub fn forward_losses(
    student: &ParamSet,
    teacher: &ParamSet,
    gram_teacher: Option<&ParamSet>,
    batch: &MultiCropBatch,
    cfg: &TrainConfig,
) -> Result<LossTensors> {
    let dtype = student.dtype();
    let bcfg = &cfg.backbone;
    let w = &cfg.loss;
    if batch.globals.is_empty() {
        return Err(Error::DegenerateBatch("batch has no global crops".into()));
    }
    let (gx, gmask) = crop_tensors(&batch.globals, dtype)?;

    // Teacher side: global crops only, unmasked.
    let t_feat = encode(&gx, teacher, bcfg, None)?;
    let t_logits = prototype_logits(&t_feat.cls, teacher)?.detach();
    let q = sinkhorn_assign(&t_logits, w.teacher_temp, w.sinkhorn_iters)?;
    let t_patch = ibot_project(&t_feat.patches, teacher, bcfg)?.detach();

    // Student side: every crop, masked.
    let s_glob = encode(&gx, student, bcfg, Some(&gmask))?;
    let mut s_logits = vec![prototype_logits(&s_glob.cls, student)?];
    if !batch.locals.is_empty() {
        let (lx, lmask) = crop_tensors(&batch.locals, dtype)?;
        let s_loc = encode(&lx, student, bcfg, Some(&lmask))?;
        s_logits.push(prototype_logits(&s_loc.cls, student)?);
    }
    let s_logits = Tensor::cat(&s_logits, 0)?;

    let image = image_loss(&q, &s_logits, &image_loss_pairs(batch), w.student_temp)?;

    let matches: Vec<PatchMatch> = batch
        .globals
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            c.mask.iter().enumerate().filter(|(_, &m)| m).map(move |(patch, _)| PatchMatch {
                student_crop: i,
                teacher_crop: i,
                patch,
            })
        })
        .collect();
    let patch = if matches.is_empty() || w.lambda_p == 0.0 {
        Tensor::zeros((), dtype, &Device::Cpu)?
    } else {
        patch_loss(&ibot_project(&s_glob.patches, student, bcfg)?, &t_patch, &matches)?
    };

    let koleo = koleo_loss(&s_glob.cls, w.koleo_eps)?;

    let gram = match gram_teacher {
        Some(g) => {
            let g_feat = encode(&gx, g, bcfg, None)?;
            Some(gram_loss(&s_glob.patches, &g_feat.patches.detach())?)
        }
        None => None,
    };

    let contrast = if w.lambda_c == 0.0 {
        Tensor::zeros((), dtype, &Device::Cpu)?
    } else {
        infonce_loss(&s_glob.cls, &batch.global_labels(), w.infonce_temp, None)?
    };

    Ok(LossTensors {
        image,
        patch,
        koleo,
        gram,
        contrast,
    })
}

fn check_no_teacher_grads(grads: &candle_core::backprop::GradStore, set: &ParamSet, role: &str) -> Result<()> {
    for (name, t) in set.iter() {
        if grads.get(t).is_some() {
            return Err(Error::Numeric(format!("gradient reached {role} parameter `{name}`")));
        }
    }
    Ok(())
}

/// One optimization step: Gram snapshot check, losses, AdamW update,
/// prototype renormalization, EMA teacher update.
pub fn train_step(state: &mut TrainState, batch: &MultiCropBatch) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    if state.step >= cfg.total_steps {
        return Err(Error::invalid(format!("step {} is past total_steps {}", state.step, cfg.total_steps)));
    }
    state.maybe_snapshot_gram()?;
    let student = state.student_params()?;
    let losses = forward_losses(&student, &state.teacher, state.gram_teacher.as_ref(), batch, &cfg)?;
    let (total, breakdown): (Tensor, LossBreakdown) = losses.combine(&cfg.loss)?;
    let grads = total.backward()?;
    check_no_teacher_grads(&grads, &state.teacher, "teacher")?;
    if let Some(g) = &state.gram_teacher {
        check_no_teacher_grads(&grads, g, "Gram teacher")?;
    }
    let grads = super::AdamW::collect_grads(&state.student, &grads)?;
    let lr = cfg.lr(state.step);
    let grad_norm = state
        .optimizer
        .step(&state.student, &grads, state.step + 1, lr, cfg.weight_decay, cfg.grad_clip)?;
    state.renormalize_prototypes()?;
    let momentum = cfg.momentum(state.step)?;
    state.teacher = ema_update(&state.teacher, &state.student_params()?, momentum)?;
    let metrics = StepMetrics {
        step: state.step,
        image: breakdown.image,
        patch: breakdown.patch,
        koleo: breakdown.koleo,
        gram: breakdown.gram,
        contrast: breakdown.contrast,
        total: breakdown.total,
        lr,
        momentum,
        grad_norm,
        gram_active: state.gram_active(),
    };
    state.step += 1;
    Ok(metrics)
}
