//! Teacher–student optimization: routing, EMA teacher, Gram snapshot,
//! schedules, checkpoints, and metrics.

mod optim;
mod run;
mod schedule;
mod state_io;
mod step;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{normalize_prototypes, BackboneConfig, ParamSet};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::views::ViewConfig;

pub use optim::AdamW;
pub use run::{draw_pairs, train, TrainOptions, TrainOutcome, CHECKPOINT_DIR, LAST_CHECKPOINT, METRICS_FILE};
pub use schedule::{gram_activation_step, lr_at, lr_schedule, momentum_at};
pub use state_io::{load_checkpoint, load_encoder, save_checkpoint, EncoderChoice};
pub use step::{forward_losses, image_loss_pairs, train_step, StepMetrics};

/// How the two views of a training pair are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Two different renders of the material.
    Multi,
    /// Both views come from one render.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_pairs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub gram_activation_fraction: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a numbered checkpoint every this many steps (0 = only the last).
    pub checkpoint_every: u64,
    pub pairing: Pairing,
    pub loss: LossWeights,
    pub backbone: BackboneConfig,
    pub views: ViewConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_pairs: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            momentum_start: 0.996,
            momentum_end: 1.0,
            gram_activation_fraction: 0.8,
            seed: 0,
            warmup_fraction: 0.1,
            min_lr_fraction: 0.01,
            grad_clip: 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 500,
            pairing: Pairing::Multi,
            loss: LossWeights::default(),
            backbone: BackboneConfig::default(),
            views: ViewConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.batch_pairs < 2 {
            return fail("batch_pairs must be at least 2 (contrastive negatives need two materials)".into());
        }
        if !(0.0 < self.momentum_start && self.momentum_start <= self.momentum_end && self.momentum_end <= 1.0) {
            return fail(format!(
                "momentum schedule {} -> {} must satisfy 0 < start <= end <= 1",
                self.momentum_start, self.momentum_end
            ));
        }
        if !(0.0 < self.gram_activation_fraction && self.gram_activation_fraction < 1.0) {
            return fail("gram_activation_fraction must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return fail("warmup_fraction must lie in [0, 1) and min_lr_fraction in [0, 1]".into());
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return fail("base_lr, weight_decay and grad_clip must be non-negative".into());
        }
        self.loss.validate()?;
        self.backbone.validate()?;
        self.views.validate()?;
        if self.views.patch_size != self.backbone.patch_size {
            return fail(format!(
                "views.patch_size {} differs from backbone.patch_size {}",
                self.views.patch_size, self.backbone.patch_size
            ));
        }
        if self.views.global_size != self.backbone.image_size {
            return fail(format!(
                "views.global_size {} differs from backbone.image_size {}",
                self.views.global_size, self.backbone.image_size
            ));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_schedule(step, self.total_steps, self.base_lr, self.warmup_fraction, self.min_lr_fraction)
    }

    pub fn momentum(&self, step: u64) -> Result<f64> {
        momentum_at(step, self.total_steps, self.momentum_start, self.momentum_end)
    }

    pub fn gram_step(&self) -> u64 {
        gram_activation_step(self.total_steps, self.gram_activation_fraction)
    }
}

/// Matrices get weight decay; biases, norms, tokens and prototypes do not.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name.ends_with(".weight")
}

/// `θ_t ← m·θ_t + (1−m)·θ_s`.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, m: f64) -> Result<ParamSet> {
    if teacher.names() != student.names() {
        return Err(Error::Shape("teacher and student parameter names differ".into()));
    }
    let mut out = Vec::with_capacity(teacher.len());
    for ((name, t), s) in teacher.iter().zip(student.tensors()) {
        if t.dims() != s.dims() {
            return Err(Error::Shape(format!("`{name}`: teacher {:?} vs student {:?}", t.dims(), s.dims())));
        }
        let s = s.detach();
        out.push(if m == 1.0 {
            t.clone()
        } else if m == 0.0 {
            s.copy()?
        } else {
            ((t * m)? + (s * (1.0 - m))?)?
        });
    }
    teacher.with_tensors(out)
}

#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
    pub student: Vec<Var>,
    layout: ParamSet,
    pub teacher: ParamSet,
    pub gram_teacher: Option<ParamSet>,
    pub optimizer: AdamW,
}

impl TrainState {
    /// Fresh student from `config.seed`; the teacher starts as an exact copy.
    pub fn new(config: &TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let init = ParamSet::init(&config.backbone, config.seed, dtype)?;
        Self::from_parts(config.clone(), 0, &init, init.deep_copy()?, None, None)
    }

    pub(crate) fn from_parts(
        config: TrainConfig,
        step: u64,
        student: &ParamSet,
        teacher: ParamSet,
        gram_teacher: Option<ParamSet>,
        moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
    ) -> Result<Self> {
        let vars = student.to_vars()?;
        let mask = student.iter().map(|(n, t)| decays(n, t.dims())).collect();
        let mut optimizer = AdamW::new(&vars, mask, config.adam_beta1, config.adam_beta2, config.adam_eps)?;
        if let Some((m, v)) = moments {
            optimizer.m = m;
            optimizer.v = v;
        }
        Ok(Self {
            step,
            layout: student.clone(),
            student: vars,
            teacher,
            gram_teacher,
            optimizer,
            config,
        })
    }

    /// The student's current parameters, sharing storage with the variables.
    pub fn student_params(&self) -> Result<ParamSet> {
        self.layout.from_vars(&self.student)
    }

    pub fn gram_active(&self) -> bool {
        self.gram_teacher.is_some()
    }

    /// Copies the teacher into the Gram teacher at the activation step, once.
    pub fn maybe_snapshot_gram(&mut self) -> Result<bool> {
        if self.gram_teacher.is_none() && self.step >= self.config.gram_step() {
            self.gram_teacher = Some(self.teacher.deep_copy()?);
            return Ok(true);
        }
        Ok(false)
    }

    pub(crate) fn renormalize_prototypes(&self) -> Result<()> {
        let idx = self
            .layout
            .names()
            .iter()
            .position(|n| n == "dino_head.prototypes")
            .ok_or_else(|| Error::Shape("missing prototype matrix".into()))?;
        let var = &self.student[idx];
        var.set(&normalize_prototypes(&var.as_tensor().detach())?)?;
        Ok(())
    }
}
