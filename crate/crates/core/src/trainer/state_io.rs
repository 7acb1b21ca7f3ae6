use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::backbone::checkpoint::{read_archive, take_params, write_archive, FORMAT_VERSION};
use crate::backbone::{BackboneConfig, ParamSet};
use crate::error::{Error, Result};

const KIND: &str = "train-state";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    format_version: u32,
    kind: String,
    step: u64,
    gram_present: bool,
    config: TrainConfig,
}

/// Writes the complete training state. The batch stream is keyed by
/// `(seed, step)`, so the step counter is the whole random state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = StateHeader {
        format_version: FORMAT_VERSION,
        kind: KIND.into(),
        step: state.step,
        gram_present: state.gram_teacher.is_some(),
        config: state.config.clone(),
    };
    let student = state.student_params()?;
    let mut named = Vec::new();
    let mut add = |prefix: &str, set: &ParamSet| {
        for (n, t) in set.iter() {
            named.push((format!("{prefix}{n}"), t.clone()));
        }
    };
    add("student.", &student);
    add("teacher.", &state.teacher);
    if let Some(g) = &state.gram_teacher {
        add("gram.", g);
    }
    for (i, n) in student.names().iter().enumerate() {
        named.push((format!("adam_m.{n}"), state.optimizer.m[i].clone()));
        named.push((format!("adam_v.{n}"), state.optimizer.v[i].clone()));
    }
    write_archive(path, &named, &serde_json::to_value(header)?)
}

/// Restores a state written by [`save_checkpoint`]. With `expected`, the
/// stored backbone config must match.
pub fn load_checkpoint(path: &Path, expected: Option<&BackboneConfig>) -> Result<TrainState> {
    let (tensors, header) = read_archive(path)?;
    let header: StateHeader = serde_json::from_value(header)?;
    if header.kind != KIND || header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: not a version-{FORMAT_VERSION} training state",
            path.display()
        )));
    }
    let bcfg = &header.config.backbone;
    if let Some(e) = expected {
        if e != bcfg {
            return Err(Error::Checkpoint(format!(
                "{}: backbone config does not match the checkpoint",
                path.display()
            )));
        }
    }
    let student = take_params(&tensors, "student.", bcfg)?;
    let teacher = take_params(&tensors, "teacher.", bcfg)?;
    let gram = if header.gram_present {
        Some(take_params(&tensors, "gram.", bcfg)?)
    } else {
        None
    };
    let m = take_params(&tensors, "adam_m.", bcfg)?.tensors().to_vec();
    let v = take_params(&tensors, "adam_v.", bcfg)?.tensors().to_vec();
    TrainState::from_parts(header.config, header.step, &student, teacher, gram, Some((m, v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderChoice {
    Teacher,
    Student,
}

/// Encoder weights from either a training state or a bare backbone archive.
pub fn load_encoder(path: &Path, choice: EncoderChoice) -> Result<(BackboneConfig, ParamSet)> {
    let (tensors, header) = read_archive(path)?;
    let kind = header.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    match kind.as_str() {
        KIND => {
            let header: StateHeader = serde_json::from_value(header)?;
            let prefix = match choice {
                EncoderChoice::Teacher => "teacher.",
                EncoderChoice::Student => "student.",
            };
            let params = take_params(&tensors, prefix, &header.config.backbone)?;
            Ok((header.config.backbone, params))
        }
        "backbone" => crate::backbone::load_params(path, None),
        other => Err(Error::Checkpoint(format!(
            "{}: unknown archive kind `{other}`",
            path.display()
        ))),
    }
}

