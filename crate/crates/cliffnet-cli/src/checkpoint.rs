//! Named-tensor checkpoint archive (JSON).
//!
//! A checkpoint is self-describing: it carries the signature and the
//! architecture needed to rebuild the model, the parameter tensors by name,
//! and the full optimizer state, so a resumed run continues the original
//! trajectory exactly. Floats survive the JSON round trip bit-for-bit.

use std::path::Path;

use cliffnet::autodiff::Tensor;
use cliffnet::layers::Model;
use cliffnet::tasks::{build_model, ResumeState, TrainConfig, TrainResult};
use cliffnet::{Error, Result, Signature};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    fn from_tensor(name: &str, t: &Tensor) -> TensorBlob {
        TensorBlob { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamBlob {
    pub step: u64,
    pub m: Vec<TensorBlob>,
    pub v: Vec<TensorBlob>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub signature: String,
    pub task: String,
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub scalar_gate_hidden: usize,
    /// Last completed epoch and optimizer step.
    pub epoch: usize,
    pub step: u64,
    pub y_mean: f64,
    pub y_std: f64,
    pub tensors: Vec<TensorBlob>,
    pub adam: AdamBlob,
}

impl Checkpoint {
    pub fn from_result(cfg: &RunConfig, in_channels: usize, result: &TrainResult) -> Checkpoint {
        let s = cfg.signature;
        let named = result.model.named_params();
        let tensors =
            named.iter().map(|(name, t)| TensorBlob::from_tensor(name, t)).collect::<Vec<_>>();
        let m = named
            .iter()
            .zip(&result.state.adam_m)
            .map(|((name, _), t)| TensorBlob::from_tensor(name, t))
            .collect();
        let v = named
            .iter()
            .zip(&result.state.adam_v)
            .map(|((name, _), t)| TensorBlob::from_tensor(name, t))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            signature: format!("{},{},{}", s.p(), s.q(), s.r()),
            task: cfg.task.name().to_string(),
            in_channels,
            channels: cfg.train.channels,
            depth: cfg.train.depth,
            scalar_gate_hidden: cfg.train.scalar_gate_hidden,
            epoch: result.state.start_epoch,
            step: result.state.adam_step,
            y_mean: result.state.y_mean,
            y_std: result.state.y_std,
            tensors,
            adam: AdamBlob {
                step: result.state.adam_step,
                m,
                v,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", ckpt.format)));
        }
        Ok(ckpt)
    }

    pub fn signature(&self) -> Result<Signature> {
        crate::config::parse_signature(&self.signature)
    }

    /// Rebuild the architecture recorded in the checkpoint and load its
    /// parameters. Name or shape mismatches surface as config errors.
    pub fn build_model(&self) -> Result<Model> {
        let sig = self.signature()?;
        let arch = TrainConfig {
            channels: self.channels,
            depth: self.depth,
            scalar_gate_hidden: self.scalar_gate_hidden,
            ..TrainConfig::default()
        };
        let mut model = build_model(sig, self.in_channels, &arch)?;
        let named: Vec<(String, Tensor)> =
            self.tensors.iter().map(|b| (b.name.clone(), b.to_tensor())).collect();
        model.load_named_params(&named)?;
        Ok(model)
    }

    /// Optimizer continuation state. The moment lists are restored in the
    /// model's canonical parameter order after a name check.
    pub fn resume_state(&self, model: &Model) -> Result<ResumeState> {
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        let ordered = |blobs: &[TensorBlob]| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|name| {
                    blobs
                        .iter()
                        .find(|b| &b.name == name)
                        .map(TensorBlob::to_tensor)
                        .ok_or_else(|| {
                            Error::Config(format!("checkpoint is missing optimizer moments for {name}"))
                        })
                })
                .collect()
        };
        Ok(ResumeState {
            start_epoch: self.epoch,
            adam_step: self.adam.step,
            adam_m: ordered(&self.adam.m)?,
            adam_v: ordered(&self.adam.v)?,
            y_mean: self.y_mean,
            y_std: self.y_std,
        })
    }

    /// Reject resumes across incompatible configurations.
    pub fn ensure_matches(&self, cfg: &RunConfig, in_channels: usize) -> Result<()> {
        let s = cfg.signature;
        let want = format!("{},{},{}", s.p(), s.q(), s.r());
        let mut mismatches = Vec::new();
        if self.signature != want {
            mismatches.push(format!("signature {} vs {want}", self.signature));
        }
        if self.task != cfg.task.name() {
            mismatches.push(format!("task {} vs {}", self.task, cfg.task.name()));
        }
        if self.in_channels != in_channels {
            mismatches.push(format!("in_channels {} vs {in_channels}", self.in_channels));
        }
        if self.channels != cfg.train.channels {
            mismatches.push(format!("channels {} vs {}", self.channels, cfg.train.channels));
        }
        if self.depth != cfg.train.depth {
            mismatches.push(format!("depth {} vs {}", self.depth, cfg.train.depth));
        }
        if self.scalar_gate_hidden != cfg.train.scalar_gate_hidden {
            mismatches.push(format!(
                "scalar_gate_hidden {} vs {}",
                self.scalar_gate_hidden, cfg.train.scalar_gate_hidden
            ));
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint does not match the config: {}",
                mismatches.join("; ")
            )))
        }
    }
}
