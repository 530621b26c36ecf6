//! Anything that maps patches to two-class posteriors.

use crate::data::{Label, Patch};
use crate::error::{Error, Result};
use crate::nn::train::predict;
use crate::nn::{Checkpoint, Example, Network};

pub trait Classifier {
    /// Flat length of one input (C·H·W).
    fn input_len(&self) -> usize;
    /// Posterior rows `[p_occupied, p_empty]`, one per input.
    fn posteriors(&self, inputs: &[&[f32]]) -> Result<Vec<[f32; 2]>>;
}

/// A checkpoint bound to its compiled network.
pub struct Model {
    ckpt: Checkpoint,
    net: Network<f32>,
}

impl Model {
    pub fn new(ckpt: Checkpoint) -> Result<Self> {
        let net = Network::new(&ckpt.arch)?;
        net.check_params(&ckpt.params)?;
        Ok(Model { ckpt, net })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    /// Sets a provenance tag; weights are untouched.
    pub fn tag(&mut self, key: &str, value: &str) {
        self.ckpt.meta.tags.insert(key.into(), value.into());
    }
}

impl Classifier for Model {
    fn input_len(&self) -> usize {
        self.ckpt.arch.input().len()
    }

    fn posteriors(&self, inputs: &[&[f32]]) -> Result<Vec<[f32; 2]>> {
        predict(&self.net, &self.ckpt.params, inputs)
    }
}

pub fn classify_patches(c: &dyn Classifier, patches: &[Patch]) -> Result<Vec<[f32; 2]>> {
    let inputs: Vec<&[f32]> = patches.iter().map(|p| p.pixels.data()).collect();
    c.posteriors(&inputs)
}

/// Training examples from patches paired with the labels to train on.
pub fn examples<'a>(items: &[(&'a Patch, Label)]) -> Result<Vec<Example<'a>>> {
    items
        .iter()
        .map(|(p, label)| {
            let label = label.class_index().ok_or_else(|| {
                Error::Invalid(format!("spot {} in {} has no usable label", p.spot_id, p.image_path))
            })?;
            Ok(Example {
                pixels: p.pixels.data(),
                label,
            })
        })
        .collect()
}

/// Patches paired with their ground-truth labels.
pub fn with_true_labels(patches: &[Patch]) -> Vec<(&Patch, Label)> {
    patches.iter().map(|p| (p, p.true_label)).collect()
}
