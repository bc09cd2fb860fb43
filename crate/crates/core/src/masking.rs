//! Corruption plans for masked image and masked language modelling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::vocab::{MASK_ID, NUM_SPECIAL};
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub image_mask_ratio: f64,
    pub text_mask_prob: f64,
    /// Probabilities of (replace with mask, replace with random token, keep).
    pub mlm_actions: [f64; 3],
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            image_mask_ratio: 0.4,
            text_mask_prob: 0.15,
            mlm_actions: [0.8, 0.1, 0.1],
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("masking.image_mask_ratio", self.image_mask_ratio)?;
        unit_interval("masking.text_mask_prob", self.text_mask_prob)?;
        for (i, &p) in self.mlm_actions.iter().enumerate() {
            unit_interval(&format!("masking.mlm_actions[{i}]"), p)?;
        }
        let sum: f64 = self.mlm_actions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("masking.mlm_actions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Sorted, unique positions with one action each.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskPlan {
    positions: Vec<usize>,
    actions: Vec<MaskAction>,
}

impl MaskPlan {
    pub fn new(positions: Vec<usize>, actions: Vec<MaskAction>) -> Result<Self> {
        if positions.len() != actions.len() {
            return Err(Error::InvalidArgument("positions and actions differ in length".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("mask positions must be sorted and unique".into()));
        }
        Ok(Self { positions, actions })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn actions(&self) -> &[MaskAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rounds half away from zero, so counts agree on every platform.
pub fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// Exactly `round(ratio · num_patches)` distinct positions, uniform without replacement.
pub fn sample_image_mask(num_patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    unit_interval("image mask ratio", ratio)?;
    if num_patches == 0 {
        return Err(Error::InvalidArgument("num_patches must be at least 1".into()));
    }
    let count = round_half_away(ratio * num_patches as f64).min(num_patches);
    let mut positions = rand::seq::index::sample(rng, num_patches, count).into_vec();
    positions.sort_unstable();
    let actions = vec![MaskAction::Mask; positions.len()];
    Ok(MaskPlan { positions, actions })
}

/// BERT-style corruption. Special tokens and padding are never selected.
///
/// For each candidate in order: one uniform draw decides selection; a selected
/// position takes a second draw for the action and, for [`MaskAction::Random`],
/// a third for the replacement id in `[NUM_SPECIAL, vocab_size)`.
pub fn sample_text_mask(
    tokens: &TokenSequence,
    prob: f64,
    actions: [f64; 3],
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<(MaskPlan, TokenSequence)> {
    unit_interval("text mask probability", prob)?;
    let mut ids = tokens.ids().to_vec();
    let mut plan = MaskPlan::default();
    for (i, (&id, &pad)) in tokens.ids().iter().zip(tokens.pad_mask()).enumerate() {
        if pad || (id as usize) < NUM_SPECIAL {
            continue;
        }
        if rng.random::<f64>() >= prob {
            continue;
        }
        let u = rng.random::<f64>();
        let action = if u < actions[0] {
            MaskAction::Mask
        } else if u < actions[0] + actions[1] {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        match action {
            MaskAction::Mask => ids[i] = MASK_ID,
            MaskAction::Random if vocab_size > NUM_SPECIAL => {
                ids[i] = rng.random_range(NUM_SPECIAL..vocab_size) as u32;
            }
            _ => {}
        }
        plan.positions.push(i);
        plan.actions.push(action);
    }
    let corrupted = tokens.with_ids(ids)?;
    Ok((plan, corrupted))
}

/// Replaces the planned rows of `patch_embeddings` with `mask_token`.
pub fn apply_image_mask<T: Scalar>(
    patch_embeddings: &Tensor<T>,
    plan: &MaskPlan,
    mask_token: &[T],
) -> Result<Tensor<T>> {
    if mask_token.len() != patch_embeddings.cols() {
        return Err(Error::Shape(format!(
            "mask token width {} vs embedding width {}",
            mask_token.len(),
            patch_embeddings.cols()
        )));
    }
    let mut out = patch_embeddings.clone();
    for &p in plan.positions() {
        if p >= out.rows() {
            return Err(Error::InvalidArgument(format!(
                "mask position {p} outside {} rows",
                out.rows()
            )));
        }
        out.row_mut(p).copy_from_slice(mask_token);
    }
    Ok(out)
}
