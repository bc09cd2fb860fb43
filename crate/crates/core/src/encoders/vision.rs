//! Patch-based vision transformer.

use super::{patchify, split_embeddings, EmbeddingSet, ImageArray, VisionConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{Linear, Transformer};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Graph handles for one encoded batch of `batch` sequences of `seq_len` tokens.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// `(batch · seq_len) × width`, classification token first in each sequence.
    pub states: Var,
    /// `batch × proj_dim`, unit rows.
    pub pooled: Var,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: VisionConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    mask_token: ParamId,
    body: Transformer,
    proj: Linear,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(config: &VisionConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let patch_embed = Linear::new(store, "vision.patch_embed", config.patch_dim(), w, true, rng);
        let cls = store.init("vision.cls", 1, w, Init::Normal(0.02), false, rng);
        let pos = store.init("vision.pos", config.num_patches() + 1, w, Init::Normal(0.02), false, rng);
        let mask_token = store.init("vision.mask_token", 1, w, Init::Normal(0.02), false, rng);
        let body = Transformer::new(store, "vision.body", w, config.depth, config.heads, config.mlp_ratio, rng);
        let proj = Linear::new(store, "vision.proj", w, config.proj_dim, false, rng);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls,
            pos,
            mask_token,
            body,
            proj,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    /// Patchifies and stacks a batch of images into `(B · patches) × patch_dim`.
    pub fn patches<T: Scalar>(&self, images: &[ImageArray<T>]) -> Result<Tensor<T>> {
        let c = &self.config;
        let mut parts = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.height != c.image_size || img.width != c.image_size || img.channels != c.channels {
                return Err(Error::Config(format!(
                    "image {i} is {}x{}x{}, encoder expects {}x{}x{}",
                    img.height, img.width, img.channels, c.image_size, c.image_size, c.channels
                )));
            }
            parts.push(patchify(img, c.patch_size)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::vstack(&refs)
    }

    /// Encodes stacked patches; masked patch embeddings are replaced by the
    /// learned mask token before positional embeddings are added.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        patches: &Tensor<T>,
        masks: Option<&[MaskPlan]>,
    ) -> Result<EncodedBatch> {
        let p = self.config.num_patches();
        if patches.cols() != self.config.patch_dim() || !patches.rows().is_multiple_of(p) || patches.rows() == 0 {
            return Err(Error::Config(format!(
                "patch tensor {:?} does not match {} patches of dim {}",
                patches.shape(),
                p,
                self.config.patch_dim()
            )));
        }
        let batch = patches.rows() / p;
        let mut masked = vec![false; batch * p];
        if let Some(plans) = masks {
            if plans.len() != batch {
                return Err(Error::InvalidArgument(format!(
                    "{} mask plans for a batch of {batch}",
                    plans.len()
                )));
            }
            for (b, plan) in plans.iter().enumerate() {
                for &pos in plan.positions() {
                    if pos >= p {
                        return Err(Error::InvalidArgument(format!(
                            "mask position {pos} outside {p} patches"
                        )));
                    }
                    masked[b * p + pos] = true;
                }
            }
        }
        let x = g.constant(patches.clone());
        let emb = self.patch_embed.forward(g, x);
        let cls = g.param(self.cls);
        let mask_token = g.param(self.mask_token);
        let mut picks = Vec::with_capacity(batch * (p + 1));
        for b in 0..batch {
            picks.push((1, 0));
            for i in 0..p {
                let r = b * p + i;
                picks.push(if masked[r] { (2, 0) } else { (0, r) });
            }
        }
        let seq = g.select_rows(&[emb, cls, mask_token], picks)?;
        let pos = g.param(self.pos);
        let seq = g.add_tiled(seq, pos);
        let states = self.body.forward(g, seq, p + 1, None);
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * (p + 1)).collect();
        let cls_states = g.gather_rows(states, &cls_rows)?;
        let projected = self.proj.forward(g, cls_states);
        let pooled = g.l2_normalize(projected);
        Ok(EncodedBatch {
            states,
            pooled,
            batch,
            seq_len: p + 1,
        })
    }

    /// Inference: one [`EmbeddingSet`] per image.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &[ImageArray<T>]) -> Result<Vec<EmbeddingSet<T>>> {
        let patches = self.patches(images)?;
        let mut g = Graph::frozen(store);
        let out = self.forward(&mut g, &patches, None)?;
        Ok(split_embeddings(g.value(out.states), g.value(out.pooled), out.seq_len))
    }
}
