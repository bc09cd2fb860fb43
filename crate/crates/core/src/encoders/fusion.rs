//! Multimodal fusion encoder over concatenated image and text states.

use super::FusionConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Transformer};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct FusedOutput {
    /// `(batch · seq_len) × width`: fusion token, image tokens, text tokens.
    pub states: Var,
    /// `batch × width`, the fusion classification token.
    pub cls: Var,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    config: FusionConfig,
    image_width: usize,
    text_width: usize,
    image_in: Linear,
    text_in: Linear,
    cls: ParamId,
    /// Rows: fusion token, image, text.
    modality: ParamId,
    body: Transformer,
}

impl FusionEncoder {
    pub fn new<T: Scalar>(
        config: &FusionConfig,
        image_width: usize,
        text_width: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        Ok(Self {
            config: config.clone(),
            image_width,
            text_width,
            image_in: Linear::new(store, "fusion.image_in", image_width, w, true, rng),
            text_in: Linear::new(store, "fusion.text_in", text_width, w, true, rng),
            cls: store.init("fusion.cls", 1, w, Init::Normal(0.02), false, rng),
            modality: store.init("fusion.modality", 3, w, Init::Normal(0.02), false, rng),
            body: Transformer::new(store, "fusion.body", w, config.depth, config.heads, config.mlp_ratio, rng),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// `image_states` holds `batch` blocks of `image_len` rows, `text_states`
    /// `batch` blocks of `text_len` rows; `text_pad` flags padded text rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        image_states: Var,
        image_len: usize,
        text_states: Var,
        text_len: usize,
        text_pad: &[bool],
    ) -> Result<FusedOutput> {
        let (ir, iw) = g.shape(image_states);
        let (tr, tw) = g.shape(text_states);
        if iw != self.image_width || tw != self.text_width {
            return Err(Error::Config(format!(
                "fusion expects widths ({}, {}), got ({iw}, {tw})",
                self.image_width, self.text_width
            )));
        }
        if image_len == 0 || text_len == 0 || ir % image_len != 0 || tr % text_len != 0 {
            return Err(Error::Shape("fusion inputs do not tile into sequences".into()));
        }
        let batch = ir / image_len;
        if tr / text_len != batch || text_pad.len() != tr {
            return Err(Error::Shape(format!(
                "fusion batch mismatch: {batch} images, {} captions, {} pad flags",
                tr / text_len,
                text_pad.len()
            )));
        }
        let img = self.image_in.forward(g, image_states);
        let txt = self.text_in.forward(g, text_states);
        let cls = g.param(self.cls);
        let seq_len = 1 + image_len + text_len;
        let mut picks = Vec::with_capacity(batch * seq_len);
        let mut key_valid = Vec::with_capacity(batch * seq_len);
        for b in 0..batch {
            picks.push((2, 0));
            key_valid.push(true);
            for i in 0..image_len {
                picks.push((0, b * image_len + i));
                key_valid.push(true);
            }
            for t in 0..text_len {
                picks.push((1, b * text_len + t));
                key_valid.push(!text_pad[b * text_len + t]);
            }
        }
        let seq = g.select_rows(&[img, txt, cls], picks)?;
        let modality = g.param(self.modality);
        let kinds: Vec<usize> = std::iter::once(0)
            .chain(std::iter::repeat_n(1, image_len))
            .chain(std::iter::repeat_n(2, text_len))
            .collect();
        let tile = g.gather_rows(modality, &kinds)?;
        let seq = g.add_tiled(seq, tile);
        let states = self.body.forward(g, seq, seq_len, Some(&key_valid));
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
        let cls = g.gather_rows(states, &cls_rows)?;
        Ok(FusedOutput {
            states,
            cls,
            batch,
            seq_len,
        })
    }

    /// Inference over a single image/caption pair of token states.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image_states: &Tensor<T>,
        text_states: &Tensor<T>,
        text_pad: &[bool],
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let mut g = Graph::frozen(store);
        let i = g.constant(image_states.clone());
        let t = g.constant(text_states.clone());
        let out = self.forward(&mut g, i, image_states.rows(), t, text_states.rows(), text_pad)?;
        Ok((g.value(out.states).clone(), g.value(out.cls).row(0).to_vec()))
    }
}
