//! Caption transformer with key-padding masks.

use super::{split_embeddings, EmbeddingSet, TextConfig, TokenSequence};
use crate::autograd::Graph;
use crate::encoders::vision::EncodedBatch;
use crate::error::{Error, Result};
use crate::nn::{Linear, Transformer};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    token_embed: ParamId,
    pos: ParamId,
    body: Transformer,
    proj: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar>(config: &TextConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let token_embed = store.init("text.token_embed", config.vocab_size, w, Init::Normal(0.02), false, rng);
        let pos = store.init("text.pos", config.max_len, w, Init::Normal(0.02), false, rng);
        let body = Transformer::new(store, "text.body", w, config.depth, config.heads, config.mlp_ratio, rng);
        let proj = Linear::new(store, "text.proj", w, config.proj_dim, false, rng);
        Ok(Self {
            config: config.clone(),
            token_embed,
            pos,
            body,
            proj,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    /// Checks a batch and returns the shared sequence length.
    pub fn validate_batch(&self, tokens: &[TokenSequence]) -> Result<usize> {
        let first = tokens
            .first()
            .ok_or_else(|| Error::InvalidBatch("empty text batch".into()))?;
        let len = first.len();
        if len == 0 || len > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        for seq in tokens {
            if seq.len() != len {
                return Err(Error::InvalidBatch(format!(
                    "mixed sequence lengths {len} and {}",
                    seq.len()
                )));
            }
            if seq.pad_mask()[0] {
                return Err(Error::InvalidArgument(
                    "the classification position cannot be padding".into(),
                ));
            }
            if let Some((position, &id)) = seq
                .ids()
                .iter()
                .enumerate()
                .find(|(_, &id)| id as usize >= self.config.vocab_size)
            {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(len)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, tokens: &[TokenSequence]) -> Result<EncodedBatch> {
        let len = self.validate_batch(tokens)?;
        let batch = tokens.len();
        let ids: Vec<usize> = tokens.iter().flat_map(|s| s.ids().iter().map(|&i| i as usize)).collect();
        let key_valid: Vec<bool> = tokens.iter().flat_map(|s| s.pad_mask().iter().map(|&p| !p)).collect();
        let table = g.param(self.token_embed);
        let x = g.gather_rows(table, &ids)?;
        let pos_table = g.param(self.pos);
        let pos_rows: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos_table, &pos_rows)?;
        let x = g.add_tiled(x, pos);
        let states = self.body.forward(g, x, len, Some(&key_valid));
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
        let cls = g.gather_rows(states, &cls_rows)?;
        let projected = self.proj.forward(g, cls);
        let pooled = g.l2_normalize(projected);
        Ok(EncodedBatch {
            states,
            pooled,
            batch,
            seq_len: len,
        })
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[TokenSequence]) -> Result<Vec<EmbeddingSet<T>>> {
        let mut g = Graph::frozen(store);
        let out = self.forward(&mut g, tokens)?;
        Ok(split_embeddings(g.value(out.states), g.value(out.pooled), out.seq_len))
    }
}
