//! Layer building blocks shared by the encoders.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.init(
            format!("{name}.weight"),
            fan_in,
            fan_out,
            Init::XavierUniform,
            true,
            rng,
        );
        let bias = bias.then(|| store.init(format!("{name}.bias"), 1, fan_out, Init::Zeros, false, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            gamma: store.init(format!("{name}.gamma"), 1, width, Init::Ones, false, rng),
            beta: store.init(format!("{name}.beta"), 1, width, Init::Zeros, false, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, rng),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            attn_out: Linear::new(store, &format!("{name}.attn_out"), width, width, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        seq_len: usize,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let h = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let a = g.attention(qkv, seq_len, self.heads, key_valid.map(<[bool]>::to_vec));
        let a = self.attn_out.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Transformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), width, heads, mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width, rng);
        Self { blocks, norm }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        seq_len: usize,
        key_valid: Option<&[bool]>,
    ) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, seq_len, key_valid);
        }
        self.norm.forward(g, x)
    }
}
