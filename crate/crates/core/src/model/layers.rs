use super::{Init, ParamSource};
use crate::error::Result;
use crate::numerics::{Graph, ParamId, Real, Var, LAYER_NORM_EPS};

/// Layer norm over the last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn build<T: Real>(src: &mut ParamSource<'_, T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: src.get(&format!("{prefix}.gamma"), &[dim], Init::Ones)?,
            beta: src.get(&format!("{prefix}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, T::of(LAYER_NORM_EPS))
    }
}

/// Pre-norm block: `x + Attn(LN x)` then `x + MLP(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub heads: usize,
    pub dim: usize,
    pub norm1: Norm,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm2: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl TransformerLayer {
    pub(crate) fn build<T: Real>(
        src: &mut ParamSource<'_, T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp: usize,
    ) -> Result<Self> {
        Ok(Self {
            heads,
            dim,
            norm1: Norm::build(src, &format!("{prefix}.norm1"), dim)?,
            qkv_w: src.get(&format!("{prefix}.attn.qkv.weight"), &[dim, 3 * dim], Init::Xavier)?,
            qkv_b: src.get(&format!("{prefix}.attn.qkv.bias"), &[3 * dim], Init::Zeros)?,
            proj_w: src.get(&format!("{prefix}.attn.proj.weight"), &[dim, dim], Init::Xavier)?,
            proj_b: src.get(&format!("{prefix}.attn.proj.bias"), &[dim], Init::Zeros)?,
            norm2: Norm::build(src, &format!("{prefix}.norm2"), dim)?,
            w1: src.get(&format!("{prefix}.ffn.w1"), &[dim, mlp], Init::Xavier)?,
            b1: src.get(&format!("{prefix}.ffn.b1"), &[mlp], Init::Zeros)?,
            w2: src.get(&format!("{prefix}.ffn.w2"), &[mlp, dim], Init::Xavier)?,
            b2: src.get(&format!("{prefix}.ffn.b2"), &[dim], Init::Zeros)?,
        })
    }

    pub fn attention<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = self.dim;
        let dh = d / self.heads;
        let (w, b) = (g.param(self.qkv_w), g.param(self.qkv_b));
        let qkv = g.linear(x, w, b)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, d + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s)?;
            outs.push(g.matmul(a, v)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { g.cat_cols(&outs)? };
        let (w, b) = (g.param(self.proj_w), g.param(self.proj_b));
        g.linear(o, w, b)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attention(g, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let (w1, b1) = (g.param(self.w1), g.param(self.b1));
        let h = g.linear(h, w1, b1)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(self.w2), g.param(self.b2));
        let h = g.linear(h, w2, b2)?;
        g.add(x, h)
    }
}
