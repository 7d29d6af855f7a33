use super::{Ctx, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Var};

/// Multi-head self-attention with a fused QKV projection and an output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub d: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{name}: width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, rng)?,
            heads,
            d,
        })
    }

    pub fn param_count(d: usize) -> usize {
        Linear::param_count(d, 3 * d, true) + Linear::param_count(d, d, true)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    /// Output plus the `[T, T]` attention matrix of every head.
    pub fn forward_with_weights<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = ctx.g.shape(x);
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::shape("self_attention", s, &[s[0], self.d]));
        }
        let qkv = self.qkv.forward(ctx, x)?;
        let dh = self.d / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = ctx.g.slice_cols(qkv, h * dh, dh)?;
            let k = ctx.g.slice_cols(qkv, self.d + h * dh, dh)?;
            let v = ctx.g.slice_cols(qkv, 2 * self.d + h * dh, dh)?;
            let scores = ctx.g.matmul_t(q, k, false, true)?;
            let scores = ctx.g.scale(scores, scale)?;
            let a = ctx.g.softmax(scores, 1)?;
            outs.push(ctx.g.matmul(a, v)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.g.concat_cols(&outs)? };
        Ok((self.proj.forward(ctx, cat)?, weights))
    }
}

/// Single-head attention whose queries, keys and values come from three token groups.
///
/// `softmax(Q Wq (K Wk)ᵀ / √d_k) V Wv`, no output projection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub d_k: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: [usize; 3],
        d_k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_in[0], d_k, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_in[1], d_k, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_in[2], d_k, true, rng)?,
            d_k,
        })
    }

    pub fn param_count(d_in: [usize; 3], d_k: usize) -> usize {
        d_in.iter().map(|&d| Linear::param_count(d, d_k, true)).sum()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, q_src: Var, k_src: Var, v_src: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, q_src, k_src, v_src)?.0)
    }

    /// Output `[T_q, d_k]` and the `[T_q, T_k]` attention matrix.
    pub fn forward_with_weights<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<(Var, Var)> {
        let (tk, tv) = (ctx.g.shape(k_src)[0], ctx.g.shape(v_src)[0]);
        if tk != tv {
            return Err(Error::InvalidArgument(format!(
                "cross attention needs as many key tokens as value tokens, got {tk} keys and {tv} values"
            )));
        }
        let q = self.q.forward(ctx, q_src)?;
        let k = self.k.forward(ctx, k_src)?;
        let v = self.v.forward(ctx, v_src)?;
        let scores = ctx.g.matmul_t(q, k, false, true)?;
        let scores = ctx.g.scale(scores, T::lit(1.0 / (self.d_k as f64).sqrt()))?;
        let a = ctx.g.softmax(scores, 1)?;
        Ok((ctx.g.matmul(a, v)?, a))
    }
}
