use super::{dropout, Ctx, LayerNorm, Linear, ParamStore, SelfAttention};
use crate::error::{Error, Result};
use crate::ssm::SelectiveSsm;
use crate::tensor::{Real, Rng, Var};

/// Pre-norm Transformer layer: `x + Attn(LN x)`, then `+ MLP(LN ·)`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
    pub d: usize,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, mlp_ratio * d, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * d, d, true, rng)?,
            dropout,
            d,
        })
    }

    pub fn param_count(d: usize, mlp_ratio: usize) -> usize {
        2 * LayerNorm::param_count(d)
            + SelfAttention::param_count(d)
            + Linear::param_count(d, mlp_ratio * d, true)
            + Linear::param_count(mlp_ratio * d, d, true)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    pub fn forward_with_weights<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = ctx.g.shape(x);
        if s.last() != Some(&self.d) {
            return Err(Error::shape("transformer_layer", s, &[self.d]));
        }
        let h = self.ln1.forward(ctx, x)?;
        let (a, weights) = self.attn.forward_with_weights(ctx, h)?;
        let a = dropout(ctx, a, self.dropout)?;
        let x = ctx.g.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.g.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        let h = dropout(ctx, h, self.dropout)?;
        Ok((ctx.g.add(x, h)?, weights))
    }
}

/// Bottleneck block `x + Dropout(up(GELU(down(LN x))))`.
///
/// With `ssm` set, the inner activations pass through `z + ssm(z)` before the GELU.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub norm: LayerNorm,
    pub down: Linear,
    pub up: Linear,
    pub ssm: Option<SelectiveSsm>,
    pub dropout: f64,
    pub d_model: usize,
    pub d_inner: usize,
}

impl MambaBlock {
    /// `state` is the SSM state size when the inner mixer is enabled.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_inner: usize,
        dropout: f64,
        state: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_model == 0 || d_inner == 0 {
            return Err(Error::Config(format!("{name}: widths must be positive")));
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d_model)?;
        let down = Linear::new(store, &format!("{name}.down"), d_model, d_inner, true, rng)?;
        let ssm = state
            .map(|n| SelectiveSsm::new(store, &format!("{name}.ssm"), d_inner, n, rng))
            .transpose()?;
        let up = Linear::new(store, &format!("{name}.up"), d_inner, d_model, true, rng)?;
        Ok(Self {
            norm,
            down,
            up,
            ssm,
            dropout,
            d_model,
            d_inner,
        })
    }

    pub fn param_count(d_model: usize, d_inner: usize, state: Option<usize>) -> usize {
        LayerNorm::param_count(d_model)
            + Linear::param_count(d_model, d_inner, true)
            + Linear::param_count(d_inner, d_model, true)
            + state.map_or(0, |n| SelectiveSsm::param_count(d_inner, n))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        if s.last() != Some(&self.d_model) {
            return Err(Error::shape("mamba_block", s, &[self.d_model]));
        }
        let h = self.norm.forward(ctx, x)?;
        let mut z = self.down.forward(ctx, h)?;
        if let Some(ssm) = &self.ssm {
            let y = ssm.forward(ctx, z)?;
            z = ctx.g.add(z, y)?;
        }
        let z = ctx.g.gelu(z)?;
        let h = self.up.forward(ctx, z)?;
        let h = dropout(ctx, h, self.dropout)?;
        ctx.g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        assert_eq!(TransformerLayer::param_count(768, 4), 7_087_872);
        assert_eq!(MambaBlock::param_count(768, 64, None), 100_672);
    }

    #[test]
    fn built_counts_match_formulas() {
        let mut rng = Rng::new(0);
        let mut s = crate::nn::ParamStore::<f32>::new();
        TransformerLayer::new(&mut s, "t", 32, 4, 4, 0.1, &mut rng).unwrap();
        assert_eq!(s.numel(), TransformerLayer::param_count(32, 4));
        let mut s = crate::nn::ParamStore::<f32>::new();
        MambaBlock::new(&mut s, "m", 32, 8, 0.1, Some(4), &mut rng).unwrap();
        assert_eq!(s.numel(), MambaBlock::param_count(32, 8, Some(4)));
    }
}
