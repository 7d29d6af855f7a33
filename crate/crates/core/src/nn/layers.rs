use super::{Ctx, ParamId, ParamStore, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor, Var};

/// Affine map over the last axis; weight is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add_weight(format!("{name}.weight"), &[d_in, d_out], rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight)?;
        let b = self.bias.map(|b| ctx.p(b)).transpose()?;
        ctx.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument(format!("{name}: layernorm width must be positive")));
        }
        let gamma = store.add_full(format!("{name}.gamma"), &[d], 1.0)?;
        let beta = store.add_zeros(format!("{name}.beta"), &[d])?;
        Ok(Self { gamma, beta, d, eps: LN_EPS })
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma)?, ctx.p(self.beta)?);
        ctx.g.layernorm(x, g, b, self.eps)
    }
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, p: f64) -> Result<Var> {
    if !ctx.training() || p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::InvalidArgument(format!("dropout probability {p} must be below 1")));
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = ctx.g.shape(x).to_vec();
    let rng = ctx.rng();
    let mask = Tensor::from_fn(shape, |_| if rng.bernoulli(p) { T::zero() } else { keep });
    let m = ctx.g.constant(mask)?;
    ctx.g.mul(x, m)
}

fn sincos_fill<T: Real>(pos: f64, d: usize, out: &mut [T]) {
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
        out[2 * i] = T::lit((pos * freq).sin());
        out[2 * i + 1] = T::lit((pos * freq).cos());
    }
}

/// Fixed interleaved sine/cosine table `[n, d]`, frequencies `10000^(−2i/d)`.
pub fn sincos_1d<T: Real>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sin-cos width must be even, got {d}")));
    }
    let mut data = vec![T::zero(); n * d];
    for p in 0..n {
        sincos_fill(p as f64, d, &mut data[p * d..(p + 1) * d]);
    }
    Tensor::new([n, d], data)
}

/// Grid table `[h·w, d]` in row-major patch order: first half encodes the row, second half the column.
pub fn sincos_2d<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d % 4 != 0 {
        return Err(Error::InvalidArgument(format!("2-D sin-cos width must be a multiple of 4, got {d}")));
    }
    let half = d / 2;
    let mut data = vec![T::zero(); h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            sincos_fill(r as f64, half, &mut row[..half]);
            sincos_fill(c as f64, half, &mut row[half..]);
        }
    }
    Tensor::new([h * w, d], data)
}
