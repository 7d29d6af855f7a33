use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Rng, Tensor, Var};

/// Input-dependent SSM over `D` channels with an `N`-dimensional diagonal state each.
///
/// `B_t = s_B(x_t)`, `C_t = s_C(x_t)`, `Δ_t = softplus(P + s_Δ(x_t))` shared by all
/// channels, and `A = −exp(a_log)` per channel.
#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub a_log: ParamId,
    pub s_b: Linear,
    pub s_c: Linear,
    pub s_delta: Linear,
    pub p: ParamId,
    pub channels: usize,
    pub state: usize,
}

/// `softplus⁻¹(0.1)`, so the initial step size is about 0.1.
pub(crate) fn initial_p() -> f64 {
    (0.1f64.exp() - 1.0).ln()
}

impl SelectiveSsm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, state: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || state == 0 {
            return Err(Error::Config(format!("{name}: channels and state must be positive")));
        }
        // A = −(1..N) on every channel
        let a_log = Tensor::from_fn([channels, state], |i| T::lit(((i % state) as f64 + 1.0).ln()));
        let a_log = store.add(format!("{name}.a_log"), a_log)?;
        let s_b = Linear::new(store, &format!("{name}.s_b"), channels, state, true, rng)?;
        let s_c = Linear::new(store, &format!("{name}.s_c"), channels, state, true, rng)?;
        let s_delta = Linear::new(store, &format!("{name}.s_delta"), channels, 1, true, rng)?;
        let p = store.add_full(format!("{name}.p"), &[1], initial_p())?;
        Ok(Self {
            a_log,
            s_b,
            s_c,
            s_delta,
            p,
            channels,
            state,
        })
    }

    pub fn param_count(channels: usize, state: usize) -> usize {
        channels * state
            + 2 * Linear::param_count(channels, state, true)
            + Linear::param_count(channels, 1, true)
            + 1
    }

    /// Step sizes `[L, 1]`.
    pub fn step_sizes<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let d = self.s_delta.forward(ctx, x)?;
        let p = ctx.p(self.p)?;
        let pre = ctx.g.add(d, p)?;
        let delta = ctx.g.softplus(pre)?;
        if let Some(i) = ctx.g.value(delta).first_non_finite() {
            return Err(Error::NonFiniteValue {
                what: format!("step size at timestep {i}"),
            });
        }
        Ok(delta)
    }

    /// `x` is `[L, D]`; output has the same shape.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        if s.len() != 2 || s[1] != self.channels {
            return Err(Error::shape("selective_ssm", s, &[self.channels]));
        }
        let b = self.s_b.forward(ctx, x)?;
        let c = self.s_c.forward(ctx, x)?;
        let delta = self.step_sizes(ctx, x)?;
        let ones = ctx.g.constant(Tensor::ones([1, self.channels]))?;
        let delta = ctx.g.matmul(delta, ones)?;
        let a_log = ctx.p(self.a_log)?;
        let a = ctx.g.exp(a_log)?;
        let a = ctx.g.scale(a, -T::one())?;
        ctx.g.selective_scan(x, delta, a, b, c)
    }
}
