//! Diagonal state-space kernels: discretization, convolution kernel, recurrent
//! scan, per-step (selective) scan and the materialized semiseparable matrix.
//!
//! Every function here works on one channel with an `N`-dimensional diagonal
//! state. Multi-channel models run one independent bank per channel.

mod selective;

use crate::error::{Error, Result};
use crate::tensor::zoh_factor;
use crate::tensor::{Real, Tensor};

pub use selective::SelectiveSsm;

/// Largest sequence length [`ssd_materialize`] accepts by default.
pub const SSD_MAX_LEN: usize = 512;

/// Static diagonal SSM: `h' = diag(a) h + b x`, `y = c·h`, sampled with step `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Per-timestep parameters of a selective SSM on one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams<T> {
    /// Diagonal of the continuous state matrix, `[N]`.
    pub a: Vec<T>,
    /// Step size per timestep, `[L]`.
    pub delta: Vec<T>,
    /// Input map per timestep, `[L, N]`.
    pub b: Tensor<T>,
    /// Output map per timestep, `[L, N]`.
    pub c: Tensor<T>,
}

/// Zero-order-hold discretization of a diagonal SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrete<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 || self.b.len() != n || self.c.len() != n {
            return Err(Error::InvalidArgument(format!(
                "ssm parameters need equal non-empty a/b/c, got {}/{}/{}",
                n,
                self.b.len(),
                self.c.len()
            )));
        }
        Ok(())
    }
}

impl<T: Real> StepParams<T> {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let (l, n) = (self.delta.len(), self.a.len());
        if n == 0 || self.b.shape() != [l, n] || self.c.shape() != [l, n] {
            return Err(Error::InvalidArgument(format!(
                "step parameters need b, c of shape [{l}, {n}], got {:?} and {:?}",
                self.b.shape(),
                self.c.shape()
            )));
        }
        if let Some(d) = self.delta.iter().find(|d| !(**d > T::zero())) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {d}")));
        }
        Ok(())
    }

    /// Per-step discretization `(Ā_t, B̄_t)`, each `[L, N]` flattened.
    fn discretize(&self) -> (Vec<T>, Vec<T>) {
        let (l, n) = (self.delta.len(), self.a.len());
        let mut a_bar = vec![T::zero(); l * n];
        let mut b_bar = vec![T::zero(); l * n];
        for t in 0..l {
            let dt = self.delta[t];
            for s in 0..n {
                a_bar[t * n + s] = (dt * self.a[s]).exp();
                b_bar[t * n + s] = zoh_factor(dt, self.a[s]) * self.b.data()[t * n + s];
            }
        }
        (a_bar, b_bar)
    }
}

/// `Ā = exp(Δa)`, `B̄ = (exp(Δa) − 1)/a · b`, with `B̄ = Δb` in the `a → 0` limit.
pub fn discretize<T: Real>(p: &SsmParams<T>) -> Result<Discrete<T>> {
    p.validate()?;
    if !(p.delta > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {}", p.delta)));
    }
    let a_bar = p.a.iter().map(|&a| (p.delta * a).exp()).collect();
    let b_bar = p.a.iter().zip(&p.b).map(|(&a, &b)| zoh_factor(p.delta, a) * b).collect();
    Ok(Discrete { a_bar, b_bar })
}

/// Impulse response `K[j] = Σ_n c_n Ā_n^j B̄_n` for `j < len`.
pub fn ssm_kernel<T: Real>(p: &SsmParams<T>, len: usize) -> Result<Vec<T>> {
    let d = discretize(p)?;
    let mut k = vec![T::zero(); len];
    for s in 0..p.state_size() {
        let mut pow = d.b_bar[s];
        for kj in k.iter_mut() {
            *kj += p.c[s] * pow;
            pow = pow * d.a_bar[s];
        }
    }
    Ok(k)
}

/// Causal convolution `y[t] = Σ_{j≤t} K[j] x[t−j]`.
pub fn ssm_conv<T: Real>(x: &[T], p: &SsmParams<T>) -> Result<Vec<T>> {
    let k = ssm_kernel(p, x.len())?;
    Ok((0..x.len())
        .map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum())
        .collect())
}

/// Sequential recurrence `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = c·h_t`, from `h_{−1} = 0`.
pub fn ssm_scan<T: Real>(x: &[T], p: &SsmParams<T>) -> Result<Vec<T>> {
    let d = discretize(p)?;
    let mut h = vec![T::zero(); p.state_size()];
    Ok(x.iter()
        .map(|&xt| {
            let mut y = T::zero();
            for s in 0..h.len() {
                h[s] = d.a_bar[s] * h[s] + d.b_bar[s] * xt;
                y += p.c[s] * h[s];
            }
            y
        })
        .collect())
}

/// Recurrence with per-step `Ā_t`, `B̄_t`, `c_t`.
pub fn selective_scan_ref<T: Real>(x: &[T], p: &StepParams<T>) -> Result<Vec<T>> {
    p.validate()?;
    if x.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "input length {} does not match {} steps",
            x.len(),
            p.len()
        )));
    }
    let n = p.a.len();
    let (a_bar, b_bar) = p.discretize();
    let mut h = vec![T::zero(); n];
    Ok(x.iter()
        .enumerate()
        .map(|(t, &xt)| {
            let mut y = T::zero();
            for s in 0..n {
                h[s] = a_bar[t * n + s] * h[s] + b_bar[t * n + s] * xt;
                y += p.c.data()[t * n + s] * h[s];
            }
            y
        })
        .collect())
}

/// Lower-triangular `M` with `M[j][i] = Σ_n c_n Ā_n^{j−i} B̄_n` for `i ≤ j`, so `y = M x`.
pub fn ssd_materialize<T: Real>(p: &SsmParams<T>, len: usize) -> Result<Tensor<T>> {
    if len > SSD_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "materialized length {len} exceeds the cap of {SSD_MAX_LEN}"
        )));
    }
    let k = ssm_kernel(p, len)?;
    let mut m = vec![T::zero(); len * len];
    for j in 0..len {
        for i in 0..=j {
            m[j * len + i] = k[j - i];
        }
    }
    Tensor::new([len, len], m)
}

/// Per-step form: `M[j][i] = Σ_n c_{j,n} (∏_{k=i+1..j} Ā_{k,n}) B̄_{i,n}` for `i ≤ j`.
///
/// The product starts after step `i`, so the diagonal is `c_i·B̄_i`.
pub fn ssd_materialize_steps<T: Real>(p: &StepParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let (len, n) = (p.len(), p.a.len());
    if len > SSD_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "materialized length {len} exceeds the cap of {SSD_MAX_LEN}"
        )));
    }
    let (a_bar, b_bar) = p.discretize();
    let c = p.c.data();
    let mut m = vec![T::zero(); len * len];
    for i in 0..len {
        for s in 0..n {
            // carry = ∏_{k=i+1..j} Ā_k · B̄_i
            let mut carry = b_bar[i * n + s];
            for j in i..len {
                if j > i {
                    carry = carry * a_bar[j * n + s];
                }
                m[j * len + i] += c[j * n + s] * carry;
            }
        }
    }
    Tensor::new([len, len], m)
}

/// `y = M x` for a square `M`.
pub fn ssd_apply<T: Real>(m: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let len = x.len();
    if m.shape() != [len, len] {
        return Err(Error::shape("ssd_apply", m.shape(), &[len]));
    }
    Ok((0..len)
        .map(|j| m.row(j).iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, c: f64, delta: f64) -> SsmParams<f64> {
        SsmParams {
            a: vec![a],
            b: vec![b],
            c: vec![c],
            delta,
        }
    }

    #[test]
    fn zero_a_limit() {
        let d = discretize(&scalar(0.0, 2.0, 1.0, 0.5)).unwrap();
        assert_eq!(d.a_bar, vec![1.0]);
        assert!((d.b_bar[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_decay_closed_form() {
        let d = discretize(&scalar(-1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((d.a_bar[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((d.b_bar[0] - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((d.a_bar[0] - 0.367879).abs() < 1e-6);
        assert!((d.b_bar[0] - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn small_step_continuity() {
        let d = discretize(&scalar(-3.0, 1.0, 1.0, 1e-12)).unwrap();
        assert!((d.a_bar[0] - 1.0).abs() < 1e-10);
        assert!(d.b_bar[0].abs() < 1e-10);
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(discretize(&scalar(-1.0, 1.0, 1.0, 0.0)).is_err());
        assert!(discretize(&scalar(-1.0, 1.0, 1.0, -0.1)).is_err());
    }

    #[test]
    fn kernel_cases() {
        let p = scalar(0.0, 1.0, 3.0, 1.0);
        assert_eq!(ssm_kernel(&p, 1).unwrap(), vec![3.0]);
        assert!(ssm_kernel(&p, 5).unwrap().iter().all(|&k| (k - 3.0).abs() < 1e-15));
    }

    #[test]
    fn cumulative_sum_case() {
        let p = scalar(0.0, 1.0, 1.0, 1.0);
        let x = [1.0, -2.0, 0.5, 4.0];
        let y = ssm_conv(&x, &p).unwrap();
        assert_eq!(y, vec![1.0, -1.0, -0.5, 3.5]);
        assert_eq!(ssm_scan(&x, &p).unwrap(), y);
    }

    #[test]
    fn impulse_gives_kernel() {
        let p: SsmParams<f64> = SsmParams {
            a: vec![-0.5, -2.0],
            b: vec![1.0, 0.3],
            c: vec![0.7, -1.1],
            delta: 0.2,
        };
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let k = ssm_kernel(&p, 6).unwrap();
        assert_eq!(ssm_conv(&x, &p).unwrap(), k);
        let s = ssm_scan(&x, &p).unwrap();
        for (a, b) in s.iter().zip(&k) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn materialize_is_causal_and_capped() {
        let p = scalar(-1.0, 1.0, 2.0, 0.3);
        let m = ssd_materialize(&p, 4).unwrap();
        for j in 0..4 {
            for i in j + 1..4 {
                assert_eq!(m.at(&[j, i]), 0.0);
            }
        }
        let single = ssd_materialize(&p, 1).unwrap();
        let d = discretize(&p).unwrap();
        assert_eq!(single.data(), &[2.0 * d.b_bar[0]]);
        assert!(ssd_materialize(&p, SSD_MAX_LEN + 1).is_err());
    }
}
