//! Masked reconstruction losses and their weighted sum.
//!
//! Masks here mark the elements that are *scored*: `true` = masked out of the
//! encoder input, so included in the loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Modality;
use crate::tensor::{Graph, Real, Tensor, Var};

/// How masked losses are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Divide by the number of masked elements.
    #[default]
    MaskedCount,
    /// Divide by the number of all elements.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub semseg: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            depth: 1.0,
            semseg: 1.0,
            text: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Depth => self.depth,
            Modality::Semseg => self.semseg,
            Modality::Text => self.text,
        }
    }

    pub fn set(&mut self, m: Modality, w: f64) {
        match m {
            Modality::Rgb => self.rgb = w,
            Modality::Depth => self.depth = w,
            Modality::Semseg => self.semseg = w,
            Modality::Text => self.text = w,
        }
    }

    /// Only `m` keeps its weight.
    pub fn only(&self, m: Modality) -> Self {
        let mut w = Self {
            rgb: 0.0,
            depth: 0.0,
            semseg: 0.0,
            text: 0.0,
        };
        w.set(m, self.get(m));
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rgb, self.depth, self.semseg, self.text];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar loss node plus bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub value: Var,
    /// Scored elements (pixels, positions or values).
    pub count: usize,
    /// Nothing was scored; `value` is a constant zero.
    pub empty: bool,
}

fn row_weights<T: Real>(op: &'static str, shape: &[usize], mask: &[bool]) -> Result<(Vec<T>, usize)> {
    let rows = shape.first().copied().unwrap_or(0);
    if mask.len() != rows {
        return Err(Error::invalid_shape(op, shape, format!("mask has {} entries for {rows} rows", mask.len())));
    }
    let width = if rows == 0 { 0 } else { shape.iter().product::<usize>() / rows };
    let mut w = Vec::with_capacity(rows * width);
    let mut n = 0;
    for &m in mask {
        let v = if m { T::one() } else { T::zero() };
        n += m as usize * width;
        w.extend(std::iter::repeat(v).take(width));
    }
    Ok((w, n))
}

fn denom(norm: LossNorm, masked: usize, total: usize) -> usize {
    match norm {
        LossNorm::MaskedCount => masked,
        LossNorm::Total => total,
    }
}

fn zero<T: Real>(g: &mut Graph<T>) -> Result<MaskedLoss> {
    Ok(MaskedLoss {
        value: g.constant(Tensor::scalar(T::zero()))?,
        count: 0,
        empty: true,
    })
}

fn check_same<T: Real>(op: &'static str, g: &Graph<T>, pred: Var, target: &Tensor<T>) -> Result<()> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape(op, g.shape(pred), target.shape()));
    }
    Ok(())
}

/// Squared error averaged over rows with `mask[row]` set.
pub fn masked_mse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Arc<Tensor<T>>,
    mask: &[bool],
    norm: LossNorm,
) -> Result<MaskedLoss> {
    check_same("masked_mse", g, pred, &target)?;
    let (w, n) = row_weights("masked_mse", target.shape(), mask)?;
    if n == 0 {
        return zero(g);
    }
    let d = T::lit(denom(norm, n, target.numel()) as f64);
    let value = g.weighted_squared_error(pred, target, w, d)?;
    Ok(MaskedLoss { value, count: n, empty: false })
}

/// Absolute error averaged over rows with `mask[row]` set.
pub fn masked_l1<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Arc<Tensor<T>>,
    mask: &[bool],
    norm: LossNorm,
) -> Result<MaskedLoss> {
    check_same("masked_l1", g, pred, &target)?;
    let (w, n) = row_weights("masked_l1", target.shape(), mask)?;
    if n == 0 {
        return zero(g);
    }
    let d = T::lit(denom(norm, n, target.numel()) as f64);
    let value = g.weighted_abs_error(pred, target, w, d)?;
    Ok(MaskedLoss { value, count: n, empty: false })
}

/// Negative log-likelihood of `targets` under row-wise softmax of `logits [R, C]`, over masked rows.
pub fn masked_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    norm: LossNorm,
) -> Result<MaskedLoss> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
        return Err(Error::invalid_shape(
            "masked_cross_entropy",
            &shape,
            format!("{} targets and {} mask entries", targets.len(), mask.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::InvalidArgument(format!(
            "class id {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return zero(g);
    }
    let w: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let d = T::lit(denom(norm, n, shape[0]) as f64);
    let value = g.cross_entropy(logits, targets, w, d)?;
    Ok(MaskedLoss { value, count: n, empty: false })
}

/// Cross-entropy over every non-padding position.
pub fn text_cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize], pad_id: usize) -> Result<MaskedLoss> {
    let mask: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
    masked_cross_entropy(g, logits, targets, &mask, LossNorm::MaskedCount)
}

/// Weighted sum plus the unweighted component values.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: Var,
    pub components: Vec<(Modality, f64)>,
}

/// `Σ λ_m L_m`. Components with `λ_m = 0` are left off the graph.
pub fn total_loss<T: Real>(g: &mut Graph<T>, components: &[(Modality, Var)], w: &LossWeights) -> Result<TotalLoss> {
    let mut parts = Vec::with_capacity(components.len());
    let mut acc: Option<Var> = None;
    for &(m, v) in components {
        if g.shape(v).iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(g.shape(v).to_vec()));
        }
        let x = g.scalar(v).as_f64();
        if !x.is_finite() {
            return Err(Error::NonFiniteValue {
                what: format!("{m} loss is {x}"),
            });
        }
        parts.push((m, x));
        let lambda = w.get(m);
        if lambda == 0.0 {
            continue;
        }
        let term = if lambda == 1.0 { v } else { g.scale(v, T::lit(lambda))? };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let value = match acc {
        Some(v) => v,
        None => return Err(Error::Config("every loss component has zero weight".into())),
    };
    Ok(TotalLoss {
        value,
        components: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(shape: &[usize], v: &[f64]) -> Arc<Tensor<f64>> {
        Arc::new(Tensor::from_f64(shape.to_vec(), v).unwrap())
    }

    #[test]
    fn mse_ignores_unmasked() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64([2, 2], &[2.0, 2.0, 999.0, 999.0]).unwrap()).unwrap();
        let l = masked_mse(&mut g, p, arc(&[2, 2], &[0.0; 4]), &[true, false], LossNorm::MaskedCount).unwrap();
        assert_eq!(g.scalar(l.value), 4.0);
        assert_eq!(l.count, 2);
    }

    #[test]
    fn total_norm_divides_by_everything() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64([2, 1], &[2.0, 999.0]).unwrap()).unwrap();
        let l = masked_mse(&mut g, p, arc(&[2, 1], &[0.0; 2]), &[true, false], LossNorm::Total).unwrap();
        assert_eq!(g.scalar(l.value), 2.0);
    }

    #[test]
    fn l1_unit_and_empty() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full([3, 2], -3.0)).unwrap();
        let l = masked_l1(&mut g, p, arc(&[3, 2], &[0.0; 6]), &[true; 3], LossNorm::MaskedCount).unwrap();
        assert_eq!(g.scalar(l.value), 3.0);
        let e = masked_l1(&mut g, p, arc(&[3, 2], &[0.0; 6]), &[false; 3], LossNorm::MaskedCount).unwrap();
        assert!(e.empty);
        assert_eq!(g.scalar(e.value), 0.0);
    }

    #[test]
    fn uniform_ce_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([5, 4])).unwrap();
        let l = masked_cross_entropy(&mut g, z, &[0, 1, 2, 3, 0], &[true; 5], LossNorm::MaskedCount).unwrap();
        assert!((g.scalar(l.value) - 4f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::zeros([3, 256])).unwrap();
        let l = text_cross_entropy(&mut g, z, &[7, 9, 0], 0).unwrap();
        assert!((g.scalar(l.value) - 256f64.ln()).abs() < 1e-12);
        assert_eq!(l.count, 2);
    }

    #[test]
    fn bad_class_and_shape_rejected() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(masked_cross_entropy(&mut g, z, &[0, 3], &[true, true], LossNorm::MaskedCount).is_err());
        assert!(masked_mse(&mut g, z, arc(&[3, 2], &[0.0; 6]), &[true; 3], LossNorm::MaskedCount).is_err());
    }

    #[test]
    fn weighted_sum() {
        let mut g = Graph::<f64>::new();
        let comps: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, g.constant(Tensor::scalar(i as f64 + 1.0)).unwrap()))
            .collect();
        let t = total_loss(&mut g, &comps, &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(t.value), 10.0);
        let nan = g.constant(Tensor::scalar(f64::NAN)).unwrap();
        let err = total_loss(&mut g, &[(Modality::Depth, nan)], &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("depth"));
    }
}
