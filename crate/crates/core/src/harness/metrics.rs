use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::masking::Modality;
use crate::tensor::{Real, Tensor};

/// Returned for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("psnr", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() || !(peak > 0.0) {
        return Err(Error::InvalidArgument("psnr needs non-empty images and a positive peak".into()));
    }
    let sse: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(sse / pred.len() as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Argmax hits over positions whose target is not `pad_id`, as `(hits, scored)`.
pub fn token_hits<T: Real>(logits: &Tensor<T>, targets: &[usize], pad_id: usize) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::invalid_shape("token_hits", s, format!("{} targets", targets.len())));
    }
    let (mut hits, mut n) = (0, 0);
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = &logits.data()[r * s[1]..(r + 1) * s[1]];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
        hits += (best == t) as usize;
        n += 1;
    }
    Ok((hits, n))
}

/// One optimisation step as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Unweighted batch means of the components that were computed.
    pub components: Vec<(Modality, f64)>,
    /// Task trained this step when task sampling is on.
    pub task: Option<Modality>,
}

impl StepRecord {
    pub fn component(&self, m: Modality) -> Option<f64> {
        self.components.iter().find(|c| c.0 == m).map(|c| c.1)
    }

    pub fn line(&self) -> String {
        let mut s = format!("step={} lr={:e} total={:e}", self.step, self.lr, self.total);
        for (m, v) in &self.components {
            let _ = write!(s, " {}={:e}", m.name(), v);
        }
        if let Some(t) = self.task {
            let _ = write!(s, " task={}", t.name());
        }
        s
    }
}

/// Held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    /// Of the composite image (visible patches from the input, hidden ones predicted),
    /// pooled over every pixel of every held-out scene.
    pub psnr_db: f64,
    /// Over the masked patches only.
    pub psnr_hidden_db: f64,
    /// Mean absolute error in normalised depth units.
    pub depth_l1: f64,
    pub text_accuracy: Option<f64>,
}

impl EvalRecord {
    pub fn line(&self) -> String {
        let mut s = format!(
            "eval step={} psnr_db={:e} psnr_hidden_db={:e} depth_l1={:e}",
            self.step, self.psnr_db, self.psnr_hidden_db, self.depth_l1
        );
        if let Some(a) = self.text_accuracy {
            let _ = write!(s, " text_acc={a:e}");
        }
        s
    }
}

/// Step number of a metrics log line, for either record kind.
pub fn line_step(line: &str) -> Option<u64> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix("step="))
        .and_then(|v| v.parse().ok())
}

/// Mean of a trailing or leading window, for loss smoothing.
pub fn window_mean(xs: &[f64], from_start: bool, n: usize) -> Option<f64> {
    if xs.is_empty() || n == 0 {
        return None;
    }
    let n = n.min(xs.len());
    let w = if from_start { &xs[..n] } else { &xs[xs.len() - n..] };
    Some(w.iter().sum::<f64>() / n as f64)
}
