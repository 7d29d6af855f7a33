//! Visible-token sampling: Dirichlet budget split across visual modalities,
//! uniform token choice inside each, whole-sentence text masking and uniform
//! task selection.

use std::fmt;

use rand::seq::index::sample;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Semseg,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Semseg, Modality::Text];
    pub const VISUAL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Semseg];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Semseg => "semseg",
            Modality::Text => "text",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality `{s}`")))
    }
}

/// Visibility of every token of every modality for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Visual modalities sharing the budget, in allocation order.
    pub modalities: Vec<Modality>,
    /// `true` = visible, one array per entry of `modalities`.
    pub visible: Vec<Vec<bool>>,
    /// Dirichlet draw, one entry per modality.
    pub ratios: Vec<f64>,
    pub budget: usize,
    /// Text visibility; padding positions are never visible.
    pub text: Option<Vec<bool>>,
}

impl MaskPlan {
    pub fn visible_of(&self, m: Modality) -> Option<&[bool]> {
        if m == Modality::Text {
            return self.text.as_deref();
        }
        self.modalities
            .iter()
            .position(|&x| x == m)
            .map(|i| self.visible[i].as_slice())
    }

    /// Sorted indices of visible tokens.
    pub fn visible_indices(&self, m: Modality) -> Vec<usize> {
        self.visible_of(m)
            .map(|v| v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn visible_counts(&self) -> Vec<usize> {
        self.visible.iter().map(|v| v.iter().filter(|&&b| b).count()).collect()
    }
}

/// `λ ~ Dir(alpha)` as normalised independent `Gamma(α_i, 1)` draws.
pub fn dirichlet(alpha: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::InvalidArgument("dirichlet needs at least one concentration".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("dirichlet concentration must be positive, got {a}")));
    }
    if alpha.len() == 1 {
        return Ok(vec![1.0]);
    }
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        return Ok(draws.iter().map(|d| d / total).collect());
    }
    // every draw underflowed: tiny concentrations put all mass on one vertex
    let hot = rng.below(alpha.len());
    Ok((0..alpha.len()).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
}

/// Split `budget` by `ratios` with largest-remainder rounding, never exceeding `caps`.
///
/// Any modality that would overflow is pinned at its cap and the rest of the
/// budget is re-split over the others in proportion to their ratios. Ties in
/// the remainder go to the lower index.
pub fn allocate(ratios: &[f64], budget: usize, caps: &[usize]) -> Result<Vec<usize>> {
    if ratios.len() != caps.len() {
        return Err(Error::InvalidArgument("one ratio per modality required".into()));
    }
    let capacity: usize = caps.iter().sum();
    if budget > capacity {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds the {capacity} available tokens"
        )));
    }
    let n = ratios.len();
    let mut alloc = vec![0usize; n];
    let mut pinned = vec![false; n];
    let mut remaining = budget;
    loop {
        let open: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
        if open.is_empty() || remaining == 0 {
            for &i in &open {
                alloc[i] = 0;
            }
            break;
        }
        let mass: f64 = open.iter().map(|&i| ratios[i]).sum();
        // zero mass left (all weight sat on pinned modalities): fall back to capacity share
        let weight = |i: usize| if mass > 0.0 { ratios[i] / mass } else { caps[i] as f64 };
        let wsum: f64 = open.iter().map(|&i| weight(i)).sum();
        let quotas: Vec<f64> = open.iter().map(|&i| weight(i) / wsum * remaining as f64).collect();
        let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut short = remaining - take.iter().sum::<usize>().min(remaining);
        let mut order: Vec<usize> = (0..open.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &k in order.iter().cycle().take(open.len() * 2) {
            if short == 0 {
                break;
            }
            take[k] += 1;
            short -= 1;
        }
        let over: Vec<usize> = (0..open.len()).filter(|&k| take[k] > caps[open[k]]).collect();
        if over.is_empty() {
            for (k, &i) in open.iter().enumerate() {
                alloc[i] = take[k];
            }
            break;
        }
        for k in over {
            let i = open[k];
            pinned[i] = true;
            alloc[i] = caps[i];
            remaining -= caps[i];
        }
    }
    debug_assert_eq!(alloc.iter().sum::<usize>(), budget);
    Ok(alloc)
}

/// Draw a plan: `λ ~ Dir(alpha)`, split `budget` visible tokens by `λ`, and pick
/// each modality's visible tokens uniformly without replacement.
pub fn sample_mask_plan(
    counts: &[(Modality, usize)],
    budget: usize,
    alpha: &[f64],
    rng: &mut Rng,
) -> Result<MaskPlan> {
    if alpha.len() != counts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} concentrations for {} modalities",
            alpha.len(),
            counts.len()
        )));
    }
    let ratios = dirichlet(alpha, rng)?;
    let caps: Vec<usize> = counts.iter().map(|c| c.1).collect();
    let alloc = allocate(&ratios, budget, &caps)?;
    let visible = counts
        .iter()
        .zip(&alloc)
        .map(|(&(_, n), &k)| {
            let mut v = vec![false; n];
            for i in sample(rng, n, k) {
                v[i] = true;
            }
            v
        })
        .collect();
    Ok(MaskPlan {
        modalities: counts.iter().map(|c| c.0).collect(),
        visible,
        ratios,
        budget,
        text: None,
    })
}

/// Ordered, disjoint half-open token ranges, one per sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceSpans(Vec<(usize, usize)>);

impl SentenceSpans {
    pub fn new(spans: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, e) in &spans {
            if s >= e {
                return Err(Error::InvalidArgument(format!("empty or reversed span {s}..{e}")));
            }
        }
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::InvalidArgument(format!(
                    "overlapping or unordered spans {}..{} and {}..{}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(Self(spans))
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn end(&self) -> usize {
        self.0.last().map_or(0, |s| s.1)
    }
}

/// Hide each sentence entirely with probability `p_mask`. Tokens outside every span stay hidden.
pub fn mask_text_sentences(spans: &SentenceSpans, len: usize, p_mask: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::InvalidArgument(format!("mask probability {p_mask} outside [0, 1]")));
    }
    if spans.end() > len {
        return Err(Error::InvalidArgument(format!(
            "spans reach token {} beyond length {len}",
            spans.end()
        )));
    }
    let mut visible = vec![false; len];
    for &(s, e) in spans.spans() {
        if !rng.bernoulli(p_mask) {
            visible[s..e].iter_mut().for_each(|v| *v = true);
        }
    }
    Ok(visible)
}

/// Uniform choice from a non-empty list.
pub fn select_task<T: Copy>(tasks: &[T], rng: &mut Rng) -> Result<T> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to select from".into()));
    }
    Ok(tasks[rng.below(tasks.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_modality_takes_everything() {
        let mut rng = Rng::new(0);
        let plan = sample_mask_plan(&[(Modality::Rgb, 16)], 5, &[1.0], &mut rng).unwrap();
        assert_eq!(plan.ratios, vec![1.0]);
        assert_eq!(plan.visible_counts(), vec![5]);
    }

    #[test]
    fn budget_over_capacity_rejected() {
        let mut rng = Rng::new(0);
        let counts = [(Modality::Rgb, 4), (Modality::Depth, 4)];
        assert!(sample_mask_plan(&counts, 9, &[1.0, 1.0], &mut rng).is_err());
        assert!(sample_mask_plan(&counts, 8, &[1.0, 1.0], &mut rng).is_ok());
    }

    #[test]
    fn allocation_respects_caps() {
        assert_eq!(allocate(&[0.9, 0.05, 0.05], 10, &[4, 10, 10]).unwrap(), vec![4, 3, 3]);
        assert_eq!(allocate(&[1.0, 0.0, 0.0], 10, &[4, 3, 10]).unwrap(), vec![4, 1, 5]);
        assert_eq!(allocate(&[0.5, 0.5], 3, &[10, 10]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn sentence_mask_extremes() {
        let spans = SentenceSpans::new(vec![(0, 3), (3, 7)]).unwrap();
        let mut rng = Rng::new(1);
        let all = mask_text_sentences(&spans, 10, 0.0, &mut rng).unwrap();
        assert_eq!(all, [vec![true; 7], vec![false; 3]].concat());
        let none = mask_text_sentences(&spans, 10, 1.0, &mut rng).unwrap();
        assert!(none.iter().all(|v| !v));
    }

    #[test]
    fn overlapping_spans_rejected() {
        assert!(SentenceSpans::new(vec![(0, 4), (3, 6)]).is_err());
        assert!(SentenceSpans::new(vec![(2, 2)]).is_err());
    }

    #[test]
    fn select_task_cases() {
        let mut rng = Rng::new(2);
        assert!(select_task::<u8>(&[], &mut rng).is_err());
        assert!((0..50).all(|_| select_task(&[7], &mut rng).unwrap() == 7));
        let a: Vec<u8> = (0..20).map(|_| select_task(&[0, 1, 2], &mut Rng::new(9)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn plan_serializes() {
        let mut rng = Rng::new(3);
        let plan = sample_mask_plan(&[(Modality::Rgb, 4), (Modality::Depth, 4)], 3, &[1.0, 1.0], &mut rng).unwrap();
        let s = serde_json::to_string(&plan).unwrap();
        let back: MaskPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(plan, back);
    }
}
