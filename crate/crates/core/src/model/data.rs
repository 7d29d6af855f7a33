use crate::error::{Error, Result};
use crate::masking::SentenceSpans;
use crate::tensor::{Real, Tensor};

use super::ModelConfig;

/// Token id used for padding; NUL bytes are dropped by the tokenizer.
pub const PAD_ID: usize = 0;

/// Clamp and standardisation applied to one depth map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthStats {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub std: f64,
}

/// One scene with every modality at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor<T>,
    /// `[H, W]`, truncated and standardised.
    pub depth: Tensor<T>,
    pub depth_stats: DepthStats,
    /// `H·W` class ids.
    pub semseg: Vec<usize>,
    /// `text_len` byte ids, right-padded.
    pub text: Vec<usize>,
    pub spans: SentenceSpans,
}

/// A batch of samples sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Real> Sample<T> {
    /// Build from raw inputs: depth is normalised and the caption tokenized here.
    pub fn from_raw(cfg: &ModelConfig, rgb: &[f64], depth: &[f64], semseg: &[usize], caption: &str) -> Result<Self> {
        let (h, w) = (cfg.image_size, cfg.image_size);
        if rgb.len() != h * w * 3 || depth.len() != h * w || semseg.len() != h * w {
            return Err(Error::Dataset(format!(
                "expected {h}x{w} maps, got {} rgb, {} depth and {} semseg values",
                rgb.len(),
                depth.len(),
                semseg.len()
            )));
        }
        if let Some(&c) = semseg.iter().find(|&&c| c >= cfg.num_classes) {
            return Err(Error::Dataset(format!("class id {c} outside 0..{}", cfg.num_classes)));
        }
        if rgb.iter().chain(depth).any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite pixel value".into()));
        }
        let (norm, depth_stats) = depth_truncated_normalize(depth)?;
        let (text, spans) = tokenize_text(caption, cfg.text_len);
        Ok(Self {
            rgb: Tensor::from_f64([h, w, 3], rgb)?,
            depth: Tensor::from_f64([h, w], &norm)?,
            depth_stats,
            semseg: semseg.to_vec(),
            text,
            spans,
        })
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let s = cfg.image_size;
        if self.rgb.shape() != [s, s, 3] || self.depth.shape() != [s, s] || self.semseg.len() != s * s {
            return Err(Error::Dataset(format!("sample geometry does not match {s}x{s} images")));
        }
        if self.text.len() != cfg.text_len {
            return Err(Error::Dataset(format!(
                "text has {} tokens, expected {}",
                self.text.len(),
                cfg.text_len
            )));
        }
        if let Some(&c) = self.semseg.iter().find(|&&c| c >= cfg.num_classes) {
            return Err(Error::Dataset(format!("class id {c} outside 0..{}", cfg.num_classes)));
        }
        if let Some(&t) = self.text.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Dataset(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        Ok(())
    }
}

/// `[H, W, c]` (or `[H, W]`) into `[(H/p)(W/p), p·p·c]`, patches and pixels both row-major.
pub fn patchify<T: Real>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    let (h, w, c) = match *s {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::invalid_shape("patchify", s, "expects [H, W] or [H, W, C]")),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid_shape("patchify", s, format!("patch {patch} must divide height and width")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let per = patch * patch * c;
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                let start = ((pr * patch + y) * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new([gh * gw, per], out)
}

/// Inverse of [`patchify`] onto an `[H, W, c]` image.
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!("patch {patch} must divide {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    if tokens.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::shape("unpatchify", tokens.shape(), &[gh * gw, patch * patch * c]));
    }
    let src = tokens.data();
    let mut out = vec![T::zero(); h * w * c];
    let mut k = 0;
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                let start = ((pr * patch + y) * w + pc * patch) * c;
                out[start..start + patch * c].copy_from_slice(&src[k..k + patch * c]);
                k += patch * c;
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Class ids of a `H·W` map reordered patch by patch, pixels row-major inside each patch.
pub(crate) fn patch_order<T: Copy>(map: &[T], size: usize, patch: usize) -> Vec<T> {
    let g = size / patch;
    let mut out = Vec::with_capacity(map.len());
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..patch {
                let start = (pr * patch + y) * size + pc * patch;
                out.extend_from_slice(&map[start..start + patch]);
            }
        }
    }
    out
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + (sorted[i + 1] - sorted[i]) * frac
    } else {
        sorted[i]
    }
}

/// Clamp to the 1st..99th percentile (linear interpolation), then zero mean and unit variance.
///
/// A constant map stays centred at zero with unit scale.
pub fn depth_truncated_normalize(depth: &[f64]) -> Result<(Vec<f64>, DepthStats)> {
    if depth.is_empty() {
        return Err(Error::InvalidArgument("empty depth map".into()));
    }
    if depth.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFiniteValue {
            what: "depth map".into(),
        });
    }
    let mut sorted = depth.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
    let clamped: Vec<f64> = depth.iter().map(|d| d.clamp(lo, hi)).collect();
    let n = clamped.len() as f64;
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let out = clamped.iter().map(|d| (d - mean) / std).collect();
    Ok((out, DepthStats { lo, hi, mean, std }))
}

fn ends_sentence(b: usize) -> bool {
    matches!(b as u8, b'.' | b'?' | b'!')
}

/// Byte-level ids truncated or right-padded to `max_len`, plus sentence spans.
///
/// A span closes after `.`, `?` or `!`. A trailing run without a terminator is its
/// own span unless it is only whitespace, in which case it joins the previous one.
pub fn tokenize_text(s: &str, max_len: usize) -> (Vec<usize>, SentenceSpans) {
    let mut ids: Vec<usize> = s.bytes().filter(|&b| b != 0).map(usize::from).take(max_len).collect();
    let used = ids.len();
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &b) in ids.iter().enumerate() {
        if ends_sentence(b) {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < used {
        let blank = ids[start..].iter().all(|&b| (b as u8).is_ascii_whitespace());
        match spans.last_mut() {
            Some(last) if blank => last.1 = used,
            _ => spans.push((start, used)),
        }
    }
    ids.resize(max_len, PAD_ID);
    let spans = SentenceSpans::new(spans).expect("spans are built ordered and disjoint");
    (ids, spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = Tensor::<f64>::zeros([224, 224, 3]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        let d = Tensor::<f64>::zeros([64, 64]);
        assert_eq!(patchify(&d, 16).unwrap().shape(), &[16, 256]);
        assert!(patchify(&Tensor::<f64>::zeros([30, 32]), 16).is_err());
    }

    #[test]
    fn patchify_roundtrip_and_order() {
        let img = Tensor::<f64>::from_fn([4, 6, 2], |i| i as f64);
        let t = patchify(&img, 2).unwrap();
        // second patch starts at column 2 of row 0
        assert_eq!(t.row(1)[..2], [img.at(&[0, 2, 0]), img.at(&[0, 2, 1])]);
        assert_eq!(unpatchify(&t, 4, 6, 2, 2).unwrap(), img);
        let ids: Vec<usize> = (0..24).collect();
        let po = patch_order(&ids, 4, 2);
        assert_eq!(&po[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn tokenizer_rules() {
        let (ids, spans) = tokenize_text("", 8);
        assert_eq!(ids, vec![PAD_ID; 8]);
        assert!(spans.is_empty());
        let (ids, spans) = tokenize_text("A. B.", 8);
        assert_eq!(spans.spans(), &[(0, 2), (2, 5)]);
        assert_eq!(&ids[..5], b"A. B.".map(usize::from).as_slice());
        assert_eq!(ids[5], PAD_ID);
        let long = "x".repeat(200);
        let (ids, spans) = tokenize_text(&long, 128);
        assert_eq!(ids.len(), 128);
        assert!(ids.iter().all(|&i| i == b'x' as usize));
        assert_eq!(spans.spans(), &[(0, 128)]);
        let (_, spans) = tokenize_text("Hi! ", 8);
        assert_eq!(spans.spans(), &[(0, 4)]);
        let (ids, _) = tokenize_text("a\0b", 4);
        assert_eq!(&ids[..2], &[b'a' as usize, b'b' as usize]);
    }

    #[test]
    fn depth_normalization() {
        let d: Vec<f64> = (0..100).map(|i| i as f64).chain([1e6]).collect();
        let (n, st) = depth_truncated_normalize(&d).unwrap();
        assert!(st.hi < 1e6);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        let (flat, _) = depth_truncated_normalize(&[3.0; 10]).unwrap();
        assert!(flat.iter().all(|&x| x == 0.0));
    }
}
