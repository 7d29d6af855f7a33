//! Masked-input reconstructions written as images for inspection.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::{MaskPlan, Modality};
use crate::model::{M3et, ModelConfig, Sample};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Graph, Real, Rng, Tensor};

use super::metrics::psnr;

/// Binary PPM of an `[H, W, 3]` image in `[0, 1]`.
pub fn encode_ppm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid_shape("encode_ppm", s, "expected [H, W, 3]"));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Panels placed left to right.
fn hstack<T: Real>(panels: &[&Tensor<T>]) -> Tensor<T> {
    let (h, w) = (panels[0].shape()[0], panels[0].shape()[1]);
    let n = panels.len();
    Tensor::from_fn([h, w * n, 3], |i| {
        let (y, rest) = (i / (w * n * 3), i % (w * n * 3));
        let (x, c) = (rest / 3, rest % 3);
        panels[x / w].data()[(y * w + x % w) * 3 + c]
    })
}

/// The input image with hidden patches greyed out.
pub fn masked_input<T: Real>(img: &Tensor<T>, visible: &[bool], patch: usize) -> Tensor<T> {
    let w = img.shape()[1];
    let grid = w / patch;
    let mut out = img.clone();
    let d = out.data_mut();
    for (i, px) in d.chunks_mut(3).enumerate() {
        let (y, x) = (i / w, i % w);
        if !visible[(y / patch) * grid + x / patch] {
            px.fill(T::lit(0.5));
        }
    }
    out
}

/// Visible patches from `img`, hidden ones from `pred`.
pub fn composite<T: Real>(img: &Tensor<T>, pred: &Tensor<T>, visible: &[bool], patch: usize) -> Tensor<T> {
    let w = img.shape()[1];
    let grid = w / patch;
    let mut out = pred.clone();
    let d = out.data_mut();
    for (i, px) in d.chunks_mut(3).enumerate() {
        let (y, x) = (i / w, i % w);
        if visible[(y / patch) * grid + x / patch] {
            px.copy_from_slice(&img.data()[3 * i..3 * i + 3]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub plan: MaskPlan,
    /// PSNR of the composite against the target.
    pub psnr_db: f64,
    pub image_path: Option<PathBuf>,
    pub plan_path: Option<PathBuf>,
}

/// Reconstruct `sample` under a plan drawn from `plan_rng`, writing
/// `recon.ppm` (masked input, composite, raw prediction, target) and `plan.json`.
pub fn reconstruct<T: Real>(
    cfg: &ModelConfig,
    model: &M3et,
    store: &ParamStore<T>,
    sample: &Sample<T>,
    plan_rng: &mut Rng,
    out_dir: Option<&Path>,
) -> Result<Reconstruction> {
    let plan = cfg.sample_plan(&sample.spans, plan_rng)?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, false, Rng::new(0));
    let fwd = model.forward(&mut ctx, sample, &plan)?;
    let pred = model.rgb_image(&ctx, &fwd)?;
    let visible = plan
        .visible_of(Modality::Rgb)
        .ok_or_else(|| Error::InvalidArgument("plan has no rgb entry".into()))?;
    let comp = composite(&sample.rgb, &pred, visible, cfg.patch);
    let psnr_db = psnr(&comp.to_f64_vec(), &sample.rgb.to_f64_vec(), 1.0)?;
    let (mut image_path, mut plan_path) = (None, None);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let masked = masked_input(&sample.rgb, visible, cfg.patch);
        let panel = hstack(&[&masked, &comp, &pred, &sample.rgb]);
        let ip = dir.join("recon.ppm");
        std::fs::write(&ip, encode_ppm(&panel)?)?;
        let pp = dir.join("plan.json");
        let json = serde_json::to_string_pretty(&plan).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(&pp, json)?;
        image_path = Some(ip);
        plan_path = Some(pp);
    }
    Ok(Reconstruction {
        plan,
        psnr_db,
        image_path,
        plan_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let img = Tensor::<f64>::full([2, 3, 3], 1.0);
        let b = encode_ppm(&img).unwrap();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 18);
        assert!(encode_ppm(&Tensor::<f64>::zeros([2, 2])).is_err());
    }

    #[test]
    fn composite_takes_visible_from_input() {
        let img = Tensor::<f64>::full([4, 4, 3], 1.0);
        let pred = Tensor::<f64>::zeros([4, 4, 3]);
        let c = composite(&img, &pred, &[true, false, false, false], 2);
        assert_eq!(c.data()[0], 1.0);
        assert_eq!(c.data()[3 * 2], 0.0);
        assert_eq!(c.data()[3 * 5], 1.0);
        let m = masked_input(&img, &[true, false, false, false], 2);
        assert_eq!(m.data()[3 * 2], 0.5);
    }
}
