//! On-disk scene sets.
//!
//! ```text
//! <root>/manifest.toml      format, version, image_size, num_classes, scenes = ["scene_00000", ...]
//! <root>/<scene>/rgb.f32    size·size·3 little-endian f32, channels last, in [0, 1]
//! <root>/<scene>/depth.f32  size·size little-endian f32, raw depth
//! <root>/<scene>/semseg.u8  size·size class ids
//! <root>/<scene>/caption.txt
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::synth::Scene;

pub const FORMAT: &str = "m3et-scenes";
pub const FORMAT_VERSION: u32 = 1;
/// Larger images are rejected when reading a manifest.
pub const MAX_IMAGE_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub image_size: usize,
    pub num_classes: usize,
    pub scenes: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        if m.format != FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported format {} v{}", m.format, m.version)));
        }
        if m.image_size == 0 || m.image_size > MAX_IMAGE_SIZE {
            return Err(Error::Dataset(format!("image size {} out of range", m.image_size)));
        }
        if m.num_classes == 0 || m.num_classes > 256 {
            return Err(Error::Dataset(format!("{} classes do not fit in u8", m.num_classes)));
        }
        for s in &m.scenes {
            let plain = !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\', '\0']);
            if !plain {
                return Err(Error::Dataset(format!("scene name `{s}` is not a plain directory name")));
            }
        }
        Ok(m)
    }
}

/// Little-endian f32 values, exactly `expected` of them, all finite.
pub fn decode_f32_le(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if Some(bytes.len()) != expected.checked_mul(4) {
        return Err(Error::Dataset(format!("expected {expected} f32 values, got {} bytes", bytes.len())));
    }
    let out: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!("non-finite value at element {i}")));
    }
    Ok(out)
}

pub fn encode_f32_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Class ids, one byte each, all below `num_classes`.
pub fn decode_classes(bytes: &[u8], expected: usize, num_classes: usize) -> Result<Vec<usize>> {
    if bytes.len() != expected {
        return Err(Error::Dataset(format!("expected {expected} class ids, got {}", bytes.len())));
    }
    if let Some(i) = bytes.iter().position(|&c| c as usize >= num_classes) {
        return Err(Error::Dataset(format!("class {} at pixel {i} exceeds {num_classes}", bytes[i])));
    }
    Ok(bytes.iter().map(|&c| c as usize).collect())
}

pub fn write_scenes(root: &Path, scenes: &[Scene], num_classes: usize) -> Result<Manifest> {
    let size = scenes.first().map_or(0, |s| s.size);
    if scenes.iter().any(|s| s.size != size) {
        return Err(Error::Dataset("scenes differ in size".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        if s.semseg.iter().any(|&c| c >= num_classes) {
            return Err(Error::Dataset(format!("scene {i} has class ids beyond {num_classes}")));
        }
        let name = format!("scene_{i:05}");
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("rgb.f32"), encode_f32_le(&s.rgb))?;
        std::fs::write(dir.join("depth.f32"), encode_f32_le(&s.depth))?;
        std::fs::write(dir.join("semseg.u8"), s.semseg.iter().map(|&c| c as u8).collect::<Vec<_>>())?;
        std::fs::write(dir.join("caption.txt"), &s.caption)?;
        names.push(name);
    }
    let m = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        image_size: size,
        num_classes,
        scenes: names,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(root.join("manifest.toml"), text)?;
    Ok(m)
}

/// Scenes read back from disk; `objects` is empty.
pub fn read_scenes(root: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let m = Manifest::parse(&std::fs::read_to_string(root.join("manifest.toml"))?)?;
    let n = m.image_size * m.image_size;
    let mut out = Vec::with_capacity(m.scenes.len());
    for name in &m.scenes {
        let dir = root.join(name);
        let rgb = decode_f32_le(&std::fs::read(dir.join("rgb.f32"))?, 3 * n)?;
        let depth = decode_f32_le(&std::fs::read(dir.join("depth.f32"))?, n)?;
        let semseg = decode_classes(&std::fs::read(dir.join("semseg.u8"))?, n, m.num_classes)?;
        let caption = std::fs::read_to_string(dir.join("caption.txt"))?;
        out.push(Scene {
            size: m.image_size,
            rgb,
            depth,
            semseg,
            caption,
            objects: Vec::new(),
        });
    }
    Ok((m, out))
}
