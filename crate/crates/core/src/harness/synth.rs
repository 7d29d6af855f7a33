//! Procedural scenes: one or two flat shapes over a floor, with matching depth,
//! class map and caption.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sample};
use crate::tensor::{Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Class id in the semseg map; 0 is background.
    pub fn class_id(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at cy + r
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("purple", [0.6, 0.2, 0.75]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Classes the generator can emit: background plus one per shape.
pub const MIN_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: String,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub depth: f64,
}

impl Object {
    /// Coarse position words: vertical then horizontal third.
    pub fn place(&self, size: usize) -> (&'static str, &'static str) {
        let third = size as f64 / 3.0;
        let v = if self.cy < third {
            "top"
        } else if self.cy < 2.0 * third {
            "middle"
        } else {
            "bottom"
        };
        let h = if self.cx < third {
            "left"
        } else if self.cx < 2.0 * third {
            "center"
        } else {
            "right"
        };
        (v, h)
    }

    pub fn sentence(&self, size: usize) -> String {
        let (v, h) = self.place(size);
        format!("a {} {} at {v} {h}.", self.color, self.shape.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// `size·size·3`, row-major, channels last, in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `size·size` raw depth.
    pub depth: Vec<f64>,
    pub semseg: Vec<usize>,
    pub caption: String,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn to_sample<T: Real>(&self, cfg: &ModelConfig) -> Result<Sample<T>> {
        Sample::from_raw(cfg, &self.rgb, &self.depth, &self.semseg, &self.caption)
    }
}

/// One scene from `rng`. Objects later in the list are nearer and drawn on top.
pub fn generate_scene(size: usize, rng: &mut Rng) -> Result<Scene> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("scene size {size} is below 8 pixels")));
    }
    let n_obj = 1 + rng.below(2);
    let s = size as f64;
    let mut objects = Vec::with_capacity(n_obj);
    for k in 0..n_obj {
        let shape = Shape::ALL[rng.below(3)];
        let (name, _) = COLORS[rng.below(COLORS.len())];
        let radius = s / 8.0 + rng.uniform() * s / 8.0;
        objects.push(Object {
            shape,
            color: name.to_string(),
            cx: radius + rng.uniform() * (s - 2.0 * radius),
            cy: radius + rng.uniform() * (s - 2.0 * radius),
            radius,
            depth: 6.0 - 2.0 * k as f64 + rng.uniform() - 0.5,
        });
    }
    let bg = [0.2 + 0.2 * rng.uniform(), 0.2 + 0.2 * rng.uniform(), 0.2 + 0.2 * rng.uniform()];
    let mut rgb = vec![0.0; size * size * 3];
    let mut depth = vec![0.0; size * size];
    let mut semseg = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            // floor gets nearer towards the bottom edge
            depth[i] = 10.0 - 4.0 * y as f64 / s;
            rgb[3 * i..3 * i + 3].copy_from_slice(&bg);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for o in &objects {
                if o.shape.contains(px, py, o.cx, o.cy, o.radius) {
                    let c = COLORS.iter().find(|c| c.0 == o.color).expect("palette color").1;
                    rgb[3 * i..3 * i + 3].copy_from_slice(&c);
                    depth[i] = o.depth;
                    semseg[i] = o.shape.class_id();
                }
            }
        }
    }
    let caption = objects.iter().map(|o| o.sentence(size)).collect::<Vec<_>>().join(" ");
    Ok(Scene {
        size,
        rgb,
        depth,
        semseg,
        caption,
        objects,
    })
}

/// `n` scenes; scene `i` draws from stream `i` of `seed`, so prefixes agree across `n`.
pub fn generate_synthetic(seed: u64, n: usize, size: usize) -> Result<Vec<Scene>> {
    let root = Rng::new(seed);
    (0..n).map(|i| generate_scene(size, &mut root.split(i as u64))).collect()
}
