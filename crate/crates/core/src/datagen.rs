//! Procedural labelled scenes: flat-colored rectangles, ellipses and
//! triangles over a shaded background, with exact per-pixel class labels.
//!
//! Everything is a pure function of the seed. Dataset seeds come from a
//! splitmix-style mix of `(master_seed, split, index)`, so scenes can be
//! generated independently and in any order.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const PALETTE_SIZE: usize = 16;
pub const NOISE_AMPLITUDE: f32 = 0.05;
/// Largest compression ratio any experiment may use; scene dims must divide by it.
pub const MAX_RATIO: usize = 32;

/// Base RGB per class. Class 0 is the background.
const PALETTE: [[f32; 3]; PALETTE_SIZE] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.45, 0.15, 0.65],
    [0.10, 0.50, 0.45],
    [0.95, 0.60, 0.70],
    [0.50, 0.30, 0.10],
    [0.55, 0.55, 0.10],
    [0.10, 0.10, 0.40],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    /// Row-major `H×W×3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `H×W`, values in `[0, classes)`.
    pub labels: Vec<u8>,
}

impl LabeledScene {
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.image.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("scene image matches its dims")
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Hex SHA-256 over the image (f32 LE) followed by the labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.image {
            h.update(v.to_le_bytes());
        }
        h.update(&self.labels);
        hex::encode(h.finalize())
    }

    /// Raw inspection container: `"GOSS"`, H u16 LE, W u16 LE, m u8, then
    /// row-major 8-bit RGB, then 8-bit labels.
    pub fn write_raw(&self, mut w: impl Write) -> Result<()> {
        let h = u16::try_from(self.height).map_err(|_| Error::Format("height exceeds u16".into()))?;
        let wd = u16::try_from(self.width).map_err(|_| Error::Format("width exceeds u16".into()))?;
        w.write_all(b"GOSS")?;
        w.write_all(&h.to_le_bytes())?;
        w.write_all(&wd.to_le_bytes())?;
        w.write_all(&[self.classes as u8])?;
        let rgb: Vec<u8> = self.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&rgb)?;
        w.write_all(&self.labels)?;
        Ok(())
    }

    /// Reads a raw container back. The image comes back 8-bit quantized and
    /// the seed is unknown (reported as 0).
    pub fn read_raw(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 9];
        r.read_exact(&mut head).map_err(|_| Error::Format("scene file truncated".into()))?;
        if &head[..4] != b"GOSS" {
            return Err(Error::Format("not a GOSS scene file".into()));
        }
        let height = u16::from_le_bytes([head[4], head[5]]) as usize;
        let width = u16::from_le_bytes([head[6], head[7]]) as usize;
        let classes = head[8] as usize;
        let mut rgb = vec![0u8; height * width * 3];
        let mut labels = vec![0u8; height * width];
        r.read_exact(&mut rgb).map_err(|_| Error::Format("scene file truncated".into()))?;
        r.read_exact(&mut labels).map_err(|_| Error::Format("scene file truncated".into()))?;
        if labels.iter().any(|&l| l as usize >= classes.max(1)) {
            return Err(Error::Format("label out of range in scene file".into()));
        }
        Ok(Self {
            height,
            width,
            classes,
            seed: 0,
            image: rgb.iter().map(|&b| b as f32 / 255.0).collect(),
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_train: 200, n_val: 50, height: 64, width: 64, classes: 5, master_seed: 7 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height % MAX_RATIO != 0 || self.width % MAX_RATIO != 0 {
            return Err(Error::Config(format!(
                "scene dims {}x{} must be divisible by {MAX_RATIO}",
                self.height, self.width
            )));
        }
        if self.classes == 0 || self.classes > PALETTE_SIZE {
            return Err(Error::Config(format!("class count must be in 1..={PALETTE_SIZE}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Split {
    Train = 0x7472_6169_6e00_0000,
    Val = 0x7661_6c00_0000_0000,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` in `split`.
pub fn mix_seed(master: u64, split: Split, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ split as u64) ^ index)
}

pub fn generate_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<LabeledScene> {
    generate_scene_with_noise(seed, height, width, classes, NOISE_AMPLITUDE)
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    Triangle([(f32, f32); 3]),
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Triangle([a, b, c]) => {
                let edge = |p: (f32, f32), q: (f32, f32)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
                let (e0, e1, e2) = (edge(a, b), edge(b, c), edge(c, a));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize, max_extent: f32, min_extent: f32) -> Self {
        let (hf, wf) = (height as f32, width as f32);
        let sy = rng.gen_range(min_extent..=max_extent);
        let sx = rng.gen_range(min_extent..=max_extent);
        let cy = rng.gen_range(0.0..hf);
        let cx = rng.gen_range(0.0..wf);
        match rng.gen_range(0..3) {
            0 => Shape::Rect { y0: cy - sy / 2.0, x0: cx - sx / 2.0, y1: cy + sy / 2.0, x1: cx + sx / 2.0 },
            1 => Shape::Ellipse { cy, cx, ry: sy / 2.0, rx: sx / 2.0 },
            _ => {
                let mut vertex = || (cy + rng.gen_range(-sy..=sy) / 2.0, cx + rng.gen_range(-sx..=sx) / 2.0);
                Shape::Triangle([vertex(), vertex(), vertex()])
            }
        }
    }
}

/// Like [`generate_scene`] with an explicit per-pixel noise amplitude
/// (0 yields exactly flat-colored shapes).
pub fn generate_scene_with_noise(
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    noise: f32,
) -> Result<LabeledScene> {
    if classes == 0 {
        return Err(Error::InvalidArgument("class count must be at least 1".into()));
    }
    if classes > PALETTE_SIZE {
        return Err(Error::InvalidArgument(format!("{classes} classes exceed the palette size {PALETTE_SIZE}")));
    }
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!("scene {height}x{width} smaller than 16x16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let mut labels = vec![0u8; n];
    let mut color = vec![[0f32; 3]; n];

    // Background: class 0 with a gentle linear shading.
    let tilt_y = rng.gen_range(-0.1f32..=0.1);
    let tilt_x = rng.gen_range(-0.1f32..=0.1);
    for y in 0..height {
        for x in 0..width {
            let shade = tilt_y * (y as f32 / height as f32 - 0.5) + tilt_x * (x as f32 / width as f32 - 0.5);
            color[y * width + x] = PALETTE[0].map(|c| c + shade);
        }
    }

    if classes > 1 {
        let count = rng.gen_range(3..=8usize);
        let big = (height.min(width) as f32) / 2.0;
        // Side length whose square stays strictly below 1% of the pixels.
        let small = ((0.01 * n as f32).sqrt() - 1e-3).floor().max(1.0);
        for i in 0..count {
            let class = rng.gen_range(1..classes);
            let brightness = rng.gen_range(0.85f32..=1.15);
            let shape = if i + 1 == count {
                let side = small;
                let y0 = rng.gen_range(0..=height - side as usize) as f32;
                let x0 = rng.gen_range(0..=width - side as usize) as f32;
                Shape::Rect { y0, x0, y1: y0 + side, x1: x0 + side }
            } else {
                Shape::random(&mut rng, height, width, big, 6.0)
            };
            let rgb = PALETTE[class].map(|c| (c * brightness).clamp(0.0, 1.0));
            for y in 0..height {
                for x in 0..width {
                    if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                        labels[y * width + x] = class as u8;
                        color[y * width + x] = rgb;
                    }
                }
            }
        }
    }

    let mut image = Vec::with_capacity(n * 3);
    for px in &color {
        for &c in px {
            let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            image.push((c + jitter).clamp(0.0, 1.0));
        }
    }
    Ok(LabeledScene { height, width, classes, seed, image, labels })
}

/// Generates the train and validation splits described by `spec`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(Vec<LabeledScene>, Vec<LabeledScene>)> {
    let split = |which: Split, count: usize| {
        (0..count)
            .map(|i| generate_scene(mix_seed(spec.master_seed, which, i as u64), spec.height, spec.width, spec.classes))
            .collect::<Result<Vec<_>>>()
    };
    Ok((split(Split::Train, spec.n_train)?, split(Split::Val, spec.n_val)?))
}
