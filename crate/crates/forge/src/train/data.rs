//! Procedurally generated desk-scale image tasks.
//!
//! Three built-in generators, each deterministic in the seed:
//!
//! - `shapes16` — 3-class 16x16 grayscale: filled squares, circles and
//!   crosses at random positions and sizes, plus Gaussian pixel noise;
//! - `rings` — 2-class radial: one bright ring, small vs large radius;
//! - `parity-patch` — 2-class texture: four striped quadrants, labeled by the
//!   parity of their orientations (deliberately harder, the decision is a
//!   4-way XOR).
//!
//! Classes are interleaved, so every split is balanced within one sample.
//! An external loader reads the same layout from a raw-tensor directory (one
//! `images.dnft` array plus a `labels.json` list) without any network I/O.

use crate::error::{ForgeError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Split {
    /// Flat [n, c, h, w] sample storage.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub sample_shape: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_numel(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Assemble a batch tensor [B, ...sample_shape] from sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_numel();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        (Tensor::from_vec(shape, data).expect("batch shape"), labels)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub classes: usize,
}

pub const DEFAULT_SIZES: (usize, usize, usize) = (2000, 500, 500);

/// Generate a named task deterministically from a seed. A `dir:<path>` name
/// loads pre-rendered splits from `<path>/{train,val,test}/` instead (sizes
/// are then taken from the files).
pub fn generate_dataset(name: &str, seed: u64, sizes: (usize, usize, usize)) -> Result<Splits> {
    if let Some(root) = name.strip_prefix("dir:") {
        let root = Path::new(root);
        let train = load_split_dir(&root.join("train"))?;
        let val = load_split_dir(&root.join("val"))?;
        let test = load_split_dir(&root.join("test"))?;
        let classes = train.labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
        if classes < 2 {
            return Err(ForgeError::config(format!(
                "dataset at {} has {} classes; need at least 2",
                root.display(),
                classes
            )));
        }
        return Ok(Splits { train, val, test, classes });
    }
    let classes = match name {
        "shapes16" => 3,
        "rings" | "parity-patch" => 2,
        other => return Err(ForgeError::config(format!("unknown dataset '{}'", other))),
    };
    let gen_split = |tag: u64, n: usize| -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tag + 1)));
        let mut images = Vec::with_capacity(n * 256);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let img = match name {
                "shapes16" => draw_shape(class, &mut rng),
                "rings" => draw_ring(class, &mut rng),
                "parity-patch" => draw_parity_patch(class, &mut rng),
                _ => unreachable!(),
            };
            images.extend_from_slice(&img);
            labels.push(class);
        }
        Split { images, labels, sample_shape: vec![1, 16, 16] }
    };
    Ok(Splits {
        train: gen_split(0, sizes.0),
        val: gen_split(1, sizes.1),
        test: gen_split(2, sizes.2),
        classes,
    })
}

const N: usize = 16;

fn noise(img: &mut [f32], rng: &mut ChaCha8Rng, sigma: f32) {
    // Box-Muller, two pixels at a time.
    let mut i = 0;
    while i < img.len() {
        let u1: f32 = rng.gen_range(1e-7f32..1.0);
        let u2: f32 = rng.gen_range(0.0f32..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f32::consts::PI * u2).sin_cos();
        img[i] = (img[i] + sigma * r * c).clamp(0.0, 1.0);
        if i + 1 < img.len() {
            img[i + 1] = (img[i + 1] + sigma * r * s).clamp(0.0, 1.0);
        }
        i += 2;
    }
}

fn draw_shape(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; N * N];
    // Weak shapes under strong pixel noise keep the task from saturating, so
    // accuracy genuinely trades off against model capacity.
    let v: f32 = rng.gen_range(0.45..0.95);
    match class {
        // Filled square.
        0 => {
            let size = rng.gen_range(4..=8);
            let top = rng.gen_range(0..=N - size);
            let left = rng.gen_range(0..=N - size);
            for y in top..top + size {
                for x in left..left + size {
                    img[y * N + x] = v;
                }
            }
        }
        // Filled circle.
        1 => {
            let r: f32 = rng.gen_range(2.0..4.2);
            let cy: f32 = rng.gen_range(r..N as f32 - r);
            let cx: f32 = rng.gen_range(r..N as f32 - r);
            for y in 0..N {
                for x in 0..N {
                    let dy = y as f32 + 0.5 - cy;
                    let dx = x as f32 + 0.5 - cx;
                    if dy * dy + dx * dx <= r * r {
                        img[y * N + x] = v;
                    }
                }
            }
        }
        // Plus-shaped cross, two crossing bars.
        _ => {
            let half = rng.gen_range(3..=5);
            let cy = rng.gen_range(half..N - half);
            let cx = rng.gen_range(half..N - half);
            for d in 0..2 * half {
                let y = cy - half + d;
                for w in 0..2usize {
                    img[y * N + (cx + w).min(N - 1)] = v;
                    img[(cy + w).min(N - 1) * N + y] = v;
                }
            }
        }
    }
    noise(&mut img, rng, 0.2);
    img
}

fn draw_ring(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; N * N];
    let v: f32 = rng.gen_range(0.6..1.0);
    let r: f32 = if class == 0 { rng.gen_range(2.5..4.0) } else { rng.gen_range(5.5..7.0) };
    let cy: f32 = rng.gen_range(-0.7..0.7) + N as f32 / 2.0;
    let cx: f32 = rng.gen_range(-0.7..0.7) + N as f32 / 2.0;
    for y in 0..N {
        for x in 0..N {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            if (d - r).abs() <= 0.9 {
                img[y * N + x] = v;
            }
        }
    }
    noise(&mut img, rng, 0.1);
    img
}

fn draw_parity_patch(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; N * N];
    let v: f32 = rng.gen_range(0.6..1.0);
    // Three quadrant orientations are free; the fourth fixes the parity.
    let mut orients = [false; 4];
    for o in orients.iter_mut().take(3) {
        *o = rng.gen_bool(0.5);
    }
    let partial = orients[..3].iter().filter(|&&o| o).count() % 2;
    orients[3] = partial != class;
    for (q, &vertical) in orients.iter().enumerate() {
        let oy = (q / 2) * 8;
        let ox = (q % 2) * 8;
        for y in 0..8 {
            for x in 0..8 {
                let stripe = if vertical { x / 2 % 2 == 0 } else { y / 2 % 2 == 0 };
                if stripe {
                    img[(oy + y) * N + (ox + x)] = v;
                }
            }
        }
    }
    noise(&mut img, rng, 0.08);
    img
}

/// Load a split from a raw-tensor directory: `images.dnft` with one array
/// named "images" of shape [n,c,h,w], and `labels.json` holding a JSON list.
pub fn load_split_dir(dir: &Path) -> Result<Split> {
    let arrays = crate::checkpoint::load_file::<f32>(&dir.join("images.dnft"))?;
    let (name, images) = arrays
        .into_iter()
        .find(|(n, _)| n == "images")
        .ok_or_else(|| ForgeError::config("images.dnft must contain an 'images' array".to_string()))?;
    let _ = name;
    if images.shape().len() != 4 {
        return Err(ForgeError::config(format!(
            "images array must be [n,c,h,w], got {:?}",
            images.shape()
        )));
    }
    let labels: Vec<usize> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)?;
    if labels.len() != images.shape()[0] {
        return Err(ForgeError::config(format!(
            "{} labels for {} images",
            labels.len(),
            images.shape()[0]
        )));
    }
    let sample_shape = images.shape()[1..].to_vec();
    Ok(Split { images: images.into_data(), labels, sample_shape })
}
