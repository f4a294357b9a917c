//! Labeled image collections and the bundled procedural toy dataset.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensorfile::{DType, NamedTensor, TensorFile};

/// `channels x height x width`, canonical pixel range `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.dim() != first.dim()) {
                return Err(Error::Shape(format!(
                    "mixed image shapes {:?} and {:?}",
                    first.dim(),
                    bad.dim()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    /// Errors with the first class that has no samples.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn shuffled(&self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&idx)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        for (img, l) in self.iter() {
            h.update((l as u64).to_le_bytes());
            for v in img.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let (c, hgt, w) = self.images.first().map(|i| i.dim()).unwrap_or((0, 0, 0));
        let mut tf = TensorFile::new()
            .with_meta("kind", "dataset")
            .with_meta("num_classes", self.num_classes.to_string());
        let pixels: Vec<f64> = self.images.iter().flat_map(|i| i.iter().copied()).collect();
        tf.push(NamedTensor::new("images", DType::F32, vec![self.len(), c, hgt, w], pixels)?);
        tf.push(NamedTensor::new(
            "labels",
            DType::F64,
            vec![self.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?);
        Ok(tf)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        if tf.meta_str("kind")? != "dataset" {
            return Err(Error::Validation("container is not a dataset".into()));
        }
        let num_classes: usize = tf.meta_parse("num_classes")?;
        let images = tf.require("images")?;
        let labels = tf.require("labels")?;
        if images.shape.len() != 4 || labels.shape != [images.shape[0]] {
            return Err(Error::Validation("dataset tensors have inconsistent shapes".into()));
        }
        let (n, c, h, w) = (images.shape[0], images.shape[1], images.shape[2], images.shape[3]);
        let per = c * h * w;
        let imgs = (0..n)
            .map(|i| {
                Array3::from_shape_vec((c, h, w), images.data[i * per..(i + 1) * per].to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let labs = labels
            .data
            .iter()
            .map(|&l| {
                if l < 0.0 || l.fract() != 0.0 {
                    Err(Error::Validation(format!("label {l} is not a class index")))
                } else {
                    Ok(l as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(imgs, labs, num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

/// Bilinear resize (half-pixel centers, edge clamped). Returns a copy when
/// the size already matches.
pub fn resize_bilinear(image: &Image, size: usize) -> Image {
    let (c, h, w) = image.dim();
    if h == size && w == size {
        return image.clone();
    }
    let taps = |src: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * src as f64 / size as f64 - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h);
    let tx = taps(w);
    Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
        let bot = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Parameters of the procedural toy classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            val_per_class: 50,
            resolution: 32,
            seed: 0,
        }
    }
}

/// Per-class generative prototype: a colored oriented grating.
struct ClassPrototype {
    color: [f64; 3],
    accent: [f64; 3],
    orientation: f64,
    frequency: f64,
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

fn prototypes(num_classes: usize) -> Vec<ClassPrototype> {
    (0..num_classes)
        .map(|k| {
            let t = k as f64 / num_classes as f64;
            ClassPrototype {
                color: hue_to_rgb(t),
                accent: hue_to_rgb(t + 0.5),
                orientation: PI * ((3 * k) % num_classes) as f64 / num_classes as f64,
                frequency: 1.5 + (k % 3) as f64,
            }
        })
        .collect()
}

fn render(proto: &ClassPrototype, res: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Image {
    let hue_jitter: f64 = rng.random_range(-0.12..0.12);
    let base = hue_to_rgb_shift(proto.color, hue_jitter);
    let accent = hue_to_rgb_shift(proto.accent, hue_jitter);
    let theta = proto.orientation + rng.random_range(-0.35..0.35);
    let freq = proto.frequency * rng.random_range(0.75..1.3);
    let phase = rng.random_range(0.0..2.0 * PI);
    let brightness = rng.random_range(0.25..0.65);
    let saturation = rng.random_range(0.2..0.6);
    let contrast = rng.random_range(0.1..0.4);
    let (ct, st) = (theta.cos(), theta.sin());
    // Distractor blob of arbitrary color.
    let blob = rng.random_bool(0.8).then(|| {
        let cx = rng.random_range(0.0..res as f64);
        let cy = rng.random_range(0.0..res as f64);
        let radius = rng.random_range(0.15..0.4) * res as f64;
        let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        (cx, cy, radius, color)
    });
    let mut img = Array3::zeros((3, res, res));
    for y in 0..res {
        for x in 0..res {
            let u = x as f64 / res as f64;
            let v = y as f64 / res as f64;
            let wave = (2.0 * PI * freq * (u * ct + v * st) + phase).sin();
            let in_blob = blob.map(|(cx, cy, r, col)| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (d2 < r * r, col)
            });
            for ch in 0..3 {
                let mut p = brightness + saturation * (base[ch] - 0.5) + contrast * wave * (accent[ch] - 0.5) * 2.0;
                if let Some((true, col)) = in_blob {
                    p = 0.3 * p + 0.7 * col[ch];
                }
                p += noise.sample(rng);
                img[[ch, y, x]] = p.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn hue_to_rgb_shift(rgb: [f64; 3], shift: f64) -> [f64; 3] {
    // Small hue rotation via blending toward the next primary ordering.
    let rotated = [rgb[2], rgb[0], rgb[1]];
    let w = shift.abs() * 2.0;
    let other = if shift >= 0.0 { rotated } else { [rgb[1], rgb[2], rgb[0]] };
    [
        rgb[0] * (1.0 - w) + other[0] * w,
        rgb[1] * (1.0 - w) + other[1] * w,
        rgb[2] * (1.0 - w) + other[2] * w,
    ]
}

/// Generates `(train, validation)` splits of the toy task deterministically.
pub fn toy_dataset(cfg: &ToyDatasetConfig) -> Result<(LabeledImages, LabeledImages)> {
    if cfg.num_classes < 2 || cfg.train_per_class == 0 || cfg.resolution == 0 {
        return Err(Error::Validation(
            "toy dataset needs >= 2 classes, >= 1 training image per class and a positive resolution".into(),
        ));
    }
    let protos = prototypes(cfg.num_classes);
    let noise = Normal::new(0.0, 0.06).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |per_class: usize| -> Result<LabeledImages> {
        let mut images = Vec::with_capacity(per_class * cfg.num_classes);
        let mut labels = Vec::with_capacity(per_class * cfg.num_classes);
        for _ in 0..per_class {
            for (k, proto) in protos.iter().enumerate() {
                images.push(render(proto, cfg.resolution, &mut rng, &noise));
                labels.push(k);
            }
        }
        LabeledImages::new(images, labels, cfg.num_classes)
    };
    let train = split(cfg.train_per_class)?;
    let val = split(cfg.val_per_class)?;
    Ok((train, val))
}
