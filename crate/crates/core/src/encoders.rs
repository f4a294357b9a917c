//! Frozen, differentiable feature encoders.
//!
//! An [`Encoder`] maps a canonical-range image (`channels x R x R`, pixels in
//! `[0, 1]`) to an `F`-dimensional feature. Parameters are fixed at load time;
//! the only gradient the encoder ever produces is with respect to its input
//! pixels, which is what image synthesis needs.
//!
//! Builtins:
//! * `toy-conv-32`: three stride-2 3x3 conv blocks with ReLU (3->16->32->128
//!   channels), global average pooling, affine-free layer normalization.
//!   Weights are He-normal samples from the given seed, rounded to f32 so
//!   they survive a save/load round trip unchanged.
//! * `identity-<F>`: treats an `F x 1 x 1` tensor as a feature vector and
//!   returns it unchanged. Useful for exercising feature-space code.
//!
//! External weights use the [`crate::tensorfile`] container with
//! `kind = "encoder"` metadata; see [`Encoder::to_tensor_file`].

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensorfile::{DType, NamedTensor, TensorFile};

/// Epsilon inside the affine-free layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-10;

pub const TOY_CONV_32: &str = "toy-conv-32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub input_resolution: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub final_layernorm: bool,
}

impl EncoderSpec {
    pub fn validate(&self, identity: bool) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Validation(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        // Identity encoders consume 1x1 "images"; only real backbones need a
        // spatial extent.
        if !identity && self.input_resolution < 8 {
            return Err(Error::Validation(format!(
                "input_resolution must be >= 8, got {}",
                self.input_resolution
            )));
        }
        if self.channels == 0 {
            return Err(Error::Validation("channels must be positive".into()));
        }
        if self.norm_mean.len() != self.channels || self.norm_std.len() != self.channels {
            return Err(Error::Validation(format!(
                "normalization needs {} means and stds, got {} and {}",
                self.channels,
                self.norm_mean.len(),
                self.norm_std.len()
            )));
        }
        if let Some(s) = self.norm_std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("normalization std must be > 0, got {s}")));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.input_resolution, self.input_resolution)
    }
}

#[derive(Debug, Clone)]
struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    /// `[out_ch, in_ch, kernel, kernel]`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Range of output columns whose input column `o*stride + k - pad` lies in `[0, size)`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let offset = k as isize - self.pad as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi_num = size as isize - 1 - offset;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Columns of `[in_ch * k * k, out * out]` holding every receptive field.
    fn im2col(&self, x: &[f64], size: usize, out: usize) -> Array2<f64> {
        let k = self.kernel;
        let mut cols = Array2::zeros((self.in_ch * k * k, out * out));
        for ic in 0..self.in_ch {
            let xi = &x[ic * size * size..(ic + 1) * size * size];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, size, out);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, size, out);
                    let mut row = cols.row_mut((ic * k + ky) * k + kx);
                    let row = row.as_slice_mut().expect("standard layout");
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let xrow = &xi[iy * size..(iy + 1) * size];
                        for ox in ox0..ox1 {
                            row[oy * out + ox] = xrow[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_ch, self.in_ch * self.kernel * self.kernel), &self.weight)
            .expect("weight length checked at construction")
    }

    fn forward(&self, x: &[f64], size: usize) -> (Vec<f64>, usize) {
        let out = self.out_size(size);
        let mut y = self.weight_matrix().dot(&self.im2col(x, size, out));
        for (mut row, b) in y.outer_iter_mut().zip(&self.bias) {
            row += *b;
        }
        (y.into_raw_vec_and_offset().0, out)
    }

    /// Gradient with respect to the input given the gradient at the output.
    fn backward_input(&self, gy: &[f64], size: usize) -> Vec<f64> {
        let out = self.out_size(size);
        let k = self.kernel;
        let gy = ArrayView2::from_shape((self.out_ch, out * out), gy).expect("gradient matches output");
        let gcols = self.weight_matrix().t().dot(&gy);
        let mut gx = vec![0.0; self.in_ch * size * size];
        for ic in 0..self.in_ch {
            let gi = &mut gx[ic * size * size..(ic + 1) * size * size];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, size, out);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, size, out);
                    let row = gcols.row((ic * k + ky) * k + kx);
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let irow = &mut gi[iy * size..(iy + 1) * size];
                        for ox in ox0..ox1 {
                            irow[ox * self.stride + kx - self.pad] += row[oy * out + ox];
                        }
                    }
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
struct Dense {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Backbone {
    Identity,
    Conv { blocks: Vec<Conv2d>, proj: Option<Dense> },
}

/// Intermediate values of one forward pass, consumed by
/// [`Encoder::input_gradient`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-ReLU activation of every conv block, with its spatial size.
    activations: Vec<(Vec<f64>, usize)>,
    /// `(normalized output, 1 / std)` when layer normalization is active.
    layernorm: Option<(Vec<f64>, f64)>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    backbone: Backbone,
    fingerprint: String,
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.backbone, Backbone::Identity)
    }

    /// Checksum recorded when the encoder was loaded.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the checksum over the current spec and parameters.
    pub fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        match &self.backbone {
            Backbone::Identity => h.update(b"identity"),
            Backbone::Conv { blocks, proj } => {
                for b in blocks {
                    h.update((b.stride as u64).to_le_bytes());
                    for v in b.weight.iter().chain(&b.bias) {
                        h.update(v.to_le_bytes());
                    }
                }
                if let Some(p) = proj {
                    for v in p.weight.iter().chain(&p.bias) {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn parameter_count(&self) -> usize {
        match &self.backbone {
            Backbone::Identity => 0,
            Backbone::Conv { blocks, proj } => {
                blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum::<usize>()
                    + proj.as_ref().map_or(0, |p| p.weight.len() + p.bias.len())
            }
        }
    }

    fn finish(spec: EncoderSpec, backbone: Backbone) -> Result<Self> {
        spec.validate(matches!(backbone, Backbone::Identity))?;
        let mut enc = Self {
            spec,
            backbone,
            fingerprint: String::new(),
        };
        enc.check_dims()?;
        enc.fingerprint = enc.parameter_checksum();
        Ok(enc)
    }

    fn check_dims(&self) -> Result<()> {
        match &self.backbone {
            Backbone::Identity => {
                if self.spec.channels != self.spec.feature_dim || self.spec.input_resolution != 1 {
                    return Err(Error::Validation(
                        "identity encoder needs channels == feature_dim and resolution 1".into(),
                    ));
                }
            }
            Backbone::Conv { blocks, proj } => {
                if blocks.is_empty() {
                    return Err(Error::Validation("conv encoder needs at least one block".into()));
                }
                let mut ch = self.spec.channels;
                let mut size = self.spec.input_resolution;
                for (i, b) in blocks.iter().enumerate() {
                    if b.in_ch != ch {
                        return Err(Error::Validation(format!(
                            "block {i} expects {} input channels, previous layer gives {ch}",
                            b.in_ch
                        )));
                    }
                    if b.kernel == 0 || b.stride == 0 || size + 2 * b.pad < b.kernel {
                        return Err(Error::Validation(format!("block {i} has invalid geometry")));
                    }
                    if b.weight.len() != b.out_ch * b.in_ch * b.kernel * b.kernel || b.bias.len() != b.out_ch {
                        return Err(Error::Validation(format!("block {i} tensor sizes inconsistent")));
                    }
                    size = b.out_size(size);
                    ch = b.out_ch;
                }
                let out = match proj {
                    Some(p) => {
                        if p.in_dim != ch || p.weight.len() != p.in_dim * p.out_dim || p.bias.len() != p.out_dim {
                            return Err(Error::Validation(format!(
                                "projection expects {} inputs, backbone gives {ch}",
                                p.in_dim
                            )));
                        }
                        p.out_dim
                    }
                    None => ch,
                };
                if out != self.spec.feature_dim {
                    return Err(Error::Validation(format!(
                        "weights produce {out} features but spec declares feature_dim {}",
                        self.spec.feature_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn identity(feature_dim: usize) -> Result<Self> {
        let spec = EncoderSpec {
            name: format!("identity-{feature_dim}"),
            input_resolution: 1,
            channels: feature_dim,
            feature_dim,
            norm_mean: vec![0.0; feature_dim],
            norm_std: vec![1.0; feature_dim],
            final_layernorm: false,
        };
        Self::finish(spec, Backbone::Identity)
    }

    /// The bundled 32x32 conv encoder with seeded random-frozen weights.
    pub fn toy_conv_32(seed: u64) -> Result<Self> {
        let spec = EncoderSpec {
            name: TOY_CONV_32.into(),
            input_resolution: 32,
            channels: 3,
            feature_dim: 128,
            norm_mean: vec![0.5; 3],
            norm_std: vec![0.25; 3],
            final_layernorm: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3usize, 16usize), (16, 32), (32, 128)];
        let blocks = widths
            .iter()
            .map(|&(in_ch, out_ch)| {
                let fan_in = (in_ch * 9) as f64;
                let w = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
                let b = Normal::new(0.0, 0.05).expect("valid normal");
                Conv2d {
                    in_ch,
                    out_ch,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                    weight: (0..out_ch * in_ch * 9).map(|_| w.sample(&mut rng) as f32 as f64).collect(),
                    bias: (0..out_ch).map(|_| b.sample(&mut rng) as f32 as f64).collect(),
                }
            })
            .collect();
        Self::finish(spec, Backbone::Conv { blocks, proj: None })
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let expected = self.spec.input_shape();
        if image.dim() != expected {
            return Err(Error::Shape(format!(
                "encoder {} expects images {:?}, got {:?}",
                self.spec.name,
                expected,
                image.dim()
            )));
        }
        Ok(())
    }

    fn normalized_input(&self, image: &Image) -> Vec<f64> {
        let (c, h, w) = image.dim();
        let plane = h * w;
        let mut x: Vec<f64> = image.iter().copied().collect();
        for ch in 0..c {
            let (m, s) = (self.spec.norm_mean[ch], self.spec.norm_std[ch]);
            for v in &mut x[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
        x
    }

    fn run(&self, image: &Image, keep_trace: bool) -> (Array1<f64>, Option<ForwardTrace>) {
        let x = self.normalized_input(image);
        let (pre, activations) = match &self.backbone {
            Backbone::Identity => (x, Vec::new()),
            Backbone::Conv { blocks, proj } => {
                let mut acts: Vec<(Vec<f64>, usize)> = Vec::with_capacity(blocks.len() + 1);
                let mut cur = x;
                let mut size = self.spec.input_resolution;
                for b in blocks {
                    let (mut y, out) = b.forward(&cur, size);
                    for v in &mut y {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    if keep_trace {
                        acts.push((y.clone(), out));
                    }
                    cur = y;
                    size = out;
                }
                let plane = (size * size) as f64;
                let ch = blocks.last().expect("non-empty").out_ch;
                let pooled: Vec<f64> = (0..ch)
                    .map(|c| cur[c * size * size..(c + 1) * size * size].iter().sum::<f64>() / plane)
                    .collect();
                let feat = match proj {
                    Some(p) => (0..p.out_dim)
                        .map(|o| {
                            p.bias[o]
                                + p.weight[o * p.in_dim..(o + 1) * p.in_dim]
                                    .iter()
                                    .zip(&pooled)
                                    .map(|(w, x)| w * x)
                                    .sum::<f64>()
                        })
                        .collect(),
                    None => pooled,
                };
                (feat, acts)
            }
        };
        let (out, layernorm) = if self.spec.final_layernorm {
            let n = pre.len() as f64;
            let mean = pre.iter().sum::<f64>() / n;
            let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
            let y: Vec<f64> = pre.iter().map(|v| (v - mean) * inv_std).collect();
            let ln = keep_trace.then(|| (y.clone(), inv_std));
            (y, ln)
        } else {
            (pre, None)
        };
        let trace = keep_trace.then_some(ForwardTrace {
            activations,
            layernorm,
        });
        (Array1::from(out), trace)
    }

    pub fn encode(&self, image: &Image) -> Result<Array1<f64>> {
        self.check_input(image)?;
        Ok(self.run(image, false).0)
    }

    /// Forward pass that keeps what [`Encoder::input_gradient`] needs.
    pub fn encode_traced(&self, image: &Image) -> Result<(Array1<f64>, ForwardTrace)> {
        self.check_input(image)?;
        let (f, t) = self.run(image, true);
        Ok((f, t.expect("trace requested")))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.spec.feature_dim));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&self.encode(img)?);
        }
        Ok(out)
    }

    /// Vector-Jacobian product: gradient of `<grad_features, phi(x)>` with
    /// respect to the canonical-range input pixels.
    pub fn input_gradient(&self, trace: &ForwardTrace, grad_features: &Array1<f64>) -> Result<Image> {
        let f = self.spec.feature_dim;
        if grad_features.len() != f {
            return Err(Error::Shape(format!(
                "feature gradient has {} entries, encoder outputs {f}",
                grad_features.len()
            )));
        }
        let mut g: Vec<f64> = grad_features.iter().copied().collect();
        if let Some((y, inv_std)) = &trace.layernorm {
            let n = f as f64;
            let mean_g = g.iter().sum::<f64>() / n;
            let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
            for (gi, yi) in g.iter_mut().zip(y) {
                *gi = inv_std * (*gi - mean_g - yi * mean_gy);
            }
        }
        let mut gx = match &self.backbone {
            Backbone::Identity => g,
            Backbone::Conv { blocks, proj } => {
                let pooled_grad = match proj {
                    Some(p) => {
                        let mut pg = vec![0.0; p.in_dim];
                        for o in 0..p.out_dim {
                            let row = &p.weight[o * p.in_dim..(o + 1) * p.in_dim];
                            for (acc, w) in pg.iter_mut().zip(row) {
                                *acc += w * g[o];
                            }
                        }
                        pg
                    }
                    None => g,
                };
                let (_, last_size) = trace
                    .activations
                    .last()
                    .ok_or_else(|| Error::Invariant("trace has no activations".into()))?;
                let plane = last_size * last_size;
                let mut grad: Vec<f64> = pooled_grad
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / plane as f64, plane))
                    .collect();
                for (i, block) in blocks.iter().enumerate().rev() {
                    let (act, _) = &trace.activations[i];
                    for (gv, av) in grad.iter_mut().zip(act) {
                        if *av <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let in_size = if i == 0 {
                        self.spec.input_resolution
                    } else {
                        trace.activations[i - 1].1
                    };
                    grad = block.backward_input(&grad, in_size);
                }
                grad
            }
        };
        let (c, r, _) = self.spec.input_shape();
        let plane = r * r;
        for ch in 0..c {
            let s = self.spec.norm_std[ch];
            for v in &mut gx[ch * plane..(ch + 1) * plane] {
                *v /= s;
            }
        }
        Array3::from_shape_vec((c, r, r), gx).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let s = &self.spec;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut tf = TensorFile::new()
            .with_meta("kind", "encoder")
            .with_meta("name", s.name.clone())
            .with_meta("input_resolution", s.input_resolution.to_string())
            .with_meta("channels", s.channels.to_string())
            .with_meta("feature_dim", s.feature_dim.to_string())
            .with_meta("final_layernorm", s.final_layernorm.to_string())
            .with_meta("norm_mean", join(&s.norm_mean))
            .with_meta("norm_std", join(&s.norm_std));
        match &self.backbone {
            Backbone::Identity => {
                tf.meta.insert("arch".into(), "identity".into());
            }
            Backbone::Conv { blocks, proj } => {
                tf.meta.insert("arch".into(), "conv".into());
                tf.meta.insert("num_blocks".into(), blocks.len().to_string());
                for (i, b) in blocks.iter().enumerate() {
                    tf.meta.insert(format!("blocks.{i}.stride"), b.stride.to_string());
                    tf.meta.insert(format!("blocks.{i}.pad"), b.pad.to_string());
                    tf.push(NamedTensor::new(
                        format!("blocks.{i}.weight"),
                        DType::F32,
                        vec![b.out_ch, b.in_ch, b.kernel, b.kernel],
                        b.weight.clone(),
                    )?);
                    tf.push(NamedTensor::new(format!("blocks.{i}.bias"), DType::F32, vec![b.out_ch], b.bias.clone())?);
                }
                if let Some(p) = proj {
                    tf.push(NamedTensor::new("proj.weight", DType::F32, vec![p.out_dim, p.in_dim], p.weight.clone())?);
                    tf.push(NamedTensor::new("proj.bias", DType::F32, vec![p.out_dim], p.bias.clone())?);
                }
            }
        }
        Ok(tf)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        if tf.meta_str("kind")? != "encoder" {
            return Err(Error::Validation("container is not an encoder weight file".into()));
        }
        let parse_list = |key: &str| -> Result<Vec<f64>> {
            tf.meta_str(key)?
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("bad number {p:?} in {key}")))
                })
                .collect()
        };
        let spec = EncoderSpec {
            name: tf.meta_str("name")?.to_string(),
            input_resolution: tf.meta_parse("input_resolution")?,
            channels: tf.meta_parse("channels")?,
            feature_dim: tf.meta_parse("feature_dim")?,
            final_layernorm: tf.meta_parse("final_layernorm")?,
            norm_mean: parse_list("norm_mean")?,
            norm_std: parse_list("norm_std")?,
        };
        let backbone = match tf.meta_str("arch")? {
            "identity" => Backbone::Identity,
            "conv" => {
                let n: usize = tf.meta_parse("num_blocks")?;
                let mut blocks = Vec::with_capacity(n);
                for i in 0..n {
                    let w = tf.require(&format!("blocks.{i}.weight"))?;
                    let b = tf.require(&format!("blocks.{i}.bias"))?;
                    if w.shape.len() != 4 || w.shape[2] != w.shape[3] {
                        return Err(Error::Validation(format!(
                            "blocks.{i}.weight must be [out, in, k, k], got {:?}",
                            w.shape
                        )));
                    }
                    if b.shape != [w.shape[0]] {
                        return Err(Error::Validation(format!(
                            "blocks.{i}.bias shape {:?} does not match {} output channels",
                            b.shape, w.shape[0]
                        )));
                    }
                    blocks.push(Conv2d {
                        out_ch: w.shape[0],
                        in_ch: w.shape[1],
                        kernel: w.shape[2],
                        stride: tf.meta_parse(&format!("blocks.{i}.stride"))?,
                        pad: tf.meta_parse(&format!("blocks.{i}.pad"))?,
                        weight: w.data.clone(),
                        bias: b.data.clone(),
                    });
                }
                let proj = match (tf.get("proj.weight"), tf.get("proj.bias")) {
                    (Some(w), Some(b)) => {
                        if w.shape.len() != 2 || b.shape != [w.shape[0]] {
                            return Err(Error::Validation("projection tensors have inconsistent shapes".into()));
                        }
                        Some(Dense {
                            out_dim: w.shape[0],
                            in_dim: w.shape[1],
                            weight: w.data.clone(),
                            bias: b.data.clone(),
                        })
                    }
                    (None, None) => None,
                    _ => return Err(Error::Validation("projection needs both weight and bias".into())),
                };
                Backbone::Conv { blocks, proj }
            }
            other => return Err(Error::Validation(format!("unknown encoder arch {other:?}"))),
        };
        Self::finish(spec, backbone)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }
}

/// Names accepted by [`load_encoder`] besides file paths.
pub fn builtin_names() -> &'static [&'static str] {
    &[TOY_CONV_32, "identity-<F>"]
}

/// Loads a builtin encoder by name (`toy-conv-32`, `identity-<F>`) or a
/// weight file from disk. The seed only affects seeded builtins.
pub fn load_encoder(source: &str, seed: u64) -> Result<Encoder> {
    if source == TOY_CONV_32 {
        return Encoder::toy_conv_32(seed);
    }
    if let Some(dim) = source.strip_prefix("identity-") {
        if let Ok(f) = dim.parse::<usize>() {
            return Encoder::identity(f);
        }
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(Error::Load(format!(
            "{source:?} is neither a builtin encoder ({}) nor an existing file",
            builtin_names().join(", ")
        )));
    }
    Encoder::from_tensor_file(&TensorFile::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, c: usize, r: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, r, r), |_| rng.random::<f64>())
    }

    #[test]
    fn same_seed_same_features_different_seed_differs() {
        let img = random_image(1, 3, 32);
        let a = load_encoder(TOY_CONV_32, 7).unwrap();
        let b = load_encoder(TOY_CONV_32, 7).unwrap();
        let c = load_encoder(TOY_CONV_32, 8).unwrap();
        let fa = a.encode(&img).unwrap();
        assert_eq!(fa, b.encode(&img).unwrap());
        let fc = c.encode(&img).unwrap();
        let diff: f64 = fa.iter().zip(fc.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "seed 7 and 8 gave near-identical features ({diff})");
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn layernorm_output_is_standardized() {
        let enc = Encoder::toy_conv_32(3).unwrap();
        for s in 0..5 {
            let f = enc.encode(&random_image(s, 3, 32)).unwrap();
            let n = f.len() as f64;
            let mean = f.sum() / n;
            let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
            let norm = f.dot(&f).sqrt();
            assert!((norm - n.sqrt()).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn duplicate_rows_encode_identically() {
        let enc = Encoder::toy_conv_32(0).unwrap();
        let img = random_image(4, 3, 32);
        let batch = enc.encode_batch(&[img.clone(), img]).unwrap();
        assert_eq!(batch.row(0), batch.row(1));
    }

    #[test]
    fn batch_matches_rowwise() {
        let enc = Encoder::toy_conv_32(0).unwrap();
        let imgs: Vec<Image> = (0..4).map(|s| random_image(s, 3, 32)).collect();
        let batch = enc.encode_batch(&imgs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let row = enc.encode(img).unwrap();
            for (a, b) in batch.row(i).iter().zip(row.iter()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let enc = Encoder::toy_conv_32(0).unwrap();
        let err = enc.encode(&random_image(0, 3, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let enc = Encoder::toy_conv_32(11).unwrap();
        let img = random_image(5, 3, 32);
        // Objective: sum of features weighted by a fixed vector (plain sum is
        // identically zero after layer normalization).
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights = Array1::from_shape_fn(128, |_| rng.random::<f64>() - 0.5);
        let objective = |x: &Image| enc.encode(x).unwrap().dot(&weights);
        let (_, trace) = enc.encode_traced(&img).unwrap();
        let grad = enc.input_gradient(&trace, &weights).unwrap();
        let h = 1e-5;
        for &(c, y, x) in &[(0usize, 3usize, 4usize), (1, 16, 17), (2, 31, 0), (0, 10, 22), (2, 20, 9)] {
            let mut plus = img.clone();
            plus[[c, y, x]] += h;
            let mut minus = img.clone();
            minus[[c, y, x]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad[[c, y, x]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {:?}: fd {fd} analytic {an}", (c, y, x));
        }
    }

    #[test]
    fn weight_file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.sfmw");
        let enc = Encoder::toy_conv_32(21).unwrap();
        enc.save(&path).unwrap();
        let back = load_encoder(path.to_str().unwrap(), 0).unwrap();
        assert_eq!(back.fingerprint(), enc.fingerprint());
        let img = random_image(2, 3, 32);
        assert_eq!(back.encode(&img).unwrap(), enc.encode(&img).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.sfmw");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        let err = load_encoder(cut.to_str().unwrap(), 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");

        let missing = dir.path().join("nope.sfmw");
        assert!(matches!(load_encoder(missing.to_str().unwrap(), 0), Err(Error::Load(_))));
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let mut tf = Encoder::toy_conv_32(1).unwrap().to_tensor_file().unwrap();
        tf.meta.insert("feature_dim".into(), "64".into());
        assert!(matches!(Encoder::from_tensor_file(&tf), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_passes_vectors_through() {
        let enc = load_encoder("identity-8", 0).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let img = Array3::from_shape_vec((8, 1, 1), v.clone()).unwrap();
        assert_eq!(enc.encode(&img).unwrap().to_vec(), v);
    }

    #[test]
    fn spec_invariants_enforced() {
        let mut spec = Encoder::toy_conv_32(0).unwrap().spec().clone();
        spec.norm_std[1] = 0.0;
        assert!(spec.validate(false).is_err());
        spec.norm_std[1] = 0.25;
        spec.input_resolution = 4;
        assert!(spec.validate(false).is_err());
        spec.input_resolution = 32;
        spec.feature_dim = 1;
        assert!(spec.validate(false).is_err());
    }
}
