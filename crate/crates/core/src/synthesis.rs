//! Pyramid-parametrized synthetic images and a differentiable augmentation.
//!
//! A pyramid holds raw levels at `base * 2^l` (capped at the target size).
//! Composition upsamples every level bilinearly to the target size, sums
//! them and squashes the sum with a logistic sigmoid, so raw zero maps to
//! mid-gray and any raw value yields a valid pixel.

use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidImage {
    pub channels: usize,
    pub base_resolution: usize,
    pub target_resolution: usize,
    /// Raw learnable tensors, coarse to fine.
    pub levels: Vec<Array3<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source taps of a 1-D bilinear resize with half-pixel centers.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn upsample_add(level: &Array3<f64>, out: &mut Array3<f64>) {
    let (c, r, _) = level.dim();
    let t = out.dim().1;
    if r == t {
        *out += level;
        return;
    }
    let taps = bilinear_taps(r, t);
    for ch in 0..c {
        for (y, &(y0, y1, wy)) in taps.iter().enumerate() {
            for (x, &(x0, x1, wx)) in taps.iter().enumerate() {
                let top = level[[ch, y0, x0]] * (1.0 - wx) + level[[ch, y0, x1]] * wx;
                let bot = level[[ch, y1, x0]] * (1.0 - wx) + level[[ch, y1, x1]] * wx;
                out[[ch, y, x]] += top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

/// Transpose of [`upsample_add`]: scatters a target-size gradient onto a level.
fn upsample_transpose(grad: &Array3<f64>, res: usize) -> Array3<f64> {
    let (c, t, _) = grad.dim();
    if res == t {
        return grad.clone();
    }
    let taps = bilinear_taps(res, t);
    let mut g = Array3::zeros((c, res, res));
    for ch in 0..c {
        for (y, &(y0, y1, wy)) in taps.iter().enumerate() {
            for (x, &(x0, x1, wx)) in taps.iter().enumerate() {
                let v = grad[[ch, y, x]];
                g[[ch, y0, x0]] += v * (1.0 - wy) * (1.0 - wx);
                g[[ch, y0, x1]] += v * (1.0 - wy) * wx;
                g[[ch, y1, x0]] += v * wy * (1.0 - wx);
                g[[ch, y1, x1]] += v * wy * wx;
            }
        }
    }
    g
}

impl PyramidImage {
    /// A pyramid with one zero base level.
    pub fn new(channels: usize, base_resolution: usize, target_resolution: usize) -> Result<Self> {
        if channels == 0 || base_resolution == 0 {
            return Err(Error::Validation("pyramid needs channels and a positive base resolution".into()));
        }
        if base_resolution > target_resolution {
            return Err(Error::Validation(format!(
                "base resolution {base_resolution} exceeds target {target_resolution}"
            )));
        }
        Ok(Self {
            channels,
            base_resolution,
            target_resolution,
            levels: vec![Array3::zeros((channels, base_resolution, base_resolution))],
        })
    }

    /// Base level drawn from `N(0, std^2)`, finer levels untouched.
    pub fn noise_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, std).expect("std > 0");
        self.levels[0].mapv_inplace(|_| n.sample(rng));
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim().1).collect()
    }

    pub fn top_resolution(&self) -> usize {
        self.levels.last().map_or(0, |l| l.dim().1)
    }

    pub fn is_complete(&self) -> bool {
        self.top_resolution() >= self.target_resolution
    }

    pub fn parameter_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    /// Appends a zero level at double the top resolution. Returns `false`
    /// (and changes nothing) once the target resolution is reached.
    pub fn add_level(&mut self) -> bool {
        if self.is_complete() {
            log::info!("pyramid already at target resolution {}; add_level skipped", self.target_resolution);
            return false;
        }
        let r = (self.top_resolution() * 2).min(self.target_resolution);
        self.levels.push(Array3::zeros((self.channels, r, r)));
        true
    }

    fn raw_sum(&self) -> Array3<f64> {
        let t = self.target_resolution;
        let mut sum = Array3::zeros((self.channels, t, t));
        for level in &self.levels {
            upsample_add(level, &mut sum);
        }
        sum
    }

    pub fn compose(&self) -> Image {
        self.raw_sum().mapv_into(sigmoid)
    }

    /// Per-level gradients given the composed image and `dL/dimage`.
    pub fn compose_backward(&self, composed: &Image, grad: &Image) -> Result<Vec<Array3<f64>>> {
        if composed.dim() != grad.dim() || composed.dim() != (self.channels, self.target_resolution, self.target_resolution) {
            return Err(Error::Shape(format!(
                "compose_backward got image {:?} and gradient {:?}",
                composed.dim(),
                grad.dim()
            )));
        }
        let mut raw = grad.clone();
        Zip::from(&mut raw).and(composed).for_each(|g, &s| *g *= s * (1.0 - s));
        Ok(self.levels.iter().map(|l| upsample_transpose(&raw, l.dim().1)).collect())
    }
}

/// Augmentation switches and magnitudes.
///
/// * `brightness` b: additive shift uniform in `[-b, b]`, `0 <= b <= 1`.
/// * `saturation` s: channel-spread factor uniform in `[1-s, 1+s]`, `0 <= s <= 1`.
/// * `contrast` k: spread factor around the image mean uniform in `[1-k, 1+k]`, `0 <= k <= 1`.
/// * `translate` t: integer shift up to `round(t * size)` pixels per axis, zero padded, `0 <= t <= 0.5`.
/// * `cutout` u: zeroes a square of side `round(u * size)`, `0 <= u <= 1`.
/// * `flip`: horizontal flip with probability 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub seed: u64,
    pub flip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub translate: f64,
    pub cutout: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            seed: 0,
            flip: true,
            brightness: 0.5,
            saturation: 1.0,
            contrast: 0.5,
            translate: 0.125,
            cutout: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            seed: 0,
            flip: false,
            brightness: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            translate: 0.0,
            cutout: 0.0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("brightness", self.brightness, 1.0),
            ("saturation", self.saturation, 1.0),
            ("contrast", self.contrast, 1.0),
            ("translate", self.translate, 0.5),
            ("cutout", self.cutout, 1.0),
        ];
        for (name, v, hi) in checks {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::Validation(format!("{name} magnitude {v} outside [0, {hi}]")));
            }
        }
        Ok(())
    }

    /// Draws the transform determined by `seed` for images of side `size`.
    pub fn sample(&self, size: usize) -> Result<SampledTransform> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let brightness = sym(self.brightness);
        let saturation = 1.0 + sym(self.saturation);
        let contrast = 1.0 + sym(self.contrast);
        let max_shift = (self.translate * size as f64).round() as i64;
        let shift = if max_shift > 0 {
            (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift))
        } else {
            (0, 0)
        };
        let side = (self.cutout * size as f64).round() as usize;
        let cutout = (side > 0).then(|| {
            let cy = rng.random_range(0..size) as i64;
            let cx = rng.random_range(0..size) as i64;
            let half = side as i64 / 2;
            (cy - half, cx - half, side)
        });
        let flip = self.flip && rng.random_bool(0.5);
        Ok(SampledTransform {
            flip,
            brightness,
            saturation,
            contrast,
            shift,
            cutout,
        })
    }
}

/// One concrete draw of the augmentation, shared across a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTransform {
    pub flip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    /// `(dy, dx)` pixel shift; vacated pixels are zero.
    pub shift: (i64, i64),
    /// `(top, left, side)`; may overhang the border.
    pub cutout: Option<(i64, i64, usize)>,
}

/// Pixels where the final clamp was inactive; needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ClampMask(Vec<bool>);

impl SampledTransform {
    pub fn apply(&self, image: &Image) -> (Image, ClampMask) {
        let (c, h, w) = image.dim();
        let mut x = image.clone();
        if self.flip {
            x.invert_axis(ndarray::Axis(2));
            x = x.as_standard_layout().to_owned();
        }
        if self.brightness != 0.0 {
            x += self.brightness;
        }
        if self.saturation != 1.0 {
            let s = self.saturation;
            for yy in 0..h {
                for xx in 0..w {
                    let m = (0..c).map(|ch| x[[ch, yy, xx]]).sum::<f64>() / c as f64;
                    for ch in 0..c {
                        let v = &mut x[[ch, yy, xx]];
                        *v = s * *v + (1.0 - s) * m;
                    }
                }
            }
        }
        if self.contrast != 1.0 {
            let k = self.contrast;
            let m = x.mean().unwrap_or(0.0);
            x.mapv_inplace(|v| k * v + (1.0 - k) * m);
        }
        if self.shift != (0, 0) {
            x = shift_image(&x, self.shift.0, self.shift.1);
        }
        if let Some((top, left, side)) = self.cutout {
            for_each_cut(top, left, side, h, w, |yy, xx| {
                for ch in 0..c {
                    x[[ch, yy, xx]] = 0.0;
                }
            });
        }
        let mut mask = Vec::with_capacity(x.len());
        for v in x.iter_mut() {
            mask.push((0.0..=1.0).contains(v));
            *v = v.clamp(0.0, 1.0);
        }
        (x, ClampMask(mask))
    }

    /// `dL/dinput` from `dL/doutput`.
    pub fn backward(&self, mask: &ClampMask, grad: &Image) -> Image {
        let (c, h, w) = grad.dim();
        let mut g = grad.clone();
        for (v, &keep) in g.iter_mut().zip(&mask.0) {
            if !keep {
                *v = 0.0;
            }
        }
        if let Some((top, left, side)) = self.cutout {
            for_each_cut(top, left, side, h, w, |yy, xx| {
                for ch in 0..c {
                    g[[ch, yy, xx]] = 0.0;
                }
            });
        }
        if self.shift != (0, 0) {
            g = shift_image(&g, -self.shift.0, -self.shift.1);
        }
        if self.contrast != 1.0 {
            let k = self.contrast;
            let m = g.mean().unwrap_or(0.0);
            g.mapv_inplace(|v| k * v + (1.0 - k) * m);
        }
        if self.saturation != 1.0 {
            let s = self.saturation;
            for yy in 0..h {
                for xx in 0..w {
                    let m = (0..c).map(|ch| g[[ch, yy, xx]]).sum::<f64>() / c as f64;
                    for ch in 0..c {
                        let v = &mut g[[ch, yy, xx]];
                        *v = s * *v + (1.0 - s) * m;
                    }
                }
            }
        }
        if self.flip {
            g.invert_axis(ndarray::Axis(2));
            g = g.as_standard_layout().to_owned();
        }
        g
    }
}

fn shift_image(x: &Image, dy: i64, dx: i64) -> Image {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for yy in 0..h as i64 {
            let sy = yy - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w as i64 {
                let sx = xx - dx;
                if sx >= 0 && sx < w as i64 {
                    out[[ch, yy as usize, xx as usize]] = x[[ch, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}

fn for_each_cut(top: i64, left: i64, side: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = top.max(0) as usize;
    let x0 = left.max(0) as usize;
    let y1 = ((top + side as i64).max(0) as usize).min(h);
    let x1 = ((left + side as i64).max(0) as usize).min(w);
    for yy in y0..y1 {
        for xx in x0..x1 {
            f(yy, xx);
        }
    }
}

/// Applies the transform drawn from `params.seed` to every image.
pub fn augment(images: &[Image], params: &AugmentParams) -> Result<Vec<Image>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (_, h, w) = first.dim();
    if h != w {
        return Err(Error::Shape(format!("augment expects square images, got {h}x{w}")));
    }
    for img in images {
        if img.dim() != first.dim() {
            return Err(Error::Shape("augment batch has mixed shapes".into()));
        }
        if img.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(Error::Validation("augment input outside [0, 1]".into()));
        }
    }
    let t = params.sample(h)?;
    Ok(images.iter().map(|img| t.apply(img).0).collect())
}
