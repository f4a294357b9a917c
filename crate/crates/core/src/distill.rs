//! Optimization loops producing one synthetic image per class.
//!
//! Every method shares one loop: compose the pyramids, draw `a` augmentation
//! passes, encode, score the batch features against a target, push the
//! feature gradient back through encoder, augmentation and composition, and
//! take one Adam step per pyramid level. Only the scoring differs:
//!
//! * `sfm`: cosine distance between the batch flow and the statistical flow.
//! * `tcdd`: synthetic class means against the statistical class centers.
//! * `ncdd`: synthetic non-target means against the statistical non-target centers.
//! * `lgm`: linear-head gradients of a sampled real batch against those of the
//!   synthetic batch (or their weight-free analytic form).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, Image, LabeledImages};
use crate::encoders::{Encoder, ForwardTrace};
use crate::error::{Error, Result};
use crate::flows::{
    analytic_flow, analytic_flow_vjp, ce_linear_gradient, ce_linear_gradient_vjp, cosine_distance_with_grad,
    mean_row_cosine, one_hot, Aggregation, LinearHead, WMode,
};
use crate::fsutil;
use crate::optim::Adam;
use crate::statistics::{ClassStatistics, StatFlow};
use crate::synthesis::{AugmentParams, ClampMask, PyramidImage, SampledTransform};
use crate::tensorfile::{DType, NamedTensor, TensorFile};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const AUG_STREAM: u64 = 0x6175_6773_7472_6561;
const HEAD_STREAM: u64 = 0x7765_6967_6874_7321;
const REAL_STREAM: u64 = 0x7265_616c_6261_7463;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Sfm,
    Tcdd,
    Ncdd,
    Lgm,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfm" => Ok(Method::Sfm),
            "tcdd" => Ok(Method::Tcdd),
            "ncdd" => Ok(Method::Ncdd),
            "lgm" => Ok(Method::Lgm),
            other => Err(Error::Validation(format!("unknown distillation method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sfm => "sfm",
            Method::Tcdd => "tcdd",
            Method::Ncdd => "ncdd",
            Method::Lgm => "lgm",
        })
    }
}

/// Stop once the loss has not improved by `min_rel_improvement` (relative)
/// for `window` steps. Only consulted after the pyramid is complete.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub window: usize,
    pub min_rel_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    pub lgm_w_mode: WMode,
    pub iterations: usize,
    pub level_interval: usize,
    pub learning_rate: f64,
    pub augmentations_per_batch: usize,
    pub real_batch_per_class: usize,
    pub sigma_w: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub base_resolution: usize,
    /// Standard deviation of the raw base-level noise.
    pub init_std: f64,
    /// Magnitudes of the per-step augmentation; its seed is mixed with the run seed.
    pub augment: AugmentParams,
    pub plateau: Option<Plateau>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Sfm,
            lgm_w_mode: WMode::Random,
            iterations: 5000,
            level_interval: 200,
            learning_rate: 0.002,
            augmentations_per_batch: 1,
            real_batch_per_class: 16,
            sigma_w: 0.01,
            seed: 0,
            aggregation: Aggregation::Flatten,
            base_resolution: 8,
            init_std: 0.1,
            augment: AugmentParams::default(),
            plateau: None,
        }
    }
}

impl DistillConfig {
    /// Checks everything except `iterations`, which may be zero here.
    pub fn validate(&self) -> Result<()> {
        if self.augmentations_per_batch == 0 {
            return Err(Error::Validation("augmentations_per_batch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.level_interval == 0 {
            return Err(Error::Validation("level_interval must be positive".into()));
        }
        if self.base_resolution == 0 {
            return Err(Error::Validation("base_resolution must be positive".into()));
        }
        if self.method == Method::Lgm && self.real_batch_per_class == 0 {
            return Err(Error::Validation("real_batch_per_class must be at least 1".into()));
        }
        if !(self.sigma_w >= 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Validation("sigma_w and init_std must be nonnegative".into()));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 {
                return Err(Error::Validation("plateau window must be positive".into()));
            }
        }
        self.augment.validate()
    }

    pub fn fingerprint(&self) -> String {
        fsutil::fingerprint_of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Mean per-class cosine similarity between synthetic and target rows.
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub config_fingerprint: String,
    pub encoder_fingerprint: String,
    pub stopped_early: bool,
    #[serde(skip)]
    pub loss_trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub pyramids: Vec<PyramidImage>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    tool_version: String,
    num_classes: usize,
    labels: Vec<usize>,
    channels: usize,
    base_resolution: usize,
    target_resolution: usize,
    levels: Vec<usize>,
    provenance: Provenance,
    run_fingerprint: Option<String>,
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn images(&self) -> Vec<Image> {
        self.pyramids.iter().map(PyramidImage::compose).collect()
    }

    pub fn to_labeled(&self) -> Result<LabeledImages> {
        LabeledImages::new(self.images(), self.labels.clone(), self.num_classes())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.provenance.loss_trace.last().map(|r| r.loss)
    }

    pub fn loss_trace_csv(&self) -> String {
        let mut out = String::from("step,loss,mean_cosine\n");
        for r in &self.provenance.loss_trace {
            let _ = writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.mean_cosine);
        }
        out
    }

    /// Writes composed PNGs, metadata, raw pyramid tensors and the loss
    /// trace into `dir`, replacing it atomically.
    pub fn save(&self, dir: &Path, run_fingerprint: Option<&str>) -> Result<()> {
        let first = self
            .pyramids
            .first()
            .ok_or_else(|| Error::Validation("synthetic dataset is empty".into()))?;
        let meta = Metadata {
            tool_version: TOOL_VERSION.to_string(),
            num_classes: self.num_classes(),
            labels: self.labels.clone(),
            channels: first.channels,
            base_resolution: first.base_resolution,
            target_resolution: first.target_resolution,
            levels: self.pyramids.iter().map(|p| p.levels.len()).collect(),
            provenance: self.provenance.clone(),
            run_fingerprint: run_fingerprint.map(str::to_string),
        };
        let mut tf = TensorFile::new()
            .with_meta("kind", "pyramids")
            .with_meta("tool_version", TOOL_VERSION);
        for (c, p) in self.pyramids.iter().enumerate() {
            for (l, level) in p.levels.iter().enumerate() {
                let (ch, r, _) = level.dim();
                tf.push(NamedTensor::new(
                    format!("class{c}.level{l}"),
                    DType::F64,
                    vec![ch, r, r],
                    level.iter().copied().collect(),
                )?);
            }
        }
        let images = self.images();
        let csv = self.loss_trace_csv();
        fsutil::write_dir_atomic(dir, |tmp| {
            for (c, img) in images.iter().enumerate() {
                write_png(&tmp.join(format!("class_{c:03}.png")), img)?;
            }
            let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Validation(e.to_string()))?;
            fsutil::write_atomic(&tmp.join("metadata.json"), &json)?;
            tf.save(&tmp.join("pyramids.sfmt"))?;
            fsutil::write_atomic(&tmp.join("loss_trace.csv"), csv.as_bytes())
        })
    }

    /// Loads a saved dataset. When `expected_run` is given, the stored run
    /// fingerprint must match it.
    pub fn load(dir: &Path, expected_run: Option<&str>) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact {
                path: meta_path,
                hint: "run the `distill` command first".into(),
            });
        }
        let meta: Metadata = serde_json::from_slice(&fsutil::read_bytes(&meta_path)?)
            .map_err(|e| Error::Load(format!("{}: {e}", meta_path.display())))?;
        if let Some(expected) = expected_run {
            if meta.run_fingerprint.as_deref() != Some(expected) {
                return Err(Error::Fingerprint(format!(
                    "{} was produced by run {:?}, current configuration is {expected}",
                    dir.display(),
                    meta.run_fingerprint
                )));
            }
        }
        let tf = TensorFile::load(&dir.join("pyramids.sfmt"))?;
        let mut pyramids = Vec::with_capacity(meta.num_classes);
        for c in 0..meta.num_classes {
            let mut p = PyramidImage::new(meta.channels, meta.base_resolution, meta.target_resolution)?;
            p.levels.clear();
            for l in 0..meta.levels.get(c).copied().unwrap_or(0) {
                let t = tf.require(&format!("class{c}.level{l}"))?;
                let (ch, r) = match t.shape.as_slice() {
                    &[ch, r, r2] if r == r2 => (ch, r),
                    other => return Err(Error::Shape(format!("pyramid level with shape {other:?}"))),
                };
                p.levels.push(
                    ndarray::Array3::from_shape_vec((ch, r, r), t.data.clone()).map_err(|e| Error::Shape(e.to_string()))?,
                );
            }
            if p.levels.is_empty() {
                return Err(Error::Validation(format!("class {c} has no pyramid levels")));
            }
            pyramids.push(p);
        }
        let mut provenance = meta.provenance;
        provenance.loss_trace = parse_trace(&String::from_utf8_lossy(&fsutil::read_bytes(&dir.join("loss_trace.csv"))?))?;
        Ok(Self {
            pyramids,
            labels: meta.labels,
            provenance,
        })
    }
}

fn parse_trace(csv: &str) -> Result<Vec<TraceRow>> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Load(format!("malformed loss trace line {line:?}"));
            let mut it = line.split(',');
            let step = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let loss = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let mean_cosine = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok(TraceRow { step, loss, mean_cosine })
        })
        .collect()
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::new();
    let encoded = match c {
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([0, 1, 2].map(|ch| q(img[[ch, y as usize, x as usize]])))
            });
            buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        }
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([q(img[[0, y as usize, x as usize]])]));
            buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        }
        // Feature-space "images" have no pixel rendering; the tensor file is authoritative.
        _ => return Ok(()),
    };
    encoded.map_err(|e| Error::Validation(format!("png encoding failed: {e}")))?;
    fsutil::write_atomic(path, &bytes)
}

/// Scores a batch of synthetic features: `(loss, mean cosine, dL/dfeatures)`.
trait Objective {
    fn score(
        &mut self,
        feats: ArrayView2<f64>,
        onehot: ArrayView2<f64>,
        transforms: &[SampledTransform],
    ) -> Result<(f64, f64, Array2<f64>)>;
}

struct FlowTarget<'a> {
    target: &'a Array2<f64>,
    aggregation: Aggregation,
}

impl Objective for FlowTarget<'_> {
    fn score(&mut self, feats: ArrayView2<f64>, onehot: ArrayView2<f64>, _: &[SampledTransform]) -> Result<(f64, f64, Array2<f64>)> {
        let synth = analytic_flow(feats, onehot)?;
        let (loss, g) = cosine_distance_with_grad(self.target.view(), synth.view(), self.aggregation)?;
        let cos = mean_row_cosine(self.target.view(), synth.view())?;
        Ok((loss, cos, analytic_flow_vjp(onehot, g.view())?))
    }
}

/// Matches one of the two halves of the flow.
struct HalfTarget {
    target: Array2<f64>,
    nontarget: bool,
    aggregation: Aggregation,
}

impl Objective for HalfTarget {
    fn score(&mut self, feats: ArrayView2<f64>, onehot: ArrayView2<f64>, _: &[SampledTransform]) -> Result<(f64, f64, Array2<f64>)> {
        let members = onehot.sum_axis(ndarray::Axis(0));
        let b = onehot.nrows() as f64;
        let class_sums = onehot.t().dot(&feats);
        let mut synth = class_sums.clone();
        if self.nontarget {
            let total = feats.sum_axis(ndarray::Axis(0));
            for (c, mut row) in synth.outer_iter_mut().enumerate() {
                let rest = b - members[c];
                if rest == 0.0 {
                    return Err(Error::Validation(format!("class {c} covers the whole batch")));
                }
                row.assign(&((&total - &class_sums.row(c)) / rest));
            }
        } else {
            for (c, mut row) in synth.outer_iter_mut().enumerate() {
                if members[c] == 0.0 {
                    return Err(Error::EmptyClass { class: c });
                }
                row /= members[c];
            }
        }
        let (loss, g) = cosine_distance_with_grad(self.target.view(), synth.view(), self.aggregation)?;
        let cos = mean_row_cosine(self.target.view(), synth.view())?;
        let mut dfeats = Array2::zeros(feats.dim());
        for (i, mut row) in dfeats.outer_iter_mut().enumerate() {
            for c in 0..onehot.ncols() {
                let member = onehot[[i, c]] == 1.0;
                if self.nontarget && !member {
                    row.scaled_add(1.0 / (b - members[c]), &g.row(c));
                } else if !self.nontarget && member {
                    row.scaled_add(1.0 / members[c], &g.row(c));
                }
            }
        }
        Ok((loss, cos, dfeats))
    }
}

struct LgmTarget<'a> {
    encoder: &'a Encoder,
    real: Vec<(Vec<Image>, Vec<usize>)>,
    per_class: usize,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
    head_rng: ChaCha8Rng,
    head: Option<LinearHead>,
    mode: WMode,
    sigma_w: f64,
    aggregation: Aggregation,
}

impl LgmTarget<'_> {
    /// `per_class` images of every class, reshuffling a class when exhausted.
    fn sample_real(&mut self) -> Vec<(usize, usize)> {
        let mut picks = Vec::with_capacity(self.per_class * self.real.len());
        for c in 0..self.real.len() {
            let n = self.real[c].0.len();
            for _ in 0..self.per_class.min(n) {
                if self.cursors[c] == n {
                    self.real[c].1.shuffle(&mut self.rng);
                    self.cursors[c] = 0;
                }
                picks.push((c, self.real[c].1[self.cursors[c]]));
                self.cursors[c] += 1;
            }
        }
        picks
    }
}

impl Objective for LgmTarget<'_> {
    fn score(&mut self, feats: ArrayView2<f64>, onehot: ArrayView2<f64>, transforms: &[SampledTransform]) -> Result<(f64, f64, Array2<f64>)> {
        let picks = self.sample_real();
        let mut real_feats = Array2::zeros((picks.len() * transforms.len(), feats.ncols()));
        let mut real_labels = Vec::with_capacity(real_feats.nrows());
        for (k, t) in transforms.iter().enumerate() {
            for (j, &(c, idx)) in picks.iter().enumerate() {
                let aug = t.apply(&self.real[c].0[idx]).0;
                real_feats.row_mut(k * picks.len() + j).assign(&self.encoder.encode(&aug)?);
                real_labels.push(c);
            }
        }
        let real_onehot = one_hot(&real_labels, onehot.ncols())?;
        let c = onehot.ncols();
        let f = feats.ncols();
        match self.mode {
            WMode::Analytic => {
                let gr = analytic_flow(real_feats.view(), real_onehot.view())?;
                let gs = analytic_flow(feats, onehot)?;
                let (loss, g) = cosine_distance_with_grad(gr.view(), gs.view(), self.aggregation)?;
                let cos = mean_row_cosine(gr.view(), gs.view())?;
                Ok((loss, cos, analytic_flow_vjp(onehot, g.view())?))
            }
            mode => {
                if mode == WMode::Random || self.head.is_none() {
                    self.head = Some(LinearHead::sample(c, f, self.sigma_w, mode, &mut self.head_rng));
                }
                let head = self.head.as_ref().expect("head sampled above");
                let gr = ce_linear_gradient(real_feats.view(), real_onehot.view(), head)?;
                let gs = ce_linear_gradient(feats, onehot, head)?;
                let (loss, g) = cosine_distance_with_grad(gr.view(), gs.view(), self.aggregation)?;
                let cos = mean_row_cosine(gr.view(), gs.view())?;
                Ok((loss, cos, ce_linear_gradient_vjp(feats, onehot, head.weight.view(), g.view())?))
            }
        }
    }
}

fn run_loop(cfg: &DistillConfig, encoder: &Encoder, num_classes: usize, objective: &mut dyn Objective) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(Error::Validation("distillation needs at least two classes".into()));
    }
    let (channels, res, _) = encoder.spec().input_shape();
    let base = cfg.base_resolution.min(res);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pyramids = Vec::with_capacity(num_classes);
    let mut adams = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut p = PyramidImage::new(channels, base, res)?;
        p.noise_init(cfg.init_std, &mut init_rng);
        adams.push(vec![Adam::new(p.levels[0].len(), cfg.learning_rate)]);
        pyramids.push(p);
    }
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.augment.seed ^ AUG_STREAM);
    let a = cfg.augmentations_per_batch;
    let labels: Vec<usize> = (0..a).flat_map(|_| 0..num_classes).collect();
    let onehot = one_hot(&labels, num_classes)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = (f64::INFINITY, 0usize);
    let mut stopped_early = false;

    for step in 0..cfg.iterations {
        if step > 0 && step % cfg.level_interval == 0 {
            for (p, opt) in pyramids.iter_mut().zip(adams.iter_mut()) {
                if p.add_level() {
                    let len = p.levels.last().expect("level just added").len();
                    opt.push(Adam::new(len, cfg.learning_rate));
                }
            }
        }
        let composed: Vec<Image> = pyramids.iter().map(PyramidImage::compose).collect();
        let transforms = (0..a)
            .map(|_| cfg.augment.with_seed(aug_rng.random()).sample(res))
            .collect::<Result<Vec<_>>>()?;
        let mut feats = Array2::zeros((a * num_classes, encoder.feature_dim()));
        let mut saved: Vec<(ForwardTrace, ClampMask)> = Vec::with_capacity(a * num_classes);
        for (k, t) in transforms.iter().enumerate() {
            for (c, img) in composed.iter().enumerate() {
                let (aug, mask) = t.apply(img);
                let (f, tr) = encoder.encode_traced(&aug)?;
                feats.row_mut(k * num_classes + c).assign(&f);
                saved.push((tr, mask));
            }
        }
        let (loss, cos, dfeats) = objective.score(feats.view(), onehot.view(), &transforms)?;
        if !loss.is_finite() || dfeats.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss or gradient at step {step}")));
        }
        trace.push(TraceRow { step, loss, mean_cosine: cos });

        let mut grads: Vec<Image> = composed.iter().map(|img| Image::zeros(img.dim())).collect();
        for (i, (tr, mask)) in saved.iter().enumerate() {
            let (k, c) = (i / num_classes, i % num_classes);
            let g_aug = encoder.input_gradient(tr, &dfeats.row(i).to_owned())?;
            grads[c] += &transforms[k].backward(mask, &g_aug);
        }
        for c in 0..num_classes {
            let level_grads = pyramids[c].compose_backward(&composed[c], &grads[c])?;
            for ((level, g), opt) in pyramids[c].levels.iter_mut().zip(&level_grads).zip(adams[c].iter_mut()) {
                opt.step(
                    level.as_slice_mut().expect("levels are contiguous"),
                    g.as_slice().expect("gradients are contiguous"),
                );
            }
        }

        if let Some(p) = cfg.plateau {
            if loss < best.0 * (1.0 - p.min_rel_improvement) {
                best = (loss, step);
            }
            if pyramids.iter().all(PyramidImage::is_complete) && step - best.1 >= p.window {
                log::info!("plateau reached at step {step}, best loss {:.6}", best.0);
                stopped_early = true;
                break;
            }
        }
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.6}, mean cosine {cos:.4}");
        }
    }

    Ok(SyntheticDataset {
        pyramids,
        labels: (0..num_classes).collect(),
        provenance: Provenance {
            method: cfg.method,
            config_fingerprint: cfg.fingerprint(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            stopped_early,
            loss_trace: trace,
        },
    })
}

fn check_fingerprint(what: &str, have: &str, encoder: &Encoder) -> Result<()> {
    if have != encoder.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "{what} was computed with encoder {have}, distillation encoder is {}",
            encoder.fingerprint()
        )));
    }
    Ok(())
}

/// Statistical flow matching. Takes no real images by construction.
pub fn distill_sfm(config: &DistillConfig, encoder: &Encoder, flow: &StatFlow) -> Result<SyntheticDataset> {
    if config.method != Method::Sfm {
        return Err(Error::Validation(format!("distill_sfm called with method {}", config.method)));
    }
    check_fingerprint("statistical flow", &flow.fingerprint, encoder)?;
    if flow.matrix().ncols() != encoder.feature_dim() {
        return Err(Error::Shape("flow width differs from encoder feature dimension".into()));
    }
    let mut objective = FlowTarget {
        target: flow.matrix(),
        aggregation: config.aggregation,
    };
    run_loop(config, encoder, flow.flow.num_classes(), &mut objective)
}

/// Target-center (`tcdd`) or non-target-center (`ncdd`) matching alone.
pub fn distill_ablation(config: &DistillConfig, encoder: &Encoder, stats: &ClassStatistics) -> Result<SyntheticDataset> {
    let nontarget = match config.method {
        Method::Tcdd => false,
        Method::Ncdd => true,
        other => return Err(Error::Validation(format!("distill_ablation called with method {other}"))),
    };
    check_fingerprint("class statistics", &stats.encoder_fingerprint, encoder)?;
    let target = if nontarget { stats.nontarget_centers()? } else { stats.centers()? };
    let mut objective = HalfTarget {
        target,
        nontarget,
        aggregation: config.aggregation,
    };
    run_loop(config, encoder, stats.num_classes, &mut objective)
}

/// Loss of the target-center ablation for given synthetic class means.
pub fn tcdd_loss(stats: &ClassStatistics, synthetic_means: ArrayView2<f64>, aggregation: Aggregation) -> Result<f64> {
    Ok(cosine_distance_with_grad(stats.centers()?.view(), synthetic_means, aggregation)?.0)
}

/// Linear gradient matching against sampled real batches.
pub fn distill_lgm(config: &DistillConfig, encoder: &Encoder, real: &LabeledImages) -> Result<SyntheticDataset> {
    if config.method != Method::Lgm {
        return Err(Error::Validation(format!("distill_lgm called with method {}", config.method)));
    }
    config.validate()?;
    real.require_all_classes()?;
    let res = encoder.spec().input_resolution;
    let mut by_class: BTreeMap<usize, Vec<Image>> = BTreeMap::new();
    for (img, l) in real.iter() {
        let (_, h, w) = img.dim();
        let img = if h == res && w == res { img.clone() } else { resize_bilinear(img, res) };
        by_class.entry(l).or_default().push(img);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ REAL_STREAM);
    let real_sets: Vec<(Vec<Image>, Vec<usize>)> = by_class
        .into_values()
        .map(|imgs| {
            let mut order: Vec<usize> = (0..imgs.len()).collect();
            order.shuffle(&mut rng);
            (imgs, order)
        })
        .collect();
    let mut objective = LgmTarget {
        encoder,
        cursors: vec![0; real_sets.len()],
        real: real_sets,
        per_class: config.real_batch_per_class,
        rng,
        head_rng: ChaCha8Rng::seed_from_u64(config.seed ^ HEAD_STREAM),
        head: None,
        mode: config.lgm_w_mode,
        sigma_w: config.sigma_w,
        aggregation: config.aggregation,
    };
    run_loop(config, encoder, real.num_classes, &mut objective)
}
