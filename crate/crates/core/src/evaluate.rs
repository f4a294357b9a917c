//! Downstream evaluation of a one-image-per-class dataset.
//!
//! Everything trains on frozen encoder features: a golden classifier on the
//! full original data, linear probes on the synthetic images (optionally with
//! soft labels from the golden classifier), and the classifier-inheritance
//! family, in which a single linear projector maps evaluation-encoder
//! features into the distillation encoder's space so the golden classifier
//! can be reused unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, Image, LabeledImages};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::flows::{one_hot, softmax_probs};
use crate::fsutil;
use crate::optim::Adam;
use crate::synthesis::AugmentParams;
use crate::tensorfile::{DType, NamedTensor, TensorFile};

const EVAL_AUG_STREAM: u64 = 0x6576_616c_6175_6721;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Golden,
    Probe,
}

/// Linear head with bias over frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `C x F`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kind: ClassifierKind,
}

impl Classifier {
    pub fn zeros(num_classes: usize, feature_dim: usize, kind: ClassifierKind) -> Self {
        Self {
            weight: Array2::zeros((num_classes, feature_dim)),
            bias: Array1::zeros(num_classes),
            kind,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn logits(&self, feats: ArrayView2<f64>) -> Result<Array2<f64>> {
        if feats.ncols() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} features, got {}",
                self.feature_dim(),
                feats.ncols()
            )));
        }
        Ok(feats.dot(&self.weight.t()) + &self.bias)
    }

    pub fn predict(&self, feats: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.logits(feats)?.view()))
    }

    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * self.parameter_count());
        for v in self.weight.iter().chain(self.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fsutil::sha256_hex(&bytes)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let kind = match self.kind {
            ClassifierKind::Golden => "golden",
            ClassifierKind::Probe => "probe",
        };
        let mut tf = TensorFile::new().with_meta("kind", "classifier").with_meta("provenance", kind);
        let (c, f) = self.weight.dim();
        tf.push(NamedTensor::new("weight", DType::F64, vec![c, f], self.weight.iter().copied().collect())?);
        tf.push(NamedTensor::new("bias", DType::F64, vec![c], self.bias.to_vec())?);
        Ok(tf)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        if tf.meta_str("kind")? != "classifier" {
            return Err(Error::Validation("tensor file is not a classifier".into()));
        }
        let kind = match tf.meta_str("provenance")? {
            "golden" => ClassifierKind::Golden,
            "probe" => ClassifierKind::Probe,
            other => return Err(Error::Validation(format!("unknown classifier provenance {other:?}"))),
        };
        let w = tf.require("weight")?;
        let b = tf.require("bias")?;
        let (c, f) = match w.shape.as_slice() {
            &[c, f] => (c, f),
            other => return Err(Error::Shape(format!("classifier weight shape {other:?}"))),
        };
        if b.shape != [c] {
            return Err(Error::Shape("classifier bias does not match weight".into()));
        }
        Ok(Self {
            weight: Array2::from_shape_vec((c, f), w.data.clone()).map_err(|e| Error::Shape(e.to_string()))?,
            bias: Array1::from(b.data.clone()),
            kind,
        })
    }
}

/// Single linear layer `F_e -> F_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `F_d x F_e`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorInit {
    /// Ones on the main diagonal (rectangular when dimensions differ).
    #[default]
    Identity,
    Zeros,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, init: ProjectorInit) -> Self {
        let weight = match init {
            ProjectorInit::Identity => Array2::from_shape_fn((out_dim, in_dim), |(i, j)| if i == j { 1.0 } else { 0.0 }),
            ProjectorInit::Zeros => Array2::zeros((out_dim, in_dim)),
        };
        Self {
            weight,
            bias: Array1::zeros(out_dim),
            frozen: false,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn apply(&self, feats: ArrayView2<f64>) -> Result<Array2<f64>> {
        if feats.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "projector expects {} features, got {}",
                self.in_dim(),
                feats.ncols()
            )));
        }
        Ok(feats.dot(&self.weight.t()) + &self.bias)
    }

    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for v in self.weight.iter().chain(self.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fsutil::sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Vanilla,
    Ci,
    Jt,
    St,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "ci" => Ok(Strategy::Ci),
            "jt" => Ok(Strategy::Jt),
            "st" => Ok(Strategy::St),
            other => Err(Error::Validation(format!("unknown evaluation strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Ci => "ci",
            Strategy::Jt => "jt",
            Strategy::St => "st",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strategy: Strategy,
    /// Start trainable classifiers from the golden weights.
    pub inherit_initial_parameters: bool,
    /// Weight of the KL term against golden soft labels.
    pub soft_label_alpha: f64,
    pub iterations: usize,
    /// Second-stage classifier steps of `st`; defaults to `iterations`.
    pub classifier_iterations: Option<usize>,
    pub probe_lr: f64,
    pub projector_lr: f64,
    pub projector_init: ProjectorInit,
    pub golden_iterations: usize,
    pub golden_lr: f64,
    pub seed: u64,
    /// Train-time augmentation of the synthetic images.
    pub augment: bool,
    pub augment_params: AugmentParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            inherit_initial_parameters: false,
            soft_label_alpha: 0.0,
            iterations: 1000,
            classifier_iterations: None,
            probe_lr: 0.001,
            projector_lr: 0.01,
            projector_init: ProjectorInit::Identity,
            golden_iterations: 1000,
            golden_lr: 0.01,
            seed: 0,
            augment: true,
            augment_params: AugmentParams::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Validation("evaluation iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.soft_label_alpha) {
            return Err(Error::Validation(format!("soft_label_alpha {} outside [0, 1]", self.soft_label_alpha)));
        }
        if self.soft_label_alpha > 0.0 && self.strategy == Strategy::Ci {
            return Err(Error::Validation("soft labels do not apply to classifier inheritance".into()));
        }
        for (name, lr) in [("probe_lr", self.probe_lr), ("projector_lr", self.projector_lr), ("golden_lr", self.golden_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        self.augment_params.validate()
    }

    pub fn fingerprint(&self) -> String {
        fsutil::fingerprint_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub strategy: Strategy,
    pub accuracy: f64,
    pub num_classes: usize,
    pub num_val: usize,
    pub trainable_parameters: usize,
    pub classifier_loss: Vec<f64>,
    pub projector_loss: Vec<f64>,
    pub settings: BTreeMap<String, String>,
    pub fingerprint: String,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    fn finish(mut self, started: Instant) -> Self {
        self.fingerprint = self.content_fingerprint();
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        self
    }

    /// Hash of everything except wall-clock time.
    pub fn content_fingerprint(&self) -> String {
        let mut clone = self.clone();
        clone.fingerprint = String::new();
        clone.wall_clock_secs = 0.0;
        fsutil::fingerprint_of(&clone)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = String::from_utf8_lossy(&fsutil::read_bytes(path)?).into_owned();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Load(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn summary_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>10}\n", "label", "strategy", "top-1 %", "params");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}  {:>10}",
            r.label,
            r.strategy.to_string(),
            100.0 * r.accuracy,
            r.trainable_parameters
        );
    }
    out
}

/// Encoded validation set for one encoder; read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub encoder_fingerprint: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureCache {
    pub fn build(encoder: &Encoder, data: &LabeledImages) -> Result<Self> {
        Ok(Self {
            encoder_fingerprint: encoder.fingerprint().to_string(),
            features: encode_all(encoder, &data.images)?,
            labels: data.labels.clone(),
            num_classes: data.num_classes,
        })
    }

    pub fn check(&self, encoder: &Encoder) -> Result<()> {
        if self.encoder_fingerprint != encoder.fingerprint() {
            return Err(Error::Fingerprint(format!(
                "feature cache built with encoder {}, evaluating with {}",
                self.encoder_fingerprint,
                encoder.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        accuracy(predictions, &self.labels)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let (n, f) = self.features.dim();
        let mut tf = TensorFile::new()
            .with_meta("kind", "features")
            .with_meta("encoder_fingerprint", self.encoder_fingerprint.clone())
            .with_meta("num_classes", self.num_classes.to_string());
        tf.push(NamedTensor::new("features", DType::F64, vec![n, f], self.features.iter().copied().collect())?);
        tf.push(NamedTensor::new("labels", DType::F64, vec![n], self.labels.iter().map(|&l| l as f64).collect())?);
        Ok(tf)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        if tf.meta_str("kind")? != "features" {
            return Err(Error::Validation("tensor file is not a feature cache".into()));
        }
        let feats = tf.require("features")?;
        let (n, f) = match feats.shape.as_slice() {
            &[n, f] => (n, f),
            other => return Err(Error::Shape(format!("feature cache shape {other:?}"))),
        };
        let labels: Vec<usize> = tf.require("labels")?.data.iter().map(|&v| v as usize).collect();
        if labels.len() != n {
            return Err(Error::Shape("feature cache labels do not match rows".into()));
        }
        Ok(Self {
            encoder_fingerprint: tf.meta_str("encoder_fingerprint")?.to_string(),
            features: Array2::from_shape_vec((n, f), feats.data.clone()).map_err(|e| Error::Shape(e.to_string()))?,
            labels,
            num_classes: tf.meta_parse("num_classes")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn fit_resolution(img: &Image, encoder: &Encoder) -> Image {
    let res = encoder.spec().input_resolution;
    let (_, h, w) = img.dim();
    if h == res && w == res {
        img.clone()
    } else {
        resize_bilinear(img, res)
    }
}

pub fn encode_all(encoder: &Encoder, images: &[Image]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), encoder.feature_dim()));
    for (i, img) in images.iter().enumerate() {
        out.row_mut(i).assign(&encoder.encode(&fit_resolution(img, encoder))?);
    }
    Ok(out)
}

/// Per-iteration features of the (augmented) training images.
struct TrainFeatures<'a> {
    images: Vec<Image>,
    encoders: Vec<&'a Encoder>,
    augment: Option<(AugmentParams, ChaCha8Rng)>,
    fixed: Option<Vec<Array2<f64>>>,
}

impl<'a> TrainFeatures<'a> {
    fn new(images: &[Image], encoders: Vec<&'a Encoder>, cfg: &EvalConfig) -> Result<Self> {
        let res = encoders[0].spec().input_resolution;
        if encoders.iter().any(|e| e.spec().input_resolution != res) {
            return Err(Error::Shape("encoders sharing a training batch need one input resolution".into()));
        }
        let images: Vec<Image> = images.iter().map(|img| fit_resolution(img, encoders[0])).collect();
        let fixed = if cfg.augment {
            None
        } else {
            Some(encoders.iter().map(|e| encode_all(e, &images)).collect::<Result<Vec<_>>>()?)
        };
        let augment = cfg
            .augment
            .then(|| (cfg.augment_params, ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_AUG_STREAM)));
        Ok(Self {
            images,
            encoders,
            augment,
            fixed,
        })
    }

    fn next(&mut self) -> Result<Vec<Array2<f64>>> {
        if let Some(fixed) = &self.fixed {
            return Ok(fixed.clone());
        }
        let (params, rng) = self.augment.as_mut().expect("augmenting when not fixed");
        let res = self.images[0].dim().1;
        let t = params.with_seed(rng.random()).sample(res)?;
        let batch: Vec<Image> = self.images.iter().map(|img| t.apply(img).0).collect();
        self.encoders.iter().map(|e| encode_all(e, &batch)).collect()
    }
}

/// Soft-label source: the golden classifier over distillation features.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub encoder: &'a Encoder,
    pub golden: &'a Classifier,
}

/// Mean loss and `dL/dlogits` of `alpha * KL(teacher || student) + (1 - alpha) * CE`.
fn classifier_loss(logits: ArrayView2<f64>, onehot: ArrayView2<f64>, teacher: Option<&Array2<f64>>, alpha: f64) -> Result<(f64, Array2<f64>)> {
    let p = softmax_probs(logits)?;
    let b = logits.nrows() as f64;
    let mut loss = 0.0;
    for (prow, yrow) in p.outer_iter().zip(onehot.outer_iter()) {
        for (&pv, &yv) in prow.iter().zip(yrow.iter()) {
            if yv > 0.0 {
                loss -= (1.0 - alpha) * yv * pv.max(1e-300).ln();
            }
        }
    }
    let mut grad = (&p - &onehot) * (1.0 - alpha);
    if alpha > 0.0 {
        let t = teacher.ok_or_else(|| Error::Validation("soft_label_alpha > 0 needs a teacher".into()))?;
        for (prow, trow) in p.outer_iter().zip(t.outer_iter()) {
            for (&pv, &tv) in prow.iter().zip(trow.iter()) {
                if tv > 0.0 {
                    loss += alpha * tv * (tv.ln() - pv.max(1e-300).ln());
                }
            }
        }
        grad.scaled_add(alpha, &(&p - t));
    }
    Ok((loss / b, grad / b))
}

struct ClassifierTrainer {
    adam_w: Adam,
    adam_b: Adam,
}

impl ClassifierTrainer {
    fn new(clf: &Classifier, lr: f64) -> Self {
        Self {
            adam_w: Adam::new(clf.weight.len(), lr),
            adam_b: Adam::new(clf.bias.len(), lr),
        }
    }

    /// One step on `feats`; returns the loss and `dL/dfeats`.
    fn step(
        &mut self,
        clf: &mut Classifier,
        feats: ArrayView2<f64>,
        onehot: ArrayView2<f64>,
        teacher: Option<&Array2<f64>>,
        alpha: f64,
    ) -> Result<(f64, Array2<f64>)> {
        let logits = clf.logits(feats)?;
        let (loss, dlogits) = classifier_loss(logits.view(), onehot, teacher, alpha)?;
        let dfeats = dlogits.dot(&clf.weight);
        let gw = dlogits.t().dot(&feats);
        let gb = dlogits.sum_axis(Axis(0));
        self.adam_w.step(clf.weight.as_slice_mut().expect("contiguous"), gw.as_standard_layout().as_slice().expect("contiguous"));
        self.adam_b.step(clf.bias.as_slice_mut().expect("contiguous"), gb.as_slice().expect("contiguous"));
        Ok((loss, dfeats))
    }
}

struct ProjectorTrainer {
    adam_w: Adam,
    adam_b: Adam,
}

impl ProjectorTrainer {
    fn new(p: &Projector, lr: f64) -> Self {
        Self {
            adam_w: Adam::new(p.weight.len(), lr),
            adam_b: Adam::new(p.bias.len(), lr),
        }
    }

    /// Alignment loss `(1/B) sum ||phi_d - P(phi_e)||^2`; steps with its
    /// gradient plus `extra` (an upstream gradient on the projected features).
    fn step(&mut self, p: &mut Projector, fe: ArrayView2<f64>, fd: ArrayView2<f64>, extra: Option<&Array2<f64>>) -> Result<f64> {
        if p.frozen {
            return Err(Error::Invariant("attempted to update a frozen projector".into()));
        }
        if fd.ncols() != p.out_dim() {
            return Err(Error::Shape(format!(
                "projector outputs {} features, distillation encoder has {}",
                p.out_dim(),
                fd.ncols()
            )));
        }
        let b = fe.nrows() as f64;
        let diff = p.apply(fe)? - &fd;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / b;
        let mut dout = diff * (2.0 / b);
        if let Some(e) = extra {
            dout += e;
        }
        let gw = dout.t().dot(&fe);
        let gb = dout.sum_axis(Axis(0));
        self.adam_w.step(p.weight.as_slice_mut().expect("contiguous"), gw.as_standard_layout().as_slice().expect("contiguous"));
        self.adam_b.step(p.bias.as_slice_mut().expect("contiguous"), gb.as_slice().expect("contiguous"));
        Ok(loss)
    }
}

fn teacher_probs(teacher: Option<Teacher<'_>>, feats_d: Option<&Array2<f64>>) -> Result<Option<Array2<f64>>> {
    match (teacher, feats_d) {
        (Some(t), Some(fd)) => Ok(Some(softmax_probs(t.golden.logits(fd.view())?.view())?)),
        _ => Ok(None),
    }
}

/// Linear head on the full original data over distillation-encoder features.
pub fn train_golden_classifier(encoder_d: &Encoder, original: &LabeledImages, config: &EvalConfig) -> Result<Classifier> {
    if original.is_empty() {
        return Err(Error::Validation("cannot train a golden classifier on an empty dataset".into()));
    }
    let feats = encode_all(encoder_d, &original.images)?;
    train_golden_from_features(feats.view(), &original.labels, original.num_classes, config)
}

pub fn train_golden_from_features(feats: ArrayView2<f64>, labels: &[usize], num_classes: usize, config: &EvalConfig) -> Result<Classifier> {
    let onehot = one_hot(labels, num_classes)?;
    let mut clf = Classifier::zeros(num_classes, feats.ncols(), ClassifierKind::Golden);
    let mut trainer = ClassifierTrainer::new(&clf, config.golden_lr);
    for _ in 0..config.golden_iterations {
        trainer.step(&mut clf, feats, onehot.view(), None, 0.0)?;
    }
    Ok(clf)
}

fn base_settings(cfg: &EvalConfig, label: &str) -> BTreeMap<String, String> {
    let mut s = BTreeMap::new();
    s.insert("label".into(), label.to_string());
    s.insert("strategy".into(), cfg.strategy.to_string());
    s.insert("ip".into(), cfg.inherit_initial_parameters.to_string());
    s.insert("alpha".into(), cfg.soft_label_alpha.to_string());
    s.insert("iterations".into(), cfg.iterations.to_string());
    s.insert("seed".into(), cfg.seed.to_string());
    s.insert("config_fingerprint".into(), cfg.fingerprint());
    s
}

fn empty_report(cfg: &EvalConfig, label: &str, val: &FeatureCache) -> EvalReport {
    EvalReport {
        label: label.to_string(),
        strategy: cfg.strategy,
        accuracy: 0.0,
        num_classes: val.num_classes,
        num_val: val.labels.len(),
        trainable_parameters: 0,
        classifier_loss: Vec::new(),
        projector_loss: Vec::new(),
        settings: base_settings(cfg, label),
        fingerprint: String::new(),
        wall_clock_secs: 0.0,
    }
}

/// Vanilla probe on the given one-image-per-class set.
pub fn train_linear_probe(
    train: &LabeledImages,
    encoder_e: &Encoder,
    config: &EvalConfig,
    teacher: Option<Teacher<'_>>,
    val: &FeatureCache,
    label: &str,
) -> Result<(Classifier, EvalReport)> {
    config.validate()?;
    val.check(encoder_e)?;
    if config.soft_label_alpha > 0.0 && teacher.is_none() {
        return Err(Error::Validation("soft_label_alpha > 0 needs the golden classifier as teacher".into()));
    }
    let started = Instant::now();
    let use_teacher = teacher.filter(|_| config.soft_label_alpha > 0.0);
    let mut encoders = vec![encoder_e];
    if let Some(t) = use_teacher {
        encoders.push(t.encoder);
    }
    let mut source = TrainFeatures::new(&train.images, encoders, config)?;
    let onehot = one_hot(&train.labels, train.num_classes)?;
    let mut clf = match (config.inherit_initial_parameters, teacher) {
        (true, Some(t)) if t.golden.feature_dim() == encoder_e.feature_dim() => Classifier {
            kind: ClassifierKind::Probe,
            ..t.golden.clone()
        },
        (true, _) => return Err(Error::Validation("IP needs a golden classifier of matching width".into())),
        (false, _) => Classifier::zeros(train.num_classes, encoder_e.feature_dim(), ClassifierKind::Probe),
    };
    let mut trainer = ClassifierTrainer::new(&clf, config.probe_lr);
    let mut report = empty_report(config, label, val);
    for _ in 0..config.iterations {
        let feats = source.next()?;
        let soft = teacher_probs(use_teacher, feats.get(1))?;
        let (loss, _) = trainer.step(&mut clf, feats[0].view(), onehot.view(), soft.as_ref(), config.soft_label_alpha)?;
        report.classifier_loss.push(loss);
    }
    report.accuracy = val.accuracy(&clf.predict(val.features.view())?);
    report.trainable_parameters = clf.parameter_count();
    Ok((clf, report.finish(started)))
}

/// Fits the projector by feature alignment alone; labels never enter.
pub fn train_projector_ci(
    images: &[Image],
    encoder_e: &Encoder,
    encoder_d: &Encoder,
    config: &EvalConfig,
) -> Result<(Projector, Vec<f64>)> {
    config.validate()?;
    let mut proj = Projector::new(encoder_e.feature_dim(), encoder_d.feature_dim(), config.projector_init);
    let mut source = TrainFeatures::new(images, vec![encoder_e, encoder_d], config)?;
    let mut trainer = ProjectorTrainer::new(&proj, config.projector_lr);
    let mut curve = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let feats = source.next()?;
        curve.push(trainer.step(&mut proj, feats[0].view(), feats[1].view(), None)?);
    }
    Ok((proj, curve))
}

fn require_golden(golden: &Classifier) -> Result<()> {
    if golden.kind != ClassifierKind::Golden {
        return Err(Error::Validation("inference needs a golden classifier, got a probe head".into()));
    }
    Ok(())
}

/// Predicts `argmax golden(P(phi_e(x)))`.
pub fn infer_inherited(images: &[Image], encoder_e: &Encoder, projector: &Projector, golden: &Classifier) -> Result<Vec<usize>> {
    require_golden(golden)?;
    infer_inherited_features(encode_all(encoder_e, images)?.view(), projector, golden)
}

pub fn infer_inherited_features(feats_e: ArrayView2<f64>, projector: &Projector, golden: &Classifier) -> Result<Vec<usize>> {
    require_golden(golden)?;
    golden.predict(projector.apply(feats_e)?.view())
}

/// Second stage of `st`: a classifier on frozen-projector features.
fn train_on_projected(
    images: &[Image],
    encoder_e: &Encoder,
    projector: &Projector,
    init: Classifier,
    config: &EvalConfig,
    steps: usize,
    teacher: Option<Teacher<'_>>,
) -> Result<(Classifier, Vec<f64>)> {
    if !projector.is_frozen() {
        return Err(Error::Invariant("sequential training requires a frozen projector".into()));
    }
    let mut encoders = vec![encoder_e];
    if let Some(t) = teacher {
        encoders.push(t.encoder);
    }
    let labels: Vec<usize> = (0..images.len()).collect();
    let onehot = one_hot(&labels, init.num_classes())?;
    let mut source = TrainFeatures::new(images, encoders, config)?;
    let mut clf = init;
    let mut trainer = ClassifierTrainer::new(&clf, config.probe_lr);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let feats = source.next()?;
        let soft = teacher_probs(teacher, feats.get(1))?;
        let projected = projector.apply(feats[0].view())?;
        curve.push(trainer.step(&mut clf, projected.view(), onehot.view(), soft.as_ref(), config.soft_label_alpha)?.0);
    }
    Ok((clf, curve))
}

/// Runs the configured strategy on a synthetic set with one image per class,
/// labels `0..C` in order.
pub fn evaluate_strategy(
    synthetic: &LabeledImages,
    encoder_e: &Encoder,
    encoder_d: &Encoder,
    golden: &Classifier,
    config: &EvalConfig,
    val: &FeatureCache,
    label: &str,
) -> Result<EvalReport> {
    config.validate()?;
    require_golden(golden)?;
    val.check(encoder_e)?;
    if synthetic.labels.iter().enumerate().any(|(i, &l)| i != l) {
        return Err(Error::Validation("strategy evaluation expects one image per class in label order".into()));
    }
    let teacher = Teacher { encoder: encoder_d, golden };
    let soft_teacher = (config.soft_label_alpha > 0.0).then_some(teacher);
    let started = Instant::now();
    match config.strategy {
        Strategy::Vanilla => Ok(train_linear_probe(synthetic, encoder_e, config, Some(teacher), val, label)?.1),
        Strategy::Ci => {
            let (proj, curve) = train_projector_ci(&synthetic.images, encoder_e, encoder_d, config)?;
            let mut report = empty_report(config, label, val);
            report.accuracy = val.accuracy(&infer_inherited_features(val.features.view(), &proj, golden)?);
            report.projector_loss = curve;
            report.trainable_parameters = proj.parameter_count();
            Ok(report.finish(started))
        }
        Strategy::St => {
            let (mut proj, pcurve) = train_projector_ci(&synthetic.images, encoder_e, encoder_d, config)?;
            proj.freeze();
            let init = initial_classifier(config, golden, synthetic.num_classes, encoder_d.feature_dim());
            let steps = config.classifier_iterations.unwrap_or(config.iterations);
            let (clf, ccurve) = train_on_projected(&synthetic.images, encoder_e, &proj, init, config, steps, soft_teacher)?;
            let mut report = empty_report(config, label, val);
            report.settings.insert("classifier_iterations".into(), steps.to_string());
            report.accuracy = val.accuracy(&clf.predict(proj.apply(val.features.view())?.view())?);
            report.projector_loss = pcurve;
            report.classifier_loss = ccurve;
            report.trainable_parameters = proj.parameter_count() + clf.parameter_count();
            Ok(report.finish(started))
        }
        Strategy::Jt => {
            let mut proj = Projector::new(encoder_e.feature_dim(), encoder_d.feature_dim(), config.projector_init);
            let mut clf = initial_classifier(config, golden, synthetic.num_classes, encoder_d.feature_dim());
            let mut ptrainer = ProjectorTrainer::new(&proj, config.projector_lr);
            let mut ctrainer = ClassifierTrainer::new(&clf, config.probe_lr);
            let onehot = one_hot(&synthetic.labels, synthetic.num_classes)?;
            let mut source = TrainFeatures::new(&synthetic.images, vec![encoder_e, encoder_d], config)?;
            let mut report = empty_report(config, label, val);
            for _ in 0..config.iterations {
                let feats = source.next()?;
                let soft = teacher_probs(soft_teacher, Some(&feats[1]))?;
                let projected = proj.apply(feats[0].view())?;
                let (closs, dproj) = ctrainer.step(&mut clf, projected.view(), onehot.view(), soft.as_ref(), config.soft_label_alpha)?;
                let ploss = ptrainer.step(&mut proj, feats[0].view(), feats[1].view(), Some(&dproj))?;
                report.classifier_loss.push(closs);
                report.projector_loss.push(ploss);
            }
            report.accuracy = val.accuracy(&clf.predict(proj.apply(val.features.view())?.view())?);
            report.trainable_parameters = proj.parameter_count() + clf.parameter_count();
            Ok(report.finish(started))
        }
    }
}

fn initial_classifier(config: &EvalConfig, golden: &Classifier, num_classes: usize, feature_dim: usize) -> Classifier {
    if config.inherit_initial_parameters {
        Classifier {
            kind: ClassifierKind::Probe,
            ..golden.clone()
        }
    } else {
        Classifier::zeros(num_classes, feature_dim, ClassifierKind::Probe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Random,
    Centroids,
    Neighbors,
}

impl std::str::FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selection::Random),
            "centroids" => Ok(Selection::Centroids),
            "neighbors" => Ok(Selection::Neighbors),
            other => Err(Error::Validation(format!("unknown selection baseline {other:?}"))),
        }
    }
}

/// Picks one real image per class. `synthetic` (one image per class, in
/// label order) is required for `neighbors`.
pub fn select_baseline(
    method: Selection,
    original: &LabeledImages,
    encoder_d: &Encoder,
    synthetic: Option<&LabeledImages>,
    seed: u64,
) -> Result<LabeledImages> {
    original.require_all_classes()?;
    let indices = match method {
        Selection::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..original.num_classes)
                .map(|c| {
                    let members = original.indices_of(c);
                    members[rng.random_range(0..members.len())]
                })
                .collect()
        }
        Selection::Centroids | Selection::Neighbors => {
            let feats = encode_all(encoder_d, &original.images)?;
            let anchors = if method == Selection::Centroids {
                class_means(feats.view(), &original.labels, original.num_classes)?
            } else {
                let synth = synthetic.ok_or_else(|| Error::Validation("neighbors selection needs a synthetic dataset".into()))?;
                if synth.num_classes != original.num_classes || synth.labels.iter().enumerate().any(|(i, &l)| i != l) {
                    return Err(Error::Validation("synthetic set must hold one image per class in label order".into()));
                }
                encode_all(encoder_d, &synth.images)?
            };
            nearest_per_class(feats.view(), &original.labels, anchors.view())
        }
    };
    Ok(original.subset(&indices))
}

fn class_means(feats: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut sums = Array2::zeros((num_classes, feats.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (row, &l) in feats.outer_iter().zip(labels) {
        sums.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass { class: c });
        }
        sums.row_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(sums)
}

/// Index of the class member closest (squared Euclidean) to that class's anchor.
pub fn nearest_per_class(feats: ArrayView2<f64>, labels: &[usize], anchors: ArrayView2<f64>) -> Vec<usize> {
    let mut best = vec![(usize::MAX, f64::INFINITY); anchors.nrows()];
    for (i, (row, &l)) in feats.outer_iter().zip(labels).enumerate() {
        let d: f64 = row.iter().zip(anchors.row(l).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best[l].1 {
            best[l] = (i, d);
        }
    }
    best.into_iter().map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vector_set(seed: u64, c: usize, f: usize, per_class: usize) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<Vec<f64>> = (0..c).map(|_| (0..f).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (l, p) in protos.iter().enumerate() {
            for _ in 0..per_class {
                let v: Vec<f64> = p.iter().map(|x| (x + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)).collect();
                images.push(Array3::from_shape_vec((f, 1, 1), v).unwrap());
                labels.push(l);
            }
        }
        LabeledImages::new(images, labels, c).unwrap()
    }

    fn quick(strategy: Strategy) -> EvalConfig {
        EvalConfig {
            strategy,
            iterations: 200,
            golden_iterations: 300,
            augment: false,
            ..EvalConfig::default()
        }
    }

    fn one_per_class(data: &LabeledImages) -> LabeledImages {
        let idx: Vec<usize> = (0..data.num_classes).map(|c| data.indices_of(c)[0]).collect();
        data.subset(&idx)
    }

    #[test]
    fn golden_is_deterministic_and_shaped() {
        let enc = Encoder::identity(6).unwrap();
        let data = vector_set(1, 4, 6, 20);
        let a = train_golden_classifier(&enc, &data, &quick(Strategy::Vanilla)).unwrap();
        let b = train_golden_classifier(&enc, &data, &quick(Strategy::Vanilla)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.logits(encode_all(&enc, &data.images[..3]).unwrap().view()).unwrap().dim(), (3, 4));
        assert!(train_golden_classifier(&enc, &data.subset(&[]), &quick(Strategy::Vanilla)).is_err());
    }

    #[test]
    fn alpha_zero_matches_pure_cross_entropy() {
        let enc = Encoder::identity(6).unwrap();
        let data = vector_set(2, 4, 6, 10);
        let val = FeatureCache::build(&enc, &data).unwrap();
        let golden = train_golden_classifier(&enc, &data, &quick(Strategy::Vanilla)).unwrap();
        let train = one_per_class(&data);
        let cfg = quick(Strategy::Vanilla);
        let (a, _) = train_linear_probe(&train, &enc, &cfg, None, &val, "a").unwrap();
        let teacher = Teacher { encoder: &enc, golden: &golden };
        let (b, _) = train_linear_probe(&train, &enc, &cfg, Some(teacher), &val, "b").unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let soft = EvalConfig { soft_label_alpha: 0.5, ..cfg };
        assert!(train_linear_probe(&train, &enc, &soft, None, &val, "c").is_err());
        assert!(train_linear_probe(&train, &enc, &soft, Some(teacher), &val, "d").is_ok());
    }

    #[test]
    fn soft_label_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0));
        let onehot = one_hot(&[0, 2, 3], 4).unwrap();
        let teacher = softmax_probs(Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0)).view()).unwrap();
        let (_, g) = classifier_loss(logits.view(), onehot.view(), Some(&teacher), 0.3).unwrap();
        let h = 1e-6;
        for idx in [[0, 0], [1, 2], [2, 1]] {
            let mut plus = logits.clone();
            plus[idx] += h;
            let mut minus = logits.clone();
            minus[idx] -= h;
            let fd = (classifier_loss(plus.view(), onehot.view(), Some(&teacher), 0.3).unwrap().0
                - classifier_loss(minus.view(), onehot.view(), Some(&teacher), 0.3).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_projector_is_a_fixed_point_for_matched_encoders() {
        let enc = Encoder::identity(5).unwrap();
        let data = vector_set(4, 3, 5, 5);
        let train = one_per_class(&data);
        let (proj, curve) = train_projector_ci(&train.images, &enc, &enc, &quick(Strategy::Ci)).unwrap();
        assert_eq!(curve[0], 0.0);
        assert_eq!(proj, Projector::new(5, 5, ProjectorInit::Identity));
    }

    #[test]
    fn projector_ignores_labels_and_reduces_its_loss() {
        let enc_e = Encoder::identity(5).unwrap();
        let data = vector_set(5, 3, 5, 5);
        let train = one_per_class(&data);
        let cfg = EvalConfig { projector_init: ProjectorInit::Zeros, ..quick(Strategy::Ci) };
        assert!(train_projector_ci(&train.images, &enc_e, &Encoder::identity(4).unwrap(), &cfg).is_err());
        let (p1, curve) = train_projector_ci(&train.images, &enc_e, &enc_e, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let relabeled = LabeledImages::new(train.images.clone(), vec![2, 0, 1], 3).unwrap();
        let (p2, _) = train_projector_ci(&relabeled.images, &enc_e, &enc_e, &cfg).unwrap();
        assert_eq!(p1.checksum(), p2.checksum());
    }

    #[test]
    fn inherited_inference_collapses_to_golden_and_checks_provenance() {
        let enc = Encoder::identity(6).unwrap();
        let data = vector_set(6, 4, 6, 15);
        let golden = train_golden_classifier(&enc, &data, &quick(Strategy::Vanilla)).unwrap();
        let before = golden.checksum();
        let proj = Projector::new(6, 6, ProjectorInit::Identity);
        let inherited = infer_inherited(&data.images, &enc, &proj, &golden).unwrap();
        let direct = golden.predict(encode_all(&enc, &data.images).unwrap().view()).unwrap();
        assert_eq!(inherited, direct);
        assert!(inherited.iter().all(|&p| p < 4));
        assert_eq!(golden.checksum(), before);
        let probe = Classifier { kind: ClassifierKind::Probe, ..golden.clone() };
        assert!(infer_inherited(&data.images, &enc, &proj, &probe).is_err());
    }

    #[test]
    fn st_with_ip_and_no_classifier_steps_equals_ci() {
        let enc = Encoder::identity(6).unwrap();
        let data = vector_set(7, 4, 6, 15);
        let val = FeatureCache::build(&enc, &data).unwrap();
        let golden = train_golden_classifier(&enc, &data, &quick(Strategy::Vanilla)).unwrap();
        let train = one_per_class(&data);
        let st = EvalConfig {
            inherit_initial_parameters: true,
            classifier_iterations: Some(0),
            ..quick(Strategy::St)
        };
        let ci = evaluate_strategy(&train, &enc, &enc, &golden, &quick(Strategy::Ci), &val, "ci").unwrap();
        let st = evaluate_strategy(&train, &enc, &enc, &golden, &st, &val, "st").unwrap();
        assert_eq!(ci.accuracy, st.accuracy);
        for s in [Strategy::Jt, Strategy::St, Strategy::Vanilla] {
            let r = evaluate_strategy(&train, &enc, &enc, &golden, &quick(s), &val, "x").unwrap();
            assert!((0.0..=1.0).contains(&r.accuracy));
            let bound = 4 * 6 + 6 * 6 + 6 + 4;
            assert!(r.trainable_parameters <= bound);
            assert!(!r.fingerprint.is_empty());
        }
    }

    #[test]
    fn unfrozen_projector_is_an_invariant_violation() {
        let enc = Encoder::identity(3).unwrap();
        let data = vector_set(8, 3, 3, 2);
        let proj = Projector::new(3, 3, ProjectorInit::Identity);
        let err = train_on_projected(&one_per_class(&data).images, &enc, &proj, Classifier::zeros(3, 3, ClassifierKind::Probe), &quick(Strategy::St), 1, None);
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn baselines_follow_their_criteria() {
        let enc = Encoder::identity(4).unwrap();
        let mut data = vector_set(9, 3, 4, 6);
        // image `target` becomes the mean of its classmates, hence the class mean
        let members = data.indices_of(1);
        let target = members[2];
        let others: Vec<usize> = members.iter().copied().filter(|&i| i != target).collect();
        let mean = others.iter().fold(Image::zeros((4, 1, 1)), |acc, &i| acc + &data.images[i]) / others.len() as f64;
        data.images[target] = mean;
        let centroids = select_baseline(Selection::Centroids, &data, &enc, None, 0).unwrap();
        assert_eq!(centroids.images[1], data.images[target]);
        let feats = encode_all(&enc, &data.images).unwrap();

        let r1 = select_baseline(Selection::Random, &data, &enc, None, 3).unwrap();
        let r2 = select_baseline(Selection::Random, &data, &enc, None, 3).unwrap();
        assert_eq!(r1.checksum(), r2.checksum());
        assert_eq!(r1.labels, vec![0, 1, 2]);
        assert!(select_baseline(Selection::Neighbors, &data, &enc, None, 0).is_err());

        let synth = one_per_class(&vector_set(10, 3, 4, 1));
        let got = select_baseline(Selection::Neighbors, &data, &enc, Some(&synth), 0).unwrap();
        let sfeats = encode_all(&enc, &synth.images).unwrap();
        for c in 0..3 {
            let brute = data
                .indices_of(c)
                .into_iter()
                .min_by(|&a, &b| {
                    let da: f64 = feats.row(a).iter().zip(sfeats.row(c).iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = feats.row(b).iter().zip(sfeats.row(c).iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(got.images[c], data.images[brute]);
        }
    }

    #[test]
    fn reports_roundtrip_and_fingerprints_ignore_wall_clock() {
        let enc = Encoder::identity(4).unwrap();
        let data = vector_set(11, 3, 4, 8);
        let val = FeatureCache::build(&enc, &data).unwrap();
        let cfg = quick(Strategy::Vanilla);
        let (_, a) = train_linear_probe(&one_per_class(&data), &enc, &cfg, None, &val, "p").unwrap();
        let (_, b) = train_linear_probe(&one_per_class(&data), &enc, &cfg, None, &val, "p").unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        write_reports(&path, &[a.clone(), b]).unwrap();
        let back = read_reports(&path).unwrap();
        assert_eq!(back[0], a);
        assert!(summary_table(&back).contains("vanilla"));
        let cache_path = dir.path().join("val.sfmt");
        val.save(&cache_path).unwrap();
        assert_eq!(FeatureCache::load(&cache_path).unwrap(), val);
    }
}
