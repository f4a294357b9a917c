//! Class statistics of the original dataset and the constant statistical flow.
//!
//! One pass through the encoder accumulates per-class feature sums and
//! counts in f64. Every non-target center is derived from the global sum,
//! `(S - S_c) / (N - N_c)`, so no per-class second pass is needed.
//!
//! Cache layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "SFMSTATS"
//! version      u32      1
//! C            u32
//! F            u32
//! N            u64
//! fingerprint  u32 length + UTF-8 (encoder checksum, hex)
//! counts       u64 * C
//! class sums   f64 * C * F   (row-major, class-major)
//! global sum   f64 * F
//! ```

use std::borrow::Borrow;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::data::{resize_bilinear, Image};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::flows::FlowMatrix;
use crate::fsutil;

pub const STATS_MAGIC: &[u8; 8] = b"SFMSTATS";
pub const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// `C x F` per-class feature sums.
    pub class_sums: Array2<f64>,
    pub global_sum: Array1<f64>,
    pub total: u64,
    pub encoder_fingerprint: String,
}

impl ClassStatistics {
    pub fn empty(num_classes: usize, feature_dim: usize, encoder_fingerprint: impl Into<String>) -> Self {
        Self {
            feature_dim,
            num_classes,
            counts: vec![0; num_classes],
            class_sums: Array2::zeros((num_classes, feature_dim)),
            global_sum: Array1::zeros(feature_dim),
            total: 0,
            encoder_fingerprint: encoder_fingerprint.into(),
        }
    }

    pub fn push(&mut self, feature: ArrayView1<f64>, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        if feature.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature of length {} pushed into {}-dim statistics",
                feature.len(),
                self.feature_dim
            )));
        }
        self.class_sums.row_mut(label).scaled_add(1.0, &feature);
        self.global_sum.scaled_add(1.0, &feature);
        self.counts[label] += 1;
        self.total += 1;
        Ok(())
    }

    /// Combines statistics of a disjoint shard.
    pub fn merge(&mut self, other: &ClassStatistics) -> Result<()> {
        if other.num_classes != self.num_classes || other.feature_dim != self.feature_dim {
            return Err(Error::Shape("merging statistics of different shapes".into()));
        }
        if other.encoder_fingerprint != self.encoder_fingerprint {
            return Err(Error::Fingerprint(
                "merging statistics produced by different encoders".into(),
            ));
        }
        self.class_sums += &other.class_sums;
        self.global_sum += &other.global_sum;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn check_consistency(&self) -> Result<()> {
        if self.counts.iter().sum::<u64>() != self.total {
            return Err(Error::Validation("total count differs from sum of class counts".into()));
        }
        let recomputed = self.class_sums.sum_axis(Axis(0));
        for (a, b) in recomputed.iter().zip(self.global_sum.iter()) {
            if (a - b).abs() > 1e-5 * (1.0 + b.abs()) {
                return Err(Error::Validation("global sum differs from sum of class sums".into()));
            }
        }
        Ok(())
    }

    pub fn class_center(&self, class: usize) -> Result<Array1<f64>> {
        self.check_class(class)?;
        let n = self.counts[class];
        if n == 0 {
            return Err(Error::EmptyClass { class });
        }
        Ok(self.class_sums.row(class).to_owned() / n as f64)
    }

    pub fn nontarget_center(&self, class: usize) -> Result<Array1<f64>> {
        self.check_class(class)?;
        let rest = self.total - self.counts[class];
        if rest == 0 {
            return Err(Error::Validation(format!(
                "no samples outside class {class}; non-target center undefined"
            )));
        }
        Ok((&self.global_sum - &self.class_sums.row(class)) / rest as f64)
    }

    /// `C x F` class centers.
    pub fn centers(&self) -> Result<Array2<f64>> {
        self.stack(|c| self.class_center(c))
    }

    /// `C x F` non-target centers.
    pub fn nontarget_centers(&self) -> Result<Array2<f64>> {
        self.stack(|c| self.nontarget_center(c))
    }

    fn stack(&self, row: impl Fn(usize) -> Result<Array1<f64>>) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((self.num_classes, self.feature_dim));
        for c in 0..self.num_classes {
            m.row_mut(c).assign(&row(c)?);
        }
        Ok(m)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.num_classes + 1) * (self.feature_dim + 1));
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&STATS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.total.to_le_bytes());
        out.extend_from_slice(&(self.encoder_fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.encoder_fingerprint.as_bytes());
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in self.class_sums.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.global_sum.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Validation("truncated statistics cache".into()))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != STATS_MAGIC {
            return Err(Error::Validation("not a statistics cache (bad magic)".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != STATS_VERSION {
            return Err(Error::Validation(format!("unsupported statistics version {version}")));
        }
        let c = u32_at(take(4)?) as usize;
        let f = u32_at(take(4)?) as usize;
        let total = u64_at(take(8)?);
        let fp_len = u32_at(take(4)?) as usize;
        let fingerprint = String::from_utf8(take(fp_len)?.to_vec())
            .map_err(|_| Error::Validation("fingerprint is not UTF-8".into()))?;
        let counts = (0..c).map(|_| take(8).map(u64_at)).collect::<Result<Vec<_>>>()?;
        let mut f64s = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect()
        };
        let sums = f64s(c * f)?;
        let global = f64s(f)?;
        if pos != bytes.len() {
            return Err(Error::Validation("trailing bytes in statistics cache".into()));
        }
        let stats = Self {
            feature_dim: f,
            num_classes: c,
            counts,
            class_sums: Array2::from_shape_vec((c, f), sums).map_err(|e| Error::Shape(e.to_string()))?,
            global_sum: Array1::from(global),
            total,
            encoder_fingerprint: fingerprint,
        };
        stats.check_consistency()?;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run the `stats` command first".into(),
            });
        }
        Self::from_bytes(&fsutil::read_bytes(path)?)
    }
}

/// Encodes a labeled stream in batches and accumulates class statistics.
///
/// Images whose size differs from the encoder's input resolution are
/// bilinearly resized first. No augmentation is applied.
pub fn compute_class_statistics<I, B>(
    encoder: &Encoder,
    dataset: I,
    num_classes: usize,
    batch_size: usize,
) -> Result<ClassStatistics>
where
    I: IntoIterator<Item = (B, usize)>,
    B: Borrow<Image>,
{
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let res = encoder.spec().input_resolution;
    let mut stats = ClassStatistics::empty(num_classes, encoder.feature_dim(), encoder.fingerprint());
    let mut images: Vec<Image> = Vec::with_capacity(batch_size);
    let mut labels: Vec<usize> = Vec::with_capacity(batch_size);
    let flush = |images: &mut Vec<Image>, labels: &mut Vec<usize>, stats: &mut ClassStatistics| -> Result<()> {
        let mut shard = ClassStatistics::empty(num_classes, stats.feature_dim, stats.encoder_fingerprint.clone());
        let feats = encoder.encode_batch(images)?;
        for (row, &l) in feats.outer_iter().zip(labels.iter()) {
            shard.push(row, l)?;
        }
        images.clear();
        labels.clear();
        stats.merge(&shard)
    };
    for (img, label) in dataset {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        let img = img.borrow();
        let (_, h, w) = img.dim();
        images.push(if h == res && w == res {
            img.clone()
        } else {
            resize_bilinear(img, res)
        });
        labels.push(label);
        if images.len() == batch_size {
            flush(&mut images, &mut labels, &mut stats)?;
        }
    }
    if !images.is_empty() {
        flush(&mut images, &mut labels, &mut stats)?;
    }
    if let Some(class) = stats.counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    Ok(stats)
}

/// Constant statistical flow: row `c` = non-target center minus class center.
#[derive(Debug, Clone, PartialEq)]
pub struct StatFlow {
    pub flow: FlowMatrix,
    pub fingerprint: String,
}

impl StatFlow {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.flow.0
    }
}

pub fn build_statistical_flow(stats: &ClassStatistics) -> Result<StatFlow> {
    if stats.num_classes < 2 {
        return Err(Error::Validation("statistical flow needs at least two classes".into()));
    }
    let flow = stats.nontarget_centers()? - stats.centers()?;
    if flow.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistical flow has non-finite entries".into()));
    }
    Ok(StatFlow {
        flow: FlowMatrix(flow),
        fingerprint: stats.encoder_fingerprint.clone(),
    })
}
