//! Closed-form quantities of linear-head gradient matching.
//!
//! For a bias-free linear head `W` (C x F) on frozen features, the mean
//! cross-entropy gradient over a batch is `(1/B) sum_i (p_i - y_i) phi_i^T`.
//! At `W = 0` (and in expectation over isotropic random `W`) every `p_i` is
//! uniform, and row `c` of the gradient is a positive multiple of
//! `mean(phi | y_c = 0) - mean(phi | y_c = 1)`: the class *flow* from the
//! target center toward the non-target center. [`analytic_flow`] returns that
//! direction without the positive scalar, which cosine-based losses ignore.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the classifier weight is obtained when matching linear gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WMode {
    /// Resampled from `N(0, sigma^2)` at every step.
    #[default]
    Random,
    /// Sampled once and reused.
    Fixed,
    /// Weight-free expectation form.
    Analytic,
}

impl std::str::FromStr for WMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(WMode::Random),
            "fixed" => Ok(WMode::Fixed),
            "analytic" => Ok(WMode::Analytic),
            other => Err(Error::Validation(format!("unknown W mode {other:?}"))),
        }
    }
}

/// Bias-free linear classifier head used inside gradient matching.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub init_sigma: f64,
    pub mode: WMode,
}

impl LinearHead {
    pub fn sample<R: Rng + ?Sized>(num_classes: usize, feature_dim: usize, sigma: f64, mode: WMode, rng: &mut R) -> Self {
        let weight = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma > 0");
            Array2::from_shape_simple_fn((num_classes, feature_dim), || n.sample(rng))
        } else {
            Array2::zeros((num_classes, feature_dim))
        };
        Self {
            weight,
            init_sigma: sigma,
            mode,
        }
    }

    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((num_classes, feature_dim)),
            init_sigma: 0.0,
            mode: WMode::Fixed,
        }
    }
}

/// Per-class flow matrix (C x F). Only its direction is meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix(pub Array2<f64>);

impl FlowMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One cosine over the vectorized matrices.
    #[default]
    Flatten,
    /// Mean over rows of the per-row cosine distance.
    PerClassMean,
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange { label: l, num_classes });
        }
        y[[i, l]] = 1.0;
    }
    Ok(y)
}

/// Recovers class indices from a one-hot matrix, rejecting anything else.
pub fn labels_from_one_hot(y: ArrayView2<f64>) -> Result<Vec<usize>> {
    y.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(c, _)| c).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() == 1 && zeros + 1 == row.len() {
                Ok(ones[0])
            } else {
                Err(Error::Validation(format!("label row {i} is not one-hot")))
            }
        })
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits contain NaN or infinity".into()));
    }
    let mut p = logits.to_owned();
    for mut row in p.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    Ok(p)
}

fn check_batch(features: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<()> {
    if features.nrows() != onehot.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} label rows",
            features.nrows(),
            onehot.nrows()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean cross-entropy gradient with respect to the head weight:
/// `(1/B) sum_i (softmax(W phi_i) - y_i) phi_i^T`.
pub fn ce_linear_gradient(features: ArrayView2<f64>, onehot: ArrayView2<f64>, head: &LinearHead) -> Result<Array2<f64>> {
    if head.mode == WMode::Analytic {
        return Err(Error::Validation(
            "analytic heads carry no weight; use analytic_flow".into(),
        ));
    }
    check_batch(features, onehot)?;
    let (c, f) = head.weight.dim();
    if features.ncols() != f || onehot.ncols() != c {
        return Err(Error::Shape(format!(
            "head is {c}x{f}, features have {} columns, labels {}",
            features.ncols(),
            onehot.ncols()
        )));
    }
    let p = softmax_probs(features.dot(&head.weight.t()).view())?;
    let residual = p - onehot;
    Ok(residual.t().dot(&features) / features.nrows() as f64)
}

/// Gradient of a scalar `L(G)` with respect to the features, where `G` is
/// [`ce_linear_gradient`] and `upstream = dL/dG`. Accounts for both the
/// explicit `phi_i` factor and the dependence of `p_i` on `phi_i`.
pub fn ce_linear_gradient_vjp(
    features: ArrayView2<f64>,
    onehot: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_batch(features, onehot)?;
    let b = features.nrows() as f64;
    let p = softmax_probs(features.dot(&weight.t()).view())?;
    let residual = &p - &onehot;
    // explicit term: (p_i - y_i)^T upstream
    let mut grad = residual.dot(&upstream);
    // through the softmax: dz_i = J_i (upstream phi_i), J = diag(p) - p p^T
    let u = features.dot(&upstream.t());
    let pu = (&p * &u).sum_axis(Axis(1));
    let mut dz = &p * &u;
    for (mut row, (prow, s)) in dz.outer_iter_mut().zip(p.outer_iter().zip(pu.iter())) {
        row.scaled_add(-s, &prow);
    }
    grad += &dz.dot(&weight);
    grad /= b;
    Ok(grad)
}

/// Class counts `(members, non-members)` per class, erroring when a class is
/// absent or covers the whole batch.
fn class_partition(onehot: ArrayView2<f64>) -> Result<Vec<(f64, f64)>> {
    let b = onehot.nrows() as f64;
    onehot
        .sum_axis(Axis(0))
        .iter()
        .enumerate()
        .map(|(c, &n1)| {
            if n1 == 0.0 {
                Err(Error::EmptyClass { class: c })
            } else if n1 == b {
                Err(Error::Validation(format!(
                    "class {c} covers the whole batch, non-target mean undefined"
                )))
            } else {
                Ok((n1, b - n1))
            }
        })
        .collect()
}

/// Row `c` = mean of features with `y_c = 0` minus mean of features with `y_c = 1`.
pub fn analytic_flow(features: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<FlowMatrix> {
    check_batch(features, onehot)?;
    let parts = class_partition(onehot)?;
    let total = features.sum_axis(Axis(0));
    let class_sums = onehot.t().dot(&features);
    let mut flow = Array2::zeros(class_sums.dim());
    for (c, &(n1, n0)) in parts.iter().enumerate() {
        let target = class_sums.row(c).to_owned() / n1;
        let nontarget = (&total - &class_sums.row(c)) / n0;
        flow.row_mut(c).assign(&(nontarget - target));
    }
    Ok(FlowMatrix(flow))
}

/// Gradient of `L(flow)` with respect to the batch features given `dL/dflow`.
pub fn analytic_flow_vjp(onehot: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
    let parts = class_partition(onehot)?;
    let b = onehot.nrows();
    let mut grad = Array2::zeros((b, upstream.ncols()));
    for i in 0..b {
        let mut row = grad.row_mut(i);
        for (c, &(n1, n0)) in parts.iter().enumerate() {
            let coef = if onehot[[i, c]] == 1.0 { -1.0 / n1 } else { 1.0 / n0 };
            row.scaled_add(coef, &upstream.row(c));
        }
    }
    Ok(grad)
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("cosine operands {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `1 - cos` between two matrices under the chosen aggregation; in `[0, 2]`.
pub fn cosine_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, aggregation: Aggregation) -> Result<f64> {
    Ok(cosine_distance_with_grad(a, b, aggregation)?.0)
}

/// Cosine distance together with its gradient with respect to `b`.
pub fn cosine_distance_with_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    aggregation: Aggregation,
) -> Result<(f64, Array2<f64>)> {
    check_pair(a, b)?;
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let units: Vec<(usize, usize)> = match aggregation {
        Aggregation::Flatten => vec![(0, a.len())],
        Aggregation::PerClassMean => (0..a.nrows()).map(|r| (r * a.ncols(), (r + 1) * a.ncols())).collect(),
    };
    let av = a.as_slice().expect("standard layout");
    let bv = b.as_slice().expect("standard layout");
    let mut grad = vec![0.0; bv.len()];
    let mut loss = 0.0;
    let scale = 1.0 / units.len() as f64;
    for (u, &(lo, hi)) in units.iter().enumerate() {
        let (dot, na, nb) = cosine_parts(&av[lo..hi], &bv[lo..hi]);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector(match aggregation {
                Aggregation::Flatten => "zero matrix".to_string(),
                Aggregation::PerClassMean => format!("zero row for class {u}"),
            }));
        }
        let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
        loss += scale * (1.0 - cos);
        for i in lo..hi {
            grad[i] = -scale * (av[i] / (na * nb) - dot * bv[i] / (na * nb * nb * nb));
        }
    }
    let grad = Array2::from_shape_vec(b.dim(), grad).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((loss, grad))
}

/// Cosine similarity of each row pair; `None` where a row is zero.
pub fn rowwise_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Vec<Option<f64>>> {
    check_pair(a, b)?;
    Ok(a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| {
            let (dot, na, nb) = cosine_parts(&x.to_vec(), &y.to_vec());
            (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect())
}

/// Mean over rows of the row-wise cosine similarity (zero rows skipped).
pub fn mean_row_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let cos: Vec<f64> = rowwise_cosine(a, b)?.into_iter().flatten().collect();
    if cos.is_empty() {
        return Err(Error::ZeroVector("every row pair has a zero row".into()));
    }
    Ok(cos.iter().sum::<f64>() / cos.len() as f64)
}

/// The `W = 0` form `(1/B) sum_i (1/C - y_i) phi_i^T`.
pub fn uniform_probability_gradient(features: ArrayView2<f64>, onehot: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch(features, onehot)?;
    let c = onehot.ncols() as f64;
    let residual = onehot.mapv(|y| 1.0 / c - y);
    Ok(residual.t().dot(&features) / features.nrows() as f64)
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn flatten(a: ArrayView2<f64>) -> Array1<f64> {
    a.iter().copied().collect()
}
