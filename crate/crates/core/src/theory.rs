//! Monte-Carlo checks of why linear-head gradients degenerate to flows.
//!
//! With `W ~ N(0, sigma_w^2)` and a fixed feature `phi`, every logit
//! `z_c = w_c . phi` is `N(0, sigma_w^2 |phi|^2)` and the logits are i.i.d.
//! across classes, so the softmax outputs are exchangeable with mean `1/C`.
//! `exp(z_c)` is lognormal, which gives the small-variance prediction
//! `Var[p_c] ~ (exp(s^2) - 1) / C^2` with `s^2 = sigma_w^2 |phi|^2`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{analytic_flow, ce_linear_gradient, rowwise_cosine, LinearHead, WMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub sigma_w: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            num_classes: 100,
            feature_dim: 768,
            sigma_w: 0.01,
            trials: 10_000,
            seed: 2026,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Validation("trials must be at least 1".into()));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) {
            return Err(Error::Validation("sigma_w must be a nonnegative number".into()));
        }
        if self.num_classes < 2 || self.feature_dim == 0 {
            return Err(Error::Validation("need at least two classes and one feature".into()));
        }
        Ok(())
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeabilityResult {
    pub mean_p: Vec<f64>,
    pub std_err: Vec<f64>,
    /// `max_c |mean_p[c] - 1/C|`.
    pub max_deviation: f64,
    /// `max_c |mean_p[c] - 1/C| / std_err[c]` (zero where the error is zero).
    pub max_z: f64,
}

/// Samples a full `W` per trial and averages the softmax of `W phi`.
pub fn check_exchangeability(cfg: &McConfig, feature: ArrayView1<f64>) -> Result<ExchangeabilityResult> {
    cfg.validate()?;
    if feature.len() != cfg.feature_dim {
        return Err(Error::Shape(format!("feature has {} entries, config says {}", feature.len(), cfg.feature_dim)));
    }
    let c = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phi: Vec<f64> = feature.to_vec();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    let mut z = vec![0.0; c];
    for _ in 0..cfg.trials {
        for zc in z.iter_mut() {
            let mut acc = 0.0;
            for &x in &phi {
                let w: f64 = StandardNormal.sample(&mut rng);
                acc += w * x;
            }
            *zc = cfg.sigma_w * acc;
        }
        softmax_in_place(&mut z);
        for ((s, q), &p) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&z) {
            *s += p;
            *q += p * p;
        }
    }
    let n = cfg.trials as f64;
    let uniform = 1.0 / c as f64;
    let mean_p: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err: Vec<f64> = mean_p
        .iter()
        .zip(&sum_sq)
        .map(|(m, q)| {
            let var = if cfg.trials > 1 { ((q / n - m * m) * n / (n - 1.0)).max(0.0) } else { 0.0 };
            (var / n).sqrt()
        })
        .collect();
    let max_deviation = mean_p.iter().map(|m| (m - uniform).abs()).fold(0.0, f64::max);
    let max_z = mean_p
        .iter()
        .zip(&std_err)
        .map(|(m, se)| if *se > 0.0 { (m - uniform).abs() / se } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(ExchangeabilityResult {
        mean_p,
        std_err,
        max_deviation,
        max_z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalResult {
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub closed_mean: f64,
    pub closed_var: f64,
    pub rel_err_mean: f64,
    pub rel_err_var: f64,
}

pub fn lognormal_mean(mu: f64, sigma: f64) -> f64 {
    (mu + 0.5 * sigma * sigma).exp()
}

pub fn lognormal_variance(mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (2.0 * mu + s2).exp() * s2.exp_m1()
}

fn rel_err(emp: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        emp.abs()
    } else {
        ((emp - exact) / exact).abs()
    }
}

/// Samples `exp(mu + sigma Z)` and compares the moments with the closed form.
pub fn check_lognormal(mu: f64, sigma: f64, trials: usize, seed: u64) -> Result<LognormalResult> {
    if trials < 1000 {
        return Err(Error::Validation("lognormal check needs at least 1000 trials".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Validation("sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..trials {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = (mu + sigma * z).exp();
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let empirical_var = m2 / (trials - 1) as f64;
    let closed_mean = lognormal_mean(mu, sigma);
    let closed_var = lognormal_variance(mu, sigma);
    Ok(LognormalResult {
        empirical_mean: mean,
        empirical_var,
        closed_mean,
        closed_var,
        rel_err_mean: rel_err(mean, closed_mean),
        rel_err_var: rel_err(empirical_var, closed_var),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxVarianceResult {
    /// Sample variance of `p_0` across trials.
    pub empirical: f64,
    /// `(exp(s^2) - 1) / C^2` with `s^2 = sigma_w^2 |phi|^2` (variance reading).
    pub predicted: f64,
    /// Same formula with `s = sigma_w^2 |phi|^2` taken as the standard deviation.
    pub predicted_alt: f64,
    pub rel_err: f64,
}

/// Small-variance prediction for a fixed class.
pub fn predicted_softmax_variance(num_classes: usize, sigma_w: f64, feature_norm: f64) -> f64 {
    let s2 = sigma_w * sigma_w * feature_norm * feature_norm;
    s2.exp_m1() / (num_classes * num_classes) as f64
}

/// Draws the logit vector directly as `N(0, sigma_w^2 |phi|^2 I)`, which is
/// the exact distribution of `W phi` for i.i.d. Gaussian `W`.
pub fn check_softmax_variance(cfg: &McConfig, feature: ArrayView1<f64>) -> Result<SoftmaxVarianceResult> {
    cfg.validate()?;
    if cfg.num_classes < 50 {
        return Err(Error::Validation("the variance prediction assumes at least 50 classes".into()));
    }
    let norm = feature.dot(&feature).sqrt();
    let scale = cfg.sigma_w * norm;
    let c = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = vec![0.0; c];
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..cfg.trials {
        for zc in z.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *zc = scale * n;
        }
        softmax_in_place(&mut z);
        let x = z[0];
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let empirical = if cfg.trials > 1 { m2 / (cfg.trials - 1) as f64 } else { 0.0 };
    let predicted = predicted_softmax_variance(c, cfg.sigma_w, norm);
    let s = cfg.sigma_w * cfg.sigma_w * norm * norm;
    let predicted_alt = (s * s).exp_m1() / (c * c) as f64;
    Ok(SoftmaxVarianceResult {
        empirical,
        predicted,
        predicted_alt,
        rel_err: rel_err(empirical, predicted),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegenerationResult {
    pub per_class_cosine: Vec<f64>,
    pub mean_cosine: f64,
    /// `1 - mean_cosine` after each checkpoint in `checkpoints`.
    pub sweep: Vec<(usize, f64)>,
}

/// Averages the CE gradient over `trials` random heads and compares each
/// class row with the analytic flow. `checkpoints` records the running
/// average at intermediate trial counts.
pub fn check_gradient_degeneration(
    cfg: &McConfig,
    features: ArrayView2<f64>,
    onehot: ArrayView2<f64>,
    checkpoints: &[usize],
) -> Result<DegenerationResult> {
    cfg.validate()?;
    let counts = onehot.sum_axis(ndarray::Axis(0));
    if counts.iter().any(|&n| n != counts[0]) {
        return Err(Error::Validation("gradient degeneration check needs balanced labels".into()));
    }
    let flow = analytic_flow(features, onehot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, f) = (onehot.ncols(), features.ncols());
    let mut sum = Array2::<f64>::zeros((c, f));
    let mut sweep = Vec::new();
    let cosines = |g: &Array2<f64>| -> Result<Vec<f64>> {
        Ok(rowwise_cosine(g.view(), flow.view())?.into_iter().map(|v| v.unwrap_or(0.0)).collect())
    };
    for k in 1..=cfg.trials {
        let head = LinearHead::sample(c, f, cfg.sigma_w, WMode::Random, &mut rng);
        sum += &ce_linear_gradient(features, onehot, &head)?;
        if checkpoints.contains(&k) {
            let cos = cosines(&sum)?;
            sweep.push((k, 1.0 - cos.iter().sum::<f64>() / c as f64));
        }
    }
    let per_class_cosine = cosines(&sum)?;
    let mean_cosine = per_class_cosine.iter().sum::<f64>() / c as f64;
    Ok(DegenerationResult {
        per_class_cosine,
        mean_cosine,
        sweep,
    })
}

/// Deterministic layer-normalized feature (zero mean, unit variance, norm `sqrt(F)`).
pub fn layernormed_feature(dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mean = raw.iter().sum::<f64>() / dim as f64;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
    raw.iter().map(|v| (v - mean) / var.sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub check: String,
    pub statistic: f64,
    pub std_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySuiteConfig {
    pub mc: McConfig,
    pub exchangeability_trials: usize,
    pub lognormal_trials: usize,
    pub lognormal_sigmas: Vec<f64>,
    pub variance_trials: usize,
    pub degeneration_classes: usize,
    pub degeneration_per_class: usize,
    pub degeneration_trials: usize,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        Self {
            mc: McConfig::default(),
            exchangeability_trials: 10_000,
            lognormal_trials: 1_000_000,
            lognormal_sigmas: vec![0.1, 0.5],
            variance_trials: 100_000,
            degeneration_classes: 10,
            degeneration_per_class: 4,
            degeneration_trials: 1000,
        }
    }
}

/// Runs all four checks and returns one row per statistic.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    let mc = cfg.mc;
    let feature = layernormed_feature(mc.feature_dim, mc.seed);

    let ex = check_exchangeability(&McConfig { trials: cfg.exchangeability_trials, ..mc }, feature.view())?;
    let worst_se = ex.std_err.iter().copied().fold(0.0, f64::max);
    rows.push(TheoryRow {
        check: "exchangeability".into(),
        statistic: ex.max_z,
        std_error: worst_se,
        threshold: 3.0,
        passed: ex.max_z < 3.0,
        note: format!("max |E[p_c] - 1/C| = {:.3e} over {} classes, in standard errors", ex.max_deviation, mc.num_classes),
    });

    for &sigma in &cfg.lognormal_sigmas {
        let ln = check_lognormal(0.0, sigma, cfg.lognormal_trials, mc.seed)?;
        for (what, err, emp, exact) in [
            ("mean", ln.rel_err_mean, ln.empirical_mean, ln.closed_mean),
            ("variance", ln.rel_err_var, ln.empirical_var, ln.closed_var),
        ] {
            rows.push(TheoryRow {
                check: format!("lognormal_{what}_sigma_{sigma}"),
                statistic: err,
                std_error: 0.0,
                threshold: 0.02,
                passed: err < 0.02,
                note: format!("empirical {emp:.6e}, closed form {exact:.6e}"),
            });
        }
    }

    let sv = check_softmax_variance(&McConfig { trials: cfg.variance_trials, ..mc }, feature.view())?;
    rows.push(TheoryRow {
        check: "softmax_variance".into(),
        statistic: sv.rel_err,
        std_error: 0.0,
        threshold: 0.2,
        passed: sv.rel_err < 0.2,
        note: format!(
            "empirical {:.4e}, predicted {:.4e} (variance reading), {:.4e} (std reading)",
            sv.empirical, sv.predicted, sv.predicted_alt
        ),
    });

    let c = cfg.degeneration_classes;
    let b = c * cfg.degeneration_per_class;
    let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
    let onehot = crate::flows::one_hot(&labels, c)?;
    let mut feats = Array2::zeros((b, mc.feature_dim));
    for i in 0..b {
        feats.row_mut(i).assign(&layernormed_feature(mc.feature_dim, mc.seed.wrapping_add(1 + i as u64)));
    }
    let dg = check_gradient_degeneration(
        &McConfig { num_classes: c, trials: cfg.degeneration_trials, ..mc },
        feats.view(),
        onehot.view(),
        &[10, 100, 1000],
    )?;
    rows.push(TheoryRow {
        check: "gradient_degeneration".into(),
        statistic: dg.mean_cosine,
        std_error: 0.0,
        threshold: 0.999,
        passed: dg.mean_cosine > 0.999,
        note: format!(
            "1 - cosine by trial count: {}",
            dg.sweep.iter().map(|(k, e)| format!("{k}:{e:.3e}")).collect::<Vec<_>>().join(" ")
        ),
    });
    Ok(rows)
}

pub fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut out = String::from("check,statistic,std_error,threshold,passed\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e},{}", r.check, r.statistic, r.std_error, r.threshold, r.passed);
    }
    out
}

pub fn theory_text(rows: &[TheoryRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "[{}] {:<32} statistic {:>12.6e}  threshold {:>10.4e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.check,
            r.statistic,
            r.threshold,
            r.note
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    /// Moments of `exp(mu + sigma z)` by integrating against the normal density.
    fn lognormal_moments_by_quadrature(mu: f64, sigma: f64) -> (f64, f64) {
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let m1 = simpson(|z| (mu + sigma * z).exp() * pdf(z), -12.0, 12.0, 20_000);
        let m2 = simpson(|z| (2.0 * (mu + sigma * z)).exp() * pdf(z), -12.0, 12.0, 20_000);
        (m1, m2 - m1 * m1)
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for &(mu, sigma) in &[(0.0, 0.1), (0.0, 0.5), (0.3, 1.0), (-1.0, 0.7)] {
            let (m, v) = lognormal_moments_by_quadrature(mu, sigma);
            assert!((lognormal_mean(mu, sigma) - m).abs() < 1e-6 * m);
            assert!((lognormal_variance(mu, sigma) - v).abs() < 1e-6 * v.max(1e-12));
        }
    }

    #[test]
    fn degenerate_lognormal_is_constant() {
        let r = check_lognormal(0.0, 0.0, 1000, 1).unwrap();
        assert_eq!(r.empirical_mean, 1.0);
        assert_eq!(r.empirical_var, 0.0);
        assert_eq!(r.closed_var, 0.0);
    }

    #[test]
    fn paper_values_for_half_sigma() {
        let r = check_lognormal(0.0, 0.5, 1000, 1).unwrap();
        assert!((r.closed_mean - 0.125f64.exp()).abs() < 1e-15);
        assert!((r.closed_var - 0.25f64.exp() * (0.25f64.exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_gives_exact_uniform() {
        let cfg = McConfig { num_classes: 7, feature_dim: 5, sigma_w: 0.0, trials: 20, seed: 1 };
        let r = check_exchangeability(&cfg, layernormed_feature(5, 0).view()).unwrap();
        assert!(r.max_deviation < 1e-15);
        let cfg = McConfig { num_classes: 60, ..cfg };
        let v = check_softmax_variance(&cfg, layernormed_feature(5, 0).view()).unwrap();
        assert_eq!(v.empirical, 0.0);
        assert_eq!(v.predicted, 0.0);
    }

    #[test]
    fn exchangeability_holds_for_unnormalized_features() {
        let cfg = McConfig { num_classes: 8, feature_dim: 6, sigma_w: 0.3, trials: 4000, seed: 5 };
        let feature = ndarray::array![3.0, -1.0, 0.5, 2.0, 0.0, 7.0];
        let r = check_exchangeability(&cfg, feature.view()).unwrap();
        assert!(r.max_z < 4.5, "max z {}", r.max_z);
    }

    #[test]
    fn prediction_scales_inverse_square_in_classes() {
        let a = predicted_softmax_variance(50, 0.01, 27.0);
        let b = predicted_softmax_variance(100, 0.01, 27.0);
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_single_trial_is_exact() {
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let onehot = crate::flows::one_hot(&labels, 4).unwrap();
        let mut feats = Array2::zeros((12, 6));
        for i in 0..12 {
            feats.row_mut(i).assign(&layernormed_feature(6, i as u64));
        }
        let cfg = McConfig { num_classes: 4, feature_dim: 6, sigma_w: 0.0, trials: 1, seed: 0 };
        let r = check_gradient_degeneration(&cfg, feats.view(), onehot.view(), &[]).unwrap();
        assert!(r.per_class_cosine.iter().all(|c| (c - 1.0).abs() < 1e-5));
    }

    #[test]
    fn unbalanced_labels_rejected() {
        let onehot = crate::flows::one_hot(&[0, 0, 1], 2).unwrap();
        let feats = Array2::ones((3, 2));
        let cfg = McConfig { num_classes: 2, feature_dim: 2, ..McConfig::default() };
        assert!(check_gradient_degeneration(&cfg, feats.view(), onehot.view(), &[]).is_err());
    }
}
