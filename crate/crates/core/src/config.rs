//! Run configuration: one TOML file whose sections mirror the module configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ToyDatasetConfig;
use crate::distill::{DistillConfig, Method};
use crate::error::{Error, Result};
use crate::evaluate::{EvalConfig, Selection, Strategy};
use crate::flows::WMode;
use crate::fsutil;
use crate::theory::TheorySuiteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// Builtin name (`toy-conv-32`, `identity-N`) or a tensor file path.
    pub distill: String,
    /// Evaluation encoder; matched setting when equal to `distill`.
    pub eval: String,
    /// Seed for builtin encoder weights.
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            distill: "toy-conv-32".into(),
            eval: "toy-conv-32".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Labeled image tensor files; the bundled toy task is used when unset.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub toy: ToyDatasetConfig,
    pub stats_batch_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            toy: ToyDatasetConfig::default(),
            stats_batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub selection: Selection,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            selection: Selection::Centroids,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizSection {
    pub k_classes: usize,
}

impl Default for VizSection {
    fn default() -> Self {
        Self { k_classes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub encoder: EncoderSection,
    pub dataset: DatasetSection,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub baseline: BaselineSection,
    pub theory: TheorySuiteConfig,
    pub viz: VizSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            encoder: EncoderSection::default(),
            dataset: DatasetSection::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            baseline: BaselineSection::default(),
            theory: TheorySuiteConfig::default(),
            viz: VizSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub strategy: Option<Strategy>,
    pub alpha: Option<f64>,
    pub w_mode: Option<WMode>,
    pub encoder: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `--seed` drives distillation and evaluation; `--encoder` sets both encoders.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.distill.seed = seed;
            self.eval.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(m) = o.method {
            self.distill.method = m;
        }
        if let Some(s) = o.strategy {
            self.eval.strategy = s;
        }
        if let Some(a) = o.alpha {
            self.eval.soft_label_alpha = a;
        }
        if let Some(w) = o.w_mode {
            self.distill.lgm_w_mode = w;
        }
        if let Some(e) = &o.encoder {
            self.encoder.distill = e.clone();
            self.encoder.eval = e.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.distill.iterations == 0 {
            return Err(Error::Validation("distill.iterations must be at least 1".into()));
        }
        if self.dataset.stats_batch_size == 0 {
            return Err(Error::Validation("dataset.stats_batch_size must be at least 1".into()));
        }
        if self.dataset.train.is_some() != self.dataset.val.is_some() {
            return Err(Error::Validation("dataset.train and dataset.val must be set together".into()));
        }
        self.distill.validate()?;
        self.eval.validate()?;
        self.theory.mc.validate()
    }

    /// Hash of everything except the output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        fsutil::fingerprint_of(&c)
    }

    /// Inputs that determine the stats cache.
    pub fn stats_fingerprint(&self) -> String {
        fsutil::fingerprint_of(&(&self.encoder.distill, self.encoder.seed, &self.dataset))
    }

    /// Inputs that determine the synthetic dataset.
    pub fn distill_fingerprint(&self) -> String {
        fsutil::fingerprint_of(&(self.stats_fingerprint(), &self.distill))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("[distill]\niterations = 7\n[eval]\nstrategy = \"ci\"\n").unwrap();
        assert_eq!(cfg.distill.iterations, 7);
        assert_eq!(cfg.eval.strategy, Strategy::Ci);
        assert_eq!(cfg.distill.learning_rate, DistillConfig::default().learning_rate);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[distill]\nitertions = 7\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut cfg = RunConfig::default();
        cfg.distill.iterations = 0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            method: Some(Method::Lgm),
            alpha: Some(0.5),
            encoder: Some("identity-12".into()),
            ..Overrides::default()
        });
        assert_eq!((cfg.distill.seed, cfg.eval.seed), (9, 9));
        assert_eq!(cfg.distill.method, Method::Lgm);
        assert_eq!(cfg.eval.soft_label_alpha, 0.5);
        assert_eq!(cfg.encoder.eval, "identity-12");
    }

    #[test]
    fn eval_changes_leave_distill_fingerprint() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.iterations = 3;
        assert_eq!(a.distill_fingerprint(), b.distill_fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        b.distill.learning_rate = 0.1;
        assert_ne!(a.distill_fingerprint(), b.distill_fingerprint());
    }
}
