//! Commands tying the modules together, with artifacts under `RunConfig::out`.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.toml            effective configuration of the last command
//! stats.sfmstats         class statistics cache
//! stats.json             fingerprints of the statistics cache
//! synthetic/             distilled dataset
//! eval_<method>_<strategy>.jsonl
//! baseline_<selection>.jsonl
//! theory.csv, theory.txt
//! viz/flows.{png,csv,txt}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{toy_dataset, LabeledImages};
use crate::distill::{distill_ablation, distill_lgm, distill_sfm, Method, SyntheticDataset, TOOL_VERSION};
use crate::encoders::{load_encoder, Encoder};
use crate::error::{Error, Result};
use crate::evaluate::{
    encode_all, evaluate_strategy, select_baseline, summary_table, train_golden_classifier, write_reports, EvalReport,
    FeatureCache, Selection, Strategy,
};
use crate::flows::{analytic_flow, one_hot, FlowMatrix};
use crate::fsutil::{read_bytes, write_atomic};
use crate::statistics::{build_statistical_flow, compute_class_statistics, ClassStatistics};
use crate::theory::{run_theory_suite, theory_csv, theory_text};
use crate::viz::emit_flow_plot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stats,
    Distill,
    Eval,
    Baseline,
    Theory,
    Viz,
}

impl std::str::FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(Command::Stats),
            "distill" => Ok(Command::Distill),
            "eval" => Ok(Command::Eval),
            "baseline" => Ok(Command::Baseline),
            "theory" => Ok(Command::Theory),
            "viz" => Ok(Command::Viz),
            other => Err(Error::Validation(format!("unknown command {other:?}"))),
        }
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
    /// False when a check the command ran did not pass (theory).
    pub passed: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct StatsMeta {
    tool_version: String,
    config_fingerprint: String,
    encoder_fingerprint: String,
}

pub fn stats_path(out: &Path) -> PathBuf {
    out.join("stats.sfmstats")
}

pub fn synthetic_dir(out: &Path) -> PathBuf {
    out.join("synthetic")
}

fn stats_meta_path(out: &Path) -> PathBuf {
    out.join("stats.json")
}

pub fn eval_report_path(out: &Path, method: Method, strategy: Strategy) -> PathBuf {
    out.join(format!("eval_{method}_{strategy}.jsonl"))
}

pub fn baseline_report_path(out: &Path, selection: Selection) -> PathBuf {
    let name = format!("{selection:?}").to_lowercase();
    out.join(format!("baseline_{name}.jsonl"))
}

fn datasets(cfg: &RunConfig) -> Result<(LabeledImages, LabeledImages)> {
    match (&cfg.dataset.train, &cfg.dataset.val) {
        (Some(train), Some(val)) => Ok((LabeledImages::load(train)?, LabeledImages::load(val)?)),
        _ => toy_dataset(&cfg.dataset.toy),
    }
}

fn encoders(cfg: &RunConfig) -> Result<(Encoder, Encoder)> {
    let d = load_encoder(&cfg.encoder.distill, cfg.encoder.seed)?;
    let e = load_encoder(&cfg.encoder.eval, cfg.encoder.seed)?;
    Ok((d, e))
}

/// Loads the statistics cache and checks it belongs to this configuration.
fn load_stats(cfg: &RunConfig, encoder: &Encoder) -> Result<ClassStatistics> {
    let stats = ClassStatistics::load(&stats_path(&cfg.out))?;
    let meta_path = stats_meta_path(&cfg.out);
    let meta: StatsMeta = serde_json::from_slice(&read_bytes(&meta_path)?)
        .map_err(|e| Error::Load(format!("{}: {e}", meta_path.display())))?;
    if meta.config_fingerprint != cfg.stats_fingerprint() {
        return Err(Error::Fingerprint(format!(
            "{} was computed for a different encoder or dataset configuration; rerun `stats`",
            stats_path(&cfg.out).display()
        )));
    }
    if stats.encoder_fingerprint != encoder.fingerprint() || meta.encoder_fingerprint != encoder.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "{} was computed with encoder {}, configured encoder is {}",
            stats_path(&cfg.out).display(),
            stats.encoder_fingerprint,
            encoder.fingerprint()
        )));
    }
    Ok(stats)
}

fn load_synthetic(cfg: &RunConfig) -> Result<SyntheticDataset> {
    SyntheticDataset::load(&synthetic_dir(&cfg.out), Some(&cfg.distill_fingerprint()))
}

fn stamp(mut report: EvalReport, cfg: &RunConfig) -> EvalReport {
    report.settings.insert("config_fingerprint".into(), cfg.fingerprint());
    report.settings.insert("tool_version".into(), TOOL_VERSION.into());
    report.fingerprint = report.content_fingerprint();
    report
}

/// Runs one command. The effective configuration is echoed to `out/config.toml`.
pub fn run_pipeline(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let config_path = cfg.out.join("config.toml");
    write_atomic(&config_path, cfg.to_toml().as_bytes())?;
    let mut outcome = match command {
        Command::Stats => run_stats(cfg)?,
        Command::Distill => run_distill(cfg)?,
        Command::Eval => run_eval(cfg)?,
        Command::Baseline => run_baseline(cfg)?,
        Command::Theory => run_theory(cfg)?,
        Command::Viz => run_viz(cfg)?,
    };
    outcome.artifacts.push(config_path);
    Ok(outcome)
}

fn run_stats(cfg: &RunConfig) -> Result<Outcome> {
    let (train, _) = datasets(cfg)?;
    let (enc_d, _) = encoders(cfg)?;
    let stats = compute_class_statistics(&enc_d, train.iter(), train.num_classes, cfg.dataset.stats_batch_size)?;
    let path = stats_path(&cfg.out);
    stats.save(&path)?;
    let meta = StatsMeta {
        tool_version: TOOL_VERSION.into(),
        config_fingerprint: cfg.stats_fingerprint(),
        encoder_fingerprint: enc_d.fingerprint().to_string(),
    };
    let meta_path = stats_meta_path(&cfg.out);
    write_atomic(&meta_path, &serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
    Ok(Outcome {
        summary: format!(
            "class statistics for {} images, {} classes, {} features -> {}",
            stats.total,
            stats.num_classes,
            stats.feature_dim,
            path.display()
        ),
        artifacts: vec![path, meta_path],
        passed: true,
    })
}

fn run_distill(cfg: &RunConfig) -> Result<Outcome> {
    let (enc_d, _) = encoders(cfg)?;
    let before = enc_d.parameter_checksum();
    let synthetic = match cfg.distill.method {
        Method::Sfm => distill_sfm(&cfg.distill, &enc_d, &build_statistical_flow(&load_stats(cfg, &enc_d)?)?)?,
        Method::Tcdd | Method::Ncdd => distill_ablation(&cfg.distill, &enc_d, &load_stats(cfg, &enc_d)?)?,
        Method::Lgm => {
            let (train, _) = datasets(cfg)?;
            distill_lgm(&cfg.distill, &enc_d, &train)?
        }
    };
    if enc_d.parameter_checksum() != before {
        return Err(Error::Invariant("encoder parameters changed during distillation".into()));
    }
    let dir = synthetic_dir(&cfg.out);
    synthetic.save(&dir, Some(&cfg.distill_fingerprint()))?;
    let trace = &synthetic.provenance.loss_trace;
    let summary = match (trace.first(), trace.last()) {
        (Some(a), Some(b)) => format!(
            "{} distillation: loss {:.4} -> {:.4}, mean cosine {:.3} -> {:.3}{}",
            cfg.distill.method,
            a.loss,
            b.loss,
            a.mean_cosine,
            b.mean_cosine,
            if synthetic.provenance.stopped_early { " (plateau)" } else { "" }
        ),
        _ => format!("{} distillation ran no steps", cfg.distill.method),
    };
    Ok(Outcome {
        artifacts: vec![dir],
        summary,
        passed: true,
    })
}

/// Golden classifier and validation features shared by `eval` and `baseline`.
fn eval_context(cfg: &RunConfig, enc_d: &Encoder, enc_e: &Encoder) -> Result<(crate::evaluate::Classifier, FeatureCache)> {
    let (train, val) = datasets(cfg)?;
    let golden = train_golden_classifier(enc_d, &train, &cfg.eval)?;
    Ok((golden, FeatureCache::build(enc_e, &val)?))
}

fn run_eval(cfg: &RunConfig) -> Result<Outcome> {
    let synthetic = load_synthetic(cfg)?;
    let (enc_d, enc_e) = encoders(cfg)?;
    let (golden, val) = eval_context(cfg, &enc_d, &enc_e)?;
    let label = format!("{}+{}", cfg.distill.method, cfg.eval.strategy);
    let report = evaluate_strategy(&synthetic.to_labeled()?, &enc_e, &enc_d, &golden, &cfg.eval, &val, &label)?;
    let report = stamp(report, cfg);
    let path = eval_report_path(&cfg.out, cfg.distill.method, cfg.eval.strategy);
    write_reports(&path, std::slice::from_ref(&report))?;
    Ok(Outcome {
        artifacts: vec![path],
        summary: summary_table(&[report]),
        passed: true,
    })
}

fn run_baseline(cfg: &RunConfig) -> Result<Outcome> {
    let (enc_d, enc_e) = encoders(cfg)?;
    let (train, _) = datasets(cfg)?;
    let synthetic = match cfg.baseline.selection {
        Selection::Neighbors => Some(load_synthetic(cfg)?.to_labeled()?),
        _ => None,
    };
    let chosen = select_baseline(cfg.baseline.selection, &train, &enc_d, synthetic.as_ref(), cfg.eval.seed)?;
    let (golden, val) = eval_context(cfg, &enc_d, &enc_e)?;
    let label = format!("{:?}+{}", cfg.baseline.selection, cfg.eval.strategy).to_lowercase();
    let report = evaluate_strategy(&chosen, &enc_e, &enc_d, &golden, &cfg.eval, &val, &label)?;
    let report = stamp(report, cfg);
    let path = baseline_report_path(&cfg.out, cfg.baseline.selection);
    write_reports(&path, std::slice::from_ref(&report))?;
    Ok(Outcome {
        artifacts: vec![path],
        summary: summary_table(&[report]),
        passed: true,
    })
}

fn run_theory(cfg: &RunConfig) -> Result<Outcome> {
    let rows = run_theory_suite(&cfg.theory)?;
    let csv_path = cfg.out.join("theory.csv");
    let txt_path = cfg.out.join("theory.txt");
    let text = theory_text(&rows);
    write_atomic(&csv_path, theory_csv(&rows).as_bytes())?;
    write_atomic(&txt_path, text.as_bytes())?;
    Ok(Outcome {
        artifacts: vec![csv_path, txt_path],
        passed: rows.iter().all(|r| r.passed),
        summary: text,
    })
}

fn run_viz(cfg: &RunConfig) -> Result<Outcome> {
    let (enc_d, _) = encoders(cfg)?;
    let stat_flow = build_statistical_flow(&load_stats(cfg, &enc_d)?)?;
    let synthetic = load_synthetic(cfg)?;
    let feats = encode_all(&enc_d, &synthetic.images())?;
    let onehot = one_hot(&synthetic.labels, synthetic.num_classes())?;
    let flow: FlowMatrix = analytic_flow(feats.view(), onehot.view())?;
    let k = cfg.viz.k_classes.min(synthetic.num_classes());
    let plot = emit_flow_plot(&stat_flow, &flow, k)?;
    let dir = cfg.out.join("viz");
    plot.save(&dir)?;
    Ok(Outcome {
        artifacts: vec![dir.join("flows.png"), dir.join("flows.csv"), dir.join("flows.txt")],
        summary: plot.summary(),
        passed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyDatasetConfig;

    fn tiny(out: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            out: out.to_path_buf(),
            ..RunConfig::default()
        };
        cfg.dataset.toy = ToyDatasetConfig {
            num_classes: 3,
            train_per_class: 6,
            val_per_class: 3,
            resolution: 32,
            seed: 1,
        };
        cfg.distill.iterations = 5;
        cfg.distill.level_interval = 2;
        cfg.eval.iterations = 5;
        cfg.eval.golden_iterations = 5;
        cfg
    }

    #[test]
    fn distill_without_stats_names_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = run_pipeline(Command::Distill, &cfg).unwrap_err();
        match err {
            Error::MissingArtifact { path, .. } => assert_eq!(path, stats_path(dir.path())),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn stats_from_other_encoder_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        run_pipeline(Command::Stats, &cfg).unwrap();
        cfg.encoder.seed = 1;
        assert!(matches!(run_pipeline(Command::Distill, &cfg), Err(Error::Fingerprint(_))));
    }

    #[test]
    fn eval_refuses_stale_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        run_pipeline(Command::Stats, &cfg).unwrap();
        run_pipeline(Command::Distill, &cfg).unwrap();
        cfg.distill.learning_rate = 0.5;
        assert!(matches!(run_pipeline(Command::Eval, &cfg), Err(Error::Fingerprint(_))));
    }

    #[test]
    fn effective_config_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_pipeline(Command::Stats, &cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
