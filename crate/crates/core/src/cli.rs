//! Experiment runner behind the `rbcl` binary.
//!
//! A run trains the old model on its setting's old training set, then one
//! new model per compatibility method (plus the plain `none` model that
//! provides the lower and upper bounds), evaluates the Direct / cross /
//! self-test matrix and writes everything as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::data::{generate_dataset, plan_setting, Setting, SettingPlan, SyntheticSpec};
use crate::eval::{evaluate_retrieval, test_features, RetrievalReport};
use crate::featurespace::FeatureSet;
use crate::model::{Encoder, EncoderSpec};
use crate::trainer::{train_bct, train_reid, CompatLoss, TrainConfig, TrainTrace};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: String,
    #[serde(rename = "domainA")]
    pub domain_a: SyntheticSpec,
    #[serde(rename = "domainB", default)]
    pub domain_b: Option<SyntheticSpec>,
    pub encoder_old: EncoderSpec,
    /// Optional; derived from `encoder_old` and the setting when null.
    #[serde(default)]
    pub encoder_new: Option<EncoderSpec>,
    pub train: TrainConfig,
    pub methods: Vec<CompatLoss>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: crate::Error| CliError::Config(e.to_string());
        let setting: Setting = self.setting.parse().map_err(cfg_err)?;
        self.domain_a.validate().map_err(cfg_err)?;
        if let Some(b) = &self.domain_b {
            b.validate().map_err(cfg_err)?;
        }
        if setting.cross_domain() && self.domain_b.is_none() {
            return Err(CliError::Config(format!("{setting} requires domainB")));
        }
        self.encoder_old.validate().map_err(cfg_err)?;
        if let Some(n) = &self.encoder_new {
            n.validate().map_err(cfg_err)?;
        }
        self.train.validate().map_err(cfg_err)?;
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must not be empty".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<SettingPlan, CliError> {
        plan_setting(
            &self.setting,
            &self.domain_a,
            self.domain_b.as_ref(),
            &self.encoder_old,
            self.encoder_new.as_ref(),
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Methods to train, `none` first and without duplicates.
    pub fn method_list(&self) -> Vec<CompatLoss> {
        let mut out = vec![CompatLoss::None];
        for &m in &self.methods {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

pub fn encoder_tag(method: CompatLoss) -> String {
    format!("new-{}", method.as_str())
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: CompatLoss,
    pub cross: RetrievalReport,
    pub self_test: RetrievalReport,
    pub trace: TrainTrace,
    pub encoder: Encoder,
    test_features: FeatureSet,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub setting: Setting,
    pub direct: RetrievalReport,
    pub old_trace: TrainTrace,
    pub methods: Vec<MethodRun>,
    old_test_features: FeatureSet,
}

impl ExperimentOutcome {
    pub fn method(&self, m: CompatLoss) -> Option<&MethodRun> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn results_csv(&self) -> String {
        let setting = self.setting.to_string();
        let mut s = String::new();
        writeln!(s, "{}", RetrievalReport::CSV_HEADER).expect("string write");
        writeln!(s, "{}", self.direct.csv_row(&setting)).expect("string write");
        for run in &self.methods {
            writeln!(s, "{}", run.cross.csv_row(&setting)).expect("string write");
            writeln!(s, "{}", run.self_test.csv_row(&setting)).expect("string write");
        }
        s
    }

    /// Writes `results.csv`, traces, histograms and test features.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let put = |name: String, text: String| -> Result<(), CliError> {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| io_err(&path, e))
        };
        put("results.csv".into(), self.results_csv())?;
        put("trace_old.csv".into(), self.old_trace.to_csv())?;
        self.old_test_features
            .write_csv(&dir.join("features_old.csv"))?;
        for run in &self.methods {
            let m = run.method.as_str();
            put(format!("trace_{m}.csv"), run.trace.to_csv())?;
            for h in &run.trace.histograms {
                put(format!("hist_{m}_{}.csv", h.epoch), h.raw.to_csv())?;
                put(
                    format!("hist_{m}_{}_shifted.csv", h.epoch),
                    h.shifted.to_csv(),
                )?;
            }
            run.test_features
                .write_csv(&dir.join(format!("features_{}.csv", encoder_tag(run.method))))?;
        }
        Ok(())
    }
}

fn merged(query: &FeatureSet, gallery: &FeatureSet) -> Result<FeatureSet, CliError> {
    let feats = ndarray::concatenate(
        ndarray::Axis(0),
        &[query.features().view(), gallery.features().view()],
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(FeatureSet::new(
        feats,
        [query.labels(), gallery.labels()].concat(),
        [query.instance_ids(), gallery.instance_ids()].concat(),
        query.source().clone(),
    )?)
}

/// Trains and evaluates everything a config describes, without touching disk.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let reid_cfg = cfg.train.with_compat(CompatLoss::None);
    let (old, old_head, old_trace) = train_reid(&plan.old_train, &plan.old_spec, &reid_cfg)?;
    let (old_q, old_g) = test_features(&old, "old", &plan.test)?;
    let direct = evaluate_retrieval(&old_q, &old_g)?;

    let methods = cfg
        .method_list()
        .into_par_iter()
        .map(|method| -> Result<MethodRun, CliError> {
            let tc = cfg.train.with_compat(method);
            let out = train_bct(&plan.new_train, &old, &old_head, &plan.new_spec, &tc)
                .map_err(|e| CliError::Runtime(format!("training {}: {e}", method.as_str())))?;
            let tag = encoder_tag(method);
            let (q, g) = test_features(&out.encoder, &tag, &plan.test)?;
            Ok(MethodRun {
                method,
                cross: evaluate_retrieval(&q, &old_g)?,
                self_test: evaluate_retrieval(&q, &g)?,
                trace: out.trace,
                encoder: out.encoder,
                test_features: merged(&q, &g)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ExperimentOutcome {
        setting: plan.setting,
        direct,
        old_trace,
        methods,
        old_test_features: merged(&old_q, &old_g)?,
    })
}

/// Runs a config (optionally overriding the training seed and output
/// directory) and writes all outputs. Returns the output directory.
pub fn run_experiment(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = run_pipeline(&cfg)?;
    outcome.write(&dir)?;
    Ok(dir)
}

/// Writes the synthetic datasets of a config as CSV.
pub fn generate_data(config_path: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut written = Vec::new();
    for spec in std::iter::once(&cfg.domain_a).chain(cfg.domain_b.as_ref()) {
        let ds = generate_dataset(spec)?;
        let path = dir.join(format!("dataset_{}.csv", spec.domain));
        ds.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub setting: String,
    pub query_enc: String,
    pub gallery_enc: String,
    pub map: f64,
    pub rank1: f64,
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>, CliError> {
    let path = dir.join("results.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(RetrievalReport::CSV_HEADER) {
        return Err(CliError::Config(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(CliError::Config(format!("bad results row {l:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad number {s:?}")))
            };
            Ok(ResultRow {
                setting: f[0].to_string(),
                query_enc: f[1].to_string(),
                gallery_enc: f[2].to_string(),
                map: num(f[3])?,
                rank1: num(f[4])?,
            })
        })
        .collect()
}

/// Aligned method × {cross-model, self-test} × {mAP, Rank-1} table.
pub fn emit_report(results_dir: &Path) -> Result<String, CliError> {
    let rows = read_results(results_dir)?;
    if rows.is_empty() {
        return Err(CliError::Config("results.csv has no rows".into()));
    }
    let mut direct = None;
    let mut table: BTreeMap<usize, (String, Option<&ResultRow>, Option<&ResultRow>)> =
        BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if r.query_enc == "old" && r.gallery_enc == "old" {
            direct = Some(r);
            continue;
        }
        let Some(method) = r.query_enc.strip_prefix("new-") else {
            continue;
        };
        let idx = match order.iter().position(|m| m == method) {
            Some(i) => i,
            None => {
                order.push(method.to_string());
                order.len() - 1
            }
        };
        let entry = table
            .entry(idx)
            .or_insert_with(|| (method.to_string(), None, None));
        if r.gallery_enc == "old" {
            entry.1 = Some(r);
        } else if r.gallery_enc == r.query_enc {
            entry.2 = Some(r);
        }
    }

    let fmt = |r: Option<&ResultRow>, f: fn(&ResultRow) -> f64| {
        r.map_or("-".to_string(), |r| format!("{:.4}", f(r)))
    };
    let mut s = String::new();
    writeln!(s, "setting: {}", rows[0].setting).expect("string write");
    if let Some(d) = direct {
        writeln!(
            s,
            "Direct (old/old): mAP {:.4}  Rank-1 {:.4}",
            d.map, d.rank1
        )
        .expect("string write");
    }
    writeln!(
        s,
        "{:<16} {:>10} {:>10} {:>10} {:>10}",
        "method", "cross mAP", "cross R1", "self mAP", "self R1"
    )
    .expect("string write");
    for (_, (method, cross, own)) in table {
        let label = if method == "none" {
            "none (LB/UB)".to_string()
        } else {
            method
        };
        writeln!(
            s,
            "{:<16} {:>10} {:>10} {:>10} {:>10}",
            label,
            fmt(cross, |r| r.map),
            fmt(cross, |r| r.rank1),
            fmt(own, |r| r.map),
            fmt(own, |r| r.rank1)
        )
        .expect("string write");
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"{
        "setting": "ID-S-1",
        "domainA": {"num_classes": 12, "instances_per_class": 6, "input_dim": 6,
                    "cluster_spread": 0.1, "center_scale": 1.0, "domain": "A", "seed": 3},
        "domainB": null,
        "encoder_old": {"input_dim": 6, "hidden_dims": [8], "embed_dim": 4, "activation": "relu", "seed": 1},
        "encoder_new": null,
        "train": {"epochs": 2, "p": 2, "k_inst": 2, "learning_rate": 0.05, "seed": 7, "nca_k": 3},
        "methods": ["rbcl"],
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_json(SMALL).unwrap();
        assert_eq!(cfg.method_list(), vec![CompatLoss::None, CompatLoss::Rbcl]);
        let bad = SMALL.replace("\"methods\"", "\"extra\": 1, \"methods\"");
        assert!(matches!(
            ExperimentConfig::from_json(&bad),
            Err(CliError::Config(_))
        ));
        let cdus = SMALL.replace("ID-S-1", "CD-US");
        assert_eq!(
            ExperimentConfig::from_json(&cdus).unwrap_err().exit_code(),
            EXIT_CONFIG
        );
        let cd = SMALL.replace("ID-S-1", "CD-S-1");
        assert!(ExperimentConfig::from_json(&cd).is_err());
    }

    #[test]
    fn results_have_all_rows() {
        let cfg = ExperimentConfig::from_json(SMALL).unwrap();
        let out = run_pipeline(&cfg).unwrap();
        let csv = out.results_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("ID-S-1,old,old,"));
        assert!(lines[2].starts_with("ID-S-1,new-none,old,"));
        assert!(lines[3].starts_with("ID-S-1,new-none,new-none,"));
        assert!(lines[4].starts_with("ID-S-1,new-rbcl,old,"));
        assert!(lines[5].starts_with("ID-S-1,new-rbcl,new-rbcl,"));
    }
}
