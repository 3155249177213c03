//! The run config: one TOML document with model, training, data, evaluation
//! and ablation sections, plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use cdgan_core::data::{make_synthetic, MultiDomainDataset, SplitSpec, SyntheticDomainSpec};
use cdgan_core::eval::{EvalSettings, ExperimentMatrix, JudgeConfig, LOSS_ABLATION_ROWS};
use cdgan_core::model::ModelConfig;
use cdgan_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset_io::load_dataset;
use crate::error::{Error, Result};

pub const DEFAULT_DOMAINS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_model() -> ModelConfig {
    ModelConfig::desk(DEFAULT_DOMAINS)
}

/// Exactly one of `synthetic` and `path` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub synthetic: Option<SyntheticDomainSpec>,
}

fn default_test_fraction() -> f64 {
    SplitSpec::default().test_fraction
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            test_fraction: default_test_fraction(),
            synthetic: Some(SyntheticDomainSpec {
                n_domains: DEFAULT_DOMAINS,
                images_per_domain: 200,
                image_size: 32,
                seed: 7,
                test_fraction: default_test_fraction(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub judge: JudgeConfig,
    /// Cap on translated images per target domain; absent means all.
    pub per_domain_count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Extra evaluation points for accuracy-vs-iteration curves.
    pub curve_every: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            judge: JudgeConfig::default(),
            per_domain_count: None,
            seed: 0,
            curve_every: None,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            per_domain_count: self.per_domain_count,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    /// Loss-term ablation rows.
    Losses,
    /// One cell per number of shared encoder/generator layers.
    SharedLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub matrix: MatrixKind,
    /// Subset of the loss-ablation rows by name; absent means all eight.
    pub rows: Option<Vec<String>>,
    #[serde(default = "default_shared_counts")]
    pub shared_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn default_shared_counts() -> Vec<usize> {
    vec![0, 1, 2, 3]
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            matrix: MatrixKind::Losses,
            rows: None,
            shared_counts: default_shared_counts(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: default_out(),
            model: default_model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Parses `text` over the defaults, then applies `overrides`
    /// (`section.key=value`, the value a TOML literal or a bare string).
    /// Sections may be partial; every key given must exist.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut doc = match toml::Value::try_from(RunConfig::default()).map_err(config_err)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        let data = user.get("data").and_then(|d| d.as_table());
        if data.is_some_and(|d| d.contains_key("path") && !d.contains_key("synthetic")) {
            if let Some(d) = doc.get_mut("data").and_then(|d| d.as_table_mut()) {
                d.remove("synthetic");
            }
        }
        merge(&mut doc, &user);
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        // Sections without deny_unknown_fields would swallow a typo'd key.
        let resolved = toml::Value::try_from(&cfg).map_err(config_err)?;
        let mut keys = Vec::new();
        leaf_keys(&user, "", &mut keys);
        for key in keys {
            if lookup(&resolved, &key).is_none() {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.judge.validate()?;
        match (&self.data.synthetic, &self.data.path) {
            (Some(s), None) => {
                s.validate()?;
                if s.image_size != self.model.image_size {
                    return Err(Error::Config(format!(
                        "data.synthetic.image_size {} differs from model.image_size {}",
                        s.image_size, self.model.image_size
                    )));
                }
                if s.n_domains != self.model.n_domains {
                    return Err(Error::Config(format!(
                        "data.synthetic.n_domains {} differs from model.n_domains {}",
                        s.n_domains, self.model.n_domains
                    )));
                }
            }
            (None, Some(_)) => SplitSpec {
                test_fraction: self.data.test_fraction,
            }
            .validate()?,
            _ => return Err(Error::Config("set exactly one of data.synthetic and data.path".into())),
        }
        if self.eval.curve_every == Some(0) {
            return Err(Error::Config("eval.curve_every must be positive".into()));
        }
        if let Some(rows) = &self.ablation.rows {
            for r in rows {
                if !LOSS_ABLATION_ROWS.iter().any(|(name, ..)| name == r) {
                    let valid: Vec<&str> = LOSS_ABLATION_ROWS.iter().map(|(n, ..)| *n).collect();
                    return Err(Error::Config(format!(
                        "ablation.rows: unknown row {r:?}; valid rows: {}",
                        valid.join(", ")
                    )));
                }
            }
        }
        self.matrix().validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<MultiDomainDataset> {
        let data = match (&self.data.synthetic, &self.data.path) {
            (Some(s), None) => make_synthetic(s)?,
            (None, Some(p)) => load_dataset(
                p,
                self.model.image_size,
                &SplitSpec {
                    test_fraction: self.data.test_fraction,
                },
            )?,
            _ => return Err(Error::Config("set exactly one of data.synthetic and data.path".into())),
        };
        if data.n_domains() != self.model.n_domains {
            return Err(Error::Config(format!(
                "dataset has {} domains but model.n_domains is {}",
                data.n_domains(),
                self.model.n_domains
            )));
        }
        Ok(data)
    }

    pub fn matrix(&self) -> ExperimentMatrix {
        let seeds = self.ablation.seeds.clone();
        match self.ablation.matrix {
            MatrixKind::Losses => {
                let mut m = ExperimentMatrix::loss_ablation(&self.model, &self.train, seeds);
                if let Some(rows) = &self.ablation.rows {
                    m.cells.retain(|c| rows.contains(&c.name));
                }
                m
            }
            MatrixKind::SharedLayers => {
                ExperimentMatrix::shared_layer_sweep(&self.model, &self.train, &self.ablation.shared_counts, seeds)
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(doc: &mut toml::Table, o: &str) -> Result<()> {
    let (key, raw) = o
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set: malformed key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn leaf_keys(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) if !inner.is_empty() => leaf_keys(inner, &key, out),
            _ => out.push(key),
        }
    }
}

fn lookup<'a>(v: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(v, |v, p| v.as_table()?.get(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_toml_with("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_with(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::from_toml_with(
            "",
            &[
                "train.max_iterations=7".into(),
                "train.weights.alpha2=0.5".into(),
                "model.label_injection=first_block".into(),
                "eval.per_domain_count=3".into(),
                "ablation.seeds=[4, 5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.max_iterations, 7);
        assert_eq!(cfg.train.weights.alpha2, 0.5);
        assert_eq!(cfg.model.label_injection, cdgan_core::model::LabelInjection::FirstBlock);
        assert_eq!(cfg.eval.per_domain_count, Some(3));
        assert_eq!(cfg.ablation.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_with("", &["train.max_iteration=7".into()]).unwrap_err();
        assert!(err.to_string().contains("train.max_iteration"), "{err}");
        let err = RunConfig::from_toml_with("[model]\nn_domain = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model.n_domain"), "{err}");
        assert!(RunConfig::from_toml_with("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_toml_with("", &["novalue".into()]).is_err());
    }

    #[test]
    fn negative_learning_rate_names_the_field() {
        let cfg = RunConfig::from_toml_with("[train]\nlearning_rate = -1.0\n", &[]).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn a_data_path_replaces_the_default_synthetic_set() {
        let cfg = RunConfig::from_toml_with("[data]\npath = \"imgs\"\n", &[]).unwrap();
        assert_eq!(cfg.data.synthetic, None);
        cfg.validate().unwrap();
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut cfg = RunConfig::default();
        cfg.data.path = Some("x".into());
        assert!(cfg.validate().is_err());
        cfg.data.synthetic = None;
        cfg.data.path = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_rows_can_be_filtered() {
        let mut cfg = RunConfig::default();
        cfg.ablation.rows = Some(vec!["Baseline".into(), "Baseline + R + LCL + C".into()]);
        cfg.validate().unwrap();
        assert_eq!(cfg.matrix().cells.len(), 2);
        cfg.ablation.rows = Some(vec!["Full".into()]);
        assert!(cfg.validate().unwrap_err().to_string().contains("valid rows"));
    }
}
