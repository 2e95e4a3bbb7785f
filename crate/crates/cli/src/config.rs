//! The single JSON file that drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mstrnn::datasets::{self, Dataset, SynthSpec, Task};
use mstrnn::evaluation::DECISION_RULE;
use mstrnn::model::{InputShape, ModelKind, ModelSpec, PresetOptions};
use mstrnn::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "MSTRNN_OUT_DIR";
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("MSTRNN_GIT_DESCRIBE"), ")");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization (one stream per LOSOCV fold).
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Written into effective configs; ignored when read back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory written by `gen-data`.
    Path(PathBuf),
    /// Generated in memory on every run.
    Synth(SynthSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

/// Preset choice plus optional overrides. Input shape and head sizes
/// default to what the dataset and crop margin imply.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub scale: Scale,
    pub input: Option<InputShape>,
    pub heads: Option<Vec<usize>>,
    pub first_kernel: Option<[usize; 2]>,
    pub first_stride: Option<usize>,
    pub after_pool_kernel: Option<[usize; 2]>,
    pub conv_maps: Option<usize>,
    pub feature_maps: Option<[usize; 2]>,
    pub context_maps: Option<[usize; 2]>,
    pub taus: Option<[f64; 2]>,
    pub fc_units: Option<[usize; 2]>,
    pub lstm_hidden: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Delay window; defaults to `training.delay`.
    pub delay: Option<usize>,
    #[serde(default = "default_rule")]
    pub decision_rule: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            delay: None,
            decision_rule: default_rule(),
        }
    }
}

fn default_rule() -> String {
    DECISION_RULE.to_string()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Stage index to record; defaults to the model's standard tap.
    pub stage: Option<usize>,
    /// Sample ids to export; all samples when absent.
    pub samples: Option<Vec<String>>,
}

/// Parses JSON, naming the offending field path on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{}: at `{}`: {}", origin.display(), path, e.into_inner())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text, path)
}

impl RunConfig {
    /// Loads a config, resolving relative paths against its directory and
    /// applying the output-dir environment override.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => cfg.output_dir = PathBuf::from(dir),
            _ if cfg.output_dir.is_relative() => cfg.output_dir = base.join(&cfg.output_dir),
            _ => {}
        }
        // Absolute paths keep the effective config valid from any directory.
        cfg.output_dir = std::path::absolute(&cfg.output_dir)?;
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            *p = std::path::absolute(&*p)?;
        }
        if cfg.eval.decision_rule != DECISION_RULE {
            bail!(
                "{}: at `eval.decision_rule`: only \"{DECISION_RULE}\" is implemented, got \"{}\"",
                path.display(),
                cfg.eval.decision_rule
            );
        }
        Ok(cfg)
    }

    pub fn delay(&self) -> usize {
        self.eval.delay.unwrap_or(self.training.delay)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetSource::Path(p) => datasets::load_dataset(p)?,
            DatasetSource::Synth(spec) => datasets::generate(spec)?,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Builds the model spec for `dataset` and fills every model override
    /// with its resolved value.
    pub fn resolve_model(&mut self, dataset: &Dataset) -> Result<ModelSpec> {
        let Some([c, h, w]) = dataset.frame_dims() else {
            bail!("dataset is empty");
        };
        let margin = self.training.crop_margin;
        if h <= margin || w <= margin {
            bail!("at `training.crop_margin`: {margin} does not fit {h}×{w} frames");
        }
        let m = &mut self.model;
        let heads = dataset.head_sizes();
        if let Some(given) = &m.heads {
            if *given != heads {
                bail!("at `model.heads`: {given:?} but the dataset has heads {heads:?}");
            }
        }
        let mut o = match (m.scale, dataset.task) {
            (Scale::Desk, _) => PresetOptions::desk(heads.clone()),
            (Scale::Full, Task::Concat3) => PresetOptions::full_concat3(),
            (Scale::Full, _) => PresetOptions::full_compositional(heads.clone()),
        };
        o.heads = heads;
        o.input = m.input.unwrap_or(InputShape::new(c, h - margin, w - margin));
        macro_rules! apply {
            ($($f:ident),*) => {$(
                match m.$f {
                    Some(v) => o.$f = v,
                    None => m.$f = Some(o.$f),
                }
            )*};
        }
        apply!(first_kernel, first_stride, after_pool_kernel, conv_maps, feature_maps, context_maps, taus, fc_units);
        if m.lstm_hidden.is_some() {
            o.lstm_hidden = m.lstm_hidden;
        }
        m.input = Some(o.input);
        m.heads = Some(o.heads.clone());
        let spec = ModelSpec::preset(m.kind, &o)?;
        self.training.validate(Some([c, h, w]))?;
        Ok(spec)
    }

    /// Writes the fully resolved config with a version stamp.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut stamped = self.clone();
        stamped.eval.delay = Some(self.delay());
        stamped.version = Some(VERSION.to_string());
        let path = dir.join("effective_config.json");
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
