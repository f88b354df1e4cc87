//! Run configuration: preset defaults, overlaid by a TOML/JSON file, overlaid
//! by command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use clipsep_core::data::Split;
use clipsep_core::model::{SeparatorConfig, Variant};
use clipsep_core::train::TrainConfig;
use clipsep_core::Modality;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// CPU-sized trunk, short crops, batch 8, schedule fitted to the step count.
    Desk,
    /// Full-size trunk and the 200k-step schedule.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub count: usize,
    pub seed: u64,
    pub crop_len: usize,
    pub modality: Modality,
    pub split: Split,
    pub exclude_labels: Vec<String>,
    pub distinct_labels: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            count: 50,
            seed: 0,
            crop_len: clipsep_core::dsp::TRAIN_CLIP_LEN,
            modality: Modality::Image,
            split: Split::Test,
            exclude_labels: Vec::new(),
            distinct_labels: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: SeparatorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

/// Desk evaluation crops are one second long.
pub const DESK_EVAL_CROP: usize = 16_000;

impl RunConfig {
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                model: SeparatorConfig::desk(variant),
                train: TrainConfig::desk(variant, 2000),
                eval: EvalSettings {
                    crop_len: DESK_EVAL_CROP,
                    ..EvalSettings::default()
                },
            },
            Preset::Full => Self {
                preset,
                model: SeparatorConfig {
                    variant,
                    ..SeparatorConfig::default()
                },
                train: TrainConfig {
                    variant,
                    ..TrainConfig::default()
                },
                eval: EvalSettings::default(),
            },
        }
    }

    /// Resolves preset < file < flags. `flags` uses the same nested layout
    /// as the file (`{"train": {"steps": 10}}`). The desk preset refits the
    /// learning-rate schedule to the step count unless a schedule field was
    /// set explicitly.
    pub fn resolve(file: Option<&Path>, flags: Value) -> Result<Self> {
        let file_value = match file {
            Some(p) => read_config_file(p)?,
            None => Value::Object(Map::new()),
        };
        let pick = |path: &[&str]| lookup(&flags, path).or_else(|| lookup(&file_value, path)).cloned();
        let preset: Preset = match pick(&["preset"]) {
            Some(v) => serde_json::from_value(v).map_err(|e| UsageError(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let variant: Variant = match pick(&["train", "variant"]).or_else(|| pick(&["model", "variant"])) {
            Some(v) => serde_json::from_value(v).map_err(|e| UsageError(format!("variant: {e}")))?,
            None => Variant::Clipsep,
        };
        let mut merged = serde_json::to_value(Self::preset(preset, variant))?;
        merge(&mut merged, &file_value);
        merge(&mut merged, &flags);
        for section in ["model", "train"] {
            merged[section]["variant"] = serde_json::to_value(variant)?;
        }
        if pick(&["train", "query_modality"]).is_none() {
            merged["train"]["query_modality"] = if variant == Variant::Labelsep { "label" } else { "image" }.into();
        }
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        let schedule_set = ["lr_warmup_steps", "lr_decay_end"]
            .iter()
            .any(|k| pick(&["train", k]).is_some());
        if cfg.preset == Preset::Desk && !schedule_set {
            cfg.train.fit_schedule_to_steps();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        if self.eval.count == 0 {
            bail!(UsageError("eval count must be positive".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn lookup<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

/// Recursive object merge; non-object values in `over` replace `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Table = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    };
    if !value.is_object() {
        bail!(UsageError(format!("{}: configuration must be a table", path.display())));
    }
    Ok(value)
}

/// Builds a nested override object from `(section, key, value)` triples,
/// skipping unset flags.
pub fn overrides(entries: &[(&str, &str, Option<Value>)]) -> Value {
    let mut root = Map::new();
    for (section, key, value) in entries {
        let Some(v) = value else { continue };
        if section.is_empty() {
            root.insert(key.to_string(), v.clone());
            continue;
        }
        let slot = root
            .entry(section.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        slot.as_object_mut()
            .expect("sections are objects")
            .insert(key.to_string(), v.clone());
    }
    Value::Object(root)
}
