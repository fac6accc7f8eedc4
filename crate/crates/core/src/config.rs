//! Plain-text `key = value` configuration with `[section]` headers.

use std::str::FromStr;

use crate::error::{FanError, Result};

/// `(section, key, value)` triples in file order. Lines starting with `#`
/// or `;` are comments; keys before any header belong to section `""`.
pub fn parse_sections(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| FanError::Config(format!("line {}: unterminated section header", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FanError::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Pairs of one section. Text without any header is taken as that section's body.
pub fn parse_pairs(text: &str, section: &str) -> Result<Vec<(String, String)>> {
    Ok(parse_sections(text)?
        .into_iter()
        .filter(|(s, _, _)| s.is_empty() || s == section)
        .map(|(_, k, v)| (k, v))
        .collect())
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| FanError::Config(format!("{key}: cannot parse {value:?}")))
}

/// Comma-separated list; an empty value is an empty list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(FanError::Config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::inference_eval::DecodeConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Test-time settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub match_iou: f64,
    pub scales: Vec<usize>,
    pub merge_nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { match_iou: 0.5, scales: vec![256], merge_nms_iou: 0.5 }
    }
}

/// Where a setting came from, lowest precedence first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Default,
    File,
    Flag,
    Env,
}

/// Every tunable of a run. Layers are applied file, then flags, then
/// `FAN_<SECTION>_<KEY>` environment variables; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 means all available cores.
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSettings,
    /// `section.key` → layer of the last assignment.
    #[serde(skip)]
    pub sources: std::collections::BTreeMap<String, Layer>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SceneConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalSettings::default(),
            sources: Default::default(),
        }
    }
}

pub const SECTIONS: [&str; 9] = ["run", "model", "anchors", "loss", "train", "augment", "data", "decode", "eval"];

fn pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(FanError::Config(format!("{key}: expected two comma-separated values, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, section: &str, key: &str, value: &str, layer: Layer) -> Result<()> {
        let ctx = |e: FanError| match e {
            FanError::Config(m) => FanError::Config(format!("[{section}] {m}")),
            other => other,
        };
        match section {
            "run" => match key {
                "seed" => self.seed = parse_value(key, value)?,
                "threads" => self.threads = parse_value(key, value)?,
                _ => return Err(FanError::Config(format!("unknown run key {key:?}"))),
            },
            "model" => self.model.set(key, value).map_err(ctx)?,
            "anchors" => {
                self.model.anchors.set(key, value).map_err(ctx)?;
                self.model.anchors_per_location = self.model.anchors.anchors_per_location();
            }
            "loss" => self.train.loss.set(key, value).map_err(ctx)?,
            "train" | "augment" => self.train.set(key, value).map_err(ctx)?,
            "data" => {
                let d = &mut self.data;
                match key {
                    "width" => d.width = parse_value(key, value)?,
                    "height" => d.height = parse_value(key, value)?,
                    "face_count" => d.face_count = pair(key, value)?,
                    "size_range" => d.size_range = pair(key, value)?,
                    "occluded_frac" => d.occluded_fraction_target = parse_value(key, value)?,
                    "distractor_rate" => d.distractor_rate = parse_value(key, value)?,
                    _ => return Err(FanError::Config(format!("unknown data key {key:?}"))),
                }
            }
            "decode" => {
                let d = &mut self.decode;
                match key {
                    "score_thresh" => d.score_thresh = parse_value(key, value)?,
                    "pre_nms_topk" => d.pre_nms_topk = parse_value(key, value)?,
                    "nms_iou" => d.nms_iou = parse_value(key, value)?,
                    "max_det" => d.max_det = parse_value(key, value)?,
                    _ => return Err(FanError::Config(format!("unknown decode key {key:?}"))),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "match_iou" => e.match_iou = parse_value(key, value)?,
                    "scales" => e.scales = parse_list(key, value)?,
                    "merge_nms_iou" => e.merge_nms_iou = parse_value(key, value)?,
                    _ => return Err(FanError::Config(format!("unknown eval key {key:?}"))),
                }
            }
            _ => {
                return Err(FanError::Config(format!("unknown section {section:?} (expected one of {})", SECTIONS.join(", "))))
            }
        }
        self.sources.insert(format!("{section}.{key}"), layer);
        Ok(())
    }

    /// Applies a config file. Keys outside any section are rejected.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (section, key, value) in parse_sections(text)? {
            if section.is_empty() {
                return Err(FanError::Config(format!("key {key:?} outside any [section]")));
            }
            self.set(&section, &key, &value, Layer::File)?;
        }
        Ok(())
    }

    /// Applies `FAN_<SECTION>_<KEY>=value` variables; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with("FAN_")).collect();
        vars.sort();
        for (name, value) in vars {
            let rest = name["FAN_".len()..].to_ascii_lowercase();
            let (section, key) = rest
                .split_once('_')
                .ok_or_else(|| FanError::Config(format!("environment variable {name}: expected FAN_<SECTION>_<KEY>")))?;
            self.set(section, key, &value, Layer::Env)
                .map_err(|e| FanError::Config(format!("environment variable {name}: {e}")))?;
        }
        Ok(())
    }

    /// Copies run-wide values into the module configs and validates all of them.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.threads = crate::parallel::resolve_threads(self.threads);
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.scales.is_empty() || self.eval.scales.contains(&0) {
            return Err(FanError::Config(format!("eval: scales must be positive, got {:?}", self.eval.scales)));
        }
        Ok(self)
    }

    /// All effective values, one `section.key = value (layer)` line for
    /// every explicitly set key followed by the full JSON dump.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, layer) in &self.sources {
            s.push_str(&format!("# {k} set by {layer:?}\n"));
        }
        s.push_str(&serde_json::to_string_pretty(self).unwrap_or_default());
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let t = "# c\n[train]\nlr = 0.01\n; x\n[model]\nsubnet_depth=2\n";
        let v = parse_sections(t).unwrap();
        assert_eq!(v, vec![("train".into(), "lr".into(), "0.01".into()), ("model".into(), "subnet_depth".into(), "2".into())]);
        assert!(parse_sections("[bad\n").is_err());
        assert!(parse_sections("novalue\n").is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let mut c = RunConfig::default();
        c.apply_file("[train]\nlr = 0.01\nepochs = 5\nlr_drop_epochs = 3\n").unwrap();
        c.set("train", "lr", "0.02", Layer::Flag).unwrap();
        c.apply_env([("FAN_TRAIN_LR".to_string(), "0.03".to_string()), ("HOME".into(), "/".into())]).unwrap();
        assert_eq!(c.train.lr, 0.03);
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.sources["train.lr"], Layer::Env);
        assert_eq!(c.sources["train.epochs"], Layer::File);
        let c = c.resolve().unwrap();
        assert!(c.echo().contains("\"lr\": 0.03"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_file("[train]\nlearning_rate = 1\n").is_err());
        assert!(c.apply_file("[nosuch]\nx = 1\n").is_err());
        assert!(c.apply_file("lr = 1\n").is_err());
        assert!(c.apply_env([("FAN_TRAIN_BOGUS".to_string(), "1".to_string())]).is_err());
        assert!(c.apply_env([("FAN_X".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn anchors_section_updates_heads() {
        let mut c = RunConfig::default();
        c.apply_file("[anchors]\npreset = retinanet\n").unwrap();
        assert_eq!(c.model.anchors_per_location, 9);
        assert!(c.resolve().is_ok());
        let mut c = RunConfig::default();
        c.apply_file("[model]\nanchors_per_location = 3\n").unwrap();
        assert!(c.resolve().is_err());
    }

    #[test]
    fn data_pairs() {
        let mut c = RunConfig::default();
        c.apply_file("[data]\nface_count = 2, 3\nsize_range = 20,100\n").unwrap();
        assert_eq!(c.data.face_count, (2, 3));
        assert_eq!(c.data.size_range, (20.0, 100.0));
        assert!(c.apply_file("[data]\nface_count = 2\n").is_err());
    }
}
