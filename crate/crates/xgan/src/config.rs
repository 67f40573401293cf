//! Run configuration: one human-editable TOML file with dotted-path
//! command-line overrides. Unknown keys are rejected, never ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domains::{CorpusSpec, StyleId};
use crate::error::{Result, XganError};
use crate::model::ModelConfig;
use crate::teacher::AttributeNetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Optional schema TOML; the built-in default schema when absent.
    #[serde(default)]
    pub schema_path: Option<PathBuf>,
    pub d1: CorpusSpec,
    pub d2: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirData {
    pub d1: PathBuf,
    pub d2: PathBuf,
    pub image_size: usize,
}

/// Exactly one data source: synthetic corpora or image directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub dirs: Option<DirData>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.dirs) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => Err(XganError::Config(
                "data: specify either synthetic corpora or image directories, not both".into(),
            )),
            (None, None) => Err(XganError::Config("data: no data source configured".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Teacher / probe supervised training settings.
    pub supervised: AttributeNetConfig,
    pub teacher_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Fraction of each corpus held out for testing.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                synthetic: Some(SyntheticData {
                    schema_path: None,
                    d1: CorpusSpec {
                        n_samples: 2000,
                        style: StyleId::StyleA,
                        seed: 101,
                        bias: Default::default(),
                        image_size: 64,
                    },
                    d2: CorpusSpec {
                        n_samples: 2000,
                        style: StyleId::StyleB,
                        seed: 202,
                        bias: Default::default(),
                        image_size: 64,
                    },
                }),
                dirs: None,
            },
            supervised: AttributeNetConfig::default(),
            teacher_path: None,
            output_dir: PathBuf::from("runs/default"),
            test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    /// The desk-scale synthetic benchmark: 32x32 sprites, 2000 samples per
    /// domain, a 2:1 hair-color bias on the style-B corpus (content shift),
    /// and a model slim enough for CPU training.
    pub fn benchmark() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_size: 32,
            channels: 3,
            embed_dim: 64,
            encoder_widths: vec![8, 16, 32, 64],
            decoder_widths: vec![64, 32, 16, 8],
            discriminator_widths: vec![8, 16, 16, 16],
            dann_hidden: vec![32],
            shared_encoder_blocks: 4,
            shared_decoder_blocks: 2,
            second_discriminator: false,
            instance_norm: false,
        };
        if let Some(synth) = cfg.data.synthetic.as_mut() {
            synth.d1.image_size = 32;
            synth.d2.image_size = 32;
            synth
                .d2
                .bias
                .insert("hair_color".into(), vec![1.0, 1.0, 1.0, 2.0]);
        }
        cfg.output_dir = PathBuf::from("runs/benchmark");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(XganError::Config(format!(
                "test_fraction: must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if let Some(synth) = &self.data.synthetic {
            for (name, spec) in [("d1", &synth.d1), ("d2", &synth.d2)] {
                if spec.n_samples == 0 {
                    return Err(XganError::Config(format!("data.synthetic.{name}.n_samples: must be >= 1")));
                }
                if spec.image_size != self.model.image_size {
                    return Err(XganError::Config(format!(
                        "data.synthetic.{name}.image_size {} != model.image_size {}",
                        spec.image_size, self.model.image_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses `--a.b.c value` style arguments out of an argument list, leaving
/// everything else for the regular flag parser.
pub fn extract_dotted_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if let Some(key) = arg.strip_prefix("--") {
            if key.contains('.') {
                let value = it.next().ok_or_else(|| {
                    XganError::Config(format!("override --{key} is missing a value"))
                })?;
                overrides.push((key.to_string(), value));
                continue;
            }
        }
        rest.push(arg);
    }
    Ok((rest, overrides))
}

/// Applies dotted-path overrides to a TOML document. Every path component
/// must already exist (or be a new key of an existing table).
pub fn apply_overrides(doc: &mut toml::Value, overrides: &[(String, String)]) -> Result<()> {
    for (path, raw) in overrides {
        let parts: Vec<&str> = path.split('.').collect();
        let mut cursor = &mut *doc;
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .get_mut(part)
                .ok_or_else(|| XganError::Config(format!("override {path}: unknown key '{part}'")))?;
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| XganError::Config(format!("override {path}: parent is not a table")))?;
        let leaf = parts[parts.len() - 1];
        let value = parse_toml_value(raw);
        table.insert(leaf.to_string(), value);
    }
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(parsed) = wrapped.parse::<toml::Table>() {
        if let Some(v) = parsed.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Loads a config file and applies overrides; unknown keys anywhere are
/// configuration errors.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        XganError::Config(format!("config file {}: {e}", path.display()))
    })?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| XganError::Config(format!("{}: {e}", path.display())))?;
    let mut doc = toml::Value::Table(table);
    apply_overrides(&mut doc, overrides)?;
    let cfg: RunConfig = doc
        .try_into()
        .map_err(|e| XganError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes the effective config (post-overrides); written into the output
/// directory so a run can be reproduced from that file alone.
pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| XganError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::benchmark().validate().unwrap();
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::benchmark();
        let text = render_config(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides_apply_and_reject_unknown_keys() {
        let cfg = RunConfig::benchmark();
        let table: toml::Table = toml::from_str(&render_config(&cfg).unwrap()).unwrap();
        let mut doc = toml::Value::Table(table);
        apply_overrides(
            &mut doc,
            &[
                ("train.seed".into(), "99".into()),
                ("model.embed_dim".into(), "128".into()),
            ],
        )
        .unwrap();
        let back: RunConfig = doc.try_into().unwrap();
        assert_eq!(back.train.seed, 99);
        assert_eq!(back.model.embed_dim, 128);

        let table: toml::Table = toml::from_str(&render_config(&cfg).unwrap()).unwrap();
        let mut doc = toml::Value::Table(table);
        let err = apply_overrides(&mut doc, &[("nonsense.path".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, XganError::Config(_)));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let result: std::result::Result<RunConfig, _> = toml::from_str("bogus_key = 1\n");
        assert!(result.is_err());
    }

    #[test]
    fn dotted_args_are_extracted() {
        let args = vec![
            "train".to_string(),
            "--config".to_string(),
            "c.toml".to_string(),
            "--train.seed".to_string(),
            "7".to_string(),
        ];
        let (rest, overrides) = extract_dotted_overrides(args).unwrap();
        assert_eq!(rest, vec!["train", "--config", "c.toml"]);
        assert_eq!(overrides, vec![("train.seed".to_string(), "7".to_string())]);
    }

    #[test]
    fn both_data_sources_is_an_error() {
        let mut cfg = RunConfig::default();
        cfg.data.dirs = Some(DirData {
            d1: "a".into(),
            d2: "b".into(),
            image_size: 64,
        });
        assert!(matches!(cfg.validate(), Err(XganError::Config(_))));
    }
}
