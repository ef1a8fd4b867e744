//! Run configuration: a TOML document with dotted-key overrides.

use std::path::{Path, PathBuf};

use mfds_core::config::{LossConfig, ModelConfig, OptimConfig};
use mfds_core::data::Schema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `wbcdd`, `lisc`, `bccd` or `synthetic`.
    pub schema: String,
    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub test_annotations: PathBuf,
    pub test_images: PathBuf,
    /// Resize so the shorter side is `short_side`, longer side at most `max_side`.
    pub resize: bool,
    pub short_side: usize,
    pub max_side: usize,
    /// Random horizontal flips during training.
    pub hflip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema: "wbcdd".into(),
            train_annotations: "data/train.json".into(),
            train_images: "data/images".into(),
            test_annotations: "data/test.json".into(),
            test_images: "data/images".into(),
            resize: true,
            short_side: 480,
            max_side: 800,
            hflip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Write `epoch_<k>` checkpoints every this many epochs; 0 keeps only `last`.
    pub checkpoint_every: usize,
    /// Log the running loss every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            max_iterations: 0,
            batch_size: 4,
            seed: 0,
            eval_every: 10,
            checkpoint_every: 10,
            log_every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    /// Root of `checkpoints/`, `reports/` and `overlays/`.
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            output: "out".into(),
        }
    }
}

impl RunConfig {
    /// Small model and schedule for the synthetic disc dataset in `dir`.
    pub fn synthetic(dir: &Path) -> Self {
        let mut c = RunConfig {
            data: DataConfig {
                schema: "synthetic".into(),
                train_annotations: dir.join("annotations.json"),
                train_images: dir.join("images"),
                test_annotations: dir.join("annotations.json"),
                test_images: dir.join("images"),
                resize: false,
                hflip: false,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        };
        let m = &mut c.model;
        m.num_classes = 3;
        m.d_model = 64;
        m.d_ffn = 128;
        m.dropout = 0.0;
        m.num_queries = 16;
        m.backbone.width = 4;
        m.backbone.blocks = vec![1, 1, 1, 1];
        m.attn.heads = 4;
        m.attn.points = 2;
        m.enc.layers = 1;
        m.dec.layers = 3;
        c.optim.lr_backbone = 2e-3;
        c.optim.lr_fpn = 2e-3;
        c.optim.lr_transformer = 2e-3;
        c.train.epochs = 60;
        c.train.max_iterations = 300;
        c.train.eval_every = 0;
        c.train.checkpoint_every = 0;
        c.output = dir.join("out");
        c
    }

    pub fn schema(&self) -> Result<Schema> {
        Ok(Schema::by_name(&self.data.schema)?)
    }

    /// Fills derived fields and checks consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.num_classes = self.schema()?.len();
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.data.resize && (self.data.short_side == 0 || self.data.max_side < self.data.short_side) {
            return Err(Error::Config("data.short_side must be positive and at most data.max_side".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the serialized configuration, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Parses TOML text, applies `key=value` overrides, then resolves.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.resolve()
    }

    /// Loads a file; relative paths inside it are taken from the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let mut c = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut c.data.train_annotations,
            &mut c.data.train_images,
            &mut c.data.test_annotations,
            &mut c.data.test_images,
            &mut c.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(io(path))
    }
}

/// Sets `a.b.c = value`; the value is read as a TOML literal, or as a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(Error::Config(format!("override `{assignment}` is not key=value")));
    };
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
