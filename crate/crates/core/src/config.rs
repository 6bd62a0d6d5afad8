//! Experiment configuration: one JSON document per run. Every section has
//! defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobConfig;
use crate::error::{Error, Result};
use crate::fedavg::{Aggregation, TrainingConfig};
use crate::ring::FixedPointConfig;
use crate::simnet::LinkModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Pgm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Root of a `<root>/<class>/<sample>.pgm` tree (source = pgm).
    pub root: Option<PathBuf>,
    pub blobs: BlobConfig,
    /// Synthetic: number of generated samples. Pgm: whatever remains after
    /// the validation and test samples are set aside.
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            blobs: BlobConfig::default(),
            train_samples: 240,
            validation_samples: 150,
            test_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub filters: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { filters: 8, hidden: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hospitals: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            hospitals: t.hospitals,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            aggregation: Aggregation::Secure,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Directory holding `model_party0.smpcmodl` and `model_party1.smpcmodl`;
    /// defaults to the output directory.
    pub model_dir: Option<PathBuf>,
    pub batch_sizes: Vec<usize>,
    /// Abstract compute operations per simulated second.
    pub compute_ops_per_sec: f64,
    /// Use correlated randomness from this file instead of the seeded dealer.
    pub randomness_file: Option<PathBuf>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            model_dir: None,
            batch_sizes: vec![5, 10, 15, 20, 30],
            compute_ops_per_sec: 1e8,
            randomness_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelftestSection {
    /// Triples from this file are verified and used by the Beaver suite.
    pub randomness_file: Option<PathBuf>,
    pub beaver_cases: usize,
    pub share_cases: usize,
}

impl Default for SelftestSection {
    fn default() -> Self {
        Self { randomness_file: None, beaver_cases: 10_000, share_cases: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomnessSection {
    /// Number of inferences the generated file covers.
    pub inferences: usize,
    pub file: PathBuf,
}

impl Default for RandomnessSection {
    fn default() -> Self {
        Self { inferences: 5, file: PathBuf::from("randomness.smpcfrnd") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ring: FixedPointConfig,
    /// Link preset: "6g" or "4g".
    pub link: String,
    pub output_dir: PathBuf,
    /// Fill the wall_ms CSV columns. Off by default so that outputs are
    /// byte-identical across reruns.
    pub record_wall_time: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub selftest: SelftestSection,
    pub randomness: RandomnessSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            ring: FixedPointConfig::default(),
            link: "6g".into(),
            output_dir: PathBuf::from("smpc-out"),
            record_wall_time: false,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
            selftest: SelftestSection::default(),
            randomness: RandomnessSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Syntax and schema errors carry the line and
    /// column reported by the parser.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        fn bad<T>(field: &str, why: String) -> Result<T> {
            Err(Error::Config(format!("field `{field}`: {why}")))
        }
        LinkModel::preset(&self.link).or_else(|e| bad("link", e.to_string()))?;
        self.data.blobs.validate().or_else(|e| bad("data.blobs", e.to_string()))?;
        if self.data.source == DataSource::Pgm && self.data.root.is_none() {
            return bad("data.root", "required when data.source is \"pgm\"".into());
        }
        if self.data.validation_samples == 0 || self.data.test_samples == 0 {
            return bad("data", "validation_samples and test_samples must be positive".into());
        }
        if self.data.source == DataSource::Synthetic && self.data.train_samples < self.train.hospitals {
            return bad("data.train_samples", format!("fewer samples than the {} hospitals", self.train.hospitals));
        }
        if self.model.filters == 0 || self.model.hidden == 0 {
            return bad("model", "filters and hidden must be positive".into());
        }
        self.training().validate().or_else(|e| bad("train", e.to_string()))?;
        if self.infer.batch_sizes.is_empty() || self.infer.batch_sizes.contains(&0) {
            return bad("infer.batch_sizes", "must be a non-empty list of positive sizes".into());
        }
        if !(self.infer.compute_ops_per_sec > 0.0) {
            return bad("infer.compute_ops_per_sec", "must be positive (use 1e300 for free compute)".into());
        }
        if self.selftest.beaver_cases == 0 || self.selftest.share_cases == 0 {
            return bad("selftest", "case counts must be positive".into());
        }
        if self.randomness.inferences == 0 {
            return bad("randomness.inferences", "must be positive".into());
        }
        Ok(())
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.seed,
            hospitals: self.train.hospitals,
        }
    }

    pub fn link_model(&self) -> LinkModel {
        LinkModel::preset(&self.link).expect("validated")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.infer.model_dir.clone().unwrap_or_else(|| self.output_dir.clone())
    }
}
