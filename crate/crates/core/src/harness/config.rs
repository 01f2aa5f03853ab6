use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, EvalConfig};
use crate::backbone::{BackboneConfig, HeadKind};
use crate::data::{generate_synthetic_drift, import_features, DatasetIndex, DriftConfig, SplitKind};
use crate::error::{Error, Result};
use crate::fsl::{EpisodeShape, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(DriftConfig),
    /// Path to a feature manifest, relative paths resolved against the config file.
    Import { manifest: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(DriftConfig::default())
    }
}

/// Backbone widths; input shape and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSettings {
    /// Defaults to one channel per band.
    pub g2g_channels: Option<usize>,
    pub conv_channels: [usize; 4],
    /// Defaults to the embedding width.
    pub adapter_hidden: Option<usize>,
    pub matching_temperature: f64,
    pub relation_hidden: usize,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        let d = BackboneConfig::default();
        Self {
            g2g_channels: None,
            conv_channels: d.conv_channels,
            adapter_hidden: None,
            matching_temperature: d.matching_temperature,
            relation_hidden: d.relation_hidden,
        }
    }
}

impl BackboneSettings {
    pub fn resolve(&self, ds: &DatasetIndex, head_kind: HeadKind) -> Result<BackboneConfig> {
        let schema = ds.schema();
        let embedding_dim = self.conv_channels[3];
        let cfg = BackboneConfig {
            n_electrodes: schema.electrodes,
            d_bands: schema.bands,
            g2g_channels: self.g2g_channels.unwrap_or(schema.bands),
            conv_channels: self.conv_channels,
            embedding_dim,
            adapter_hidden: self.adapter_hidden.unwrap_or(embedding_dim),
            head_kind,
            num_classes: ds.num_classes(),
            matching_temperature: self.matching_temperature,
            relation_hidden: self.relation_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Episodes per evaluated cell.
    pub episodes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            way: 3,
            shot: 1,
            queries: 10,
            episodes: 200,
        }
    }
}

impl EvalSettings {
    pub fn eval_config(&self, shot: usize, seed: u64) -> EvalConfig {
        EvalConfig {
            shape: EpisodeShape {
                way: self.way,
                shot,
                queries: self.queries,
            },
            episodes: self.episodes,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub protocol: SplitKind,
    pub backbone: BackboneSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub adapt: AdaptConfig,
    /// Master seed; every cell derives its own seeds from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Shot counts evaluated by protocol runs and sweeps.
    pub shots: Vec<usize>,
    /// Restricts the subjects evaluated (test subjects for the inter protocol).
    pub subjects: Option<Vec<u32>>,
    /// Sessions looped over by the inter protocol; all sessions when unset.
    pub sessions: Option<Vec<u32>>,
    /// Also train and report the supervised baseline.
    pub supervised: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            protocol: SplitKind::Intra,
            backbone: BackboneSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            adapt: AdaptConfig::default(),
            seed: 0,
            output_dir: None,
            shots: vec![1, 5],
            subjects: None,
            sessions: None,
            supervised: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; a relative import manifest is resolved against the
    /// config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        if let DatasetSource::Import { manifest } = &mut cfg.dataset {
            if manifest.is_relative() {
                if let Some(dir) = path.parent() {
                    *manifest = dir.join(&*manifest);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.adapt.validate()?;
        if !self.train.head_kind.is_episodic() {
            return Err(Error::config("train.head_kind must be matching, relation or proto"));
        }
        let e = &self.eval;
        if e.way == 0 || e.shot == 0 || e.queries == 0 || e.episodes == 0 {
            return Err(Error::config("eval: way, shot, queries and episodes must be >= 1"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("shots must be a non-empty list of positive counts"));
        }
        if let DatasetSource::Synthetic(d) = &self.dataset {
            d.validate()?;
        }
        Ok(())
    }

    /// Checks against a loaded dataset.
    pub fn validate_for(&self, ds: &DatasetIndex) -> Result<()> {
        self.validate()?;
        let k = ds.num_classes();
        for (what, way) in [("eval.way", self.eval.way), ("train.way", self.train.way)] {
            if way > k {
                return Err(Error::config(format!("{what} = {way} exceeds the {k} dataset classes")));
            }
        }
        self.backbone_config(ds)?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<DatasetIndex> {
        match &self.dataset {
            DatasetSource::Synthetic(d) => generate_synthetic_drift(d),
            DatasetSource::Import { manifest } => import_features(manifest),
        }
    }

    pub fn backbone_config(&self, ds: &DatasetIndex) -> Result<BackboneConfig> {
        self.backbone.resolve(ds, self.train.head_kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset": {"kind": "synthetic", "num_subjects": 2}, "protocol": "inter", "seed": 4}"#,
        )
        .unwrap();
        assert_eq!(cfg.protocol, SplitKind::Inter);
        assert_eq!(cfg.eval.episodes, 200);
        let DatasetSource::Synthetic(d) = &cfg.dataset else { panic!() };
        assert_eq!(d.num_subjects, 2);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn way_larger_than_classes_is_rejected() {
        let cfg = ExperimentConfig {
            eval: EvalSettings {
                way: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = cfg.load_dataset().unwrap();
        assert!(matches!(cfg.validate_for(&ds), Err(Error::Config(_))));
    }

    #[test]
    fn empty_shots_rejected() {
        let cfg = ExperimentConfig {
            shots: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_field_in_dataset_kind_fails() {
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"dataset": {"kind": "weird"}}"#);
        assert!(r.is_err());
    }
}
