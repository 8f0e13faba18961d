//! Experiment configuration: named dataset profiles, layered overrides and
//! the content hash that names a run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federated::FedConfig;
use crate::model::{Activation, ModelConfig};
use crate::pipeline::PipelineConfig;
use crate::scalogram::AugmentationSpec;
use crate::signal::NoiseLevel;
use crate::training::{derive_seed, Balance, SchedulerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Ecgid,
    Mitbih,
    Cybhi,
    Ptb,
    Synthetic,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::Ecgid,
        Profile::Mitbih,
        Profile::Cybhi,
        Profile::Ptb,
        Profile::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Ecgid => "ecgid",
            Profile::Mitbih => "mitbih",
            Profile::Cybhi => "cybhi",
            Profile::Ptb => "ptb",
            Profile::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown profile {s:?}; expected one of ecgid, mitbih, cybhi, ptb, synthetic"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub beats_per_subject: usize,
    pub fs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 5,
            beats_per_subject: 200,
            fs: 500.0,
        }
    }
}

/// Switches for optional pipeline stages, applied on top of the module
/// settings when the configuration is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub filter: bool,
    pub resample: bool,
    pub noise: bool,
    pub augment: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            filter: true,
            resample: true,
            noise: true,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilons: Vec<f64>,
    pub batch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 1e-4, 1e-3, 1e-1],
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Master seed, copied into the training and federated settings.
    pub seed: u64,
    pub synth: SynthConfig,
    pub stages: StageToggles,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub federated: FedConfig,
}

fn scopes(names: &[&str], l: f64) -> BTreeMap<String, f64> {
    names.iter().map(|n| (n.to_string(), l)).collect()
}

const BACKBONE_AND_HEAD: [&str; 5] = ["stem", "blocks", "proj", "fc1", "head"];

impl ExperimentConfig {
    /// Defaults for a dataset profile.
    pub fn profile(profile: Profile) -> Self {
        let mut c = Self {
            profile,
            seed: 0,
            synth: SynthConfig::default(),
            stages: StageToggles::default(),
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            federated: FedConfig::default(),
        };
        c.pipeline.preprocess.noise = NoiseLevel::SnrDb(20.0);
        c.train.augmentation = AugmentationSpec::default();
        let seg = &mut c.pipeline.segmentation;
        match profile {
            Profile::Ecgid | Profile::Mitbih => {
                c.pipeline.preprocess.target_fs = Some(100.0);
                seg.min_distance_s = 0.6;
                seg.window_ms = 250.0;
                c.model.dropout_p = 0.35;
                c.model.activation = Activation::Relu;
                c.model.gru_units = 128;
                c.train.lr = 1e-4;
                c.train.batch_size = 64;
                c.train.scheduler = SchedulerConfig {
                    patience: 5,
                    factor: 0.1,
                    min_lr: 1e-8,
                };
                if profile == Profile::Ecgid {
                    c.train.epochs = 100;
                    c.model.l2_scopes = scopes(&BACKBONE_AND_HEAD, 0.01);
                    c.train.balance = Balance::ClassWeights;
                } else {
                    c.train.epochs = 50;
                    let mut s = scopes(&BACKBONE_AND_HEAD, 0.01);
                    s.insert("gru.w_input".into(), 0.01);
                    c.model.l2_scopes = s;
                    c.train.balance = Balance::PreBalanced;
                }
            }
            Profile::Cybhi | Profile::Ptb => {
                c.pipeline.preprocess.target_fs = Some(250.0);
                seg.min_distance_s = 4.0;
                c.model.dropout_p = 0.0;
                c.model.activation = Activation::LeakyRelu;
                c.train.balance = Balance::ClassWeights;
                if profile == Profile::Cybhi {
                    seg.window_ms = 250.0;
                    c.model.gru_units = 64;
                    c.model.l2_scopes = scopes(&["gru.w_input"], 0.01);
                    c.train.epochs = 80;
                    c.train.lr = 1e-4;
                    c.train.batch_size = 8;
                    c.train.scheduler = SchedulerConfig {
                        patience: 5,
                        factor: 0.1,
                        min_lr: 1e-6,
                    };
                } else {
                    seg.window_ms = 500.0;
                    c.model.gru_units = 128;
                    c.model.l2_scopes = BTreeMap::new();
                    c.train.epochs = 100;
                    c.train.lr = 1e-3;
                    c.train.batch_size = 16;
                    c.train.scheduler = SchedulerConfig {
                        patience: 8,
                        factor: 0.1,
                        min_lr: 1e-6,
                    };
                }
            }
            Profile::Synthetic => {
                c.pipeline.preprocess.target_fs = Some(250.0);
                seg.min_distance_s = 0.6;
                seg.window_ms = 250.0;
                c.pipeline.scalogram.image_size = 32;
                c.model = ModelConfig {
                    input_size: 32,
                    feature_dim: 64,
                    gru_units: 32,
                    fc_units: 32,
                    backbone_width: 0.25,
                    ..ModelConfig::default()
                };
                c.train.epochs = 30;
                c.train.lr = 1e-3;
                c.train.batch_size = 32;
                c.train.scheduler = SchedulerConfig {
                    patience: 5,
                    factor: 0.5,
                    min_lr: 1e-6,
                };
                c.train.balance = Balance::ClassWeights;
                c.federated.local_epochs = 1;
                c.federated.rounds = 10;
            }
        }
        c.model.input_size = c.pipeline.scalogram.image_size;
        c
    }

    /// Layers `overrides` (a TOML table, possibly naming a profile) over the
    /// defaults of `profile`, or of the profile named in the table.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table, profile)
    }

    pub fn from_table(table: toml::Table, profile: Option<Profile>) -> Result<Self> {
        let named = match table.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => None,
        };
        let profile = profile.or(named).unwrap_or(Profile::Synthetic);
        let mut base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, table);
        base.insert("profile".into(), toml::Value::String(profile.name().into()));
        let c: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.resolve()
    }

    /// Applies a `dotted.key=value` override; the value is parsed as TOML
    /// and taken as a bare string when that fails.
    pub fn with_override(self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut table = toml::Table::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        let mut cursor = &mut table;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for p in &parts[..parts.len() - 1] {
            cursor = match cursor
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            {
                toml::Value::Table(t) => t,
                _ => return Err(Error::Config(format!("{key}: {p} is not a table"))),
            };
        }
        cursor.insert(parts[parts.len() - 1].to_string(), value);
        let c: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        if c.profile != self.profile {
            return Err(Error::Usage(
                "the profile cannot be changed by an override; pass it as the profile instead".into(),
            ));
        }
        c.resolve()
    }

    /// Applies the stage toggles and derived seeds, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        if !self.stages.noise {
            self.pipeline.preprocess.noise = NoiseLevel::Off;
        }
        if !self.stages.resample {
            self.pipeline.preprocess.target_fs = None;
        }
        self.pipeline.preprocess.filter = self.stages.filter;
        self.train.augmentation.enabled = self.stages.augment;
        self.train.seed = self.seed;
        self.federated.seed = self.seed;
        self.model.input_size = self.pipeline.scalogram.image_size;
        self.validate()?;
        Ok(self)
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, &[1])
    }

    pub fn pipeline_seed(&self) -> u64 {
        derive_seed(self.seed, &[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed must fit in a signed 64-bit integer, got {}",
                self.seed
            )));
        }
        self.train.validate()?;
        let mut model = self.model.clone();
        model.n_classes = model.n_classes.max(2);
        model.validate()?;
        if self.pipeline.scalogram.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        if self.synth.subjects < 2 {
            return Err(Error::Config("synthetic data needs at least 2 subjects".into()));
        }
        let r = self.pipeline.split_ratios;
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {r:?}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursive table merge; scalars and arrays in `over` replace those in `base`.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_carry_their_table_values() {
        let e = ExperimentConfig::profile(Profile::Ecgid);
        assert_eq!(e.pipeline.preprocess.target_fs, Some(100.0));
        assert_eq!((e.train.epochs, e.train.batch_size, e.train.lr), (100, 64, 1e-4));
        assert_eq!(e.model.dropout_p, 0.35);
        let m = ExperimentConfig::profile(Profile::Mitbih);
        assert_eq!(m.train.balance, Balance::PreBalanced);
        assert_eq!(m.model.l2_scopes.get("gru.w_input"), Some(&0.01));
        let c = ExperimentConfig::profile(Profile::Cybhi);
        assert_eq!((c.model.gru_units, c.train.batch_size), (64, 8));
        assert_eq!(c.model.activation, Activation::LeakyRelu);
        assert_eq!(c.pipeline.segmentation.min_distance_s, 4.0);
        let p = ExperimentConfig::profile(Profile::Ptb);
        assert_eq!((p.train.scheduler.patience, p.train.lr), (8, 1e-3));
        assert_eq!(p.pipeline.segmentation.window_ms, 500.0);
        assert!(p.model.l2_scopes.is_empty());
        for profile in Profile::ALL {
            assert!(ExperimentConfig::profile(profile).resolve().is_ok(), "{profile}");
        }
    }

    #[test]
    fn toml_layers_and_rejects_unknown_keys() {
        let c = ExperimentConfig::from_toml("profile = \"ptb\"\n[train]\nepochs = 3\n", None).unwrap();
        assert_eq!(c.profile, Profile::Ptb);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 16);
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n", None).is_err());
        assert!(ExperimentConfig::from_toml("profile = \"nope\"\n", None).is_err());
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = ExperimentConfig::from_toml("", Some(Profile::Synthetic)).unwrap();
        let c = c
            .with_override("train.epochs=2")
            .unwrap()
            .with_override("stages.noise=false")
            .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.pipeline.preprocess.noise, NoiseLevel::Off);
        let again = ExperimentConfig::from_toml(&c.to_toml(), None).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_ne!(c.with_override("seed=9").unwrap().hash(), again.hash());
    }
}
