//! Run configuration: a TOML document with one table per component.
//!
//! ```toml
//! profile = "desk"        # defaults for every unset key
//! [synthetic]             # SyntheticConfig
//! [features]              # FeatureConfig
//! [model]                 # ModelConfig
//! [train]                 # TrainConfig
//! [eval]                  # bootstrap_n, bootstrap_seed
//! ```
//!
//! Keys left out take the profile's default. Unknown keys and ill-typed
//! values are rejected with the dotted path of the offending field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SyntheticConfig;
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Profile};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_n: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_n: 1000,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub synthetic: SyntheticConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        RunConfig {
            profile,
            synthetic: SyntheticConfig::default(),
            features: match profile {
                Profile::Desk => FeatureConfig::desk(),
                Profile::Paper => FeatureConfig::paper(),
            },
            model: ModelConfig::for_profile(profile),
            train: TrainConfig::for_profile(profile),
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text` over the defaults of its profile. `profile` overrides
    /// the document's own `profile` key.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {}", e.message())))?;
        let profile = match (profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, None) => Profile::Desk,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(v)) => {
                return Err(Error::Config(format!("profile: expected \"desk\" or \"paper\", got {v}")));
            }
        };
        let mut merged = Self::for_profile(profile).to_table();
        merge(&mut merged, user, "")?;
        merged.insert("profile".into(), Value::String(profile.as_str().into()));
        let section = |key: &str| merged.get(key).cloned().unwrap_or(Value::Table(Table::new()));
        fn parse<T: for<'de> Deserialize<'de>>(key: &str, v: Value) -> Result<T> {
            v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))
        }
        let cfg = RunConfig {
            profile,
            synthetic: parse("synthetic", section("synthetic"))?,
            features: parse("features", section("features"))?,
            model: parse("model", section("model"))?,
            train: parse("train", section("train"))?,
            eval: parse("eval", section("eval"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, profile)
    }

    fn to_table(&self) -> Table {
        Table::try_from(self).expect("run config serialises to a table")
    }

    /// Full effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Seeds the corpus generator and the training run.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.bootstrap_n == 0 {
            return Err(Error::Config("eval.bootstrap_n must be positive".into()));
        }
        Ok(())
    }
}

/// Overlays `user` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Table, user: Table, path: &str) -> Result<()> {
    for (key, value) in user {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{full}`"))),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &full)?,
            (Some(Value::Table(_)), v) => {
                return Err(Error::Config(format!("`{full}` must be a table, got {}", v.type_str())));
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}
