//! Run configuration for `infer`: the sampler hyperparameters plus run-level keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spikemix::dpm::Hyperparams;
use spikemix::io::Domain;
use spikemix::{Error, Result};

const RUN_KEYS: [&str; 5] = ["seed", "workers", "domain", "data", "out"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub hyper: Hyperparams,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Required domain of the dataset, if set.
    pub domain: Option<Domain>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { hyper: Hyperparams::default(), seed: 1, workers: None, domain: None, data: None, out: None }
    }
}

fn config_error(message: String) -> Error {
    Error::InvalidParameter(message)
}

impl RunConfig {
    /// Parses a JSON object, splitting run-level keys from hyperparameters;
    /// any key known to neither is an error.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Format { line: e.line(), message: e.to_string() })?;
        let Value::Object(mut map) = value else {
            return Err(config_error("config must be a JSON object".into()));
        };
        let mut run = Map::new();
        for key in RUN_KEYS {
            if let Some(v) = map.remove(key) {
                run.insert(key.into(), v);
            }
        }
        let hyper: Hyperparams = serde_json::from_value(Value::Object(map)).map_err(|e| config_error(e.to_string()))?;

        #[derive(Deserialize)]
        struct RunKeys {
            #[serde(default = "default_seed")]
            seed: u64,
            workers: Option<usize>,
            domain: Option<Domain>,
            data: Option<PathBuf>,
            out: Option<PathBuf>,
        }
        fn default_seed() -> u64 {
            1
        }
        let keys: RunKeys = serde_json::from_value(Value::Object(run)).map_err(|e| config_error(e.to_string()))?;
        let cfg = RunConfig { hyper, seed: keys.seed, workers: keys.workers, domain: keys.domain, data: keys.data, out: keys.out };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_json_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.workers == Some(0) {
            return Err(config_error("workers must be at least 1".into()));
        }
        Ok(())
    }
}
