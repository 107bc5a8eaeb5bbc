//! TOML experiment files and command-line overrides.
//!
//! A config file is a TOML rendering of [`RunConfig`]; every field is optional
//! and falls back to its default. Unknown keys are rejected. Example:
//!
//! ```toml
//! algorithm = "fedback"
//! clients = 100
//! rounds = 2000
//! target_load = 0.1
//! seed = 7
//!
//! [gains]
//! gain = 2.0
//! alpha = 0.9
//!
//! [data]
//! task = "regression"
//! samples = 5000
//! features = 10
//!
//! [partition]
//! scheme = "dirichlet"
//! beta = 0.5
//! ```

use std::path::Path;

use crate::controller::ControllerGains;
use crate::engine::{Algorithm, RunConfig};
use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub target_load: Option<f64>,
    pub rho: Option<f64>,
    pub gain: Option<f64>,
    pub alpha: Option<f64>,
    pub record_clients: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(a) = self.algorithm {
            cfg.algorithm = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(n) = self.clients {
            if cfg.targets.as_ref().is_some_and(|t| t.len() != n) {
                return Err(Error::Config(format!(
                    "--clients {n} conflicts with {} per-client targets in the config",
                    cfg.targets.as_ref().map_or(0, Vec::len)
                )));
            }
            cfg.clients = n;
        }
        if let Some(l) = self.target_load {
            cfg.target_load = l;
            cfg.targets = None;
        }
        if let Some(r) = self.rho {
            cfg.rho = Some(r);
        }
        if self.gain.is_some() || self.alpha.is_some() {
            cfg.gains = ControllerGains::new(
                self.gain.unwrap_or(cfg.gains.gain),
                self.alpha.unwrap_or(cfg.gains.alpha),
            )?;
        }
        if let Some(r) = self.record_clients {
            cfg.record_clients = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
