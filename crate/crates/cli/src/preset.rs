//! Environment presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use musik_core::envs::{make_comblock, make_random_bmdp, CombLockSpec, RandomBmdpSpec};
use musik_core::BlockMdp;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvPreset {
    /// Combination lock; its good actions are drawn from the run seed.
    CombLock { horizon: usize, actions: usize, noise: f64 },
    /// Random model from a spec file; the instance seed is the spec seed plus the run seed.
    Random(PathBuf),
    /// A fixed model file, identical for every seed.
    Model(PathBuf),
}

/// A concrete environment for one run.
#[derive(Clone, Debug)]
pub struct Env {
    pub model: BlockMdp,
    pub is_comblock: bool,
}

impl FromStr for EnvPreset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| anyhow!("preset `{s}` has no `kind:` prefix"))?;
        match kind {
            "comblock" => {
                let (mut horizon, mut actions, mut noise) = (None, 10, 0.0);
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = part.split_once('=').ok_or_else(|| anyhow!("expected key=value, got `{part}`"))?;
                    match k.trim() {
                        "H" => horizon = Some(v.trim().parse().with_context(|| format!("bad H `{v}`"))?),
                        "A" => actions = v.trim().parse().with_context(|| format!("bad A `{v}`"))?,
                        "noise" => noise = v.trim().parse().with_context(|| format!("bad noise `{v}`"))?,
                        other => bail!("unknown comblock key `{other}` (expected H, A or noise)"),
                    }
                }
                let horizon = horizon.ok_or_else(|| anyhow!("comblock preset needs H=<horizon>"))?;
                if horizon < 2 || actions < 2 {
                    bail!("comblock needs H >= 2 and A >= 2");
                }
                if !(noise >= 0.0 && f64::is_finite(noise)) {
                    bail!("noise must be a non-negative number");
                }
                Ok(EnvPreset::CombLock { horizon, actions, noise })
            }
            "random" if !rest.is_empty() => Ok(EnvPreset::Random(PathBuf::from(rest))),
            "model" if !rest.is_empty() => Ok(EnvPreset::Model(PathBuf::from(rest))),
            "random" | "model" => bail!("preset `{kind}:` needs a file path"),
            other => bail!("unknown preset kind `{other}` (expected comblock, random or model)"),
        }
    }
}

impl fmt::Display for EnvPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvPreset::CombLock { horizon, actions, noise } => {
                write!(f, "comblock:H={horizon}")?;
                if *actions != 10 {
                    write!(f, ",A={actions}")?;
                }
                if *noise > 0.0 {
                    write!(f, ",noise={noise}")?;
                }
                Ok(())
            }
            EnvPreset::Random(p) => write!(f, "random:{}", p.display()),
            EnvPreset::Model(p) => write!(f, "model:{}", p.display()),
        }
    }
}

impl TryFrom<String> for EnvPreset {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: anyhow::Error| format!("{e:#}"))
    }
}

impl From<EnvPreset> for String {
    fn from(p: EnvPreset) -> String {
        p.to_string()
    }
}

pub fn read_random_spec(path: &Path) -> Result<RandomBmdpSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    Ok(spec)
}

pub fn read_model(path: &Path) -> Result<BlockMdp> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model = BlockMdp::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let report = model.validate();
    if !report.is_valid() {
        bail!("{} is not a valid Block MDP: {:?}", path.display(), report.violations);
    }
    Ok(model)
}

impl EnvPreset {
    pub fn horizon_hint(&self) -> Option<usize> {
        match self {
            EnvPreset::CombLock { horizon, .. } => Some(*horizon),
            _ => None,
        }
    }

    pub fn instantiate(&self, seed: u64) -> Result<Env> {
        match self {
            EnvPreset::CombLock { horizon, actions, noise } => {
                let mut spec = CombLockSpec::new(*horizon, seed);
                spec.num_actions = *actions;
                if *noise > 0.0 {
                    bail!("the noisy combination lock is sampling-only; exploration needs noise=0");
                }
                let model = make_comblock(&spec)?.into_model()?;
                Ok(Env { model, is_comblock: true })
            }
            EnvPreset::Random(path) => {
                let mut spec = read_random_spec(path)?;
                spec.seed = spec.seed.wrapping_add(seed);
                Ok(Env { model: make_random_bmdp(&spec)?.0, is_comblock: false })
            }
            EnvPreset::Model(path) => Ok(Env { model: read_model(path)?, is_comblock: false }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_text() {
        for s in ["comblock:H=5", "comblock:H=8,A=4,noise=0.1", "random:specs/a.json", "model:m.json"] {
            assert_eq!(s.parse::<EnvPreset>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn bad_presets_are_rejected() {
        for s in ["comblock:A=3", "comblock:H=3,X=1", "cartpole:H=3", "random:", "comblock"] {
            assert!(s.parse::<EnvPreset>().is_err(), "{s}");
        }
    }
}
