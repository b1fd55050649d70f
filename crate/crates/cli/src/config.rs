//! Experiment configuration (TOML).

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::preset::EnvPreset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Musik,
    MusikTab,
    MusikComp,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Musik => "musik",
            Algorithm::MusikTab => "musik-tab",
            Algorithm::MusikComp => "musik-comp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Planner {
    None,
    Psdp,
}

/// Samples per regression: a number, or `"auto"` for the theory-driven size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSize {
    Fixed(usize),
    Auto,
}

impl Serialize for SampleSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SampleSize::Fixed(n) => s.serialize_u64(*n as u64),
            SampleSize::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = SampleSize;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or \"auto\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<SampleSize, E> {
                if v < 1 {
                    return Err(E::custom(format!("n must be at least 1, got {v}")));
                }
                Ok(SampleSize::Fixed(v as usize))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<SampleSize, E> {
                self.visit_i64(v as i64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<SampleSize, E> {
                match v {
                    "auto" => Ok(SampleSize::Auto),
                    _ => Err(E::custom(format!("expected \"auto\", got \"{v}\""))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// `"exact"` or `"mc:<episodes>"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalSetting {
    Exact,
    MonteCarlo(usize),
}

impl TryFrom<String> for EvalSetting {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "exact" {
            return Ok(EvalSetting::Exact);
        }
        match s.strip_prefix("mc:").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(EvalSetting::MonteCarlo(n)),
            _ => Err(format!("eval must be \"exact\" or \"mc:<episodes>\", got \"{s}\"")),
        }
    }
}

impl From<EvalSetting> for String {
    fn from(e: EvalSetting) -> String {
        match e {
            EvalSetting::Exact => "exact".into(),
            EvalSetting::MonteCarlo(n) => format!("mc:{n}"),
        }
    }
}

/// One experiment. Every field except `env` and `seeds` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `comblock:H=<h>[,A=<a>][,noise=<sigma>]`, `random:<spec path>` or `model:<model path>`.
    pub env: EnvPreset,
    #[serde(default = "defaults::algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "defaults::planner")]
    pub planner: Planner,
    /// Samples per exploration regression.
    #[serde(default = "defaults::n")]
    pub n: SampleSize,
    /// Samples per PSDP regression; defaults to the exploration size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psdp_n: Option<usize>,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    /// Constant in the automatic sample size.
    #[serde(default = "defaults::c")]
    pub c: f64,
    /// Cover quality factor used for `cover_pass_fraction`.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Decoys added to the true decoder.
    #[serde(default = "defaults::decoys")]
    pub decoys: usize,
    /// Fraction of observations each decoy relabels.
    #[serde(default = "defaults::corruption")]
    pub corruption: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::eval")]
    pub eval: EvalSetting,
    /// Add evaluation episodes to `episodes_used`.
    #[serde(default)]
    pub count_eval_episodes: bool,
    /// Fill `wall_ms`; off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "defaults::output")]
    pub output: PathBuf,
}

mod defaults {
    use super::*;

    pub fn algorithm() -> Algorithm {
        Algorithm::Musik
    }
    pub fn planner() -> Planner {
        Planner::Psdp
    }
    pub fn n() -> SampleSize {
        SampleSize::Fixed(2000)
    }
    pub fn eps() -> f64 {
        0.05
    }
    pub fn delta() -> f64 {
        0.1
    }
    pub fn c() -> f64 {
        1e-9
    }
    pub fn alpha() -> f64 {
        0.25
    }
    pub fn decoys() -> usize {
        31
    }
    pub fn corruption() -> f64 {
        0.3
    }
    pub fn eval() -> EvalSetting {
        EvalSetting::MonteCarlo(50)
    }
    pub fn output() -> PathBuf {
        PathBuf::from("results")
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "comblock:H=3".parse().expect("valid preset"),
            algorithm: defaults::algorithm(),
            planner: defaults::planner(),
            n: defaults::n(),
            psdp_n: None,
            eps: defaults::eps(),
            delta: defaults::delta(),
            c: defaults::c(),
            alpha: defaults::alpha(),
            decoys: defaults::decoys(),
            corruption: defaults::corruption(),
            seeds: vec![0, 1, 2, 3, 4],
            eval: defaults::eval(),
            count_eval_episodes: false,
            timing: false,
            output: defaults::output(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("field `seeds`: at least one seed is required");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            bail!("field `eps`: {} is outside (0, 1)", self.eps);
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            bail!("field `delta`: {} is outside (0, 1)", self.delta);
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            bail!("field `alpha`: {} is outside (0, 1]", self.alpha);
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            bail!("field `corruption`: {} is outside [0, 1]", self.corruption);
        }
        if self.psdp_n == Some(0) {
            bail!("field `psdp_n`: must be at least 1");
        }
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}

pub fn default_config_toml() -> String {
    toml::to_string(&ExperimentConfig::default()).expect("config serializes")
}
