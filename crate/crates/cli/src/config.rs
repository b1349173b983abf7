//! Run configuration: a flat `key = value` file overlaid by command-line flags.
//!
//! Lists are comma separated; `#` starts a comment. Every key has a default
//! except `seed`, which must be given explicitly so that no run ever depends
//! on the wall clock.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use smplab_core::{
    ConstantRate, ControlPolicy, ExampleModel, LinearDriverModel, LinearSchedule, Model,
    PriceProportional, TwapCapped,
};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// GBM factor, proceeds `pi x`, no terminal reward.
    Example,
    /// Proceeds `pi x + a q` and terminal reward `b q`.
    LinearOracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyChoice {
    Twap,
    Constant,
    PriceProportional,
    TimeToHorizon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// Fully resolved settings of one run.
///
/// Output location, format and the dry-run switch are not part of the
/// hashed configuration: they do not change any number.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelChoice,
    pub policy: PolicyChoice,
    /// Rate of the constant policy, or `kappa` of the price-proportional one.
    pub policy_level: f64,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub c_plus: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub x: f64,
    pub q: Vec<f64>,
    pub t: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub theta_fraction: f64,
    pub theta_levels: usize,
    pub adjoint_paths: usize,
    pub adjoint_steps: usize,
    pub nt: usize,
    pub nq: usize,
    pub q_max: f64,
    pub export_paths: bool,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub format: Format,
}

/// Values supplied on the command line; they override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub nt: Option<usize>,
    pub nq: Option<usize>,
    pub q_max: Option<f64>,
    pub c_plus: Option<f64>,
    pub horizon: Option<f64>,
}

const KEYS: &[&str] = &[
    "model",
    "policy",
    "policy_level",
    "a",
    "b",
    "horizon",
    "c_plus",
    "steps",
    "paths",
    "seed",
    "x",
    "q",
    "t",
    "c_bar",
    "theta_fraction",
    "theta_levels",
    "adjoint_paths",
    "adjoint_steps",
    "nt",
    "nq",
    "q_max",
    "export_paths",
    "out",
    "format",
];

/// Parses `key = value` lines, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!(
                "line {}: unknown key `{key}`",
                n + 1
            )));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!(
                "line {}: `{key}` given twice",
                n + 1
            )));
        }
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    let list = value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if list.is_empty() {
        return Err(CliError::Config(format!("`{key}` must not be empty")));
    }
    Ok(list)
}

fn default_c_bars() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 5.0).collect()
}

impl RunConfig {
    /// Resolves the configuration from an optional file plus flag overrides.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => BTreeMap::new(),
        };
        Self::from_pairs(&pairs, flags)
    }

    pub fn from_pairs(
        pairs: &BTreeMap<String, String>,
        flags: &Overrides,
    ) -> Result<Self, CliError> {
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let model = match get("model").unwrap_or("example") {
            "example" => ModelChoice::Example,
            "linear-oracle" | "linear_oracle" => ModelChoice::LinearOracle,
            other => return Err(CliError::Config(format!("unknown model `{other}`"))),
        };
        let default_policy = match model {
            ModelChoice::Example => "twap",
            ModelChoice::LinearOracle => "constant",
        };
        let policy = match get("policy").unwrap_or(default_policy) {
            "twap" => PolicyChoice::Twap,
            "constant" => PolicyChoice::Constant,
            "price-proportional" | "price_proportional" => PolicyChoice::PriceProportional,
            "time-to-horizon" | "time_to_horizon" => PolicyChoice::TimeToHorizon,
            other => return Err(CliError::Config(format!("unknown policy `{other}`"))),
        };
        let num = |k: &str, d: f64| get(k).map_or(Ok(d), |v| parse::<f64>(k, v));
        let count = |k: &str, d: usize| get(k).map_or(Ok(d), |v| parse::<usize>(k, v));
        let list = |k: &str, d: Vec<f64>| get(k).map_or(Ok(d), |v| parse_list(k, v));

        let seed = match (flags.seed, get("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => parse("seed", v)?,
            (None, None) => {
                return Err(CliError::Config(
                    "a seed is required (`--seed N` or `seed = N` in the config file)".into(),
                ))
            }
        };
        let config = Self {
            model,
            policy,
            policy_level: num(
                "policy_level",
                if policy == PolicyChoice::Constant {
                    0.1
                } else {
                    1.0
                },
            )?,
            a: num("a", 0.3)?,
            b: num("b", 0.7)?,
            horizon: flags.horizon.map_or_else(|| num("horizon", 1.0), Ok)?,
            c_plus: flags.c_plus.map_or_else(|| num("c_plus", 2.0), Ok)?,
            steps: flags.steps.map_or_else(|| count("steps", 1000), Ok)?,
            paths: flags.paths.map_or_else(|| count("paths", 10_000), Ok)?,
            seed,
            x: num("x", 1.0)?,
            q: list("q", vec![0.5])?,
            t: list("t", vec![0.0])?,
            c_bar: list("c_bar", default_c_bars())?,
            theta_fraction: num("theta_fraction", 0.1)?,
            theta_levels: count("theta_levels", 5)?,
            adjoint_paths: count("adjoint_paths", 10_000)?,
            adjoint_steps: count("adjoint_steps", 50)?,
            nt: flags.nt.map_or_else(|| count("nt", 401), Ok)?,
            nq: flags.nq.map_or_else(|| count("nq", 401), Ok)?,
            q_max: flags.q_max.map_or_else(|| num("q_max", 4.0), Ok)?,
            export_paths: get("export_paths").map_or(Ok(false), |v| parse("export_paths", v))?,
            out: flags
                .out
                .clone()
                .or_else(|| get("out").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("smplab-out")),
            format: match flags.format {
                Some(f) => f,
                None => get("format").map_or(Ok(Format::Csv), |v| parse("format", v))?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive");
        }
        if !(self.c_plus > 0.0) {
            return bad("c_plus must be positive");
        }
        if self.steps == 0 || self.paths == 0 {
            return bad("steps and paths must be positive");
        }
        if self.theta_levels < 2 || !(self.theta_fraction > 0.0 && self.theta_fraction < 1.0) {
            return bad("theta_levels must be at least 2 and theta_fraction in (0, 1)");
        }
        if self.t.iter().any(|&t| !(0.0..self.horizon).contains(&t)) {
            return bad("every t must lie in [0, horizon)");
        }
        if self.q.iter().any(|&q| !(q > 0.0)) {
            return bad("every q must be positive");
        }
        if self
            .c_bar
            .iter()
            .any(|&c| !(0.0..=self.c_plus).contains(&c))
        {
            return bad("every c_bar must lie in [0, c_plus]");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the numerical settings.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration serialises");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model(&self) -> Box<dyn Model> {
        match self.model {
            ModelChoice::Example => Box::new(ExampleModel),
            ModelChoice::LinearOracle => Box::new(LinearDriverModel {
                a: self.a,
                b: self.b,
            }),
        }
    }

    pub fn policy(&self) -> Box<dyn ControlPolicy> {
        match self.policy {
            PolicyChoice::Twap => Box::new(TwapCapped {
                horizon: self.horizon,
                c_plus: self.c_plus,
            }),
            PolicyChoice::Constant => Box::new(ConstantRate {
                rate: self.policy_level,
                cap: Some(self.c_plus),
            }),
            PolicyChoice::PriceProportional => Box::new(PriceProportional {
                kappa: self.policy_level,
                cap: self.c_plus,
            }),
            PolicyChoice::TimeToHorizon => Box::new(LinearSchedule::time_to_horizon(self.horizon)),
        }
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of an experiment cell: the run seed folded with a section tag and
/// the cell's indices, one SplitMix64 round per component. Cells therefore
/// draw independent streams and can be computed in any order.
pub fn cell_seed(seed: u64, section: &str, indices: &[usize]) -> u64 {
    let tag = section.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    indices
        .iter()
        .fold(mix(seed ^ tag), |acc, &i| mix(acc ^ i as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags_with_seed() -> Overrides {
        Overrides {
            seed: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn parses_comments_lists_and_dashed_keys() {
        let pairs = parse_pairs("# sweep\nq = 0.5, 3\nc-bar = 0,1 # two rates\n\nseed=4").unwrap();
        let cfg = RunConfig::from_pairs(&pairs, &Overrides::default()).unwrap();
        assert_eq!(cfg.q, vec![0.5, 3.0]);
        assert_eq!(cfg.c_bar, vec![0.0, 1.0]);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn flags_win_over_the_file() {
        let pairs = parse_pairs("seed = 4\npaths = 10\nhorizon = 2").unwrap();
        let flags = Overrides {
            seed: Some(9),
            paths: Some(20),
            ..Default::default()
        };
        let cfg = RunConfig::from_pairs(&pairs, &flags).unwrap();
        assert_eq!((cfg.seed, cfg.paths, cfg.horizon), (9, 20, 2.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_pairs("colour = red").is_err());
        assert!(parse_pairs("seed = 1\nseed = 2").is_err());
        assert!(parse_pairs("just words").is_err());
        let none = BTreeMap::new();
        assert!(
            RunConfig::from_pairs(&none, &Overrides::default()).is_err(),
            "seed is mandatory"
        );
        let pairs = parse_pairs("c_bar = 3").unwrap();
        assert!(RunConfig::from_pairs(&pairs, &flags_with_seed()).is_err());
        let pairs = parse_pairs("q = ").unwrap();
        assert!(RunConfig::from_pairs(&pairs, &flags_with_seed()).is_err());
    }

    #[test]
    fn hash_ignores_output_settings_only() {
        let base = RunConfig::from_pairs(&BTreeMap::new(), &flags_with_seed()).unwrap();
        let moved = RunConfig {
            out: "elsewhere".into(),
            format: Format::Json,
            ..base.clone()
        };
        assert_eq!(base.hash(), moved.hash());
        let reseeded = RunConfig {
            seed: 2,
            ..base.clone()
        };
        assert_ne!(base.hash(), reseeded.hash());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn cell_seeds_are_distinct_and_stable() {
        let a = cell_seed(7, "value", &[0, 0]);
        assert_eq!(a, cell_seed(7, "value", &[0, 0]));
        assert_ne!(a, cell_seed(7, "value", &[0, 1]));
        assert_ne!(a, cell_seed(7, "value", &[1, 0]));
        assert_ne!(a, cell_seed(7, "smp", &[0, 0]));
        assert_ne!(a, cell_seed(8, "value", &[0, 0]));
    }
}
