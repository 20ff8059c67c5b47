//! Run configuration: a single flat key=value text format with dotted
//! section prefixes (`dataset.stddev = 0.4`), plus the typed experiment
//! config assembled from it. The raw bytes are kept so the run manifest can
//! hash the config exactly as written.

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::VelocityConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone)]
pub struct Config {
    map: BTreeMap<String, String>,
    raw: String,
}

impl Config {
    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(cfg_err(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(cfg_err(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(cfg_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Config {
            map,
            raw: text.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// The config text exactly as read, for manifest hashing and copying.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Hex sha256 of the raw config bytes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.raw.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| cfg_err(format!("missing key `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| cfg_err(format!("key `{key}`: `{v}` is not {what}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse_as(key, "a number")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse_as(key, "a non-negative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse_as(key, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.parse_as(key, "true or false")
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(_) => self.get_f64(key),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(_) => self.get_usize(key),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some(_) => self.get_bool(key),
            None => Ok(default),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Parse `x,y; x,y; ...` into pairs.
    pub fn get_pairs(&self, key: &str) -> Result<Vec<(f64, f64)>> {
        let v = self.require(key)?;
        let mut out = Vec::new();
        for part in v.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let Some((a, b)) = part.split_once(',') else {
                return Err(cfg_err(format!("key `{key}`: `{part}` is not `x,y`")));
            };
            let pa = a.trim().parse().map_err(|_| {
                cfg_err(format!("key `{key}`: `{a}` is not a number"))
            })?;
            let pb = b.trim().parse().map_err(|_| {
                cfg_err(format!("key `{key}`: `{b}` is not a number"))
            })?;
            out.push((pa, pb));
        }
        if out.is_empty() {
            return Err(cfg_err(format!("key `{key}`: no pairs")));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    FmTrain,
    DrmTrain,
    Align,
    SampleSweep,
    NoiseEval,
    InitAblation,
    ConvergenceCompare,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Experiment> {
        Ok(match s {
            "fm-train" => Experiment::FmTrain,
            "drm-train" => Experiment::DrmTrain,
            "align" => Experiment::Align,
            "sample-sweep" => Experiment::SampleSweep,
            "noise-eval" => Experiment::NoiseEval,
            "init-ablation" => Experiment::InitAblation,
            "convergence-compare" => Experiment::ConvergenceCompare,
            other => return Err(cfg_err(format!("unknown experiment `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::FmTrain => "fm-train",
            Experiment::DrmTrain => "drm-train",
            Experiment::Align => "align",
            Experiment::SampleSweep => "sample-sweep",
            Experiment::NoiseEval => "noise-eval",
            Experiment::InitAblation => "init-ablation",
            Experiment::ConvergenceCompare => "convergence-compare",
        }
    }
}

/// The fully parsed top level of a run config; runner-specific keys stay in
/// `raw` and are read by the runner that needs them.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: VelocityConfig,
    pub raw: Config,
}

fn parse_dataset(cfg: &Config) -> Result<DatasetSpec> {
    let spec = match cfg.require("dataset.kind")? {
        "vector2d" => DatasetSpec::Vector2d {
            means: cfg
                .get_pairs("dataset.means")?
                .into_iter()
                .map(|(x, y)| [x, y])
                .collect(),
            stddev: cfg.get_f64("dataset.stddev")?,
        },
        "grid" => {
            let sharp = cfg.get_pairs("dataset.sharpness")?;
            if sharp.len() != 1 {
                return Err(cfg_err("dataset.sharpness must be one `lo,hi` pair"));
            }
            DatasetSpec::Grid {
                side: cfg.get_usize("dataset.side")?,
                centers: cfg.get_pairs("dataset.centers")?,
                sharpness: sharp[0],
            }
        }
        other => return Err(cfg_err(format!("unknown dataset.kind `{other}`"))),
    };
    spec.validate().map_err(|e| cfg_err(e.to_string()))?;
    Ok(spec)
}

impl ExperimentConfig {
    pub fn from_config(cfg: Config) -> Result<ExperimentConfig> {
        let experiment = Experiment::parse(cfg.require("experiment")?)?;
        let seed = cfg.get_u64("seed")?;
        let out_dir = PathBuf::from(cfg.require("out")?);
        let dataset = parse_dataset(&cfg)?;
        let model = VelocityConfig {
            state_dim: dataset.state_dim(),
            hidden: cfg.get_usize("model.hidden")?,
            blocks: cfg.get_usize("model.blocks")?,
            time_freqs: cfg.usize_or("model.time_freqs", 4)?,
            n_conditions: dataset.n_conditions(),
            cond_dim: cfg.usize_or("model.cond_dim", 8)?,
        };
        model.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(ExperimentConfig {
            experiment,
            seed,
            out_dir,
            dataset,
            model,
            raw: cfg,
        })
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_config(Config::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# toy alignment run
experiment = align
seed = 7
out = runs/demo

dataset.kind = vector2d
dataset.means = -2,-2; 2,2
dataset.stddev = 0.4

model.hidden = 32   # trailing comment
model.blocks = 4
";

    #[test]
    fn parses_sections_and_comments() {
        let cfg = Config::parse(SAMPLE).unwrap();
        assert_eq!(cfg.get("experiment"), Some("align"));
        assert_eq!(cfg.get_u64("seed").unwrap(), 7);
        assert_eq!(cfg.get_usize("model.hidden").unwrap(), 32);
        assert_eq!(cfg.get_f64("dataset.stddev").unwrap(), 0.4);
        assert_eq!(cfg.get("nope"), None);
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("just a line without equals\n").is_err());
        assert!(Config::parse("= 3\n").is_err());
    }

    #[test]
    fn missing_key_error_names_the_key() {
        let cfg = Config::parse("a = 1").unwrap();
        let err = cfg.require("model.hidden").unwrap_err().to_string();
        assert!(err.contains("model.hidden"), "{err}");
    }

    #[test]
    fn typed_getter_rejects_garbage() {
        let cfg = Config::parse("x = notanumber").unwrap();
        let err = cfg.get_f64("x").unwrap_err().to_string();
        assert!(err.contains("notanumber"), "{err}");
    }

    #[test]
    fn pair_list_parsing() {
        let cfg = Config::parse("p = -2,-2; 2,2").unwrap();
        assert_eq!(cfg.get_pairs("p").unwrap(), vec![(-2.0, -2.0), (2.0, 2.0)]);
        let bad = Config::parse("p = 1;2,3").unwrap();
        assert!(bad.get_pairs("p").is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = Config::parse(SAMPLE).unwrap();
        let b = Config::parse(SAMPLE).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = Config::parse(&SAMPLE.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn experiment_config_assembly() {
        let ec = ExperimentConfig::from_config(Config::parse(SAMPLE).unwrap()).unwrap();
        assert_eq!(ec.experiment, Experiment::Align);
        assert_eq!(ec.seed, 7);
        assert_eq!(ec.model.state_dim, 2);
        assert_eq!(ec.model.n_conditions, 2);
        assert_eq!(ec.dataset.n_conditions(), 2);
    }

    #[test]
    fn grid_dataset_parsing() {
        let text = "\
experiment = fm-train
seed = 1
out = runs/g
dataset.kind = grid
dataset.side = 8
dataset.centers = 2,2; 5,5
dataset.sharpness = 1.0,3.0
model.hidden = 16
model.blocks = 4
";
        let ec = ExperimentConfig::from_config(Config::parse(text).unwrap()).unwrap();
        assert_eq!(ec.model.state_dim, 64);
        match ec.dataset {
            DatasetSpec::Grid { side, .. } => assert_eq!(side, 8),
            _ => panic!("expected grid"),
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let text = SAMPLE.replace("seed = 7\n", "");
        let err = ExperimentConfig::from_config(Config::parse(&text).unwrap());
        assert!(err.is_err());
    }
}
