//! Run settings: defaults, then a `key = value` config file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::CliError;

/// Keys accepted in a config file; the same names as the long flags.
pub const KEYS: &[&str] = &[
    "dim", "L", "levels", "mass", "alpha", "tol", "seed", "threads", "cache-dir", "out", "p",
    "m", "side", "walks", "samples", "momenta",
];

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().trim_start_matches("--");
            if !KEYS.contains(&k) {
                return Err(CliError::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Config(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.values.get(key).map(|v| parse_list(key, v)).transpose()
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad value `{v}` for `{key}`")))
        })
        .collect()
}

/// Flags common to every command; `None` means "not given".
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Lattice dimension d.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Blocking factor L (a power of two).
    #[arg(long = "L", global = true)]
    pub scale: Option<u64>,
    /// Number of levels n.
    #[arg(long, global = true)]
    pub levels: Option<u32>,
    /// Mass parameters, comma separated.
    #[arg(long, visible_alias = "a", value_delimiter = ',', global = true)]
    pub mass: Option<Vec<f64>>,
    /// Lévy exponent α.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Quadrature tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for the persistent kernel cache.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Directory for the JSON report and CSV kernels.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Momentum, comma separated; a single value is used on every axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, global = true)]
    pub p: Option<Vec<f64>>,
    /// Include wall-clock timings in the report (breaks bitwise reproducibility).
    #[arg(long, global = true)]
    pub timings: bool,
}

/// Options of individual commands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CommandOverrides {
    /// Averaging scale index m.
    #[arg(long)]
    pub m: Option<u32>,
    /// Cube side R (poisson) or torus side M in sites (sample).
    #[arg(long)]
    pub side: Option<f64>,
    /// Random walks for the Poisson-kernel oracle.
    #[arg(long)]
    pub walks: Option<usize>,
    /// Monte Carlo samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Random momenta for the reconstruction check.
    #[arg(long)]
    pub momenta: Option<usize>,
}

/// Fully resolved settings.
#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub dim: usize,
    #[serde(rename = "L")]
    pub scale: u64,
    pub log2_scale: u32,
    pub levels: u32,
    pub mass: Vec<f64>,
    pub alpha: f64,
    pub tol: f64,
    pub seed: u64,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub p: Option<Vec<f64>>,
    pub m: Option<u32>,
    pub side: Option<f64>,
    pub walks: Option<usize>,
    pub samples: Option<usize>,
    pub momenta: Option<usize>,
    #[serde(skip)]
    pub timings: bool,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl Settings {
    pub fn resolve(o: &Overrides, c: &CommandOverrides) -> Result<Self, CliError> {
        let file = match &o.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let scale = pick(o.scale, file.get("L")?, 2);
        if !scale.is_power_of_two() || scale < 2 {
            return Err(CliError::Config(format!("L = {scale} must be a power of two >= 2")));
        }
        let dim = pick(o.dim, file.get("dim")?, 2);
        let p = o.p.clone().or(file.get_list("p")?).map(|v| {
            if v.len() == 1 {
                vec![v[0]; dim]
            } else {
                v
            }
        });
        if let Some(v) = &p {
            if v.len() != dim {
                return Err(CliError::Config(format!("momentum has {} components, d = {dim}", v.len())));
            }
        }
        Ok(Self {
            dim,
            scale,
            log2_scale: scale.trailing_zeros(),
            levels: pick(o.levels, file.get("levels")?, 2),
            mass: pick(o.mass.clone(), file.get_list("mass")?, vec![1.0]),
            alpha: pick(o.alpha, file.get("alpha")?, 1.0),
            tol: pick(o.tol, file.get("tol")?, 1e-8),
            seed: pick(o.seed, file.get("seed")?, 1),
            threads: o.threads.or(file.get("threads")?),
            cache_dir: o.cache_dir.clone().or(file.get("cache-dir")?),
            out: o.out.clone().or(file.get("out")?),
            p,
            m: c.m.or(file.get("m")?),
            side: c.side.or(file.get("side")?),
            walks: c.walks.or(file.get("walks")?),
            samples: c.samples.or(file.get("samples")?),
            momenta: c.momenta.or(file.get("momenta")?),
            timings: o.timings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let f = ConfigFile::parse("# comment\ndim = 3\n--L=4\nmass = 0, 1\n\n").unwrap();
        assert_eq!(f.get::<usize>("dim").unwrap(), Some(3));
        assert_eq!(f.get::<u64>("L").unwrap(), Some(4));
        assert_eq!(f.get_list("mass").unwrap(), Some(vec![0.0, 1.0]));
        assert!(ConfigFile::parse("colour = red").is_err());
        assert!(ConfigFile::parse("dim").is_err());
        assert!(ConfigFile::parse("dim = x").unwrap().get::<usize>("dim").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "dim = 3\nlevels = 1\nL = 4\n").unwrap();
        let o = Overrides {
            dim: Some(1),
            config: Some(path),
            p: Some(vec![0.5]),
            ..Overrides::default()
        };
        let s = Settings::resolve(&o, &CommandOverrides::default()).unwrap();
        assert_eq!((s.dim, s.levels, s.scale, s.log2_scale), (1, 1, 4, 2));
        assert_eq!(s.p, Some(vec![0.5]));
        let bad = Overrides {
            scale: Some(3),
            ..Overrides::default()
        };
        assert!(Settings::resolve(&bad, &CommandOverrides::default()).is_err());
    }
}
