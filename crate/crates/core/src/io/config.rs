//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments win,
//! so command-line overrides are applied by calling [`RunConfig::set`] after
//! [`RunConfig::parse`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::EmConfig;
use crate::io::{MatrixFormat, PreprocessOptions};
use crate::models::{ModelKind, TrainConfig};
use crate::simulator::Preset;

/// Genes kept by dispersion when `top_genes` is not set (capped at the gene count).
pub const DEFAULT_TOP_GENES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset directory read by fits and `preprocess`.
    pub input: Option<PathBuf>,
    /// Directory written by the command.
    pub out: Option<PathBuf>,
    /// Existing run directory for `refine`, `predict`, `evaluate` and `plot`.
    pub run: Option<PathBuf>,
    pub format: MatrixFormat,
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub preset: Preset,
    pub cells: Option<usize>,
    pub noise: f64,
    pub capture_bins: usize,
    pub normalize: bool,
    /// `None` keeps `min(DEFAULT_TOP_GENES, genes)`; an explicit value must not exceed the gene count.
    pub top_genes: Option<usize>,
    /// 0 disables smoothing.
    pub neighbors: usize,
    pub components: usize,
    pub train: TrainConfig,
    pub em: EmConfig,
    /// `None` plots the first four genes; an empty list plots nothing.
    pub genes: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PreprocessOptions::default();
        Self {
            input: None,
            out: None,
            run: None,
            format: MatrixFormat::Csv,
            seed: None,
            model: None,
            preset: Preset::S1,
            cells: None,
            noise: 0.1,
            capture_bins: 7,
            normalize: p.normalize,
            top_genes: None,
            neighbors: p.neighbors.unwrap_or(0),
            components: p.components,
            train: TrainConfig::default(),
            em: EmConfig::default(),
            genes: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every recognized key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "input",
        "out",
        "run",
        "format",
        "seed",
        "model",
        "preset",
        "cells",
        "noise",
        "capture_bins",
        "normalize",
        "top_genes",
        "neighbors",
        "components",
        "learning_rate",
        "ode_learning_rate",
        "batch_size",
        "train_fraction",
        "latent_dim",
        "epochs",
        "t_max",
        "hidden",
        "dropout",
        "kl_warmup",
        "informative_prior",
        "delta1",
        "delta2",
        "refine_epochs",
        "time_warm_start",
        "em_grid",
        "em_max_iter",
        "em_tol",
        "quantile",
        "genes",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "input" => self.input = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "run" => self.run = Some(PathBuf::from(v)),
            "format" => self.format = parse(key, v)?,
            "seed" => {
                let seed = parse(key, v)?;
                self.seed = Some(seed);
                t.seed = seed;
            }
            "model" => self.model = Some(parse(key, v)?),
            "preset" => self.preset = parse(key, v)?,
            "cells" => self.cells = Some(parse(key, v)?),
            "noise" => self.noise = parse(key, v)?,
            "capture_bins" => self.capture_bins = parse(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "top_genes" => self.top_genes = Some(parse(key, v)?),
            "neighbors" => self.neighbors = parse(key, v)?,
            "components" => self.components = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "ode_learning_rate" => t.ode_learning_rate = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "train_fraction" => t.train_fraction = parse(key, v)?,
            "latent_dim" => t.latent_dim = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "t_max" => {
                t.t_max = parse(key, v)?;
                self.em.t_max = t.t_max;
            }
            "hidden" => t.hidden = parse_list(v).iter().map(|h| parse(key, h)).collect::<Result<_>>()?,
            "dropout" => t.dropout = parse(key, v)?,
            "kl_warmup" => t.kl_warmup = parse(key, v)?,
            "informative_prior" => t.informative_prior = parse_bool(key, v)?,
            "delta1" => t.delta1 = parse(key, v)?,
            "delta2" => t.delta2 = parse(key, v)?,
            "refine_epochs" => t.refine_epochs = parse(key, v)?,
            "time_warm_start" => t.time_warm_start = parse(key, v)?,
            "em_grid" => self.em.grid_size = parse(key, v)?,
            "em_max_iter" => self.em.max_iter = parse(key, v)?,
            "em_tol" => self.em.tol = parse(key, v)?,
            "quantile" => self.em.quantile = parse(key, v)?,
            "genes" => self.genes = Some(parse_list(v)),
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` assignments from text, one per line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value, got {line:?}", k + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "config")?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// One `key = value` line per key, in [`Self::KEYS`] order; unset optional keys are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &key in Self::KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }

    fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "input" => return path(&self.input),
            "out" => return path(&self.out),
            "run" => return path(&self.run),
            "format" => self.format.extension().to_string(),
            "seed" => return self.seed.map(|s| s.to_string()),
            "model" => return self.model.map(|m| m.to_string()),
            "preset" => format!("{:?}", self.preset),
            "cells" => return self.cells.map(|c| c.to_string()),
            "noise" => self.noise.to_string(),
            "capture_bins" => self.capture_bins.to_string(),
            "normalize" => self.normalize.to_string(),
            "top_genes" => return self.top_genes.map(|k| k.to_string()),
            "neighbors" => self.neighbors.to_string(),
            "components" => self.components.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "ode_learning_rate" => t.ode_learning_rate.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "train_fraction" => t.train_fraction.to_string(),
            "latent_dim" => t.latent_dim.to_string(),
            "epochs" => t.epochs.to_string(),
            "t_max" => t.t_max.to_string(),
            "hidden" => join(&t.hidden),
            "dropout" => t.dropout.to_string(),
            "kl_warmup" => t.kl_warmup.to_string(),
            "informative_prior" => t.informative_prior.to_string(),
            "delta1" => t.delta1.to_string(),
            "delta2" => t.delta2.to_string(),
            "refine_epochs" => t.refine_epochs.to_string(),
            "time_warm_start" => t.time_warm_start.to_string(),
            "em_grid" => self.em.grid_size.to_string(),
            "em_max_iter" => self.em.max_iter.to_string(),
            "em_tol" => self.em.tol.to_string(),
            "quantile" => self.em.quantile.to_string(),
            "genes" => return self.genes.as_ref().map(|g| join(g)),
            _ => return None,
        })
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (seed = N or --seed N)".into()))
    }

    pub fn preprocess_options(&self, n_genes: usize) -> PreprocessOptions {
        PreprocessOptions {
            normalize: self.normalize,
            top_genes: Some(self.top_genes.unwrap_or(DEFAULT_TOP_GENES.min(n_genes))),
            neighbors: (self.neighbors > 0).then_some(self.neighbors),
            components: self.components,
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::Config(format!("{key} is required (--{key} DIR or {key} = DIR)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 7\nhidden = 64, 32\nmodel=full\n\ngenes = a,b\ninformative_prior = yes\n", "t").unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.hidden, vec![64, 32]);
        assert_eq!(c.model, Some(ModelKind::Full));
        assert_eq!(c.genes, Some(vec!["a".to_string(), "b".to_string()]));
        assert!(c.train.informative_prior);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn later_assignments_override() {
        let mut c = RunConfig::parse("epochs = 10\nepochs = 20").unwrap();
        assert_eq!(c.train.epochs, 20);
        c.set("epochs", "5").unwrap();
        assert_eq!(c.train.epochs, 5);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::default().seed().is_err());
    }

    #[test]
    fn empty_gene_list_is_explicit() {
        let c = RunConfig::parse("genes =").unwrap();
        assert_eq!(c.genes, Some(Vec::new()));
        assert!(RunConfig::parse("").unwrap().genes.is_none());
    }

    #[test]
    fn top_genes_default_is_capped() {
        let c = RunConfig::default();
        assert_eq!(c.preprocess_options(100).top_genes, Some(100));
        assert_eq!(c.preprocess_options(5000).top_genes, Some(DEFAULT_TOP_GENES));
    }
}
