//! Flat key=value experiment configuration with command-line overrides.
//!
//! A config file is lines of `key = value`; `#` starts a comment. Every
//! `--set KEY=VALUE` wins over the file. The resolved [`ExperimentConfig`]
//! is echoed into each command's JSON summary so a run is reproducible
//! from the summary alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use vrnl_core::trainer::{DataConfig, TransitionSource};
use vrnl_core::{
    ExperimentConfig, Method, NoiseKind, NoiseSpec, OptimizerConfig, RiskSpec, SyntheticSpec,
};

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    map: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = FlatConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected key = value", path.display(), ln + 1)
                })?;
                cfg.map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    pub fn str(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.map.get(key).cloned()
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("bad number for {key}: '{v}'")),
            None => Ok(default),
        }
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.map.get(key) {
            Some(v) => Ok(Some(
                v.parse()
                    .with_context(|| format!("bad number for {key}: '{v}'"))?,
            )),
            None => Ok(None),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("bad count for {key}: '{v}'")),
            None => Ok(default),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("bad integer for {key}: '{v}'")),
            None => Ok(default),
        }
    }

    pub fn list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.map.get(key) {
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .with_context(|| format!("bad list entry for {key}: '{t}'"))
                })
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    pub fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            Some(v) if v.trim().is_empty() => Ok(vec![]),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .with_context(|| format!("bad list entry for {key}: '{t}'"))
                })
                .collect(),
            None => Ok(default.to_vec()),
        }
    }
}

/// Method name as it appears on the command line / config: the `-vrnl`
/// suffix turns the variance regularizer on with its default strength.
pub fn parse_method(name: &str) -> Result<(Method, bool)> {
    match name {
        "ce" => Ok((Method::Ce, false)),
        "forward" => Ok((Method::Forward, false)),
        "forward-vrnl" => Ok((Method::Forward, true)),
        "reweight" => Ok((Method::Reweight, false)),
        "reweight-vrnl" => Ok((Method::Reweight, true)),
        "volmin" => Ok((Method::VolMin, false)),
        "volmin-vrnl" => Ok((Method::VolMin, true)),
        other => bail!(
            "unknown method '{other}' (expected ce, forward[-vrnl], reweight[-vrnl], volmin[-vrnl])"
        ),
    }
}

pub fn method_name(method: Method, vrnl: bool) -> String {
    if vrnl {
        format!("{method}-vrnl")
    } else {
        format!("{method}")
    }
}

/// Default regularization strengths: 0.1 for forward/reweight (0.01 on
/// pair noise), 0.05 for volmin (0.005 on pair noise).
pub fn default_alpha(method: Method, vrnl: bool, noise: NoiseKind) -> f64 {
    if !vrnl {
        return 0.0;
    }
    match (method, noise) {
        (Method::VolMin, NoiseKind::Pair) => 0.005,
        (Method::VolMin, _) => 0.05,
        (_, NoiseKind::Pair) => 0.01,
        _ => 0.1,
    }
}

fn parse_noise_kind(s: &str) -> Result<NoiseKind> {
    match s {
        "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
        "asymmetric" | "asym" => Ok(NoiseKind::Asymmetric),
        "pair" => Ok(NoiseKind::Pair),
        other => bail!("unknown noise kind '{other}'"),
    }
}

fn parse_mean_mode(s: &str) -> Result<vrnl_core::MeanMode> {
    match s {
        "batch" => Ok(vrnl_core::MeanMode::Batch),
        "running-epoch" | "running" => Ok(vrnl_core::MeanMode::RunningEpoch),
        other => bail!("unknown mean mode '{other}'"),
    }
}

/// Build the fully resolved experiment from flat keys plus defaults.
pub fn resolve_experiment(cfg: &FlatConfig) -> Result<ExperimentConfig> {
    let source = cfg.str("data.source", "synthetic");
    let classes = cfg.usize("data.classes", 3)?;
    let data = match source.as_str() {
        "synthetic" => DataConfig::Synthetic {
            spec: SyntheticSpec::ring(
                classes,
                cfg.usize("data.dim", 2)?,
                cfg.f64("data.radius", 2.0)?,
                cfg.f64("data.sigma", 1.0)?,
                cfg.usize("data.n", 3000)?,
                0,
            ),
            test_n: cfg.usize("data.test_n", 1000)?,
        },
        "mnist" => DataConfig::Mnist {
            dir: PathBuf::from(cfg.str("data.dir", "data/mnist")),
            subsample: cfg.usize("data.subsample", 10_000)?,
        },
        other => bail!("unknown data source '{other}'"),
    };

    let noise_kind = parse_noise_kind(&cfg.str("noise.kind", "symmetric"))?;
    let noise = NoiseSpec {
        kind: noise_kind,
        rate: cfg.f64("noise.rate", 0.2)?,
        classes: match &data {
            DataConfig::Synthetic { spec, .. } => spec.classes,
            DataConfig::Mnist { .. } => 10,
        },
        seed: 0,
    };

    let (method, vrnl) = parse_method(&cfg.str("method", "ce"))?;
    let alpha = match cfg.opt_f64("alpha")? {
        Some(a) => a,
        None => default_alpha(method, vrnl, noise_kind),
    };
    let risk = RiskSpec {
        method,
        alpha,
        lambda: cfg.f64("lambda", 1e-4)?,
        mean_mode: parse_mean_mode(&cfg.str("mean_mode", "batch"))?,
        weight_floor: cfg.f64("weight_floor", 0.0)?,
    };

    let optimizer = OptimizerConfig {
        learning_rate: cfg.f64("lr", 1e-2)?,
        momentum: cfg.f64("momentum", 0.9)?,
        weight_decay: cfg.f64("weight_decay", 1e-4)?,
        batch_size: cfg.usize("batch_size", 128)?,
        epochs: cfg.usize("epochs", 80)?,
        lr_drop_epochs: cfg.usize_list("lr_drops", &[30, 60])?,
        drop_factor: cfg.f64("drop_factor", 10.0)?,
        seed: 0,
    };

    let hidden_default: &[usize] = match &data {
        DataConfig::Synthetic { .. } => &[32, 32],
        DataConfig::Mnist { .. } => &[256],
    };
    let hidden = cfg.usize_list("hidden", hidden_default)?;

    let transition_source = match cfg.str("transition", "estimate").as_str() {
        "given" => TransitionSource::Given,
        "estimate" => TransitionSource::Estimate,
        other => bail!("unknown transition source '{other}' (given|estimate)"),
    };

    let experiment = ExperimentConfig {
        data,
        noise,
        risk,
        optimizer,
        hidden,
        val_fraction: cfg.f64("val_fraction", 0.1)?,
        warmup_epochs: cfg.usize("warmup_epochs", 20)?,
        transition_source,
        anchor_percentile: cfg.f64("anchor_percentile", 97.0)?,
        gamma: cfg.f64("gamma", 0.0)?,
        seed: 0,
        deterministic: cfg.str("deterministic", "true") != "false",
    }
    .with_seed(cfg.u64("seed", 0)?);
    experiment.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(experiment)
}
