//! Flat `key = value` session configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, duplicate keys,
//! and malformed values are errors that carry the 1-based line number.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::str::FromStr;

use super::{initial_noise, BranchConds, SessionConfig};
use crate::backend::{Denoiser, SyntheticBackend, SyntheticBackendSpec};
use crate::error::{Error, Result};
use crate::tensors::TensorGrid;

/// Layout of the built-in synthetic scenario: backend parameters plus where
/// each branch places the subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub backend: SyntheticBackendSpec,
    pub reference_offset: (usize, usize),
    pub target_offset: (usize, usize),
    /// Seed of the reference clean latent.
    pub reference_seed: u64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            backend: SyntheticBackendSpec::default(),
            reference_offset: (2, 2),
            target_offset: (8, 6),
            reference_seed: 7,
        }
    }
}

/// A ready-to-run synthetic session.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub backend: SyntheticBackend,
    pub conds: BranchConds,
    pub reference_z0: TensorGrid,
}

impl SyntheticScenario {
    pub fn build(&self) -> Result<ScenarioSetup> {
        let mut backend = SyntheticBackend::new(self.backend.clone())?;
        let conds = BranchConds {
            reference: backend.register_subject(self.reference_offset)?,
            target: backend.register_subject(self.target_offset)?,
            unconditional: backend.register_unconditional()?,
        };
        let reference_z0 = initial_noise(backend.latent_dims(), self.reference_seed)?;
        Ok(ScenarioSetup {
            backend,
            conds,
            reference_z0,
        })
    }

    /// Displacement `(dx, dy)` from a target subject pixel to its reference
    /// counterpart.
    pub fn planted_shift(&self) -> (i64, i64) {
        let (ry, rx) = self.reference_offset;
        let (ty, tx) = self.target_offset;
        (rx as i64 - tx as i64, ry as i64 - ty as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    pub session: SessionConfig,
    pub scenario: SyntheticScenario,
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {value:?} for {key}"),
    })
}

fn parse_range(line: usize, key: &str, value: &str) -> Result<Range<usize>> {
    let (a, b) = value.split_once("..").ok_or_else(|| Error::Config {
        line,
        message: format!("{key} expects start..end, got {value:?}"),
    })?;
    Ok(parse_value(line, key, a.trim())?..parse_value(line, key, b.trim())?)
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<BTreeSet<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn parse_pair(line: usize, key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value.split_once(',').ok_or_else(|| Error::Config {
        line,
        message: format!("{key} expects y,x, got {value:?}"),
    })?;
    Ok((parse_value(line, key, a.trim())?, parse_value(line, key, b.trim())?))
}

fn parse_heads(line: usize, key: &str, value: &str) -> Result<BTreeMap<usize, usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (l, h) = item.split_once(':').ok_or_else(|| Error::Config {
                line,
                message: format!("{key} expects layer:heads pairs, got {item:?}"),
            })?;
            Ok((parse_value(line, key, l.trim())?, parse_value(line, key, h.trim())?))
        })
        .collect()
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            line,
            message: format!("invalid boolean {value:?} for {key}"),
        }),
    }
}

/// Parses a config file and validates the result. Validation failures that
/// are not tied to a single key report line 0.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut cfg = ConfigFile::default();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected key = value, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key {key}"),
            });
        }
        let s = &mut cfg.session;
        let sc = &mut cfg.scenario;
        match key {
            "total_steps" => s.total_steps = parse_value(line, key, value)?,
            "train_steps" => s.train_steps = parse_value(line, key, value)?,
            "beta_start" => s.beta_start = parse_value(line, key, value)?,
            "beta_end" => s.beta_end = parse_value(line, key, value)?,
            "inversion_iterations" => s.inversion_iterations = parse_value(line, key, value)?,
            "ama_steps" => s.ama_steps = parse_range(line, key, value)?,
            "guidance_steps" => s.guidance_steps = parse_range(line, key, value)?,
            "ama_layers" => s.ama_layers = parse_list(line, key, value)?,
            "descriptor_layers" => s.descriptor_layers = parse_list(line, key, value)?,
            "attention_heads" => s.attention_heads = parse_heads(line, key, value)?,
            "lambda_c" => s.lambda_c = parse_value(line, key, value)?,
            "mask_threshold" => s.mask_threshold = parse_value(line, key, value)?,
            "lambda_g" => s.lambda_g = parse_value(line, key, value)?,
            "cfg_scale" => s.cfg_scale = parse_value(line, key, value)?,
            "pca_dim" => s.pca_dim = parse_value(line, key, value)?,
            "seed" => s.seed = parse_value(line, key, value)?,
            "diagnostics" => s.diagnostics = parse_bool(line, key, value)?,
            "synthetic_seed" => sc.backend.seed = parse_value(line, key, value)?,
            "latent_height" => sc.backend.latent_height = parse_value(line, key, value)?,
            "latent_width" => sc.backend.latent_width = parse_value(line, key, value)?,
            "latent_channels" => sc.backend.latent_channels = parse_value(line, key, value)?,
            "spectral_norm" => sc.backend.spectral_norm = parse_value(line, key, value)?,
            "subject_size" => sc.backend.subject_size = parse_value(line, key, value)?,
            "reference_offset" => sc.reference_offset = parse_pair(line, key, value)?,
            "target_offset" => sc.target_offset = parse_pair(line, key, value)?,
            "reference_seed" => sc.reference_seed = parse_value(line, key, value)?,
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key}"),
                })
            }
        }
    }
    let as_config = |e: Error| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            line: 0,
            message: other.to_string(),
        },
    };
    cfg.session.validate().map_err(as_config)?;
    cfg.scenario.backend.validate().map_err(as_config)?;
    cfg.scenario.build().map_err(as_config)?;
    Ok(cfg)
}
