//! Experiment configuration: TOML files, named presets, and dotted-path
//! command line overrides.
//!
//! Unknown keys are rejected everywhere with the offending key named in
//! the error. The fully resolved config (after preset expansion and
//! overrides) round-trips through TOML so each run can archive the exact
//! settings it used.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::objective::{ObjectiveConfig, Variant};
use crate::policy::Arch;
use crate::trainer::TrainConfig;

/// A complete experiment: environment, architecture, objective, loop
/// hyperparameters, and the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label; output lands under `<out_root>/<name>/seed-<s>/`.
    pub name: String,
    pub arch: Arch,
    pub env: EnvConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Fill derived fields and check every section. An MLP with an empty
    /// `obs_dims` inherits the environment's observation layout.
    pub fn resolve(&mut self) -> Result<()> {
        if let Arch::Mlp { obs_dims, .. } = &mut self.arch {
            if obs_dims.is_empty() {
                *obs_dims = self.env.obs_dims();
            } else if *obs_dims != self.env.obs_dims() {
                return Err(Error::Config(
                    "arch.obs_dims does not match the environment's observation layout \
                     (omit it to inherit)"
                        .into(),
                ));
            }
        }
        self.env.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        if self.name.is_empty() {
            return Err(Error::Config("name must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }
}

/// Built-in experiment presets.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = match name {
        "standard" => ExperimentConfig {
            name: "standard".into(),
            arch: Arch::Tabular { buckets: 8192 },
            env: EnvConfig::standard(),
            objective: ObjectiveConfig::defaults(Variant::TgrlGrpo),
            train: TrainConfig::defaults(),
            seeds: vec![0],
        },
        "needle" => {
            // sparse regime: pure on-policy exploration almost never finds
            // the reward, expert members carry the learning signal. The MLP
            // matters here: untrained rollouts flood a hashed table with
            // novel contexts whose negative-advantage updates collide with
            // and erase the sparse expert signal, while the shared-feature
            // network averages that noise out
            let mut train = TrainConfig::defaults();
            train.steps = 2000;
            train.groups_per_step = 8;
            train.n_on = 7;
            train.n_off = 1;
            train.lr = 0.005;
            train.eval_every = 100;
            train.eval_instances = 200;
            train.expert_error_rate = 0.02;
            let env = EnvConfig::needle();
            ExperimentConfig {
                name: "needle".into(),
                arch: Arch::Mlp { hidden: 32, obs_dims: env.obs_dims() },
                env,
                objective: ObjectiveConfig::defaults(Variant::TgrlGrpo),
                train,
                seeds: vec![0],
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}', expected 'standard' or 'needle'"
            )))
        }
    };
    cfg.resolve()?;
    Ok(cfg)
}

/// Parse a TOML config file. Does not resolve; callers apply overrides
/// first.
pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write the resolved config next to the run outputs.
pub fn save(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("failed to serialize config: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Apply `key.path=value` overrides on top of a config. The path must
/// address an existing table chain; the value is parsed as TOML (falling
/// back to a string), and the final structure is re-validated so unknown
/// keys and type errors surface with the key named.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = toml::Value::try_from(cfg)
        .map_err(|e| Error::Config(format!("failed to reserialize config: {e}")))?;
    for item in overrides {
        let (path, raw) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{item}' is not of the form key.path=value"))
        })?;
        let path = path.trim();
        let raw = raw.trim();
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key '{path}' is malformed")));
        }
        let mut node = &mut value;
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| {
                    Error::Config(format!("override key '{path}': '{part}' is not a table"))
                })?;
        }
        let leaf = parts[parts.len() - 1];
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{path}' does not address a table")))?;
        let parsed: toml::Value = toml::from_str::<ValueHolder>(&format!("v = {raw}"))
            .map(|h| h.v)
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        table.insert(leaf.to_string(), parsed);
    }
    let mut out: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    out.resolve()?;
    Ok(out)
}

#[derive(Deserialize)]
struct ValueHolder {
    v: toml::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_round_trip() {
        for name in ["standard", "needle"] {
            let cfg = preset(name).unwrap();
            let text = toml::to_string_pretty(&cfg).unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(cfg, back);
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn needle_preset_is_sparse() {
        let cfg = preset("needle").unwrap();
        // chance of a blind uniform policy hitting the reward: both the
        // answer token and the EOS after it must come up in a 40-way draw
        let v = cfg.env.vocab_size as f64;
        assert!(1.0 / (v * v) < 1e-3);
        assert_eq!(cfg.train.steps, 2000);
        assert_eq!(cfg.train.n_on + cfg.train.n_off, 8);
    }

    #[test]
    fn override_roundtrip_and_types() {
        let cfg = preset("standard").unwrap();
        let out = apply_overrides(
            &cfg,
            &[
                "train.lr=0.01".into(),
                "objective.variant=\"dapo\"".into(),
                "env.cells=3".into(),
                "name=custom".into(),
                "objective.dynamic_sampling=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(out.train.lr, 0.01);
        assert_eq!(out.objective.variant, Variant::Dapo);
        assert_eq!(out.env.cells, 3);
        assert_eq!(out.name, "custom");
        assert!(out.objective.dynamic_sampling);
        // untouched fields survive
        assert_eq!(out.train.steps, cfg.train.steps);
    }

    #[test]
    fn override_unknown_key_is_rejected_with_name() {
        let cfg = preset("standard").unwrap();
        match apply_overrides(&cfg, &["train.learning_rate=0.1".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
        match apply_overrides(&cfg, &["nonsense.path=1".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("nonsense"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn override_type_error_is_rejected() {
        let cfg = preset("standard").unwrap();
        match apply_overrides(&cfg, &["train.lr=\"fast\"".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("invalid") || msg.contains("lr"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn override_validation_still_applies() {
        let cfg = preset("standard").unwrap();
        match apply_overrides(&cfg, &["train.lr=0.0".into()]) {
            Err(Error::Config(msg)) => assert!(msg.contains("train.lr")),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_toml_key_is_rejected() {
        let cfg = preset("standard").unwrap();
        let mut value = toml::Value::try_from(&cfg).unwrap();
        value
            .get_mut("env")
            .unwrap()
            .as_table_mut()
            .unwrap()
            .insert("bogus".into(), toml::Value::Integer(3));
        let err: Result<ExperimentConfig> = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()));
        let msg = match err {
            Err(Error::Config(m)) => m,
            other => panic!("expected rejection, got {other:?}"),
        };
        assert!(msg.contains("bogus") || msg.contains("unknown"), "{msg}");
    }

    #[test]
    fn mlp_obs_dims_inherited_from_env() {
        let mut cfg = preset("standard").unwrap();
        cfg.arch = Arch::Mlp { hidden: 16, obs_dims: Vec::new() };
        cfg.resolve().unwrap();
        match &cfg.arch {
            Arch::Mlp { obs_dims, .. } => assert_eq!(*obs_dims, cfg.env.obs_dims()),
            _ => unreachable!(),
        }
        // mismatched dims are rejected
        cfg.arch = Arch::Mlp { hidden: 16, obs_dims: vec![1, 2, 3] };
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }
}
