//! Flat dotted-key run configuration with `--key=value` overrides.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agent::AcConfig;
use crate::envs::{env_spec, ENV_NAMES};
use crate::variants::{make_variant, VariantConfig};
use crate::world_model::WmConfig;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub variant: String,
    pub env: String,
    pub seed: u64,
    /// Environment-step budget.
    pub steps: u64,
    /// Target-channel noise std; 0 disables the noise wrapper.
    pub obs_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Environment steps per update cycle.
    pub every: u64,
    pub batch: usize,
    pub seq_len: usize,
    /// Replayed states used as imagination starts per update.
    pub imag_starts: usize,
    pub warmup_episodes: u64,
    pub replay_capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub every: u64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// 0 disables the in-training probe.
    pub every: u64,
    pub transitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    /// 0 keeps only the final checkpoint.
    pub every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub checkpoint: CheckpointSection,
    pub wm: WmConfig,
    pub ac: AcConfig,
    pub variant: VariantConfig,
}

/// Default step budget per environment.
pub fn default_budget(env: &str) -> u64 {
    match env {
        "blind_nav" => 100_000,
        _ => 200_000,
    }
}

impl RunConfig {
    /// Defaults for a variant and environment.
    pub fn preset(variant: &str, env: &str) -> Result<Self, HarnessError> {
        let variant_cfg = make_variant(variant).map_err(|e| HarnessError::config("run.variant", e.to_string()))?;
        env_spec(env).map_err(|e| HarnessError::config("run.env", e.to_string()))?;
        Ok(Self {
            run: RunSection {
                variant: variant.to_string(),
                env: env.to_string(),
                seed: 0,
                steps: default_budget(env),
                obs_noise: 0.0,
            },
            train: TrainSection {
                every: 10,
                batch: 16,
                seq_len: 32,
                imag_starts: 64,
                warmup_episodes: 5,
                replay_capacity: crate::replay::DEFAULT_CAPACITY,
            },
            eval: EvalSection {
                every: 15_000,
                episodes: 15,
            },
            probe: ProbeSection {
                every: 5_000,
                transitions: 500,
            },
            checkpoint: CheckpointSection { every: 25_000 },
            wm: WmConfig::default(),
            ac: AcConfig::default(),
            variant: variant_cfg,
        })
    }

    /// Resolve a config text plus overrides: the variant preset and
    /// environment are read first, then every given key replaces a default.
    pub fn resolve(text: &str, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::config("<config>", e.message().to_string()))?;
        let mut given = BTreeMap::new();
        flatten("", &table, &mut given);
        for (key, raw) in overrides {
            given.insert(key.clone(), parse_override(raw));
        }
        let as_str = |key: &str, default: &str| -> Result<String, HarnessError> {
            match given.get(key) {
                None => Ok(default.to_string()),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(v) => Err(HarnessError::config(key, format!("expected a string, got {v}"))),
            }
        };
        let variant = as_str("run.variant", "scaffolder")?;
        let env = as_str("run.env", "blind_nav")?;
        let preset = Self::preset(&variant, &env)?;
        let mut flat = preset.to_flat();
        for (key, value) in given {
            let default = flat
                .get(&key)
                .ok_or_else(|| HarnessError::config(&key, "unknown configuration key".into()))?;
            let value = coerce(&key, default, value)?;
            flat.insert(key, value);
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_flat(&self) -> BTreeMap<String, Value> {
        let table = Table::try_from(self).expect("config serializes to a table");
        let mut out = BTreeMap::new();
        flatten("", &table, &mut out);
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, HarnessError> {
        let mut root = Table::new();
        for (key, value) in flat {
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .expect("sections are tables");
            }
            node.insert(parts[parts.len() - 1].to_string(), value.clone());
        }
        Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::config("<config>", e.message().to_string()))
    }

    /// One `key = value` line per field, sorted by key.
    pub fn to_toml(&self) -> String {
        self.to_flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        let mut need = |ok: bool, field: &str, msg: &str| {
            if !ok {
                problems.push((field.to_string(), msg.to_string()));
            }
        };
        need(ENV_NAMES.contains(&self.run.env.as_str()), "run.env", "unknown environment");
        need(self.run.steps > 0, "run.steps", "must be positive");
        need(self.run.obs_noise >= 0.0, "run.obs_noise", "must be non-negative");
        need(self.train.every > 0, "train.every", "must be positive");
        need(self.train.batch > 0, "train.batch", "must be positive");
        need(self.train.seq_len >= 2, "train.seq_len", "must be at least 2");
        need(self.train.imag_starts > 0, "train.imag_starts", "must be positive");
        need(self.train.replay_capacity > 0, "train.replay_capacity", "must be positive");
        need(self.eval.every > 0, "eval.every", "must be positive");
        need(self.eval.episodes > 0, "eval.episodes", "must be positive");
        need(self.ac.horizon > 0, "ac.horizon", "must be positive");
        need((0.0..=1.0).contains(&self.ac.gamma), "ac.gamma", "must lie in [0, 1]");
        need((0.0..=1.0).contains(&self.ac.lambda), "ac.lambda", "must lie in [0, 1]");
        need(self.wm.deter > 0 && self.wm.stoch > 0, "wm.deter", "latent sizes must be positive");
        need(self.wm.min_std > 0.0, "wm.min_std", "must be positive");
        let cutoff = self.variant.dropout_cutoff_frac;
        need(cutoff > 0.0 && cutoff <= 1.0, "variant.dropout_cutoff_frac", "must lie in (0, 1]");
        need(self.variant.bc_weight >= 0.0, "variant.bc_weight", "must be non-negative");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(problems))
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Read a CLI value as a TOML literal, falling back to a bare string.
fn parse_override(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn coerce(key: &str, default: &Value, value: Value) -> Result<Value, HarnessError> {
    let mismatch = |v: &Value| HarnessError::config(key, format!("expected a {}, got `{v}`", default.type_str()));
    match (default, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Integer(_), Value::Integer(i)) if i < 0 => Err(HarnessError::config(key, format!("must be non-negative, got {i}"))),
        (d, v) if d.same_type(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}
