//! Run configuration: nested structs on the Rust side, flat dotted keys on disk
//! and on the command line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use twophase::dataset::SynthSpec;
use twophase::training::{PhasePlan, TrainConfig};
use twophase::{ClassifierHead, ConvSpec, FcnConfig};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; fills every `*.rng_seed` that was not given explicitly.
    pub seed: u64,
    pub out: PathBuf,
    /// `data.samples` images are generated; the last `split.eval` form the eval split.
    pub data: SynthSpec,
    pub split: SplitConfig,
    pub network: NetworkConfig,
    pub plan: PlanConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub eval: usize,
}

/// The network minus everything the dataset determines. With the class-map
/// head a 1×1 conv with one channel per class is appended to `head_stack`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub feature_stack: Vec<ConvSpec>,
    pub feedback_layer_index: usize,
    pub head_stack: Vec<ConvSpec>,
    pub classifier: ClassifierHead,
    pub input_mean: f32,
    pub input_std: f32,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub phase_count: usize,
    /// Only the first `phase_count - 1` entries are used.
    pub thresholds: Vec<f64>,
    pub warm_start: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    Prior,
    Probs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance: usize,
    pub cue_fraction: f64,
    pub center_confidence: CenterMode,
    /// Eval images rendered by `report`.
    pub render_count: usize,
    /// Phases fused by weighted map voting.
    pub fused_phases: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = FcnConfig::toy(4, 0);
        let mut head_stack = toy.head_stack.clone();
        head_stack.pop();
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: SynthSpec::default(),
            split: SplitConfig { eval: 100 },
            network: NetworkConfig {
                feature_stack: toy.feature_stack,
                feedback_layer_index: toy.feedback_layer_index,
                head_stack,
                classifier: ClassifierHead::ClassMap,
                input_mean: toy.input_mean,
                input_std: toy.input_std,
                rng_seed: 0,
            },
            plan: PlanConfig {
                phase_count: 2,
                thresholds: vec![0.6, 0.4],
                warm_start: false,
            },
            train: TrainConfig {
                iterations: 1500,
                batch_size: 15,
                base_lr: 0.03,
                lr_drop_every: 1000,
                lr_drop_factor: 10.0,
                weight_decay: 0.0005,
                rng_seed: 0,
                checkpoint_every: 0,
            },
            eval: EvalConfig {
                tolerance: 3,
                cue_fraction: 0.2,
                center_confidence: CenterMode::Prior,
                render_count: 4,
                fused_phases: vec![1, 2],
            },
        }
    }
}

const SEED_KEYS: [&str; 3] = ["data.rng_seed", "network.rng_seed", "train.rng_seed"];

impl RunConfig {
    pub fn fcn(&self) -> FcnConfig {
        let mut head_stack = self.network.head_stack.clone();
        if self.network.classifier == ClassifierHead::ClassMap {
            head_stack.push(ConvSpec::new(self.data.class_count, 1, 1));
        }
        FcnConfig {
            input_size: self.data.image_size,
            input_channels: self.data.channels,
            class_count: self.data.class_count,
            feature_stack: self.network.feature_stack.clone(),
            feedback_layer_index: self.network.feedback_layer_index,
            head_stack,
            classifier: self.network.classifier,
            input_mean: self.network.input_mean,
            input_std: self.network.input_std,
            rng_seed: self.network.rng_seed,
        }
    }

    pub fn phase_plan(&self) -> PhasePlan {
        let count = self.plan.phase_count;
        let thresholds = self.plan.thresholds[..count.saturating_sub(1).min(self.plan.thresholds.len())].to_vec();
        let mut plan = PhasePlan::with_thresholds(thresholds, self.train.clone());
        plan.warm_start = self.plan.warm_start;
        plan
    }

    pub fn train_samples(&self) -> usize {
        self.data.samples.saturating_sub(self.split.eval)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::validation(m));
        self.data.validate()?;
        self.fcn().validate()?;
        if self.plan.phase_count == 0 {
            return bad("plan.phase_count must be at least 1".into());
        }
        if self.plan.thresholds.len() + 1 < self.plan.phase_count {
            return bad(format!(
                "plan.phase_count {} needs {} thresholds, plan.thresholds has {}",
                self.plan.phase_count,
                self.plan.phase_count - 1,
                self.plan.thresholds.len()
            ));
        }
        self.phase_plan().validate()?;
        if self.split.eval == 0 || self.split.eval >= self.data.samples {
            return bad(format!(
                "split.eval must lie in 1..{}, got {}",
                self.data.samples, self.split.eval
            ));
        }
        if !(self.eval.cue_fraction > 0.0 && self.eval.cue_fraction < 1.0) {
            return bad(format!("eval.cue_fraction must lie in (0, 1), got {}", self.eval.cue_fraction));
        }
        if let Some(p) = self
            .eval
            .fused_phases
            .iter()
            .find(|&&p| p == 0 || p > self.plan.phase_count)
        {
            return bad(format!("eval.fused_phases names phase {p}, the plan has {}", self.plan.phase_count));
        }
        if self.eval.fused_phases.is_empty() {
            return bad("eval.fused_phases is empty".into());
        }
        Ok(())
    }

    /// Flat dotted-key form, as written to `config.json`.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// `config.json` contents: version plus every flat key.
    pub fn echo(&self) -> Value {
        let mut map = Map::new();
        map.insert("version".into(), Value::String(VERSION.into()));
        for (k, v) in self.to_flat() {
            map.insert(k, v);
        }
        Value::Object(map)
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flat keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

/// Every key a config file or flag may set.
pub fn known_keys() -> Vec<String> {
    RunConfig::default().to_flat().into_keys().collect()
}

/// Parses a flag value: JSON when it parses, otherwise a plain string.
pub fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads a config file. Nested objects are accepted and flattened; `version` is ignored.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(twophase::Error::io(path, e)))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::validation(format!("{}: expected a JSON object", path.display())));
    }
    let mut flat = BTreeMap::new();
    flatten("", &value, &mut flat);
    if let Some(Value::String(v)) = flat.remove("version") {
        if v != VERSION {
            log::warn!("{} was written by version {v}, running {VERSION}", path.display());
        }
    }
    Ok(flat)
}

/// Merges defaults, then file keys, then flag keys, and derives unset seeds from `seed`.
pub fn resolve(
    file: &BTreeMap<String, Value>,
    flags: &BTreeMap<String, Value>,
) -> Result<RunConfig, CliError> {
    let mut flat = RunConfig::default().to_flat();
    let known: BTreeSet<String> = flat.keys().cloned().collect();
    for (key, value) in file.iter().chain(flags) {
        if !known.contains(key) {
            return Err(CliError::validation(format!("unknown config key `{key}`")));
        }
        flat.insert(key.clone(), value.clone());
    }
    let seed = flat["seed"].clone();
    for key in SEED_KEYS {
        if !file.contains_key(key) && !flags.contains_key(key) {
            flat.insert(key.to_string(), seed.clone());
        }
    }
    let config: RunConfig = serde_json::from_value(unflatten(&flat))
        .map_err(|e| CliError::validation(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), parse_flag_value(v))).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let config = resolve(&BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert_eq!(config, RunConfig::default());
        let back: BTreeMap<String, Value> = config.to_flat();
        assert_eq!(resolve(&back, &BTreeMap::new()).unwrap(), config);
    }

    #[test]
    fn precedence_flags_over_file() {
        let file = flags(&[("train.base_lr", "0.5"), ("train.iterations", "7")]);
        let cli = flags(&[("train.base_lr", "0.25")]);
        let config = resolve(&file, &cli).unwrap();
        assert_eq!(config.train.base_lr, 0.25);
        assert_eq!(config.train.iterations, 7);
    }

    #[test]
    fn seed_propagates_unless_explicit() {
        let config = resolve(&BTreeMap::new(), &flags(&[("seed", "7"), ("train.rng_seed", "3")])).unwrap();
        assert_eq!(config.data.rng_seed, 7);
        assert_eq!(config.network.rng_seed, 7);
        assert_eq!(config.train.rng_seed, 3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(resolve(&BTreeMap::new(), &flags(&[("train.nope", "1")])).is_err());
        assert!(resolve(&BTreeMap::new(), &flags(&[("plan.phase_count", "4")])).is_err());
        assert!(resolve(&BTreeMap::new(), &flags(&[("train.base_lr", "fast")])).is_err());
        assert!(resolve(&BTreeMap::new(), &flags(&[("eval.fused_phases", "[1, 3]")])).is_err());
    }

    #[test]
    fn class_map_conv_is_appended() {
        let config = resolve(&BTreeMap::new(), &flags(&[("data.class_count", "3")])).unwrap();
        let fcn = config.fcn();
        assert_eq!(fcn.head_stack.last(), Some(&ConvSpec::new(3, 1, 1)));
        assert_eq!(config.phase_plan().thresholds, vec![0.6]);
    }
}
