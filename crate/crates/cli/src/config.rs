//! Run configuration: one JSON object with a section per module.
//!
//! ```json
//! {
//!   "preset": "toy",
//!   "seed": 7,
//!   "model": { "fusion": { "iterations": 2 } },
//!   "train": { "epochs": 5, "learning_rate": 0.002 },
//!   "synth": { "snr_min_db": -5.0 },
//!   "pesq_cmd": "pesq +16000 {ref} {est}"
//! }
//! ```
//!
//! Missing keys take the preset's values; unknown keys are rejected.
//! Command-line flags override the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use avse_core::model::{ModelConfig, Preset};
use avse_core::scene_data::SynthConfig;
use avse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_PRESET: &str = "toy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// When set, overrides `model.seed` and `train.seed` with values derived from it.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub pesq_cmd: Option<String>,
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let mut train = TrainConfig::default();
        if preset == Preset::Overfit {
            // Memorization runs are short; the default step size is too timid for them.
            train.learning_rate = 1e-2;
            train.epochs = 300;
            train.validate_every = 50;
        }
        Self { preset: preset.name().into(), seed: None, model: preset.model(), train, synth: preset.synth(), pesq_cmd: None }
    }

    /// Preset defaults overlaid with `overlay` (a JSON object), then seeds derived.
    pub fn from_value(overlay: Value, preset_flag: Option<&str>) -> Result<Self> {
        let Value::Object(ref obj) = overlay else { bail!("config must be a JSON object") };
        let name = preset_flag
            .map(str::to_string)
            .or_else(|| obj.get("preset").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let preset: Preset = name.parse()?;
        let mut base = serde_json::to_value(Self::for_preset(preset))?;
        merge(&mut base, overlay);
        base["preset"] = Value::String(name);
        let mut cfg: RunConfig = serde_json::from_value(base).context("invalid run config")?;
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset_flag: Option<&str>) -> Result<Self> {
        let overlay = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(overlay, preset_flag)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.model.seed = derive_seed(s, 1);
            self.train.seed = derive_seed(s, 2);
        }
    }
}

/// Per-module seed from the run seed (SplitMix64 finalizer over `seed + tag`).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
