use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::evald::EvalConfig;
use crate::fusion::FusionMode;
use crate::milhead::ImageAggregation;
use crate::priors::PriorConfig;
use crate::refine::MiningConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "WSOD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mil: f64,
    pub nce: f64,
    pub refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mil: 1.0,
            nce: 1.0,
            refine: 1.0,
        }
    }
}

/// Component switches, named after the ablation rows they enable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub siamese_nce: bool,
    pub fusion: bool,
    pub depth_oicr: bool,
    pub depth_attention: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        siamese_nce: true,
        fusion: true,
        depth_oicr: true,
        depth_attention: true,
    };

    pub fn needs_priors(&self) -> bool {
        self.depth_oicr || self.depth_attention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// The record's own `labels` field.
    #[default]
    Gt,
    /// Exact-match extraction from the record's caption.
    Captions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub sigma_on_sum: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig { sigma_on_sum: true }
    }
}

impl MilConfig {
    pub fn aggregation(&self) -> ImageAggregation {
        ImageAggregation::from_sigma_on_sum(self.sigma_on_sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceConfig {
    pub include_positive_in_sum: bool,
    pub proj_dim: usize,
    pub rho_init: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            include_positive_in_sum: false,
            proj_dim: 32,
            rho_init: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub branches: usize,
    pub iou_thresh: f64,
    pub score_ratio: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        let m = MiningConfig::default();
        RefineConfig {
            branches: 1,
            iou_thresh: m.iou_thresh,
            score_ratio: m.score_ratio,
        }
    }
}

impl RefineConfig {
    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            iou_thresh: self.iou_thresh,
            score_ratio: self.score_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub multiplier: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { multiplier: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Modality used at inference; the training modality when unset.
    pub mode: Option<FusionMode>,
    /// Detections must score strictly above this.
    pub min_score: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: None,
            min_score: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Off by default: wall time would make reports non-reproducible.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Images per SGD step and per NCE batch.
    pub batch_size: usize,
    /// Std of the Gaussian weight initialization.
    pub init_std: f64,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub label_source: LabelSource,
    pub priors: PriorConfig,
    pub mil: MilConfig,
    pub nce: NceConfig,
    pub refine: RefineConfig,
    pub attention: AttentionConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            init_std: 0.01,
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            label_source: LabelSource::default(),
            priors: PriorConfig::default(),
            mil: MilConfig::default(),
            nce: NceConfig::default(),
            refine: RefineConfig::default(),
            attention: AttentionConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            synthetic: SyntheticConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        for (name, v) in [("mil", w.mil), ("nce", w.nce), ("refine", w.refine)] {
            check(v.is_finite() && v >= 0.0, || {
                format!("weights.{name} must be a finite value >= 0, got {v}")
            })?;
        }
        check(self.epochs >= 1, || "epochs must be >= 1".into())?;
        check(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        check(self.lr.is_finite() && self.lr > 0.0, || {
            format!("lr must be positive, got {}", self.lr)
        })?;
        check((0.0..1.0).contains(&self.momentum), || {
            format!("momentum must be in [0, 1), got {}", self.momentum)
        })?;
        check(self.init_std.is_finite() && self.init_std >= 0.0, || {
            "init_std must be >= 0".into()
        })?;
        check(self.nce.proj_dim >= 1, || "nce.proj_dim must be >= 1".into())?;
        check(
            (crate::contrastive::RHO_MIN..=crate::contrastive::RHO_MAX).contains(&self.nce.rho_init),
            || format!("nce.rho_init must be in [0.01, 1], got {}", self.nce.rho_init),
        )?;
        check((0.0..=1.0).contains(&self.attention.multiplier), || {
            "attention.multiplier must be in [0, 1]".into()
        })?;
        check((0.0..=1.0).contains(&self.refine.iou_thresh), || {
            "refine.iou_thresh must be in [0, 1]".into()
        })?;
        check((0.0..=1.0).contains(&self.refine.score_ratio), || {
            "refine.score_ratio must be in [0, 1]".into()
        })?;
        check(self.priors.min_count >= 1 && self.priors.min_count_class >= 1, || {
            "priors.min_count values must be >= 1".into()
        })?;
        Ok(())
    }

    /// Builds a config from optional JSON text, `key=value` overrides and an
    /// optional seed override (the value of [`SEED_ENV`]), in that order.
    pub fn resolve(text: Option<&str>, sets: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::from_str(t)
                .map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for s in sets {
            apply_override(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON and
/// falls back to a plain string. `attention.enabled` and
/// `mining.depth_filter` (`on`/`off` or a boolean) are accepted as aliases
/// for the corresponding toggles.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let mut value: Value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let key = match key {
        "attention.enabled" => "toggles.depth_attention",
        "mining.depth_filter" => "toggles.depth_oicr",
        k => k,
    };
    if key.starts_with("toggles.") {
        if let Value::String(s) = &value {
            value = match s.as_str() {
                "on" => Value::Bool(true),
                "off" => Value::Bool(false),
                _ => value,
            };
        }
    }
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not an object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not address an object field")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
