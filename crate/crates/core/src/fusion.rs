//! Late fusion of RGB and depth head scores and the modality selector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::milhead::{probabilities, score, score_backward, ImageAggregation, ScorePack};
use crate::model::ModelParams;
use crate::numkit::{Matrix, Scalar};

/// Which modality's scores feed the probability chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    #[serde(rename = "rgb")]
    RgbOnly,
    Fused,
    #[serde(rename = "depth")]
    DepthOnly,
}

impl FusionMode {
    /// Mode used while training: fused when fusion is enabled.
    pub fn for_training(fusion_enabled: bool) -> Self {
        if fusion_enabled {
            FusionMode::Fused
        } else {
            FusionMode::RgbOnly
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(FusionMode::RgbOnly),
            "fused" => Ok(FusionMode::Fused),
            "depth" => Ok(FusionMode::DepthOnly),
            other => Err(Error::Config(format!(
                "unknown inference mode `{other}` (expected rgb, fused or depth)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::RgbOnly => "rgb",
            FusionMode::Fused => "fused",
            FusionMode::DepthOnly => "depth",
        })
    }
}

/// Elementwise sum of the two modalities' (det, cls) score pairs.
pub fn fuse<T: Scalar>(
    rgb: (&Matrix<T>, &Matrix<T>),
    depth: (&Matrix<T>, &Matrix<T>),
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((rgb.0.add(depth.0)?, rgb.1.add(depth.1)?))
}

/// Raw (det, cls) scores under `mode`.
pub fn mode_scores<T: Scalar>(
    rgb_features: &Matrix<T>,
    depth_features: &Matrix<T>,
    model: &ModelParams<T>,
    mode: FusionMode,
) -> Result<(Matrix<T>, Matrix<T>)> {
    match mode {
        FusionMode::RgbOnly => score(rgb_features, &model.rgb_head),
        FusionMode::DepthOnly => score(depth_features, &model.depth_head),
        FusionMode::Fused => {
            let v = score(rgb_features, &model.rgb_head)?;
            let d = score(depth_features, &model.depth_head)?;
            fuse((&v.0, &v.1), (&d.0, &d.1))
        }
    }
}

/// Full probability chain for one image from its feature matrices.
pub fn forward_features<T: Scalar>(
    rgb_features: &Matrix<T>,
    depth_features: &Matrix<T>,
    model: &ModelParams<T>,
    mode: FusionMode,
    aggregation: ImageAggregation,
) -> Result<ScorePack<T>> {
    let (det, cls) = mode_scores(rgb_features, depth_features, model, mode)?;
    probabilities(det, cls, aggregation)
}

pub fn forward(
    record: &ImageRecord,
    model: &ModelParams<f64>,
    mode: FusionMode,
    aggregation: ImageAggregation,
) -> Result<ScorePack<f64>> {
    forward_features(
        &record.rgb_features,
        &record.depth_features,
        model,
        mode,
        aggregation,
    )
}

/// Routes score gradients to the heads that produced them. A sum passes
/// its gradient unchanged to both operands.
pub fn backward<T: Scalar>(
    rgb_features: &Matrix<T>,
    depth_features: &Matrix<T>,
    model: &mut ModelParams<T>,
    mode: FusionMode,
    g_det: &Matrix<T>,
    g_cls: &Matrix<T>,
) -> Result<()> {
    if mode != FusionMode::DepthOnly {
        score_backward(rgb_features, &mut model.rgb_head, g_det, g_cls)?;
    }
    if mode != FusionMode::RgbOnly {
        score_backward(depth_features, &mut model.depth_head, g_det, g_cls)?;
    }
    Ok(())
}
