use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{infer, train, RunConfig, RunReport, Toggles};
use crate::data::{ClassVocabulary, ImageRecord};
use crate::error::{Error, Result};
use crate::evald::{format_table, EvalReport};
use crate::fusion::FusionMode;
use crate::priors::{estimate_priors, PriorStats};

const SIAMESE: Toggles = Toggles {
    siamese_nce: true,
    fusion: false,
    depth_oicr: false,
    depth_attention: false,
};

/// Row names and toggle sets, baseline first. Every depth component is
/// layered on top of the Siamese objective; the amplifier enables all.
pub const ABLATION_ROWS: [(&str, Toggles); 6] = [
    ("Baseline", Toggles {
        siamese_nce: false,
        fusion: false,
        depth_oicr: false,
        depth_attention: false,
    }),
    ("Siamese-Only", SIAMESE),
    ("Fusion", Toggles { fusion: true, ..SIAMESE }),
    ("Depth-Oicr", Toggles { depth_oicr: true, ..SIAMESE }),
    ("Depth-Attention", Toggles { depth_attention: true, ..SIAMESE }),
    ("Wsod-Amplifier", Toggles::ALL),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub eval: EvalReport,
    /// Final-epoch mining precision.
    pub mining_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    /// Whether priors were supplied or estimated from the baseline.
    pub priors_estimated: bool,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<(String, &EvalReport)> =
            self.rows.iter().map(|r| (r.name.clone(), &r.eval)).collect();
        let mut out = format_table(&rows);
        let _ = writeln!(out);
        for r in &self.rows {
            let mp = r
                .mining_precision
                .map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(out, "{:<16} mining precision {mp}", r.name);
        }
        out
    }
}

fn run_row(
    name: &str,
    toggles: Toggles,
    base: &RunConfig,
    records: &[ImageRecord],
    vocab: &ClassVocabulary,
    priors: Option<&PriorStats>,
) -> Result<(AblationRow, RunReport, crate::Model)> {
    let cfg = RunConfig {
        toggles,
        ..base.clone()
    };
    let out = train(&cfg, records, vocab, priors)?;
    let eval = out
        .report
        .eval
        .clone()
        .ok_or_else(|| Error::Config("ablation needs annotated records (gt_boxes)".into()))?;
    let row = AblationRow {
        name: name.to_string(),
        toggles,
        eval,
        mining_precision: out.report.final_epoch().mining_precision,
    };
    Ok((row, out.report, out.model))
}

/// Trains every row of [`ABLATION_ROWS`] from the same seed. Without
/// `priors`, they are estimated from the baseline's detections.
pub fn run_ablation(
    config: &RunConfig,
    records: &[ImageRecord],
    vocab: &ClassVocabulary,
    priors: Option<&PriorStats>,
) -> Result<AblationReport> {
    config.validate()?;
    if records.iter().any(|r| r.gt_boxes.is_none()) {
        return Err(Error::Config("ablation needs annotated records (gt_boxes)".into()));
    }
    let (name, toggles) = ABLATION_ROWS[0];
    let (baseline, _, model) = run_row(name, toggles, config, records, vocab, None)?;
    let estimated;
    let priors_estimated = priors.is_none();
    let priors = match priors {
        Some(p) => p,
        None => {
            let mode = config.inference.mode.unwrap_or(FusionMode::RgbOnly);
            let dets = infer(&model, records, mode, config.mil.aggregation(), 0.0)?;
            estimated = estimate_priors(records, &dets, vocab.len(), &config.priors)?.0;
            &estimated
        }
    };
    let mut rows = vec![baseline];
    for &(name, toggles) in &ABLATION_ROWS[1..] {
        rows.push(run_row(name, toggles, config, records, vocab, Some(priors))?.0);
    }
    Ok(AblationReport {
        seed: config.seed,
        priors_estimated,
        rows,
    })
}
