//! End-to-end runs: training, inference and the ablation sweep.

mod ablation;
mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationReport, AblationRow, ABLATION_ROWS};
pub use config::{
    apply_override, AttentionConfig, InferenceConfig, LabelSource, LossWeights, MilConfig,
    NceConfig, RefineConfig, ReportConfig, RunConfig, Toggles, SEED_ENV,
};

use crate::contrastive::nce_step;
use crate::data::{extract_labels, ClassVocabulary, ImageRecord};
use crate::error::{Error, Result};
use crate::evald::{evaluate, iou, nms, Detection, EvalReport};
use crate::fusion::{self, forward_features, mode_scores, FusionMode};
use crate::milhead::{
    image_prediction, image_prediction_backward, mil_loss, probabilities, probabilities_backward,
    ImageAggregation,
};
use crate::model::ModelDims;
use crate::Model;
use crate::numkit::{sgd_step, Matrix, Parameters};
use crate::priors::{depth_mask, DepthMask, PriorStats};
use crate::refine::{attention_factors, mine, refinement_loss, refinement_targets, PseudoBoxSet};

/// Mean losses over one epoch's batches, plus mining diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mil: f64,
    pub nce: f64,
    pub refine: f64,
    pub total: f64,
    /// Fraction of first-branch seeds overlapping a same-class GT box by at
    /// least 0.5; `None` without annotations.
    pub mining_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: RunConfig,
    pub epochs: Vec<EpochStats>,
    /// Evaluation of the trained model on the training records, when they
    /// are annotated.
    pub eval: Option<EvalReport>,
    pub wall_time_secs: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn final_epoch(&self) -> &EpochStats {
        self.epochs.last().expect("at least one epoch")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub report: RunReport,
}

/// Image-level labels for every record under `source`.
pub fn resolve_labels(
    records: &[ImageRecord],
    source: LabelSource,
    vocab: &ClassVocabulary,
) -> Result<Vec<BTreeSet<usize>>> {
    records
        .iter()
        .map(|r| match source {
            LabelSource::Gt => r
                .labels
                .clone()
                .ok_or_else(|| Error::validation(&r.image_id, "labels", "missing (label_source=gt)")),
            LabelSource::Captions => r
                .caption
                .as_deref()
                .map(|c| extract_labels(c, vocab))
                .ok_or_else(|| {
                    Error::validation(&r.image_id, "caption", "missing (label_source=captions)")
                }),
        })
        .collect()
}

pub fn masks_from_priors(records: &[ImageRecord], stats: &PriorStats, num_classes: usize) -> Vec<DepthMask> {
    records.iter().map(|r| depth_mask(r, stats, num_classes)).collect()
}

fn check_records(records: &[ImageRecord], num_classes: usize) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let d = first.feature_dim();
    for r in records {
        r.validate(num_classes)?;
        if r.feature_dim() != d {
            return Err(Error::validation(
                &r.image_id,
                "rgb_features",
                format!("feature dim {} differs from {d}", r.feature_dim()),
            ));
        }
    }
    Ok(d)
}

/// Trains with labels taken from `config.label_source` and depth masks
/// derived from `priors`, which must be present when a depth toggle is on.
pub fn train(
    config: &RunConfig,
    records: &[ImageRecord],
    vocab: &ClassVocabulary,
    priors: Option<&PriorStats>,
) -> Result<TrainOutput> {
    config.validate()?;
    if config.toggles.needs_priors() && priors.is_none() {
        return Err(Error::Config(
            "depth_oicr/depth_attention need depth priors (run estimate-priors first)".into(),
        ));
    }
    let labels = resolve_labels(records, config.label_source, vocab)?;
    let masks = priors.map(|p| masks_from_priors(records, p, vocab.len()));
    train_with(config, records, vocab.len(), &labels, masks.as_deref())
}

/// Seeds of a mined set that land on a same-class GT box.
fn mining_hits(record: &ImageRecord, pseudo: &PseudoBoxSet<f64>) -> Option<(usize, usize)> {
    let gts = record.gt_boxes.as_ref()?;
    let hits = pseudo
        .classes
        .iter()
        .filter(|p| {
            gts.iter()
                .any(|g| g.class_id == p.class_id && iou(&record.proposals[p.seed], &g.bbox) >= 0.5)
        })
        .count();
    Some((hits, pseudo.classes.len()))
}

/// Training loop with explicit labels and depth masks.
pub fn train_with(
    config: &RunConfig,
    records: &[ImageRecord],
    num_classes: usize,
    labels: &[BTreeSet<usize>],
    masks: Option<&[DepthMask]>,
) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();
    let d = check_records(records, num_classes)?;
    if labels.len() != records.len() {
        return Err(Error::Config(format!(
            "{} label sets for {} records",
            labels.len(),
            records.len()
        )));
    }
    let toggles = config.toggles;
    let masks = match masks {
        Some(m) if m.len() != records.len() => {
            return Err(Error::Config(format!("{} masks for {} records", m.len(), records.len())))
        }
        Some(m) => Some(m),
        None if toggles.needs_priors() => {
            return Err(Error::Config(
                "depth_oicr/depth_attention need depth priors".into(),
            ))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = ModelDims {
        feature_dim: d,
        num_classes,
        proj_dim: config.nce.proj_dim,
        refine_branches: config.refine.branches,
    };
    let mut model = Model::init(dims, config.nce.rho_init, config.init_std, &mut rng);
    let mode = FusionMode::for_training(toggles.fusion);
    let agg = config.mil.aggregation();
    let mining_cfg = config.refine.mining();
    let w = config.weights;
    let refining = w.refine > 0.0 && !model.refine.is_empty();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut s_mil, mut s_nce, mut s_ref, mut s_tot) = (0.0, 0.0, 0.0, 0.0);
        let (mut hits, mut seeds, mut annotated) = (0usize, 0usize, true);
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let inv_b = 1.0 / batch.len() as f64;
            let (mut l_mil, mut l_ref, mut l_nce) = (0.0, 0.0, 0.0);
            for &n in batch {
                let rec = &records[n];
                let mask = masks.map(|m| &m[n]);
                let (det, cls) = mode_scores(&rec.rgb_features, &rec.depth_features, &model, mode)?;
                let pack = probabilities(det, cls, agg)?;
                let factors = match mask {
                    Some(m) if toggles.depth_attention => {
                        Some(attention_factors(m, config.attention.multiplier))
                    }
                    _ => None,
                };
                let attended = match &factors {
                    Some(f) => pack.p_comb.hadamard(f)?,
                    None => pack.p_comb.clone(),
                };
                let p_hat = image_prediction(&attended, agg);
                let (loss, g_hat) = mil_loss(&p_hat, &labels[n]);
                l_mil += loss * inv_b;
                if w.mil > 0.0 {
                    let scale = w.mil * inv_b;
                    let g_hat: Vec<f64> = g_hat.iter().map(|g| g * scale).collect();
                    let mut g_comb = image_prediction_backward(&p_hat, &g_hat, rec.num_proposals(), agg);
                    if let Some(f) = &factors {
                        g_comb = g_comb.hadamard(f)?;
                    }
                    let (gd, gc) = probabilities_backward(&pack, &g_comb)?;
                    fusion::backward(&rec.rgb_features, &rec.depth_features, &mut model, mode, &gd, &gc)?;
                }

                // Mining always runs on the first branch's supervision so the
                // precision diagnostic exists even when refinement is off.
                let filter = if toggles.depth_oicr { mask } else { None };
                let pseudo = mine(&rec.proposals, &pack.p_comb, filter, &labels[n], &mining_cfg)?;
                match mining_hits(rec, &pseudo) {
                    Some((h, s)) => {
                        hits += h;
                        seeds += s;
                    }
                    None => annotated = false,
                }
                if refining {
                    let mut pseudo = pseudo;
                    for k in 0..model.refine.len() {
                        let targets = refinement_targets(
                            &rec.proposals,
                            &pseudo,
                            num_classes,
                            mining_cfg.iou_thresh,
                        );
                        let q = model.refine[k].probabilities(&rec.rgb_features)?;
                        l_ref += inv_b
                            * refinement_loss(
                                &rec.rgb_features,
                                &targets,
                                &mut model.refine[k],
                                w.refine * inv_b,
                            )?;
                        if k + 1 < model.refine.len() {
                            let sup = Matrix::from_rows(
                                &q.to_rows()
                                    .into_iter()
                                    .map(|r| r[..num_classes].to_vec())
                                    .collect::<Vec<_>>(),
                            )?;
                            pseudo = mine(&rec.proposals, &sup, filter, &labels[n], &mining_cfg)?;
                        }
                    }
                }
            }
            if toggles.siamese_nce && batch.len() >= 2 {
                let pool = |f: fn(&ImageRecord) -> &Matrix<f64>| -> Result<Matrix<f64>> {
                    let rows: Vec<Vec<f64>> = batch
                        .iter()
                        .map(|&n| f(&records[n]).mean_rows().into_vec())
                        .collect();
                    Matrix::from_rows(&rows)
                };
                let pr = pool(|r| &r.rgb_features)?;
                let pd = pool(|r| &r.depth_features)?;
                l_nce = nce_step(
                    &pr,
                    &pd,
                    &mut model.projection,
                    config.nce.include_positive_in_sum,
                    w.nce,
                )?;
            }
            let total = w.mil * l_mil + w.nce * l_nce + w.refine * l_ref;
            if !total.is_finite() {
                return Err(Error::Optimizer {
                    param: format!("total loss (epoch {epoch})"),
                });
            }
            sgd_step(&mut model, config.lr, config.momentum)?;
            model.projection.clamp_rho();
            s_mil += l_mil;
            s_nce += l_nce;
            s_ref += l_ref;
            s_tot += total;
            batches += 1;
        }
        let nb = batches as f64;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            mil: s_mil / nb,
            nce: s_nce / nb,
            refine: s_ref / nb,
            total: s_tot / nb,
            mining_precision: (annotated && seeds > 0).then(|| hits as f64 / seeds as f64),
        });
    }

    let eval = if records.iter().all(|r| r.gt_boxes.is_some()) {
        let mode = config.inference.mode.unwrap_or(mode);
        let dets = infer(&model, records, mode, agg, config.inference.min_score)?;
        Some(evaluate(&dets, records, num_classes, &config.eval)?)
    } else {
        None
    };
    let report = RunReport {
        seed: config.seed,
        config: config.clone(),
        epochs,
        eval,
        wall_time_secs: config
            .report
            .record_wall_time
            .then(|| started.elapsed().as_secs_f64()),
    };
    Ok(TrainOutput { model, report })
}

/// Per-class NMS threshold applied to inference output.
pub const INFER_NMS: f64 = 0.5;

/// Detections for every record: confidence is the combined score under
/// `mode`; entries strictly above `min_score` survive, then per-class NMS.
pub fn infer(
    model: &Model,
    records: &[ImageRecord],
    mode: FusionMode,
    aggregation: ImageAggregation,
    min_score: f64,
) -> Result<Vec<Detection>> {
    let dims = model.dims();
    let mut out = Vec::new();
    for rec in records {
        if rec.feature_dim() != dims.feature_dim {
            return Err(Error::Checkpoint(format!(
                "image `{}` has feature dim {}, checkpoint expects {}",
                rec.image_id,
                rec.feature_dim(),
                dims.feature_dim
            )));
        }
        let pack = forward_features(&rec.rgb_features, &rec.depth_features, model, mode, aggregation)?;
        let mut dets = Vec::new();
        for (i, b) in rec.proposals.iter().enumerate() {
            for c in 0..dims.num_classes {
                let conf = pack.p_comb[(i, c)];
                if conf > min_score {
                    dets.push(Detection {
                        image_id: rec.image_id.clone(),
                        class_id: c,
                        bbox: *b,
                        confidence: conf,
                    });
                }
            }
        }
        out.extend(nms(&dets, INFER_NMS));
    }
    Ok(out)
}

/// Rebuilds a model from checkpoint tensors, inferring its dimensions.
pub fn model_from_checkpoint(entries: &BTreeMap<String, Matrix<f64>>) -> Result<Model> {
    let shape = |name: &str| {
        entries
            .get(name)
            .map(Matrix::shape)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    let (d, c) = shape("rgb_head.w_det")?;
    let (_, p) = shape("projection.w")?;
    let branches = entries
        .keys()
        .filter(|k| k.starts_with("refine.") && k.ends_with(".w"))
        .count();
    let dims = ModelDims {
        feature_dim: d,
        num_classes: c,
        proj_dim: p,
        refine_branches: branches,
    };
    let mut model = Model::zeros(dims, 0.1);
    crate::numkit::checkpoint::restore(&mut model, entries)?;
    Ok(model)
}
