use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;

use wsod_core::contrastive::{nce_loss, project, ProjectionParams};
use wsod_core::data::{extract_labels, proposal_depth, BBox, ClassVocabulary, DepthMap};
use wsod_core::evald::{average_precision, iou, nms, Detection, GroundTruth};
use wsod_core::fusion::{fuse, forward_features, FusionMode};
use wsod_core::milhead::{image_prediction, mil_loss, probabilities, score, HeadParams, ImageAggregation};
use wsod_core::model::{ModelDims, ModelParams};
use wsod_core::numkit::{softmax_cols, softmax_rows, Matrix, Parameters};
use wsod_core::priors::{freeze_range, DepthMask, DepthRange, PriorStats, RunningMoments};
use wsod_core::refine::{depth_attention, mine, MiningConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix<f64>> {
    vec(lo..hi, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
}

fn sized_matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| matrix(r, c, -20.0, 20.0))
}

fn bbox(size: f64) -> impl Strategy<Value = BBox> {
    (0.0..size * 0.8, 0.0..size * 0.8, 1.0..size * 0.2, 1.0..size * 0.2)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    // ---- softmax ----

    #[test]
    fn softmax_is_a_simplex(s in sized_matrix(6, 5)) {
        let pc = softmax_cols(&s);
        for c in 0..s.cols() {
            let col = pc.column(c);
            prop_assert!(col.iter().all(|&p| p >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let pr = softmax_rows(&s);
        for i in 0..s.rows() {
            prop_assert!(pr.row(i).iter().all(|&p| p >= 0.0));
            prop_assert!((pr.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant(s in sized_matrix(6, 5), k in -50.0f64..50.0) {
        let shifted = s.map(|v| v + k);
        prop_assert!(softmax_cols(&shifted).max_abs_diff(&softmax_cols(&s)) <= 1e-12);
        prop_assert!(softmax_rows(&shifted).max_abs_diff(&softmax_rows(&s)) <= 1e-12);
    }

    // ---- MIL head ----

    #[test]
    fn image_prediction_bounds(
        (det, cls) in (1usize..8, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c, -10.0, 10.0), matrix(r, c, -10.0, 10.0)))
    ) {
        let pack = probabilities(det, cls, ImageAggregation::SigmoidOfSum).unwrap();
        let upper = 1.0 / (1.0 + (-1.0f64).exp());
        for &p in &pack.p_hat {
            prop_assert!((0.5..=upper + 1e-15).contains(&p), "{p}");
        }
    }

    #[test]
    fn det_column_shift_leaves_scores(
        (det, cls, col, k) in (1usize..8, 1usize..5)
            .prop_flat_map(|(r, c)| (matrix(r, c, -5.0, 5.0), matrix(r, c, -5.0, 5.0), 0..c, -30.0f64..30.0))
    ) {
        let mut shifted = det.clone();
        for i in 0..shifted.rows() {
            shifted[(i, col)] += k;
        }
        let labels = BTreeSet::from([0]);
        let a = probabilities(det, cls.clone(), ImageAggregation::SigmoidOfSum).unwrap();
        let b = probabilities(shifted, cls, ImageAggregation::SigmoidOfSum).unwrap();
        prop_assert!(a.p_det.max_abs_diff(&b.p_det) <= 1e-12);
        prop_assert!(a.p_comb.max_abs_diff(&b.p_comb) <= 1e-12);
        prop_assert!((mil_loss(&a.p_hat, &labels).0 - mil_loss(&b.p_hat, &labels).0).abs() <= 1e-12);
    }

    #[test]
    fn negative_classes_cost_at_least_ln2(
        (det, cls, labels) in (1usize..8, 1usize..5).prop_flat_map(|(r, c)| (
            matrix(r, c, -5.0, 5.0),
            matrix(r, c, -5.0, 5.0),
            proptest::sample::subsequence((0..c).collect::<Vec<_>>(), 0..=c),
        ))
    ) {
        let labels: BTreeSet<usize> = labels.into_iter().collect();
        let pack = probabilities(det, cls, ImageAggregation::SigmoidOfSum).unwrap();
        let negatives = pack.p_hat.len() - labels.len();
        let (loss, _) = mil_loss(&pack.p_hat, &labels);
        prop_assert!(loss >= 0.0);
        prop_assert!(loss >= negatives as f64 * 2f64.ln() - 1e-12);
    }

    // ---- contrastive ----

    #[test]
    fn nce_nonnegative_and_symmetric(
        (a, b) in (1usize..6, 1usize..5).prop_flat_map(|(n, d)| (matrix(n, d, -3.0, 3.0), matrix(n, d, -3.0, 3.0))),
        rho in 0.01f64..1.0,
        include in any::<bool>(),
    ) {
        let mut proj = ProjectionParams::new(a.cols(), a.cols(), rho);
        proj.w_proj.value = Matrix::identity(a.cols());
        let (ea, eb) = match (project(&a, &proj), project(&b, &proj)) {
            (Ok(x), Ok(y)) => (x.embedding, y.embedding),
            _ => return Ok(()), // rows too close to zero to normalize
        };
        let ab = nce_loss(&ea, &eb, rho, include).unwrap().loss;
        let ba = nce_loss(&eb, &ea, rho, include).unwrap().loss;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn nce_batch_permutation_invariant(
        (a, b, perm) in (2usize..6, 2usize..5).prop_flat_map(|(n, d)| (
            matrix(n, d, -1.0, 1.0).prop_map(|m| normalize(&m)),
            matrix(n, d, -1.0, 1.0).prop_map(|m| normalize(&m)),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )),
        rho in 0.05f64..1.0,
    ) {
        let pa = permute(&a, &perm);
        let pb = permute(&b, &perm);
        let l1 = nce_loss(&a, &b, rho, false).unwrap().loss;
        let l2 = nce_loss(&pa, &pb, rho, false).unwrap().loss;
        prop_assert!((l1 - l2).abs() <= 1e-12);
    }

    // ---- fusion ----

    #[test]
    fn fused_det_shift_leaves_p_det(seed in any::<u64>(), k in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims { feature_dim: 4, num_classes: 3, proj_dim: 2, refine_branches: 0 };
        let model = ModelParams::<f64>::init(dims, 0.1, 1.0, &mut rng);
        let x = Matrix::from_rows(&common_rows(&mut rng, 5, 4)).unwrap();
        let y = Matrix::from_rows(&common_rows(&mut rng, 5, 4)).unwrap();
        let (rd, rc) = score(&x, &model.rgb_head).unwrap();
        let (dd, dc) = score(&y, &model.depth_head).unwrap();
        let (det, cls) = fuse((&rd, &rc), (&dd, &dc)).unwrap();
        let shifted = det.map(|v| v + k);
        let a = probabilities(det, cls.clone(), ImageAggregation::SigmoidOfSum).unwrap();
        let b = probabilities(shifted, cls, ImageAggregation::SigmoidOfSum).unwrap();
        prop_assert!(a.p_det.max_abs_diff(&b.p_det) <= 1e-12);
    }

    #[test]
    fn zero_depth_head_identity(seed in any::<u64>(), r in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims { feature_dim: 5, num_classes: 3, proj_dim: 2, refine_branches: 0 };
        let mut model = ModelParams::<f64>::init(dims, 0.1, 1.0, &mut rng);
        for t in model.depth_head.params_mut() {
            t.value.fill(0.0);
        }
        let x = Matrix::from_rows(&common_rows(&mut rng, r, 5)).unwrap();
        let y = Matrix::from_rows(&common_rows(&mut rng, r, 5)).unwrap();
        let agg = ImageAggregation::SigmoidOfSum;
        let fused = forward_features(&x, &y, &model, FusionMode::Fused, agg).unwrap();
        let rgb = forward_features(&x, &y, &model, FusionMode::RgbOnly, agg).unwrap();
        prop_assert_eq!(fused, rgb);
    }

    // ---- data ----

    #[test]
    fn proposal_depth_in_unit_interval(
        (w, h, vals) in (1usize..8, 1usize..8).prop_flat_map(|(w, h)| (Just(w), Just(h), vec(0.0f64..=1.0, w * h))),
        (x1, y1, x2, y2) in (0.0f64..4.0, 0.0f64..4.0, 4.0f64..8.0, 4.0f64..8.0),
        constant in 0.0f64..=1.0,
    ) {
        let b = BBox::new(x1, y1, x2, y2);
        let map = DepthMap::new(w, h, vals).unwrap();
        if let Ok(d) = proposal_depth(&map, &b) {
            prop_assert!((0.0..=1.0).contains(&d));
        }
        let flat = DepthMap::new(w, h, vec![constant; w * h]).unwrap();
        if let Ok(d) = proposal_depth(&flat, &b) {
            prop_assert!((d - constant).abs() <= 1e-12);
        }
    }

    #[test]
    fn label_extraction_idempotent_and_order_free(
        words in vec(prop_oneof![
            Just("bird"), Just("birds"), Just("dog"), Just("the"), Just("hand"),
            Just("Kite"), Just("birdhouse"), Just("ocean"),
        ], 0..10).prop_shuffle(),
    ) {
        let vocab = ClassVocabulary::new(vec![
            wsod_core::data::ClassEntry { id: 0, name: "bird".into(), synonyms: vec!["birds".into()] },
            wsod_core::data::ClassEntry { id: 1, name: "dog".into(), synonyms: vec![] },
            wsod_core::data::ClassEntry { id: 2, name: "kite".into(), synonyms: vec![] },
        ]).unwrap();
        let caption = words.join(" ");
        let mut reversed = words.clone();
        reversed.reverse();
        let labels = extract_labels(&caption, &vocab);
        prop_assert_eq!(&labels, &extract_labels(&reversed.join(", "), &vocab));
        let names: Vec<&str> = labels.iter().map(|&c| vocab.name(c).unwrap()).collect();
        prop_assert_eq!(&extract_labels(&names.join(" "), &vocab), &labels);
    }

    // ---- priors ----

    #[test]
    fn frozen_range_ordered_with_width_2std(xs in vec(0.0f64..1.0, 1..200)) {
        let mut m = RunningMoments::new();
        xs.iter().for_each(|&x| m.push(x));
        let r = freeze_range(&m, 1).unwrap();
        prop_assert!(r.lo <= r.hi);
        prop_assert!((r.width() - 2.0 * m.std().unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mask_monotone_under_superset(
        depths in vec(0.0f64..1.0, 1..20),
        (lo, hi) in (0.0f64..0.5, 0.5f64..1.0),
        (dl, dh) in (0.0f64..0.3, 0.0f64..0.3),
    ) {
        let narrow = DepthMask::from_ranges(&depths, &[Some(DepthRange { lo, hi })]);
        let wide = DepthMask::from_ranges(&depths, &[Some(DepthRange { lo: lo - dl, hi: hi + dh })]);
        for i in 0..depths.len() {
            prop_assert!(!narrow.get(i, 0) || wide.get(i, 0));
        }
    }

    #[test]
    fn single_word_caption_reproduces_word_range(
        mean in 0.1f64..0.9, std in 0.0f64..0.2, count in 2u64..50,
    ) {
        let mut s = PriorStats::default();
        s.by_class_word.insert((0, "ocean".into()), RunningMoments::from_summary(count, mean, std));
        prop_assert_eq!(s.image_range(0, Some("ocean")), s.word_range(0, "ocean"));
    }

    #[test]
    fn accumulation_order_independent(
        (obs, perm) in vec((0usize..3, 0.0f64..1.0, 0usize..3), 1..40)
            .prop_flat_map(|o| { let n = o.len(); (Just(o), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) }),
    ) {
        let words = ["hand", "ocean sky", "table"];
        let build = |order: &mut dyn Iterator<Item = usize>| {
            let mut s = PriorStats::default();
            for k in order {
                let (c, d, w) = obs[k];
                s.add_depth(c, d, Some(words[w]));
            }
            s
        };
        let a = build(&mut (0..obs.len()));
        let b = build(&mut perm.iter().copied());
        for c in 0..3 {
            for caption in [None, Some("hand"), Some("ocean"), Some("sky table")] {
                match (a.image_range(c, caption), b.image_range(c, caption)) {
                    (Some(x), Some(y)) => {
                        prop_assert!((x.lo - y.lo).abs() <= 1e-9 && (x.hi - y.hi).abs() <= 1e-9);
                    }
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }

    // ---- refinement ----

    #[test]
    fn mined_seed_is_candidate_max(
        (scores, depths, boxes) in (1usize..10, 1usize..4).prop_flat_map(|(r, c)| (
            matrix(r, c, 0.0, 1.0), vec(0.0f64..1.0, r), vec(bbox(100.0), r),
        )),
        (lo, hi) in (0.0f64..0.5, 0.5f64..1.0),
    ) {
        let c = scores.cols();
        let labels: BTreeSet<usize> = (0..c).collect();
        let ranges = vec![Some(DepthRange { lo, hi }); c];
        let mask = DepthMask::from_ranges(&depths, &ranges);
        let set = mine(&boxes, &scores, Some(&mask), &labels, &MiningConfig::default()).unwrap();
        for p in &set.classes {
            prop_assert!(p.seed < boxes.len());
            prop_assert!(p.members.iter().all(|&m| m < boxes.len()));
            let candidates: Vec<usize> = if p.fell_back {
                (0..boxes.len()).collect()
            } else {
                (0..boxes.len()).filter(|&i| mask.get(i, p.class_id)).collect()
            };
            prop_assert!(candidates.contains(&p.seed));
            let best = candidates.iter().map(|&i| scores[(i, p.class_id)]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(scores[(p.seed, p.class_id)], best);
        }
    }

    #[test]
    fn attention_never_increases_and_compounds(
        (p, depths) in (1usize..8, 1usize..4).prop_flat_map(|(r, c)| (matrix(r, c, 0.0, 1.0), vec(0.0f64..1.0, r))),
    ) {
        let ranges = vec![Some(DepthRange { lo: 0.3, hi: 0.6 }); p.cols()];
        let mask = DepthMask::from_ranges(&depths, &ranges);
        let once = depth_attention(&p, &mask, 0.5).unwrap();
        let twice = depth_attention(&once, &mask, 0.5).unwrap();
        for i in 0..p.rows() {
            for c in 0..p.cols() {
                prop_assert!(once[(i, c)] <= p[(i, c)]);
                let want = if mask.get(i, c) { p[(i, c)] } else { 0.25 * p[(i, c)] };
                prop_assert!((twice[(i, c)] - want).abs() <= 1e-15);
            }
        }
    }

    // ---- evaluation ----

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(100.0), b in bbox(100.0)) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(
        boxes in vec((bbox(60.0), 0.0f64..1.0, 0usize..2), 0..15),
        thresh in 0.1f64..0.9,
    ) {
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|&(b, s, c)| Detection { image_id: "i".into(), class_id: c, bbox: b, confidence: s })
            .collect();
        let kept = nms(&dets, thresh);
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (x, a) in kept.iter().enumerate() {
            for b in &kept[x + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thresh);
                }
            }
        }
    }

    #[test]
    fn ap_invariant_to_monotone_rescaling(
        dets in vec((bbox(60.0), 0.01f64..1.0), 1..12),
        gts in vec(bbox(60.0), 1..5),
        k in 0.01f64..100.0,
    ) {
        let mk = |f: &dyn Fn(f64) -> f64| -> Vec<Detection> {
            dets.iter()
                .map(|&(b, s)| Detection { image_id: "i".into(), class_id: 0, bbox: b, confidence: f(s) })
                .collect()
        };
        let gts: Vec<GroundTruth> = gts
            .into_iter()
            .map(|b| GroundTruth { image_id: "i".into(), class_id: 0, bbox: b })
            .collect();
        let base = average_precision(&mk(&|s| s), &gts, 0.5);
        prop_assert!((average_precision(&mk(&|s| k * s), &gts, 0.5) - base).abs() <= 1e-12);
        prop_assert!((average_precision(&mk(&|s| s.powi(3)), &gts, 0.5) - base).abs() <= 1e-12);
    }
}

#[test]
fn nce_vanishes_for_separated_similarities() {
    // unit rows with cosine ±1; at ρ = 0.02 positives score +50, negatives −50
    let a = Matrix::<f64>::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    let out = nce_loss(&a, &a, 0.02, false).unwrap();
    assert!(out.loss < 1e-6, "{}", out.loss);
}

#[test]
fn image_prediction_sum_mode_is_plain_sum() {
    let p = Matrix::<f64>::from_rows(&[[0.1, 0.4], [0.2, 0.3]]).unwrap();
    let s = image_prediction(&p, ImageAggregation::Sum);
    assert!((s[0] - 0.3).abs() < 1e-15 && (s[1] - 0.7).abs() < 1e-15);
}

#[test]
fn single_precision_forward_matches_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = ModelDims { feature_dim: 4, num_classes: 3, proj_dim: 2, refine_branches: 0 };
    let model = ModelParams::<f64>::init(dims, 0.1, 1.0, &mut rng);
    let x = Matrix::from_rows(&common_rows(&mut rng, 6, 4)).unwrap();
    let (d64, c64) = score(&x, &model.rgb_head).unwrap();
    let p64 = probabilities(d64, c64, ImageAggregation::SigmoidOfSum).unwrap();
    let mut head32 = HeadParams::<f32>::zeros("h", 4, 3);
    for (dst, src) in head32.params_mut().into_iter().zip(model.rgb_head.params()) {
        dst.value = src.value.cast();
    }
    let (d32, c32) = score(&x.cast::<f32>(), &head32).unwrap();
    let p32 = probabilities(d32, c32, ImageAggregation::SigmoidOfSum).unwrap();
    assert!(p32.p_comb.cast::<f64>().max_abs_diff(&p64.p_comb) < 1e-5);
}

fn normalize(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn permute(m: &Matrix<f64>, perm: &[usize]) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn common_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}
