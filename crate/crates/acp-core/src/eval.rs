//! Detection-style mean-average-precision evaluation.
//!
//! A detection is a true positive when the minimum of its human-box IoU and
//! object-box IoU against an unmatched ground-truth instance of the same
//! class in the same image is at least the threshold (0.5 by default).
//! Average precision integrates the all-points precision envelope, with
//! recall denominated by the total ground-truth count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::space::{box_is_well_formed, AnnotationRecord, Box4, HoiSpace};

/// One scored interaction detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub hoi_class: usize,
    pub score: f64,
    pub human_box: Box4,
    pub object_box: Box4,
}

/// One ground-truth interaction instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub hoi_class: usize,
    pub human_box: Box4,
    pub object_box: Box4,
}

/// Expand annotations into per-class ground-truth instances: one instance
/// per (annotation instance, action) pair.
pub fn ground_truth_from_annotations(
    dataset: &[AnnotationRecord],
    space: &HoiSpace,
) -> Vec<GroundTruthInstance> {
    let index = space.hoi_index_map();
    let mut out = Vec::new();
    for rec in dataset {
        for inst in &rec.instances {
            for &a in &inst.actions {
                if let Some(&m) = index.get(&(inst.object, a)) {
                    out.push(GroundTruthInstance {
                        image_id: rec.image_id.clone(),
                        hoi_class: m,
                        human_box: inst.human_box,
                        object_box: inst.object_box,
                    });
                }
            }
        }
    }
    out
}

/// Intersection over union with the (x2-x1)*(y2-y1) area convention.
/// Degenerate boxes evaluate to 0.
pub fn iou(a: &Box4, b: &Box4) -> f64 {
    if !box_is_well_formed(a) || !box_is_well_formed(b) {
        return 0.0;
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Evaluation population: every image, or only images whose ground truth
/// contains the target object category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    Default,
    KnownObject,
}

impl std::str::FromStr for EvalSetting {
    type Err = AcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(EvalSetting::Default),
            "known-object" | "known_object" => Ok(EvalSetting::KnownObject),
            other => Err(AcpError::Config(format!("unknown evaluation setting {other:?}"))),
        }
    }
}

/// Per-class average precision and the aggregated means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    /// One entry per interaction class; `None` when the class has no ground
    /// truth and is excluded from every mean.
    pub per_class_ap: Vec<Option<f64>>,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    /// Classes whose training-sample count is below the rare threshold.
    pub rare_classes: BTreeSet<usize>,
}

/// Sort detections into evaluation order: descending score, ties broken by
/// ascending image id and then insertion order.
fn sorted_detections<'d>(dets: &'d [DetectionRecord]) -> Vec<&'d DetectionRecord> {
    let mut order: Vec<&DetectionRecord> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    order
}

/// Greedy matching and average precision for one class. Returns `None`
/// when there is no ground truth.
pub fn match_and_ap(
    dets: &[DetectionRecord],
    gts: &[GroundTruthInstance],
    iou_thresh: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut gt_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        gt_by_image.entry(gt.image_id.as_str()).or_default().push(gi);
    }
    let mut matched = vec![false; gts.len()];
    let order = sorted_detections(dets);
    let mut true_positive = Vec::with_capacity(order.len());
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_image.get(det.image_id.as_str()) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let overlap = iou(&det.human_box, &gts[gi].human_box)
                    .min(iou(&det.object_box, &gts[gi].object_box));
                if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                true_positive.push(true);
            }
            None => true_positive.push(false),
        }
    }
    Some(average_precision(&true_positive, gts.len()))
}

/// All-points interpolated AP from the ordered TP/FP flags.
fn average_precision(true_positive: &[bool], n_gt: usize) -> f64 {
    let mut precisions = Vec::with_capacity(true_positive.len());
    let mut tp = 0usize;
    for (k, &is_tp) in true_positive.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
    }
    // Monotone envelope from the right.
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    for (k, &is_tp) in true_positive.iter().enumerate() {
        if is_tp {
            ap += envelope[k] / n_gt as f64;
        }
    }
    ap
}

fn mean_over(classes: impl Iterator<Item = usize>, aps: &[Option<f64>]) -> Option<f64> {
    let values: Vec<f64> = classes.filter_map(|m| aps[m]).collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Evaluate detections against ground truth for every interaction class.
///
/// In the known-object setting, class (o, a) is scored only over images
/// whose ground truth contains object o; detections on other images are
/// discarded before matching.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthInstance],
    space: &HoiSpace,
    setting: EvalSetting,
    train_counts: &[u32],
    iou_thresh: f64,
) -> Result<EvalReport> {
    let m_classes = space.n_hoi_classes();
    if train_counts.len() != m_classes {
        return Err(AcpError::Shape {
            op: "evaluate",
            detail: format!("{} train counts vs {m_classes} classes", train_counts.len()),
        });
    }
    for det in dets {
        if det.hoi_class >= m_classes {
            return Err(AcpError::Contract(format!(
                "detection references unknown class {}",
                det.hoi_class
            )));
        }
        if !det.score.is_finite() {
            return Err(AcpError::NonFinite(format!(
                "detection score on image {:?}",
                det.image_id
            )));
        }
    }

    let mut dets_by_class: Vec<Vec<DetectionRecord>> = vec![Vec::new(); m_classes];
    for det in dets {
        dets_by_class[det.hoi_class].push(det.clone());
    }
    let mut gts_by_class: Vec<Vec<GroundTruthInstance>> = vec![Vec::new(); m_classes];
    for gt in gts {
        if gt.hoi_class >= m_classes {
            return Err(AcpError::Contract(format!(
                "ground truth references unknown class {}",
                gt.hoi_class
            )));
        }
        gts_by_class[gt.hoi_class].push(gt.clone());
    }

    // Images containing each object category, for the known-object setting.
    let mut images_with_object: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    if setting == EvalSetting::KnownObject {
        for gt in gts {
            let (object, _) = space.hoi_classes[gt.hoi_class];
            images_with_object
                .entry(object)
                .or_default()
                .insert(gt.image_id.as_str());
        }
    }

    let mut per_class_ap = vec![None; m_classes];
    for m in 0..m_classes {
        let class_dets: Vec<DetectionRecord> = match setting {
            EvalSetting::Default => dets_by_class[m].clone(),
            EvalSetting::KnownObject => {
                let (object, _) = space.hoi_classes[m];
                let allowed = images_with_object.get(&object);
                dets_by_class[m]
                    .iter()
                    .filter(|d| {
                        allowed.is_some_and(|imgs| imgs.contains(d.image_id.as_str()))
                    })
                    .cloned()
                    .collect()
            }
        };
        per_class_ap[m] = match_and_ap(&class_dets, &gts_by_class[m], iou_thresh);
    }

    let rare_classes: BTreeSet<usize> = (0..m_classes)
        .filter(|&m| train_counts[m] < space.rare_threshold)
        .collect();
    let map_full = mean_over(0..m_classes, &per_class_ap);
    let map_rare = mean_over(rare_classes.iter().copied(), &per_class_ap);
    let map_nonrare = mean_over(
        (0..m_classes).filter(|m| !rare_classes.contains(m)),
        &per_class_ap,
    );

    Ok(EvalReport {
        setting,
        per_class_ap,
        map_full,
        map_rare,
        map_nonrare,
        rare_classes,
    })
}

/// Seeded uniform sample of `k` non-rare classes to hold out for the
/// zero-shot protocol.
pub fn zero_shot_split(
    space: &HoiSpace,
    train_counts: &[u32],
    seed: u64,
    k: usize,
) -> Result<BTreeSet<usize>> {
    use rand::SeedableRng;

    if train_counts.len() != space.n_hoi_classes() {
        return Err(AcpError::Shape {
            op: "zero_shot_split",
            detail: format!(
                "{} train counts vs {} classes",
                train_counts.len(),
                space.n_hoi_classes()
            ),
        });
    }
    let eligible: Vec<usize> = (0..space.n_hoi_classes())
        .filter(|&m| train_counts[m] >= space.rare_threshold)
        .collect();
    if eligible.len() < k {
        return Err(AcpError::Contract(format!(
            "zero-shot split needs {k} non-rare classes but only {} are eligible",
            eligible.len()
        )));
    }
    if k == 0 {
        return Ok(BTreeSet::new());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), k);
    Ok(picked.into_iter().map(|i| eligible[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_three() -> HoiSpace {
        HoiSpace::new(
            vec!["a0".into(), "a1".into(), "a2".into()],
            vec!["o0".into(), "o1".into()],
            vec![(0, 0), (0, 1), (1, 2)],
            10,
        )
        .unwrap()
    }

    fn det(image: &str, class: usize, score: f64, hb: Box4, ob: Box4) -> DetectionRecord {
        DetectionRecord {
            image_id: image.into(),
            hoi_class: class,
            score,
            human_box: hb,
            object_box: ob,
        }
    }

    fn gt(image: &str, class: usize, hb: Box4, ob: Box4) -> GroundTruthInstance {
        GroundTruthInstance {
            image_id: image.into(),
            hoi_class: class,
            human_box: hb,
            object_box: ob,
        }
    }

    const B1: Box4 = [0.0, 0.0, 10.0, 10.0];
    const B2: Box4 = [20.0, 20.0, 30.0, 30.0];
    const FAR: Box4 = [100.0, 100.0, 110.0, 110.0];

    #[test]
    fn iou_values() {
        assert_eq!(iou(&B1, &B1), 1.0);
        assert_eq!(iou(&B1, &B2), 0.0);
        let a = [0.0, 0.0, 10.0, 10.0];
        let b = [5.0, 0.0, 15.0, 10.0];
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        let degenerate = [5.0, 5.0, 5.0, 10.0];
        assert_eq!(iou(&degenerate, &B1), 0.0);
    }

    #[test]
    fn single_perfect_detection_ap_one() {
        let ap = match_and_ap(&[det("i", 0, 0.9, B1, B2)], &[gt("i", 0, B1, B2)], 0.5);
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn high_false_low_true_gives_half() {
        let dets = vec![
            det("i", 0, 0.9, FAR, FAR), // false positive, higher score
            det("i", 0, 0.4, B1, B2),   // true positive
        ];
        let ap = match_and_ap(&dets, &[gt("i", 0, B1, B2)], 0.5);
        assert_eq!(ap, Some(0.5));
    }

    #[test]
    fn threshold_boundary() {
        // Overlap engineered near the threshold: boxes of width 10 shifted
        // so IoU lands just below / at-or-above 0.5.
        let shifted_low = [3.4, 0.0, 13.4, 10.0]; // IoU = 6.6/13.4 = 0.4925...
        let shifted_high = [3.3, 0.0, 13.3, 10.0]; // IoU = 6.7/13.3 = 0.5037...
        let g = [gt("i", 0, B1, B1)];
        let ap_low = match_and_ap(&[det("i", 0, 0.9, shifted_low, B1)], &g, 0.5);
        assert_eq!(ap_low, Some(0.0));
        let ap_high = match_and_ap(&[det("i", 0, 0.9, shifted_high, B1)], &g, 0.5);
        assert_eq!(ap_high, Some(1.0));
    }

    #[test]
    fn min_of_both_ious_governs() {
        // Human box perfect, object box off: min < 0.5 so the detection is
        // a false positive.
        let ap = match_and_ap(&[det("i", 0, 0.9, B1, FAR)], &[gt("i", 0, B1, B2)], 0.5);
        assert_eq!(ap, Some(0.0));
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        assert_eq!(match_and_ap(&[det("i", 0, 0.9, B1, B2)], &[], 0.5), None);
    }

    #[test]
    fn detection_order_invariance() {
        let dets = vec![
            det("a", 0, 0.9, B1, B2),
            det("b", 0, 0.7, FAR, FAR),
            det("a", 0, 0.7, B2, B1),
            det("c", 0, 0.2, B1, B2),
        ];
        let gts = vec![gt("a", 0, B1, B2), gt("c", 0, B1, B2)];
        let base = match_and_ap(&dets, &gts, 0.5);
        let mut shuffled = dets.clone();
        shuffled.reverse();
        assert_eq!(base, match_and_ap(&shuffled, &gts, 0.5));
        shuffled.swap(0, 2);
        assert_eq!(base, match_and_ap(&shuffled, &gts, 0.5));
    }

    #[test]
    fn evaluate_single_class_perfect() {
        let space = space_three();
        let dets = vec![det("i", 0, 0.9, B1, B2)];
        let gts = vec![gt("i", 0, B1, B2)];
        let report = evaluate(&dets, &gts, &space, EvalSetting::Default, &[50, 50, 50], 0.5).unwrap();
        assert_eq!(report.map_full, Some(1.0));
        assert_eq!(report.per_class_ap[0], Some(1.0));
        assert_eq!(report.per_class_ap[1], None);
    }

    #[test]
    fn known_object_ignores_foreign_image_false_positives() {
        let space = space_three();
        // Class 0 is (o0, a0). Image "with" contains o0; image "without"
        // only contains o1 (class 2).
        let gts = vec![gt("with", 0, B1, B2), gt("without", 2, B1, B2)];
        let dets = vec![
            det("without", 0, 0.95, B1, B2), // confusing FP on an o0-less image
            det("with", 0, 0.5, B1, B2),     // correct
        ];
        let default =
            evaluate(&dets, &gts, &space, EvalSetting::Default, &[50, 50, 50], 0.5).unwrap();
        let known =
            evaluate(&dets, &gts, &space, EvalSetting::KnownObject, &[50, 50, 50], 0.5).unwrap();
        assert_eq!(default.per_class_ap[0], Some(0.5));
        assert_eq!(known.per_class_ap[0], Some(1.0));
        assert!(known.per_class_ap[0] >= default.per_class_ap[0]);
    }

    #[test]
    fn rare_partition_by_threshold() {
        let space = space_three();
        let report = evaluate(&[], &[], &space, EvalSetting::Default, &[2, 50, 9], 0.5).unwrap();
        assert_eq!(
            report.rare_classes.iter().copied().collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn unknown_class_rejected() {
        let space = space_three();
        let dets = vec![det("i", 7, 0.9, B1, B2)];
        assert!(evaluate(&dets, &[], &space, EvalSetting::Default, &[0, 0, 0], 0.5).is_err());
    }

    #[test]
    fn map_full_is_mean_of_defined_aps() {
        let space = space_three();
        let gts = vec![gt("i", 0, B1, B2), gt("i", 1, B2, B1), gt("j", 2, B1, B2)];
        let dets = vec![
            det("i", 0, 0.9, B1, B2),
            det("i", 1, 0.8, FAR, FAR),
            det("j", 2, 0.7, B1, B2),
        ];
        let report = evaluate(&dets, &gts, &space, EvalSetting::Default, &[50, 50, 50], 0.5).unwrap();
        let expected = (1.0 + 0.0 + 1.0) / 3.0;
        assert!((report.map_full.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_split_properties() {
        let space = space_three();
        let counts = [50, 9, 50];
        let a = zero_shot_split(&space, &counts, 7, 2).unwrap();
        let b = zero_shot_split(&space, &counts, 7, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for &m in &a {
            assert!(counts[m] >= space.rare_threshold);
        }
        assert!(zero_shot_split(&space, &counts, 7, 0).unwrap().is_empty());
        assert!(zero_shot_split(&space, &counts, 7, 3).is_err());
    }
}
