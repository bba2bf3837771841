//! Average precision at a single IoU threshold with 101-point
//! interpolation, pooled per category across scenes.

use std::collections::BTreeMap;

use crate::boxes::BoxSpec;

/// One detection emitted by the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoxSpec,
    pub score: f64,
    pub category: u32,
}

/// Per-category AP plus the mean over categories that have ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    pub per_category: BTreeMap<u32, f64>,
    pub map: f64,
}

/// Evaluate detections against ground truths, scene by scene. Detections
/// are ranked by score (ties broken by scene then insertion order) and
/// greedily matched to the highest-IoU unmatched ground truth of their
/// category. Categories absent from the ground truths are ignored.
pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BoxSpec, u32)>],
    iou_threshold: f64,
) -> ApReport {
    assert_eq!(
        detections.len(),
        gts.len(),
        "one detection list per scene"
    );
    let mut categories: Vec<u32> = gts
        .iter()
        .flat_map(|scene| scene.iter().map(|(_, c)| *c))
        .collect();
    categories.sort_unstable();
    categories.dedup();

    let mut per_category = BTreeMap::new();
    for &cat in &categories {
        let mut pool: Vec<(usize, usize)> = Vec::new(); // (scene, det index)
        for (scene_id, scene_dets) in detections.iter().enumerate() {
            for (det_id, det) in scene_dets.iter().enumerate() {
                if det.category == cat {
                    pool.push((scene_id, det_id));
                }
            }
        }
        pool.sort_by(|&(sa, da), &(sb, db)| {
            let score_a = detections[sa][da].score;
            let score_b = detections[sb][db].score;
            score_b
                .partial_cmp(&score_a)
                .unwrap()
                .then(sa.cmp(&sb))
                .then(da.cmp(&db))
        });

        let total_gt: usize = gts
            .iter()
            .map(|scene| scene.iter().filter(|(_, c)| *c == cat).count())
            .sum();
        let mut gt_used: Vec<Vec<bool>> = gts
            .iter()
            .map(|scene| vec![false; scene.len()])
            .collect();

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pool.len()); // (recall, precision)
        for (scene_id, det_id) in pool {
            let det = &detections[scene_id][det_id];
            let mut best: Option<(usize, f64)> = None;
            for (gt_id, (gt_box, gt_cat)) in gts[scene_id].iter().enumerate() {
                if *gt_cat != cat || gt_used[scene_id][gt_id] {
                    continue;
                }
                let iou = det.bbox.iou(gt_box);
                if iou >= iou_threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                    best = Some((gt_id, iou));
                }
            }
            match best {
                Some((gt_id, _)) => {
                    gt_used[scene_id][gt_id] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            if total_gt > 0 {
                curve.push((
                    tp as f64 / total_gt as f64,
                    tp as f64 / (tp + fp) as f64,
                ));
            }
        }
        per_category.insert(cat, interpolated_ap(&curve));
    }

    let map = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    ApReport { per_category, map }
}

/// 101-point interpolated AP from a (recall, precision) staircase.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(cx: f64, cy: f64) -> BoxSpec {
        BoxSpec::new(cx, cy, 0.2, 0.2)
    }

    fn det(cx: f64, cy: f64, score: f64, category: u32) -> Detection {
        Detection {
            bbox: boxed(cx, cy),
            score,
            category,
        }
    }

    #[test]
    fn single_hit_full_ap() {
        let dets = vec![vec![det(0.5, 0.5, 0.9, 0)]];
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        assert!((report.per_category[&0] - 1.0).abs() < 1e-12);
        assert!((report.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_zero_ap() {
        let dets = vec![vec![]];
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        assert_eq!(report.per_category[&0], 0.0);
    }

    #[test]
    fn hit_miss_hit_matches_hand_pr_curve() {
        // Two gts; ranked detections: hit, miss, hit.
        // PR points: (0.5, 1), (0.5, 0.5), (1.0, 2/3).
        // 101-point AP: recalls 0..=0.50 take precision 1 (51 points),
        // recalls 0.51..=1.00 take 2/3 (50 points).
        let dets = vec![vec![
            det(0.3, 0.3, 0.9, 0),
            det(0.9, 0.9, 0.8, 0), // far from both gts
            det(0.7, 0.3, 0.7, 0),
        ]];
        let gts = vec![vec![(boxed(0.3, 0.3), 0u32), (boxed(0.7, 0.3), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!(
            (report.per_category[&0] - expected).abs() < 1e-4,
            "{} vs {expected}",
            report.per_category[&0]
        );
    }

    #[test]
    fn duplicate_detections_on_one_gt_are_false_positives() {
        let dets = vec![vec![det(0.5, 0.5, 0.9, 0), det(0.5, 0.5, 0.8, 0)]];
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        // Recall reaches 1.0 at the first detection; AP stays 1.0.
        assert!((report.per_category[&0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn category_without_gts_excluded_from_map() {
        let dets = vec![vec![det(0.5, 0.5, 0.9, 7)]];
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        assert!(!report.per_category.contains_key(&7));
        assert_eq!(report.per_category.len(), 1);
    }

    #[test]
    fn map_averages_categories() {
        let dets = vec![vec![det(0.5, 0.5, 0.9, 0)]]; // category 1 undetected
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32), (boxed(0.2, 0.2), 1u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        assert!((report.map - 0.5).abs() < 1e-12);
        assert!(report.map >= 0.0 && report.map <= 1.0);
    }

    #[test]
    fn cross_scene_pooling_ranks_globally() {
        // Scene 0: low-score hit; scene 1: high-score false positive.
        let dets = vec![
            vec![det(0.5, 0.5, 0.3, 0)],
            vec![det(0.9, 0.9, 0.9, 0)],
        ];
        let gts = vec![vec![(boxed(0.5, 0.5), 0u32)], vec![(boxed(0.2, 0.2), 0u32)]];
        let report = evaluate_ap(&dets, &gts, 0.5);
        // Ranked: FP first, then TP at recall 0.5 with precision 0.5.
        let expected = (51.0 * 0.5) / 101.0;
        assert!((report.per_category[&0] - expected).abs() < 1e-9);
    }
}
