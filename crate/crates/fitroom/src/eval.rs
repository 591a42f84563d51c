//! Detection scoring: greedy matching, precision/recall curves, the
//! padded-integration AP and mAP, and the average score decay rate
//! (ASDR) used to judge style-transfer output.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYWH};
use crate::raster::BinaryMask;

/// A scored, categorized box, optionally carrying a mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: i64,
    pub category_id: u32,
    pub bbox: BoxXYWH,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_png: Option<PathBuf>,
    #[serde(skip)]
    pub mask: Option<BinaryMask>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::domain(format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

/// Precision/recall points in descending-score order, plus the
/// ground-truth count behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub precisions: Vec<f64>,
    pub recalls: Vec<f64>,
    pub n_gt: usize,
}

/// Confidence of one fashion item before and after style transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsdrPair {
    pub s_before: f64,
    pub s_after: f64,
    pub category_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
}

/// Similarity basis for matching: boxes, or masks when both sides carry
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouBasis {
    Box,
    Mask,
}

fn det_iou(det: &Detection, gt: &Detection, basis: IouBasis) -> f64 {
    match basis {
        IouBasis::Box => iou(&det.bbox, &gt.bbox),
        IouBasis::Mask => match (&det.mask, &gt.mask) {
            (Some(a), Some(b)) => a.iou(b),
            _ => iou(&det.bbox, &gt.bbox),
        },
    }
}

/// Greedy matching of detections (one image, one category) against
/// ground truth: descending score, ties toward the lower index; each
/// detection claims the unclaimed gt of highest IoU when that IoU is at
/// least `iou_thresh`. Flags are returned in the input detection order.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Detection],
    iou_thresh: f64,
    basis: IouBasis,
) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = det_iou(&dets[d], gt, basis);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            flags[d] = MatchFlag::TruePositive;
        }
    }
    flags
}

/// Cumulative precision/recall after each detection in descending-score
/// order. `flags` and `scores` are in the same (input) order.
pub fn pr_curve(flags: &[MatchFlag], scores: &[f64], n_gt: usize) -> Result<PrCurve> {
    if flags.len() != scores.len() {
        return Err(Error::ShapeMismatch("flags and scores lengths differ".into()));
    }
    if n_gt == 0 {
        return Err(Error::domain("pr_curve requires n_gt >= 1"));
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for &i in &order {
        match flags[i] {
            MatchFlag::TruePositive => tp += 1,
            MatchFlag::FalsePositive => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    Ok(PrCurve { precisions, recalls, n_gt })
}

/// Padded-integration average precision: precisions padded with 1 in
/// front and 0 behind, recalls with 0 in front and 1 behind, then
/// `Σ (recalls[i] − recalls[i−1]) · precisions[i]` over the padded lists.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut p = Vec::with_capacity(curve.precisions.len() + 2);
    let mut r = Vec::with_capacity(curve.recalls.len() + 2);
    p.push(1.0);
    p.extend_from_slice(&curve.precisions);
    p.push(0.0);
    r.push(0.0);
    r.extend_from_slice(&curve.recalls);
    r.push(1.0);
    let mut ap = 0.0;
    for i in 1..r.len() {
        ap += (r[i] - r[i - 1]) * p[i];
    }
    ap
}

/// Unweighted mean AP over categories with ground-truth instances.
pub fn mean_ap(per_category: &BTreeMap<u32, f64>) -> Result<f64> {
    if per_category.is_empty() {
        return Err(Error::domain("mean_ap needs at least one category"));
    }
    Ok(per_category.values().sum::<f64>() / per_category.len() as f64)
}

/// Pair each before-detection (descending score) with the unclaimed
/// same-category after-detection of highest IoU ≥ 0.5; unmatched items
/// decay to `s_after = 0`.
pub fn correspond_items(before: &[Detection], after: &[Detection]) -> Vec<AsdrPair> {
    let mut order: Vec<usize> = (0..before.len()).collect();
    order.sort_by(|&a, &b| {
        before[b].score.partial_cmp(&before[a].score).unwrap().then(a.cmp(&b))
    });
    let mut claimed = vec![false; after.len()];
    let mut pairs = vec![
        AsdrPair { s_before: 0.0, s_after: 0.0, category_id: 0 };
        before.len()
    ];
    for &b in &order {
        let mut best: Option<(usize, f64)> = None;
        for (a, cand) in after.iter().enumerate() {
            if claimed[a]
                || cand.category_id != before[b].category_id
                || cand.image_id != before[b].image_id
            {
                continue;
            }
            let v = iou(&before[b].bbox, &cand.bbox);
            if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        let s_after = match best {
            Some((a, _)) => {
                claimed[a] = true;
                after[a].score
            }
            None => 0.0,
        };
        pairs[b] = AsdrPair {
            s_before: before[b].score,
            s_after,
            category_id: before[b].category_id,
        };
    }
    pairs
}

/// `ASDR = (1/n) Σ max(S^B − S^A, 0) / S^B`; smaller is better.
pub fn asdr(pairs: &[AsdrPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("asdr requires at least one pair"));
    }
    let mut acc = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        if pair.s_before <= 0.0 {
            return Err(Error::domain(format!("pair {i} has s_before <= 0")));
        }
        acc += (pair.s_before - pair.s_after).max(0.0) / pair.s_before;
    }
    Ok(acc / pairs.len() as f64)
}

/// Group detections by `(image_id, category_id)`.
pub fn group_detections(dets: &[Detection]) -> BTreeMap<(i64, u32), Vec<&Detection>> {
    let mut map: BTreeMap<(i64, u32), Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        map.entry((d.image_id, d.category_id)).or_default().push(d);
    }
    map
}

/// Full mAP evaluation: matches per image and category, builds one curve
/// per category, and averages. Categories without ground truth are
/// excluded from the mean and reported in `skipped`.
#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    pub per_category_ap: BTreeMap<u32, f64>,
    pub mean_ap: f64,
    pub iou_thresh: f64,
    pub basis: String,
    pub skipped_categories: Vec<u32>,
    #[serde(skip)]
    pub curves: BTreeMap<u32, PrCurve>,
}

pub fn evaluate_map(
    predictions: &[Detection],
    ground_truth: &[Detection],
    iou_thresh: f64,
    basis: IouBasis,
) -> Result<MapReport> {
    for d in predictions {
        d.validate()?;
    }
    let gt_by_key = group_detections(ground_truth);
    let pred_by_key = group_detections(predictions);

    let mut gt_categories: Vec<u32> = ground_truth.iter().map(|d| d.category_id).collect();
    gt_categories.sort_unstable();
    gt_categories.dedup();

    let mut skipped: Vec<u32> = predictions
        .iter()
        .map(|d| d.category_id)
        .filter(|c| !gt_categories.contains(c))
        .collect();
    skipped.sort_unstable();
    skipped.dedup();

    let mut per_category_ap = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for &cat in &gt_categories {
        let mut flags = Vec::new();
        let mut scores = Vec::new();
        let mut n_gt = 0usize;
        let image_ids: Vec<i64> = {
            let mut ids: Vec<i64> = gt_by_key
                .keys()
                .chain(pred_by_key.keys())
                .filter(|(_, c)| *c == cat)
                .map(|(img, _)| *img)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        for img in image_ids {
            let empty = Vec::new();
            let gts = gt_by_key.get(&(img, cat)).unwrap_or(&empty);
            let dets = pred_by_key.get(&(img, cat)).unwrap_or(&empty);
            n_gt += gts.len();
            let owned_dets: Vec<Detection> = dets.iter().map(|d| (*d).clone()).collect();
            let owned_gts: Vec<Detection> = gts.iter().map(|d| (*d).clone()).collect();
            let image_flags = match_detections(&owned_dets, &owned_gts, iou_thresh, basis);
            flags.extend(image_flags);
            scores.extend(owned_dets.iter().map(|d| d.score));
        }
        let ap = if n_gt == 0 {
            0.0
        } else if flags.is_empty() {
            curves.insert(cat, PrCurve { precisions: vec![], recalls: vec![], n_gt });
            0.0
        } else {
            let curve = pr_curve(&flags, &scores, n_gt)?;
            let ap = average_precision(&curve);
            curves.insert(cat, curve);
            ap
        };
        per_category_ap.insert(cat, ap);
    }

    let map = mean_ap(&per_category_ap)?;
    Ok(MapReport {
        per_category_ap,
        mean_ap: map,
        iou_thresh,
        basis: match basis {
            IouBasis::Box => "box".into(),
            IouBasis::Mask => "mask".into(),
        },
        skipped_categories: skipped,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: i64, cat: u32, x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            image_id,
            category_id: cat,
            bbox: BoxXYWH::new(x, y, w, h),
            score,
            mask_png: None,
            mask: None,
        }
    }

    #[test]
    fn match_single_exact() {
        let d = vec![det(1, 1, 0.0, 0.0, 10.0, 10.0, 0.9)];
        let g = vec![det(1, 1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        assert_eq!(match_detections(&d, &g, 0.5, IouBasis::Box), vec![MatchFlag::TruePositive]);
    }

    #[test]
    fn match_single_claim() {
        let d = vec![
            det(1, 1, 0.0, 0.0, 10.0, 10.0, 0.7),
            det(1, 1, 1.0, 0.0, 10.0, 10.0, 0.9),
        ];
        let g = vec![det(1, 1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        let flags = match_detections(&d, &g, 0.5, IouBasis::Box);
        // higher-score detection (index 1) claims the gt
        assert_eq!(flags, vec![MatchFlag::FalsePositive, MatchFlag::TruePositive]);
    }

    /// Exhaustive greedy oracle: walk detections by descending score and
    /// claim the best unclaimed gt by direct enumeration.
    fn match_oracle(dets: &[Detection], gts: &[Detection], thresh: f64) -> Vec<MatchFlag> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b))
        });
        let mut used = vec![false; gts.len()];
        let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
        for &d in &order {
            let candidates: Vec<(usize, f64)> = gts
                .iter()
                .enumerate()
                .filter(|(g, _)| !used[*g])
                .map(|(g, gt)| (g, iou(&dets[d].bbox, &gt.bbox)))
                .filter(|(_, v)| *v >= thresh)
                .collect();
            if let Some((g, _)) = candidates
                .into_iter()
                .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                })
            {
                used[g] = true;
                flags[d] = MatchFlag::TruePositive;
            }
        }
        flags
    }

    #[test]
    fn match_agrees_with_oracle_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let nd = rng.gen_range(0..=20);
            let ng = rng.gen_range(0..=20);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                det(
                    1,
                    1,
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(2.0..20.0),
                    rng.gen_range(2.0..20.0),
                    rng.gen_range(0.0..1.0),
                )
            };
            let dets: Vec<Detection> = (0..nd).map(|_| mk(&mut rng)).collect();
            let gts: Vec<Detection> = (0..ng).map(|_| mk(&mut rng)).collect();
            assert_eq!(
                match_detections(&dets, &gts, 0.5, IouBasis::Box),
                match_oracle(&dets, &gts, 0.5)
            );
        }
    }

    #[test]
    fn pr_curve_cases() {
        let c = pr_curve(&[MatchFlag::TruePositive], &[0.9], 1).unwrap();
        assert_eq!(c.precisions, vec![1.0]);
        assert_eq!(c.recalls, vec![1.0]);

        let c = pr_curve(
            &[MatchFlag::TruePositive, MatchFlag::FalsePositive],
            &[0.9, 0.8],
            2,
        )
        .unwrap();
        assert_eq!(c.precisions, vec![1.0, 0.5]);
        assert_eq!(c.recalls, vec![0.5, 0.5]);

        let c = pr_curve(
            &[MatchFlag::FalsePositive, MatchFlag::FalsePositive],
            &[0.9, 0.8],
            2,
        )
        .unwrap();
        assert!(c.precisions.iter().all(|p| *p == 0.0));
        assert!(c.recalls.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn average_precision_hand_cases() {
        let perfect = PrCurve { precisions: vec![1.0], recalls: vec![1.0], n_gt: 1 };
        assert_eq!(average_precision(&perfect), 1.0);

        let all_fp = PrCurve { precisions: vec![0.0, 0.0], recalls: vec![0.0, 0.0], n_gt: 2 };
        assert_eq!(average_precision(&all_fp), 0.0);

        // padded p=[1,1,0.5,0], r=[0,0.5,0.5,1] → 0.5·1 + 0 + 0.5·0 = 0.5
        let mixed = PrCurve { precisions: vec![1.0, 0.5], recalls: vec![0.5, 0.5], n_gt: 2 };
        assert_eq!(average_precision(&mixed), 0.5);
    }

    #[test]
    fn ap_never_increases_with_trailing_fp() {
        let base = PrCurve {
            precisions: vec![1.0, 1.0, 0.666_666_666_666_666_6],
            recalls: vec![0.25, 0.5, 0.5],
            n_gt: 4,
        };
        let with_fp = PrCurve {
            precisions: vec![1.0, 1.0, 0.666_666_666_666_666_6, 0.5],
            recalls: vec![0.25, 0.5, 0.5, 0.5],
            n_gt: 4,
        };
        assert!(average_precision(&with_fp) <= average_precision(&base));
    }

    #[test]
    fn mean_ap_cases() {
        let mut m = BTreeMap::new();
        m.insert(1, 0.7);
        assert_eq!(mean_ap(&m).unwrap(), 0.7);
        m.insert(2, 0.0);
        m.insert(3, 1.0);
        // mean of {0.7, 0.0, 1.0}
        assert!((mean_ap(&m).unwrap() - 1.7 / 3.0).abs() < 1e-12);
        assert!(mean_ap(&BTreeMap::new()).is_err());

        let all_one: BTreeMap<u32, f64> = (1..=13).map(|c| (c, 1.0)).collect();
        assert_eq!(mean_ap(&all_one).unwrap(), 1.0);
    }

    #[test]
    fn correspond_identical_sets() {
        let dets = vec![
            det(1, 1, 0.0, 0.0, 10.0, 10.0, 0.8),
            det(1, 2, 20.0, 0.0, 10.0, 10.0, 0.6),
        ];
        let pairs = correspond_items(&dets, &dets);
        for p in &pairs {
            assert_eq!(p.s_before, p.s_after);
        }
    }

    #[test]
    fn correspond_empty_after() {
        let before = vec![det(1, 1, 0.0, 0.0, 10.0, 10.0, 0.8)];
        let pairs = correspond_items(&before, &[]);
        assert_eq!(pairs[0].s_after, 0.0);
    }

    #[test]
    fn asdr_fixtures() {
        let p = |b: f64, a: f64| AsdrPair { s_before: b, s_after: a, category_id: 1 };
        assert!((asdr(&[p(0.8, 0.6)]).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(asdr(&[p(0.5, 0.9), p(0.4, 0.4)]).unwrap(), 0.0);
        assert_eq!(asdr(&[p(0.7, 0.0)]).unwrap(), 1.0);
        assert!(asdr(&[]).is_err());
        assert!(asdr(&[p(0.0, 0.5)]).is_err());
    }

    #[test]
    fn asdr_scale_and_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let pairs: Vec<AsdrPair> = (0..20)
            .map(|_| AsdrPair {
                s_before: rng.gen_range(0.01..1.0),
                s_after: rng.gen_range(0.0..1.0),
                category_id: 1,
            })
            .collect();
        let base = asdr(&pairs).unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        assert!((asdr(&rev).unwrap() - base).abs() < 1e-15);
        let c = 0.37;
        let scaled: Vec<AsdrPair> = pairs
            .iter()
            .map(|p| AsdrPair { s_before: c * p.s_before, s_after: c * p.s_after, ..*p })
            .collect();
        assert!((asdr(&scaled).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn evaluate_map_perfect_predictions() {
        let gts = vec![
            det(1, 1, 0.0, 0.0, 10.0, 10.0, 1.0),
            det(1, 2, 20.0, 0.0, 10.0, 10.0, 1.0),
            det(2, 1, 5.0, 5.0, 8.0, 8.0, 1.0),
        ];
        let report = evaluate_map(&gts, &gts, 0.5, IouBasis::Box).unwrap();
        assert_eq!(report.mean_ap, 1.0);

        let empty = evaluate_map(&[], &gts, 0.5, IouBasis::Box).unwrap();
        assert_eq!(empty.mean_ap, 0.0);
    }

    #[test]
    fn evaluate_map_skips_gtless_categories() {
        let gts = vec![det(1, 1, 0.0, 0.0, 10.0, 10.0, 1.0)];
        let preds = vec![
            det(1, 1, 0.0, 0.0, 10.0, 10.0, 0.9),
            det(1, 5, 50.0, 50.0, 10.0, 10.0, 0.9),
        ];
        let report = evaluate_map(&preds, &gts, 0.5, IouBasis::Box).unwrap();
        assert_eq!(report.mean_ap, 1.0);
        assert_eq!(report.skipped_categories, vec![5]);
    }
}
