//! Inference scoring and HOI evaluation: token filtering, final triplet
//! scores, greedy matching, all-points AP, rare/non-rare splits, the
//! known-object setting and distance-stratified views.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scene::{FeasibilityTable, GtTriplet, Scene, Token};
use crate::tensor::Matrix;

/// An interaction class: `(object class, verb)`.
pub type InteractionClass = (u32, usize);

/// Classes with fewer training instances than this are rare.
pub const RARE_THRESHOLD: usize = 10;

/// Evaluation IoU threshold; both boxes must exceed it.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_score: f64,
    pub min_keep: usize,
    pub max_keep: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_score: 0.2,
            min_keep: 3,
            max_keep: 15,
        }
    }
}

fn keep_group(idx: &mut Vec<usize>, tokens: &[Token], cfg: &FilterConfig) -> Vec<usize> {
    idx.sort_by(|&a, &b| tokens[b].score.total_cmp(&tokens[a].score).then(a.cmp(&b)));
    let above = idx.iter().filter(|&&i| tokens[i].score >= cfg.min_score).count();
    let k = above.max(cfg.min_keep).min(cfg.max_keep).min(idx.len());
    idx[..k].to_vec()
}

/// Keeps humans and objects separately: everything scoring at least
/// `min_score`, topped up to `min_keep` and capped at `max_keep` by score.
/// Kept tokens stay in their original order.
pub fn filter_tokens(tokens: &[Token], cfg: &FilterConfig) -> Vec<Token> {
    let (mut humans, mut objects): (Vec<usize>, Vec<usize>) =
        (0..tokens.len()).partition(|&i| tokens[i].is_human);
    let mut keep = keep_group(&mut humans, tokens, cfg);
    keep.extend(keep_group(&mut objects, tokens, cfg));
    keep.sort_unstable();
    keep.into_iter().map(|i| tokens[i].clone()).collect()
}

/// `s_h^lambda * s_o^lambda * delta`
pub fn final_score(s_h: f64, s_o: f64, delta: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        s_h * s_o * delta
    } else {
        libm::pow(s_h, lambda) * libm::pow(s_o, lambda) * delta
    }
}

/// Training targets for each `(human, other)` pair: verb `c` is positive when
/// some ground-truth triplet with the other token's class carries `c` and both
/// boxes overlap it with IoU at least `min_iou`.
pub fn match_pairs_to_gt(
    tokens: &[Token],
    pairs: &[(usize, usize)],
    gts: &[GtTriplet],
    num_verbs: usize,
    min_iou: f64,
) -> Result<Matrix> {
    let mut y = Matrix::zeros(pairs.len(), num_verbs);
    for (r, &(h, o)) in pairs.iter().enumerate() {
        let (th, to) = (&tokens[h], &tokens[o]);
        for g in gts {
            if g.object_class != to.class_id {
                continue;
            }
            if iou(&th.bbox, &g.human_box).min(iou(&to.bbox, &g.object_box)) < min_iou {
                continue;
            }
            for &v in &g.verb_ids {
                if v >= num_verbs {
                    return Err(Error::Config(alloc::format!("verb id {v} out of range")));
                }
                y[(r, v)] = 1.0;
            }
        }
    }
    Ok(y)
}

/// Per-pair verb scores produced by a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub human: usize,
    pub object: usize,
    pub distance: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the scene in the evaluated list.
    pub scene: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: u32,
    pub verb: usize,
    pub score: f64,
    pub distance: f64,
}

/// One detection per pair and feasible verb.
pub fn scene_detections(
    scene: usize,
    tokens: &[Token],
    preds: &[PairPrediction],
    feasibility: &FeasibilityTable,
    lambda: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for p in preds {
        let (h, o) = (&tokens[p.human], &tokens[p.object]);
        for (v, &delta) in p.scores.iter().enumerate() {
            if !feasibility.is_feasible(o.class_id, v) {
                continue;
            }
            out.push(Detection {
                scene,
                human_box: h.bbox,
                object_box: o.bbox,
                object_class: o.class_id,
                verb: v,
                score: final_score(h.score, o.score, delta, lambda),
                distance: p.distance,
            });
        }
    }
    out
}

/// Ground-truth instances of every interaction class in the training split.
pub fn training_counts(scenes: &[Scene]) -> BTreeMap<InteractionClass, usize> {
    let mut counts = BTreeMap::new();
    for s in scenes {
        for g in &s.ground_truth {
            for &v in &g.verb_ids {
                *counts.entry((g.object_class, v)).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// All-points interpolated average precision of a ranked list.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Ranks detections by score (ties keep input order) and greedily matches
/// each to the best-overlapping unmatched ground truth of its scene.
/// `gts` holds `(scene, human box, object box)`.
pub fn match_detections(dets: &[&Detection], gts: &[(usize, BBox, BBox)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for k in order {
        let d = dets[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, (s, hb, ob)) in gts.iter().enumerate() {
            if used[g] || *s != d.scene {
                continue;
            }
            let ov = iou(&d.human_box, hb).min(iou(&d.object_box, ob));
            if ov > MATCH_IOU && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    tp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    /// Every detection counts against every evaluated image.
    #[default]
    Default,
    /// A class is only evaluated on images whose annotation contains its object.
    KnownObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub object_class: u32,
    pub verb: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    /// Mean over classes with ground truth; `None` when there are none.
    pub map: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_non_rare: Option<f64>,
    pub classes: Vec<ClassAp>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// mAP over a subset of the ground truth and detections. `gt_filter` and
/// `det_filter` select what takes part; known-object image pools are decided
/// on the full annotation.
pub fn evaluate_subset(
    detections: &[Detection],
    gts: &[Vec<GtTriplet>],
    train_counts: &BTreeMap<InteractionClass, usize>,
    setting: EvalSetting,
    gt_filter: impl Fn(&GtTriplet) -> bool,
    det_filter: impl Fn(&Detection) -> bool,
) -> EvalReport {
    let mut gt_by_class: BTreeMap<InteractionClass, Vec<(usize, BBox, BBox)>> = BTreeMap::new();
    for (s, list) in gts.iter().enumerate() {
        for g in list.iter().filter(|g| gt_filter(g)) {
            for &v in &g.verb_ids {
                gt_by_class
                    .entry((g.object_class, v))
                    .or_default()
                    .push((s, g.human_box, g.object_box));
            }
        }
    }
    let mut det_by_class: BTreeMap<InteractionClass, Vec<&Detection>> = BTreeMap::new();
    for d in detections.iter().filter(|d| det_filter(d)) {
        det_by_class.entry((d.object_class, d.verb)).or_default().push(d);
    }
    let has_object = |scene: usize, class: u32| {
        gts.get(scene)
            .is_some_and(|l| l.iter().any(|g| g.object_class == class))
    };
    let mut classes = Vec::with_capacity(gt_by_class.len());
    for (&(o, v), instances) in &gt_by_class {
        let mut dets: Vec<&Detection> = det_by_class.remove(&(o, v)).unwrap_or_default();
        if setting == EvalSetting::KnownObject {
            dets.retain(|d| has_object(d.scene, o));
        }
        let tp = match_detections(&dets, instances);
        classes.push(ClassAp {
            object_class: o,
            verb: v,
            ap: average_precision(&tp, instances.len()),
            num_gt: instances.len(),
            rare: train_counts.get(&(o, v)).copied().unwrap_or(0) < RARE_THRESHOLD,
        });
    }
    EvalReport {
        setting,
        map: mean(classes.iter().map(|c| c.ap)),
        map_rare: mean(classes.iter().filter(|c| c.rare).map(|c| c.ap)),
        map_non_rare: mean(classes.iter().filter(|c| !c.rare).map(|c| c.ap)),
        classes,
    }
}

pub fn evaluate(
    detections: &[Detection],
    gts: &[Vec<GtTriplet>],
    train_counts: &BTreeMap<InteractionClass, usize>,
    setting: EvalSetting,
) -> EvalReport {
    evaluate_subset(detections, gts, train_counts, setting, |_| true, |_| true)
}

/// mAP restricted to ground truth and detections whose pair distance exceeds
/// `threshold`.
pub fn distant_map(
    detections: &[Detection],
    gts: &[Vec<GtTriplet>],
    train_counts: &BTreeMap<InteractionClass, usize>,
    setting: EvalSetting,
    threshold: f64,
) -> EvalReport {
    evaluate_subset(
        detections,
        gts,
        train_counts,
        setting,
        |g| g.distance() > threshold,
        |d| d.distance > threshold,
    )
}

/// Largest possible center distance in normalized coordinates.
pub const MAX_DISTANCE: f64 = core::f64::consts::SQRT_2;

/// Index of the `width`-wide bin holding `d`, clamped to `[0, MAX_DISTANCE]`.
pub fn bin_index(d: f64, width: f64) -> usize {
    let last = (libm::ceil(MAX_DISTANCE / width) as usize).saturating_sub(1);
    // the nudge keeps exact multiples of `width` out of the lower bin
    let k = libm::floor(d.max(0.0) / width + 1e-9);
    (k as usize).min(last)
}

pub fn num_bins(width: f64) -> usize {
    bin_index(MAX_DISTANCE, width) + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBinMap {
    pub bin_low: f64,
    pub bin_high: f64,
    pub num_gt: usize,
    pub map: Option<f64>,
}

/// mAP per distance bin, ground truth and detections binned by pair distance.
pub fn distance_stratified_map(
    detections: &[Detection],
    gts: &[Vec<GtTriplet>],
    train_counts: &BTreeMap<InteractionClass, usize>,
    setting: EvalSetting,
    width: f64,
) -> Vec<DistanceBinMap> {
    (0..num_bins(width))
        .map(|b| {
            let r = evaluate_subset(
                detections,
                gts,
                train_counts,
                setting,
                |g| bin_index(g.distance(), width) == b,
                |d| bin_index(d.distance, width) == b,
            );
            DistanceBinMap {
                bin_low: b as f64 * width,
                bin_high: (b + 1) as f64 * width,
                num_gt: r.classes.iter().map(|c| c.num_gt).sum(),
                map: r.map,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionBin {
    pub bin_low: f64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub count: usize,
}

/// Mean and variance of attention weights per distance bin. Empty bins are
/// omitted.
pub fn attention_distance_stats(
    samples: impl IntoIterator<Item = (f64, f64)>,
    width: f64,
) -> Vec<AttentionBin> {
    let n = num_bins(width);
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); n];
    for (d, w) in samples {
        // Welford update
        let a = &mut acc[bin_index(d, width)];
        a.0 += 1;
        let delta = w - a.1;
        a.1 += delta / a.0 as f64;
        a.2 += delta * (w - a.1);
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(b, (count, mean, m2))| AttentionBin {
            bin_low: b as f64 * width,
            mean,
            variance: m2 / count as f64,
            count,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn tok(score: f64, human: bool, class: u32, b: BBox) -> Token {
        Token {
            feature: vec![0.0],
            bbox: b,
            score,
            class_id: class,
            is_human: human,
        }
    }

    fn gt(h: BBox, o: BBox, class: u32, verbs: &[usize]) -> GtTriplet {
        GtTriplet {
            human_box: h,
            object_box: o,
            object_class: class,
            verb_ids: verbs.iter().copied().collect::<BTreeSet<_>>(),
        }
    }

    fn det(scene: usize, h: BBox, o: BBox, class: u32, verb: usize, score: f64) -> Detection {
        Detection {
            scene,
            human_box: h,
            object_box: o,
            object_class: class,
            verb,
            score,
            distance: crate::geometry::center_distance(&h, &o),
        }
    }

    #[test]
    fn final_score_cases() {
        assert_eq!(final_score(0.9, 0.8, 0.5, 1.0), 0.9 * 0.8 * 0.5);
        assert_eq!(final_score(1.0, 1.0, 0.37, 2.8), 0.37);
        assert!((final_score(0.5, 0.5, 1.0, 2.0) - 0.0625).abs() < 1e-15);
        assert!(final_score(0.9, 0.9, 0.5, 2.8) < final_score(0.9, 0.9, 0.5, 1.0));
    }

    #[test]
    fn filter_keeps_top_up_and_caps() {
        let b = bx(0.1, 0.1, 0.2, 0.2);
        let mut tokens = vec![tok(0.95, true, 0, b)];
        for k in 0..20 {
            tokens.push(tok(0.25 + 0.03 * k as f64, false, 3, b));
        }
        tokens.push(tok(0.1, false, 3, b));
        tokens.push(tok(0.05, true, 0, b));
        tokens.push(tok(0.01, true, 0, b));
        let cfg = FilterConfig::default();
        let kept = filter_tokens(&tokens, &cfg);
        let humans: Vec<f64> = kept.iter().filter(|t| t.is_human).map(|t| t.score).collect();
        let objects: Vec<f64> = kept.iter().filter(|t| !t.is_human).map(|t| t.score).collect();
        assert_eq!(humans, vec![0.95, 0.05, 0.01]);
        assert_eq!(objects.len(), 15);
        assert!(objects.iter().all(|&s| s > 0.25 + 0.03 * 4.5));
        assert_eq!(filter_tokens(&[], &cfg), Vec::<Token>::new());
    }

    #[test]
    fn targets_need_class_and_overlap() {
        let h = bx(0.1, 0.1, 0.3, 0.5);
        let o = bx(0.5, 0.5, 0.7, 0.7);
        let tokens = [
            tok(0.9, true, 0, h),
            tok(0.9, false, 2, o),
            tok(0.9, false, 5, o),
            tok(0.9, false, 2, bx(0.0, 0.8, 0.1, 0.9)),
        ];
        let gts = [gt(h, o, 2, &[1, 3])];
        let pairs = [(0, 1), (0, 2), (0, 3)];
        let y = match_pairs_to_gt(&tokens, &pairs, &gts, 4, 0.5).unwrap();
        assert_eq!(y.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(y.row(1), &[0.0; 4]);
        assert_eq!(y.row(2), &[0.0; 4]);
        assert!(match_pairs_to_gt(&tokens, &pairs, &gts, 2, 0.5).is_err());
    }

    #[test]
    fn ap_hand_examples() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        // P = 1, 1/2, 2/3 at recalls 1/2, 1/2, 1 -> envelope 1, 2/3, 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let (h, o) = (bx(0.1, 0.1, 0.3, 0.3), bx(0.4, 0.4, 0.6, 0.6));
        let d1 = det(0, h, o, 1, 0, 0.9);
        let d2 = det(0, h, o, 1, 0, 0.8);
        let tp = match_detections(&[&d1, &d2], &[(0, h, o)]);
        assert_eq!(tp, vec![true, false]);
        let other_scene = det(1, h, o, 1, 0, 0.95);
        let tp = match_detections(&[&d1, &other_scene], &[(0, h, o)]);
        assert_eq!(tp, vec![false, true]);
    }

    #[test]
    fn iou_must_exceed_half() {
        let h = bx(0.0, 0.0, 0.2, 0.2);
        let o = bx(0.5, 0.5, 0.7, 0.7);
        // human box with IoU exactly 1/2: [0,0,0.2,0.1] vs [0,0,0.2,0.2]
        let d = det(0, bx(0.0, 0.0, 0.2, 0.1), o, 1, 0, 0.9);
        assert!((iou(&d.human_box, &h) - 0.5).abs() < 1e-15);
        assert_eq!(match_detections(&[&d], &[(0, h, o)]), vec![false]);
    }

    #[test]
    fn report_splits_rare_and_known_object() {
        let (h, o) = (bx(0.1, 0.1, 0.3, 0.3), bx(0.4, 0.4, 0.6, 0.6));
        let gts = vec![vec![gt(h, o, 1, &[0])], vec![gt(h, o, 2, &[1])]];
        let mut counts = BTreeMap::new();
        counts.insert((1u32, 0usize), 50usize);
        counts.insert((2, 1), 3);
        // A high-scoring false positive of class (1, 0) in scene 1, which has
        // no object of class 1.
        let dets = vec![
            det(1, h, o, 1, 0, 0.99),
            det(0, h, o, 1, 0, 0.5),
            det(1, h, o, 2, 1, 0.7),
        ];
        let r = evaluate(&dets, &gts, &counts, EvalSetting::Default);
        assert_eq!(r.classes.len(), 2);
        assert_eq!(r.map_rare, Some(1.0));
        assert_eq!(r.map_non_rare, Some(0.5));
        assert_eq!(r.map, Some(0.75));
        let k = evaluate(&dets, &gts, &counts, EvalSetting::KnownObject);
        assert_eq!(k.map_non_rare, Some(1.0));
        assert_eq!(k.map, Some(1.0));
        let empty = evaluate(&dets, &[], &counts, EvalSetting::Default);
        assert_eq!(empty.map, None);
    }

    #[test]
    fn appending_low_false_positive_never_raises_ap() {
        let (h, o) = (bx(0.1, 0.1, 0.3, 0.3), bx(0.4, 0.4, 0.6, 0.6));
        let gts = vec![vec![gt(h, o, 1, &[0])]; 3];
        let counts = BTreeMap::new();
        let mut dets = vec![det(0, h, o, 1, 0, 0.9), det(2, h, o, 1, 0, 0.4)];
        let before = evaluate(&dets, &gts, &counts, EvalSetting::Default).map.unwrap();
        dets.push(det(1, bx(0.8, 0.8, 0.9, 0.9), o, 1, 0, 0.01));
        let after = evaluate(&dets, &gts, &counts, EvalSetting::Default).map.unwrap();
        assert!(after <= before);
    }

    #[test]
    fn bins() {
        assert_eq!(bin_index(0.0, 0.05), 0);
        assert_eq!(bin_index(0.049, 0.05), 0);
        assert_eq!(bin_index(0.051, 0.05), 1);
        assert_eq!(num_bins(0.05), 29);
        assert_eq!(bin_index(MAX_DISTANCE, 0.05), 28);
        assert_eq!(bin_index(5.0, 0.05), 28);
    }

    #[test]
    fn attention_stats_hand_example() {
        let s = attention_distance_stats([(0.01, 0.2), (0.02, 0.4), (0.3, 0.7)], 0.05);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].count, 2);
        assert!((s[0].mean - 0.3).abs() < 1e-15);
        assert!((s[0].variance - 0.01).abs() < 1e-15);
        assert_eq!(s[1].bin_low, 6.0 * 0.05);
        assert_eq!(s[1].variance, 0.0);
    }

    #[test]
    fn stratified_bins_cover_distances() {
        let h = bx(0.0, 0.0, 0.1, 0.1);
        let near = bx(0.02, 0.0, 0.12, 0.1);
        let far = bx(0.8, 0.8, 0.9, 0.9);
        let gts = vec![vec![gt(h, near, 1, &[0]), gt(h, far, 1, &[0])]];
        let dets = vec![det(0, h, near, 1, 0, 0.9)];
        let bins = distance_stratified_map(&dets, &gts, &BTreeMap::new(), EvalSetting::Default, 0.05);
        assert_eq!(bins.len(), 29);
        assert_eq!(bins[0].map, Some(1.0));
        let far_bin = bin_index(crate::geometry::center_distance(&h, &far), 0.05);
        assert_eq!(bins[far_bin].map, Some(0.0));
        assert_eq!(bins.iter().map(|b| b.num_gt).sum::<usize>(), 2);
        let distant = distant_map(&dets, &gts, &BTreeMap::new(), EvalSetting::Default, 0.5);
        assert_eq!(distant.map, Some(0.0));
    }
}
