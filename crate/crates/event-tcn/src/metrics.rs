//! Tolerance-matched detection and spotting metrics.
//!
//! Detection: per-class precision/recall/F1 with greedy confidence-ordered
//! one-to-one matching at tolerance delta. Spotting: average precision per
//! class (all-points interpolation), mean AP, and the mean of mAP over a
//! tolerance grid. A brute-force maximum-matching oracle ships alongside
//! for verification on small instances.

use crate::data::AnnotationTrack;
use crate::error::{Error, Result};
use crate::infer::{EventPrediction, SpotCandidate};
use std::collections::HashMap;

/// Per-class detection counts and rates at one tolerance.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Detection report: one row per event class plus macro averages over
/// classes with at least one ground-truth event.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub delta: f64,
    pub class_names: Vec<String>,
}

impl EvalReport {
    /// CSV rows `class,precision,recall,f1,tp,fp,fn` plus an average row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,tp,fp,fn\n");
        for m in &self.per_class {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{},{}\n",
                self.class_names[m.class_id], m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            ));
        }
        out.push_str(&format!(
            "average,{:.6},{:.6},{:.6},,,\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        out
    }
}

/// Per-class APs at one tolerance and their mean over classes with ground
/// truth.
#[derive(Debug, Clone)]
pub struct APResult {
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
    pub delta: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Greedy one-to-one matching: candidates in confidence order each claim
/// the nearest unclaimed target within `delta` (ties: earlier target).
/// Returns per-candidate hit flags and the number of matches.
fn greedy_match(candidates: &[(f64, f64)], targets: &[f64], delta: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap()
            .then(candidates[a].0.partial_cmp(&candidates[b].0).unwrap())
    });
    let mut claimed = vec![false; targets.len()];
    let mut hits = vec![false; candidates.len()];
    let mut matched = 0;
    for &ci in &order {
        let time = candidates[ci].0;
        let mut best: Option<(usize, f64)> = None;
        for (ti, &t) in targets.iter().enumerate() {
            if claimed[ti] {
                continue;
            }
            let dist = (time - t).abs();
            if dist <= delta {
                let better = match best {
                    None => true,
                    Some((bi, bd)) => dist < bd || (dist == bd && t < targets[bi]),
                };
                if better {
                    best = Some((ti, dist));
                }
            }
        }
        if let Some((ti, _)) = best {
            claimed[ti] = true;
            hits[ci] = true;
            matched += 1;
        }
    }
    (hits, matched)
}

/// Per-class precision/recall/F1 at tolerance `delta` seconds.
///
/// Predictions are greedily matched one-to-one to same-class ground-truth
/// events in confidence order; the background class takes no part. Classes
/// with no ground truth are reported but excluded from the macro averages.
pub fn tolerance_f1(
    preds: &[EventPrediction],
    gts: &AnnotationTrack,
    delta: f64,
) -> Result<EvalReport> {
    let c = gts.num_classes();
    if let Some(p) = preds.iter().find(|p| p.class_id >= c) {
        return Err(Error::Config(format!(
            "prediction class id {} outside the {}-class vocabulary",
            p.class_id, c
        )));
    }
    let mut per_class = Vec::with_capacity(c.saturating_sub(1));
    let mut macro_acc = (0.0, 0.0, 0.0, 0usize);
    for class_id in 1..c {
        let candidates: Vec<(f64, f64)> = preds
            .iter()
            .filter(|p| p.class_id == class_id)
            .map(|p| (p.second as f64, p.confidence))
            .collect();
        let targets: Vec<f64> = gts
            .events
            .iter()
            .filter(|e| e.class_id == class_id)
            .map(|e| e.second as f64)
            .collect();
        let (_, tp) = greedy_match(&candidates, &targets, delta);
        let fp = candidates.len() - tp;
        let fn_ = targets.len() - tp;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = f1_of(precision, recall);
        if !targets.is_empty() {
            macro_acc.0 += precision;
            macro_acc.1 += recall;
            macro_acc.2 += f1;
            macro_acc.3 += 1;
        }
        per_class.push(ClassMetrics {
            class_id,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        });
    }
    let n = macro_acc.3.max(1) as f64;
    Ok(EvalReport {
        per_class,
        macro_precision: macro_acc.0 / n,
        macro_recall: macro_acc.1 / n,
        macro_f1: macro_acc.2 / n,
        delta,
        class_names: gts.class_names.clone(),
    })
}

/// AP from per-rank hit flags by all-points interpolation: the area under
/// the precision envelope as recall steps through the hits.
fn ap_from_hits(hits_in_rank_order: &[bool], num_targets: usize) -> f64 {
    if num_targets == 0 {
        return 0.0;
    }
    let n = hits_in_rank_order.len();
    let mut precisions = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &hit) in hits_in_rank_order.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope from the right.
    let mut envelope = precisions.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let recall_step = 1.0 / num_targets as f64;
    hits_in_rank_order
        .iter()
        .zip(&envelope)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| recall_step * p)
        .sum()
}

fn class_candidates(spots: &[SpotCandidate], class_id: usize) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = spots
        .iter()
        .filter(|s| s.class_id == class_id)
        .map(|s| (s.center_sec, s.confidence))
        .collect();
    // Rank by confidence; ties break on the earlier center.
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.partial_cmp(&b.0).unwrap()));
    v
}

fn class_anchors(anchors: &AnnotationTrack, class_id: usize) -> Vec<f64> {
    anchors
        .events
        .iter()
        .filter(|e| e.class_id == class_id)
        .map(|e| e.second as f64)
        .collect()
}

/// Average precision for one class: candidates in confidence order claim
/// the nearest unclaimed anchor within `delta`.
pub fn spotting_ap(
    spots: &[SpotCandidate],
    anchors: &AnnotationTrack,
    class_id: usize,
    delta: f64,
) -> f64 {
    let candidates = class_candidates(spots, class_id);
    let targets = class_anchors(anchors, class_id);
    let (hits, _) = greedy_match(&candidates, &targets, delta);
    ap_from_hits(&hits, targets.len())
}

/// Mean AP over event classes with at least one anchor.
pub fn spotting_map(spots: &[SpotCandidate], anchors: &AnnotationTrack, delta: f64) -> APResult {
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for class_id in 1..anchors.num_classes() {
        if class_anchors(anchors, class_id).is_empty() {
            continue;
        }
        let ap = spotting_ap(spots, anchors, class_id, delta);
        per_class.push((class_id, ap));
        sum += ap;
        n += 1;
    }
    APResult {
        per_class,
        map: if n > 0 { sum / n as f64 } else { 0.0 },
        delta,
    }
}

/// mAP at every tolerance in the grid, in grid order.
pub fn map_curve(
    spots: &[SpotCandidate],
    anchors: &AnnotationTrack,
    delta_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if delta_grid.is_empty() {
        return Err(Error::Config("tolerance grid is empty".to_string()));
    }
    if delta_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("tolerance grid must be ascending".to_string()));
    }
    Ok(delta_grid
        .iter()
        .map(|&d| (d, spotting_map(spots, anchors, d).map))
        .collect())
}

/// Arithmetic mean of mAP over the tolerance grid.
pub fn average_map(
    spots: &[SpotCandidate],
    anchors: &AnnotationTrack,
    delta_grid: &[f64],
) -> Result<f64> {
    let curve = map_curve(spots, anchors, delta_grid)?;
    Ok(curve.iter().map(|(_, m)| m).sum::<f64>() / curve.len() as f64)
}

/// (recall, precision) point per rank for one class: candidates in
/// confidence order against `anchor_times`, greedy one-to-one matching.
pub fn pr_curve(candidates: &[(f64, f64)], anchor_times: &[f64], delta: f64) -> Vec<(f64, f64)> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.partial_cmp(&b.0).unwrap()));
    let (hits, _) = greedy_match(&ranked, anchor_times, delta);
    // greedy_match ignores order for claiming, but flags are per candidate;
    // accumulate in rank order.
    let mut tp = 0usize;
    let mut out = Vec::with_capacity(ranked.len());
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let recall = if anchor_times.is_empty() {
            0.0
        } else {
            tp as f64 / anchor_times.len() as f64
        };
        out.push((recall, tp as f64 / (i + 1) as f64));
    }
    out
}

/// PR curve for one spotting class.
pub fn pr_curve_spots(
    spots: &[SpotCandidate],
    anchors: &AnnotationTrack,
    class_id: usize,
    delta: f64,
) -> Vec<(f64, f64)> {
    pr_curve(
        &class_candidates(spots, class_id),
        &class_anchors(anchors, class_id),
        delta,
    )
}

/// Exhaustive maximum-cardinality one-to-one matching between candidate
/// times and target times within `delta`. Verification oracle; instances
/// are capped at 12 per side.
pub fn brute_force_match(candidates: &[f64], targets: &[f64], delta: f64) -> Result<usize> {
    if candidates.len() > 12 || targets.len() > 12 {
        return Err(Error::Config(format!(
            "brute_force_match: instance {}x{} too large (max 12)",
            candidates.len(),
            targets.len()
        )));
    }
    fn go(
        idx: usize,
        used: u32,
        candidates: &[f64],
        targets: &[f64],
        delta: f64,
        memo: &mut HashMap<(usize, u32), usize>,
    ) -> usize {
        if idx == candidates.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(idx, used)) {
            return v;
        }
        // Skip this candidate.
        let mut best = go(idx + 1, used, candidates, targets, delta, memo);
        for (ti, &t) in targets.iter().enumerate() {
            if used & (1 << ti) == 0 && (candidates[idx] - t).abs() <= delta {
                best = best.max(
                    1 + go(idx + 1, used | (1 << ti), candidates, targets, delta, memo),
                );
            }
        }
        memo.insert((idx, used), best);
        best
    }
    let mut memo = HashMap::new();
    Ok(go(0, 0, candidates, targets, delta, &mut memo))
}

/// Greedy matching size for the same instance shape the oracle takes.
/// Candidates are `(time, confidence)`.
pub fn greedy_match_count(candidates: &[(f64, f64)], targets: &[f64], delta: f64) -> usize {
    greedy_match(candidates, targets, delta).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotationTrack, EventRecord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(events: Vec<(u32, usize)>, classes: usize, duration: u32) -> AnnotationTrack {
        let mut names = vec!["background".to_string()];
        names.extend((1..classes).map(|i| format!("c{i}")));
        AnnotationTrack::new(
            events
                .into_iter()
                .map(|(second, class_id)| EventRecord { second, class_id })
                .collect(),
            duration,
            names,
        )
        .unwrap()
    }

    fn pred(second: usize, class_id: usize, confidence: f64) -> EventPrediction {
        EventPrediction {
            second,
            class_id,
            confidence,
        }
    }

    fn spot(center: f64, class_id: usize, confidence: f64) -> SpotCandidate {
        SpotCandidate {
            center_sec: center,
            class_id,
            confidence,
            start_sec: center.floor() as usize,
            end_sec: center.ceil() as usize,
        }
    }

    #[test]
    fn exact_predictions_are_perfect() {
        let gts = track(vec![(3, 1), (9, 1), (5, 2)], 3, 20);
        let preds = vec![pred(3, 1, 0.9), pred(9, 1, 0.8), pred(5, 2, 0.7)];
        let report = tolerance_f1(&preds, &gts, 1.0).unwrap();
        for m in &report.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn within_one_second_counts() {
        let gts = track(vec![(10, 1)], 2, 20);
        let report = tolerance_f1(&[pred(11, 1, 0.9)], &gts, 1.0).unwrap();
        assert_eq!(report.per_class[0].tp, 1);
        let report0 = tolerance_f1(&[pred(11, 1, 0.9)], &gts, 0.0).unwrap();
        assert_eq!(report0.per_class[0].tp, 0);
        assert_eq!(report0.per_class[0].fp, 1);
    }

    #[test]
    fn one_to_one_matching_penalizes_duplicates() {
        let gts = track(vec![(10, 1)], 2, 20);
        let preds = vec![pred(10, 1, 0.9), pred(11, 1, 0.8)];
        let report = tolerance_f1(&preds, &gts, 1.0).unwrap();
        let m = &report.per_class[0];
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        // Brute force agrees: only one of the two can match.
        assert_eq!(brute_force_match(&[10.0, 11.0], &[10.0], 1.0).unwrap(), 1);
    }

    #[test]
    fn counts_partition_predictions_and_truths() {
        let gts = track(vec![(3, 1), (8, 1), (15, 1)], 2, 30);
        let preds = vec![pred(2, 1, 0.5), pred(9, 1, 0.8), pred(25, 1, 0.9)];
        let report = tolerance_f1(&preds, &gts, 1.0).unwrap();
        let m = &report.per_class[0];
        assert_eq!(m.tp + m.fp, 3);
        assert_eq!(m.tp + m.fn_, 3);
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let gts = track(vec![(3, 1)], 2, 10);
        assert!(tolerance_f1(&[pred(3, 5, 0.9)], &gts, 1.0).is_err());
    }

    #[test]
    fn translation_invariance() {
        let gts = track(vec![(13, 1), (18, 2)], 3, 40);
        let shifted = track(vec![(23, 1), (28, 2)], 3, 50);
        let preds = vec![pred(12, 1, 0.6), pred(19, 2, 0.7)];
        let shifted_preds = vec![pred(22, 1, 0.6), pred(29, 2, 0.7)];
        let a = tolerance_f1(&preds, &gts, 1.0).unwrap();
        let b = tolerance_f1(&shifted_preds, &shifted, 1.0).unwrap();
        assert_eq!(a.macro_f1, b.macro_f1);
    }

    #[test]
    fn ap_perfect_hits_is_one() {
        let anchors = track(vec![(10, 1), (30, 1)], 2, 60);
        let spots = vec![spot(10.0, 1, 0.9), spot(30.0, 1, 0.8)];
        assert_eq!(spotting_ap(&spots, &anchors, 1, 5.0), 1.0);
    }

    #[test]
    fn ap_half_when_high_confidence_misses() {
        // One anchor; the stronger candidate misses, the weaker one hits.
        let anchors = track(vec![(50, 1)], 2, 100);
        let spots = vec![spot(10.0, 1, 0.9), spot(51.0, 1, 0.5)];
        let ap = spotting_ap(&spots, &anchors, 1, 5.0);
        assert!((ap - 0.5).abs() < 1e-12);
        // And the PR points: miss first, then the hit at precision 1/2.
        let points = pr_curve_spots(&spots, &anchors, 1, 5.0);
        assert_eq!(points, vec![(0.0, 0.0), (1.0, 0.5)]);
    }

    #[test]
    fn ap_zero_without_candidates() {
        let anchors = track(vec![(50, 1)], 2, 100);
        assert_eq!(spotting_ap(&[], &anchors, 1, 5.0), 0.0);
    }

    #[test]
    fn pr_curve_perfect_single_point() {
        let anchors = track(vec![(10, 1)], 2, 20);
        let points = pr_curve_spots(&[spot(10.0, 1, 0.9)], &anchors, 1, 5.0);
        assert_eq!(points, vec![(1.0, 1.0)]);
        assert!(pr_curve_spots(&[], &anchors, 1, 5.0).is_empty());
    }

    #[test]
    fn average_map_handles_grids() {
        let anchors = track(vec![(10, 1), (40, 2)], 3, 120);
        let spots = vec![spot(10.0, 1, 0.9), spot(40.0, 2, 0.8)];
        let grid: Vec<f64> = (1..=12).map(|i| (i * 5) as f64).collect();
        assert_eq!(average_map(&spots, &anchors, &grid).unwrap(), 1.0);
        assert_eq!(
            average_map(&spots, &anchors, &[5.0]).unwrap(),
            spotting_map(&spots, &anchors, 5.0).map
        );
        assert!(map_curve(&spots, &anchors, &[]).is_err());
        assert!(map_curve(&spots, &anchors, &[5.0, 5.0]).is_err());
    }

    #[test]
    fn brute_force_edge_cases() {
        assert_eq!(brute_force_match(&[1.0, 5.0], &[3.0, 8.0], 0.0).unwrap(), 0);
        assert_eq!(
            brute_force_match(&[1.0, 5.0, 9.0], &[1.0, 5.0, 9.0], 0.0).unwrap(),
            3
        );
        assert!(brute_force_match(&vec![0.0; 13], &[1.0], 1.0).is_err());
    }

    #[test]
    fn greedy_matches_brute_force_on_random_instances() {
        // Domain-shaped instances: integer seconds, one event per second,
        // tolerance of one second.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut mismatches = 0usize;
        let trials = 1000;
        for trial in 0..trials {
            let n_c = rng.gen_range(0..=8);
            let n_t = rng.gen_range(0..=8);
            let candidates: Vec<(f64, f64)> = (0..n_c)
                .map(|_| (rng.gen_range(0..60) as f64, rng.gen_range(0.0..1.0)))
                .collect();
            let mut targets: Vec<f64> = (0..n_t).map(|_| rng.gen_range(0..60) as f64).collect();
            targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
            targets.dedup();
            let greedy = greedy_match_count(&candidates, &targets, 1.0);
            let times: Vec<f64> = candidates.iter().map(|c| c.0).collect();
            let optimal = brute_force_match(&times, &targets, 1.0).unwrap();
            assert!(greedy <= optimal);
            if greedy != optimal {
                mismatches += 1;
                eprintln!(
                    "greedy shortfall on trial {trial}: {greedy} < {optimal} \
                     (candidates {candidates:?}, targets {targets:?})"
                );
            }
        }
        // Greedy can be suboptimal on contrived layouts; on random ones it
        // should almost never be.
        assert!(
            (mismatches as f64) / (trials as f64) <= 0.005,
            "{mismatches} greedy shortfalls in {trials} trials"
        );
    }

    #[test]
    fn map_is_nondecreasing_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n_anchor = rng.gen_range(1..6);
            let events: Vec<(u32, usize)> = (0..n_anchor)
                .map(|_| (rng.gen_range(0..300), rng.gen_range(1..4)))
                .collect();
            let mut dedup = events.clone();
            dedup.sort_unstable();
            dedup.dedup();
            let anchors = track(dedup, 4, 300);
            let spots: Vec<SpotCandidate> = (0..rng.gen_range(0..8))
                .map(|_| {
                    spot(
                        rng.gen_range(0.0..300.0),
                        rng.gen_range(1..4),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let grid: Vec<f64> = (1..=12).map(|i| (i * 5) as f64).collect();
            let curve = map_curve(&spots, &anchors, &grid).unwrap();
            for w in curve.windows(2) {
                assert!(w[1].1 >= w[0].1 - 1e-12, "mAP dropped: {:?}", curve);
            }
        }
    }

    proptest! {
        #[test]
        fn tolerance_f1_counts_always_consistent(
            gt_secs in proptest::collection::vec(0u32..50, 0..6),
            pred_secs in proptest::collection::vec(0usize..50, 0..6),
        ) {
            let mut events: Vec<(u32, usize)> = gt_secs.iter().map(|&s| (s, 1usize)).collect();
            events.sort_unstable();
            events.dedup();
            let n_gt = events.len();
            let gts = track(events, 2, 50);
            let preds: Vec<EventPrediction> = pred_secs
                .iter()
                .enumerate()
                .map(|(i, &s)| pred(s, 1, 1.0 - i as f64 * 0.01))
                .collect();
            let report = tolerance_f1(&preds, &gts, 1.0).unwrap();
            let m = &report.per_class[0];
            prop_assert_eq!(m.tp + m.fp, preds.len());
            prop_assert_eq!(m.tp + m.fn_, n_gt);
        }
    }
}
