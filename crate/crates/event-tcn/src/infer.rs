//! Sliding-window inference and post-processing.
//!
//! Dense regime: the network slides over the sequence with a one-second
//! stride, so each interior second is predicted by two overlapping windows;
//! the duplicate-merge rule keeps the row whose top confidence is higher.
//! Runs of repeated rare-class predictions are then suppressed down to
//! their most confident member. Sparse regime: each window contributes one
//! centered probability row, and watershed segments over the per-class
//! curves propose spot candidates.

use crate::arch::{network_forward_eval, NetworkParams, NetworkSpec};
use crate::data::{FeatureSequence, SamplerConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// Per-second class probabilities over a whole sequence.
#[derive(Debug, Clone)]
pub struct ProbabilityCurve {
    probs: Vec<f64>,
    pub num_classes: usize,
    pub duration_sec: usize,
    pub fps: f32,
}

impl ProbabilityCurve {
    pub fn new(duration_sec: usize, num_classes: usize, fps: f32) -> Self {
        Self {
            probs: vec![0.0; duration_sec * num_classes],
            num_classes,
            duration_sec,
            fps,
        }
    }

    pub fn row(&self, second: usize) -> &[f64] {
        &self.probs[second * self.num_classes..(second + 1) * self.num_classes]
    }

    fn row_mut(&mut self, second: usize) -> &mut [f64] {
        &mut self.probs[second * self.num_classes..(second + 1) * self.num_classes]
    }

    /// CSV with header `second,<class0>,...`; probabilities to 6 decimals.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("second");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for s in 0..self.duration_sec {
            out.push_str(&s.to_string());
            for v in self.row(s) {
                out.push_str(&format!(",{:.6}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// One per-second prediction extracted from a curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventPrediction {
    pub second: usize,
    pub class_id: usize,
    pub confidence: f64,
}

/// A watershed segment proposal: the contiguous above-threshold run, its
/// center as the candidate time, and the run's peak probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotCandidate {
    pub center_sec: f64,
    pub class_id: usize,
    pub confidence: f64,
    pub start_sec: usize,
    pub end_sec: usize,
}

/// How overlapping dense-regime window outputs reduce to one row per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// No fusion: each second keeps the prediction from the window where it
    /// is the first labeled position (the final second falls back to the
    /// last window's trailing position).
    Raw,
    /// Keep the row whose maximum class confidence is larger.
    MergeDuplicates,
}

/// Duplicate merge: whole-row selection by top confidence, so the output
/// stays a valid distribution. Ties keep the earlier window's row (`a`).
pub fn merge_duplicates(a: &[f64], b: &[f64]) -> Vec<f64> {
    let max_a = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_b = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_b > max_a {
        b.to_vec()
    } else {
        a.to_vec()
    }
}

/// Slide the network over a full sequence with a one-second stride.
///
/// Dense mode emits one row per labeled second from every window and
/// reduces overlaps per `reduction`; sparse mode emits each window's single
/// row at its center second. Window starts clamp to the sequence bounds so
/// edge seconds are covered.
pub fn sliding_window_predict(
    spec: &NetworkSpec,
    params: &NetworkParams,
    seq: &FeatureSequence,
    duration_sec: usize,
    sampler: &SamplerConfig,
    reduction: Reduction,
) -> Result<ProbabilityCurve> {
    let fps = seq.fps;
    sampler.validate(fps)?;
    if seq.num_frames < sampler.window_len {
        return Err(Error::Config(format!(
            "{}: sequence of {} frames shorter than one {}-frame window",
            seq.source_id, seq.num_frames, sampler.window_len
        )));
    }
    let c = spec.num_classes;
    let mut curve = ProbabilityCurve::new(duration_sec, c, fps);
    match sampler.mode {
        SamplingMode::Dense => {
            let t0 = sampler.outputs;
            if duration_sec < t0 {
                return Err(Error::Config(format!(
                    "sequence of {}s shorter than {} labeled positions",
                    duration_sec, t0
                )));
            }
            let ctx_left = sampler.context_left_frames(fps) as i64;
            // Candidate rows per second, at most t0 of them, in window order.
            let mut rows: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); duration_sec];
            for w in 0..=(duration_sec - t0) {
                let ideal = (w as f64 * fps as f64).round() as i64 - ctx_left;
                let probs = window_probs(spec, params, seq, ideal, sampler.window_len)?;
                for i in 0..t0 {
                    let row = probs[i * c..(i + 1) * c].to_vec();
                    rows[w + i].push((i, row));
                }
            }
            for (s, cands) in rows.into_iter().enumerate() {
                let reduced = match reduction {
                    Reduction::MergeDuplicates => cands
                        .into_iter()
                        .map(|(_, row)| row)
                        .reduce(|acc, row| merge_duplicates(&acc, &row))
                        .expect("every second covered"),
                    Reduction::Raw => {
                        // Position-0 row when it exists, else the last row.
                        let fallback = cands.last().cloned();
                        cands
                            .into_iter()
                            .find(|(pos, _)| *pos == 0)
                            .or(fallback)
                            .expect("every second covered")
                            .1
                    }
                };
                curve.row_mut(s).copy_from_slice(&reduced);
            }
        }
        SamplingMode::SparseCentered => {
            let win = sampler.window_sec(fps) as usize;
            let center_off = sampler.center_offset_sec(fps) as i64;
            if duration_sec < win {
                return Err(Error::Config(format!(
                    "sequence of {}s shorter than one {}s window",
                    duration_sec, win
                )));
            }
            // One forward per distinct window start; edge seconds reuse the
            // clamped boundary windows.
            let max_w = (duration_sec - win) as i64;
            let mut cached: Vec<Option<Vec<f64>>> = vec![None; max_w as usize + 1];
            for s in 0..duration_sec {
                let w = (s as i64 - center_off).clamp(0, max_w) as usize;
                if cached[w].is_none() {
                    let ideal = (w as f64 * fps as f64).round() as i64;
                    let probs = window_probs(spec, params, seq, ideal, sampler.window_len)?;
                    cached[w] = Some(probs[..c].to_vec());
                }
                curve.row_mut(s).copy_from_slice(cached[w].as_ref().unwrap());
            }
        }
    }
    Ok(curve)
}

/// Forward one window through the network in eval mode, returning the
/// flattened `[t0_eff * c]` probability rows.
fn window_probs(
    spec: &NetworkSpec,
    params: &NetworkParams,
    seq: &FeatureSequence,
    ideal_start_frame: i64,
    window_len: usize,
) -> Result<Vec<f64>> {
    let window = crate::data::extract_window(seq, ideal_start_frame, window_len)?;
    // [t, l] -> [1, l, t]
    let dim = seq.feature_dim;
    let mut input = Tensor::zeros(&[1, dim, window_len]);
    {
        let w = window.data();
        let x = input.data_mut();
        for t in 0..window_len {
            for d in 0..dim {
                x[d * window_len + t] = w[t * dim + d];
            }
        }
    }
    let (probs, _) = network_forward_eval(spec, params, &input)?;
    Ok(probs.into_data())
}

/// Argmax prediction per second; ties resolve to the lower class id.
pub fn extract_predictions(curve: &ProbabilityCurve) -> Vec<EventPrediction> {
    (0..curve.duration_sec)
        .map(|s| {
            let row = curve.row(s);
            let (class_id, confidence) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                });
            EventPrediction {
                second: s,
                class_id,
                confidence,
            }
        })
        .collect()
}

/// Suppress runs of repeated rare-class predictions.
///
/// For each maximal run (length > 1) of the same rare class, the most
/// confident member stays; every other member is reassigned to the second
/// best class of its own probability row, with that class's confidence.
/// One left-to-right pass; reassignments are not re-examined.
pub fn suppress_consecutive(
    curve: &ProbabilityCurve,
    preds: &[EventPrediction],
    rare_classes: &BTreeSet<usize>,
) -> Vec<EventPrediction> {
    let mut out = preds.to_vec();
    let n = out.len();
    let mut i = 0;
    while i < n {
        let class_id = preds[i].class_id;
        let mut j = i + 1;
        while j < n
            && preds[j].class_id == class_id
            && preds[j].second == preds[j - 1].second + 1
        {
            j += 1;
        }
        let run_len = j - i;
        if run_len > 1 && rare_classes.contains(&class_id) {
            let keep = (i..j)
                .max_by(|&a, &b| {
                    preds[a]
                        .confidence
                        .partial_cmp(&preds[b].confidence)
                        .unwrap()
                        .then(preds[b].second.cmp(&preds[a].second))
                })
                .expect("non-empty run");
            for k in i..j {
                if k == keep {
                    continue;
                }
                let row = curve.row(preds[k].second);
                let (second_best, conf) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(c, _)| *c != class_id)
                    .fold((0usize, f64::NEG_INFINITY), |best, (c, p)| {
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    });
                out[k] = EventPrediction {
                    second: preds[k].second,
                    class_id: second_best,
                    confidence: conf,
                };
            }
        }
        i = j;
    }
    out
}

/// Rare-class default: every event class except a dominant one (a class
/// holding a strict majority of the events).
pub fn default_rare_classes(track: &crate::data::AnnotationTrack) -> BTreeSet<usize> {
    let dominant = track.dominant_class();
    (1..track.num_classes())
        .filter(|c| Some(*c) != dominant)
        .collect()
}

/// Watershed proposals for one class: maximal runs of seconds with
/// probability >= threshold become segments; the candidate sits at the
/// segment center with the segment's peak probability as confidence.
pub fn watershed_spot(
    curve: &ProbabilityCurve,
    class_id: usize,
    threshold: f64,
) -> Result<Vec<SpotCandidate>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "watershed threshold must be in (0,1), got {}",
            threshold
        )));
    }
    if class_id >= curve.num_classes {
        return Err(Error::Config(format!(
            "watershed class {} out of range",
            class_id
        )));
    }
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for s in 0..=curve.duration_sec {
        let above = s < curve.duration_sec && curve.row(s)[class_id] >= threshold;
        match (run_start, above) {
            (None, true) => run_start = Some(s),
            (Some(start), false) => {
                let end = s - 1;
                let confidence = (start..=end)
                    .map(|t| curve.row(t)[class_id])
                    .fold(f64::NEG_INFINITY, f64::max);
                out.push(SpotCandidate {
                    center_sec: (start + end) as f64 / 2.0,
                    class_id,
                    confidence,
                    start_sec: start,
                    end_sec: end,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Watershed proposals for every event class, in class order.
pub fn watershed_all_classes(
    curve: &ProbabilityCurve,
    threshold: f64,
) -> Result<Vec<SpotCandidate>> {
    let mut out = Vec::new();
    for class_id in 1..curve.num_classes {
        out.extend(watershed_spot(curve, class_id, threshold)?);
    }
    Ok(out)
}

/// CSV with header `class,center_sec,confidence,start_sec,end_sec`.
pub fn spots_to_csv(spots: &[SpotCandidate], class_names: &[String]) -> String {
    let mut out = String::from("class,center_sec,confidence,start_sec,end_sec\n");
    for s in spots {
        out.push_str(&format!(
            "{},{:.1},{:.6},{},{}\n",
            class_names[s.class_id], s.center_sec, s.confidence, s.start_sec, s.end_sec
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve_from_rows(rows: &[Vec<f64>]) -> ProbabilityCurve {
        let c = rows[0].len();
        let mut curve = ProbabilityCurve::new(rows.len(), c, 1.0);
        for (s, row) in rows.iter().enumerate() {
            curve.row_mut(s).copy_from_slice(row);
        }
        curve
    }

    #[test]
    fn merge_keeps_row_with_higher_peak() {
        let a = vec![0.1, 0.9];
        let b = vec![0.6, 0.4];
        assert_eq!(merge_duplicates(&a, &b), a);
        assert_eq!(merge_duplicates(&b, &a), a);
        // Tie: earlier window wins.
        let c = vec![0.9, 0.1];
        assert_eq!(merge_duplicates(&a, &c), a);
        // Identical rows are a fixpoint.
        assert_eq!(merge_duplicates(&a, &a), a);
    }

    #[test]
    fn suppression_rewrites_weaker_run_members() {
        // Run of class 1 at seconds 0-1; the weaker one falls back to its
        // own second best (class 2 at 0.5).
        let curve = curve_from_rows(&[
            vec![0.05, 0.9, 0.05],
            vec![0.2, 0.7, 0.5],
            vec![0.8, 0.1, 0.1],
        ]);
        let preds = extract_predictions(&curve);
        let rare: BTreeSet<usize> = [1, 2].into_iter().collect();
        let out = suppress_consecutive(&curve, &preds, &rare);
        assert_eq!(out[0], EventPrediction { second: 0, class_id: 1, confidence: 0.9 });
        assert_eq!(out[1], EventPrediction { second: 1, class_id: 2, confidence: 0.5 });
        assert_eq!(out[2].class_id, 0);
    }

    #[test]
    fn suppression_leaves_singletons_and_nonrare_runs() {
        let curve = curve_from_rows(&[
            vec![0.1, 0.9],
            vec![0.9, 0.1],
            vec![0.1, 0.9],
            vec![0.2, 0.8],
        ]);
        let preds = extract_predictions(&curve);
        // Class 1 runs at seconds 2-3, but it is not rare here.
        let rare: BTreeSet<usize> = BTreeSet::new();
        let out = suppress_consecutive(&curve, &preds, &rare);
        assert_eq!(out, preds);
        // Singleton runs of a rare class are untouched too.
        let rare: BTreeSet<usize> = [1].into_iter().collect();
        let curve2 = curve_from_rows(&[vec![0.1, 0.9], vec![0.9, 0.1], vec![0.1, 0.9]]);
        let preds2 = extract_predictions(&curve2);
        assert_eq!(suppress_consecutive(&curve2, &preds2, &rare), preds2);
    }

    #[test]
    fn suppression_never_increases_rare_predictions() {
        let curve = curve_from_rows(&[
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.7, 0.2],
            vec![0.1, 0.6, 0.3],
        ]);
        let preds = extract_predictions(&curve);
        let rare: BTreeSet<usize> = [1].into_iter().collect();
        let out = suppress_consecutive(&curve, &preds, &rare);
        let before = preds.iter().filter(|p| p.class_id == 1).count();
        let after = out.iter().filter(|p| p.class_id == 1).count();
        assert!(after <= before);
        assert_eq!(after, 1);
    }

    #[test]
    fn watershed_finds_segments() {
        let curve = curve_from_rows(&[
            vec![0.9, 0.1],
            vec![0.3, 0.7],
            vec![0.2, 0.8],
            vec![0.3, 0.7],
            vec![0.9, 0.1],
        ]);
        let spots = watershed_spot(&curve, 1, 0.5).unwrap();
        assert_eq!(spots.len(), 1);
        let s = spots[0];
        assert_eq!((s.start_sec, s.end_sec), (1, 3));
        assert_eq!(s.center_sec, 2.0);
        assert!((s.confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn watershed_empty_below_threshold() {
        let curve = curve_from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]);
        assert!(watershed_spot(&curve, 1, 0.5).unwrap().is_empty());
    }

    #[test]
    fn watershed_separates_two_bumps() {
        let curve = curve_from_rows(&[
            vec![0.2, 0.8],
            vec![0.9, 0.1],
            vec![0.9, 0.1],
            vec![0.4, 0.6],
            vec![0.3, 0.7],
        ]);
        let spots = watershed_spot(&curve, 1, 0.5).unwrap();
        assert_eq!(spots.len(), 2);
        assert!(spots[0].center_sec < spots[1].center_sec);
        assert_eq!(spots[0].center_sec, 0.0);
        assert_eq!(spots[1].center_sec, 3.5);
    }

    #[test]
    fn watershed_rejects_bad_threshold() {
        let curve = curve_from_rows(&[vec![0.5, 0.5]]);
        assert!(watershed_spot(&curve, 1, 0.0).is_err());
        assert!(watershed_spot(&curve, 1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_selective(
            a in proptest::collection::vec(0.0f64..1.0, 3),
            b in proptest::collection::vec(0.0f64..1.0, 3),
        ) {
            let m = merge_duplicates(&a, &b);
            prop_assert!(m == a || m == b);
            prop_assert_eq!(merge_duplicates(&m, &m), m.clone());
            // Commutative up to the tie-break.
            let forward = merge_duplicates(&a, &b);
            let backward = merge_duplicates(&b, &a);
            let max_a = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let max_b = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max_a != max_b {
                prop_assert_eq!(forward, backward);
            }
        }

        #[test]
        fn watershed_count_nonincreasing_in_threshold(
            probs in proptest::collection::vec(0.0f64..1.0, 8),
            t1 in 0.05f64..0.95,
            t2 in 0.05f64..0.95,
        ) {
            let rows: Vec<Vec<f64>> = probs.iter().map(|&p| vec![1.0 - p, p]).collect();
            let curve = curve_from_rows(&rows);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let at_lo = watershed_spot(&curve, 1, lo).unwrap().len();
            let at_hi = watershed_spot(&curve, 1, hi).unwrap().len();
            // Higher thresholds can split runs but never create support, so
            // compare against the run count at the union support instead:
            // candidates at hi must all sit inside candidates at lo.
            let spots_lo = watershed_spot(&curve, 1, lo).unwrap();
            let spots_hi = watershed_spot(&curve, 1, hi).unwrap();
            for s in &spots_hi {
                prop_assert!(spots_lo.iter().any(|l| l.start_sec <= s.start_sec && s.end_sec <= l.end_sec));
            }
            // Total covered seconds shrink monotonically.
            let cover = |spots: &[SpotCandidate]| -> usize {
                spots.iter().map(|s| s.end_sec - s.start_sec + 1).sum()
            };
            prop_assert!(cover(&spots_hi) <= cover(&spots_lo));
            let _ = (at_lo, at_hi);
        }
    }
}
