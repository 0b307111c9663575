//! Post-processing of raw segment labels: stability rules, coverage
//! completion, and gripper-event precision forcing.

use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, Label, Segment, Segmentation, DEFAULT_CONFIDENCE};
use crate::error::{Error, Result};
use crate::geometry::RelationSeries;

/// Slopes with magnitude below this (distance units per frame) count as flat.
pub const TREND_DEAD_BAND: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub min_segment_len: usize,
    pub merge_gap: usize,
    pub hysteresis: usize,
    pub micro_len: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            min_segment_len: 8,
            merge_gap: 5,
            hysteresis: 3,
            micro_len: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripperForceConfig {
    /// Frames between the two gripper samples compared.
    pub lookahead: usize,
    /// Minimum absolute gripper change that counts as an actuation event.
    pub threshold: f64,
    /// Frames added on both sides of each cluster window.
    pub pad: usize,
    /// Clustering radius in frames. A local default with no published value.
    pub dbscan_eps: usize,
    /// Minimum events per cluster. A local default with no published value.
    pub dbscan_min_pts: usize,
}

impl Default for GripperForceConfig {
    fn default() -> Self {
        Self {
            lookahead: 4,
            threshold: 0.03,
            pad: 2,
            dbscan_eps: 8,
            dbscan_min_pts: 2,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_segment_len < 1 {
            return Err(Error::Config("min_segment_len must be >= 1".into()));
        }
        Ok(())
    }
}

impl GripperForceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookahead < 1 {
            return Err(Error::Config("gripper lookahead must be >= 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("gripper threshold must be > 0".into()));
        }
        if self.dbscan_eps < 1 || self.dbscan_min_pts < 1 {
            return Err(Error::Config("dbscan eps and min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maximal run of equal labels, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Run {
    label: Label,
    start: usize,
    end: usize,
}

impl Run {
    fn len(&self) -> usize {
        self.end - self.start
    }
}

fn runs(labels: &[Label]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (t, &label) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.label == label => r.end = t + 1,
            _ => out.push(Run {
                label,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

/// A label change sticks only if the new label lasts `hysteresis` frames.
fn hysteresis_pass(labels: &mut [Label], hysteresis: usize) {
    let mut current = match labels.first() {
        Some(&l) => l,
        None => return,
    };
    let mut t = 0;
    while t < labels.len() {
        if labels[t] == current {
            t += 1;
            continue;
        }
        let run_end = labels[t..]
            .iter()
            .position(|&l| l != labels[t])
            .map_or(labels.len(), |p| t + p);
        if run_end - t >= hysteresis {
            current = labels[t];
        } else {
            labels[t..run_end].fill(current);
        }
        t = run_end;
    }
}

/// Absorbs interior runs shorter than `threshold` whose two neighbours share
/// a label, scanning left to right until nothing changes.
fn absorb_flanked(labels: &mut [Label], threshold: usize) {
    loop {
        let rs = runs(labels);
        let target = (1..rs.len().saturating_sub(1)).find(|&i| {
            rs[i].len() < threshold && rs[i - 1].label == rs[i + 1].label
        });
        match target {
            Some(i) => labels[rs[i].start..rs[i].end].fill(rs[i - 1].label),
            None => return,
        }
    }
}

/// Runs shorter than `min_len` join their longer neighbour (ties: earlier).
fn enforce_min_len(labels: &mut [Label], min_len: usize) {
    loop {
        let rs = runs(labels);
        if rs.len() < 2 {
            return;
        }
        let Some(i) = rs.iter().position(|r| r.len() < min_len) else {
            return;
        };
        let left = i.checked_sub(1).map(|k| rs[k].len());
        let right = rs.get(i + 1).map(Run::len);
        let label = match (left, right) {
            (Some(l), Some(r)) if r > l => rs[i + 1].label,
            (Some(_), _) => rs[i - 1].label,
            (None, Some(_)) => rs[i + 1].label,
            (None, None) => return,
        };
        labels[rs[i].start..rs[i].end].fill(label);
    }
}

fn stability_round(labels: &mut [Label], cfg: &StabilityConfig) {
    hysteresis_pass(labels, cfg.hysteresis);
    absorb_flanked(labels, cfg.micro_len);
    absorb_flanked(labels, cfg.merge_gap);
    enforce_min_len(labels, cfg.min_segment_len);
}

/// Applies hysteresis, micro-oscillation removal, same-label gap merging and
/// minimum-length enforcement, in that order, repeated until stable.
pub fn stabilize_labels(labels: &[Label], cfg: &StabilityConfig) -> Vec<Label> {
    let mut out = labels.to_vec();
    loop {
        let before = out.clone();
        stability_round(&mut out, cfg);
        if out == before {
            return out;
        }
    }
}

/// Full-coverage segmentation from per-frame labels after the stability
/// rules. Every segment gets confidence 1.
pub fn apply_stability(labels: &[Label], cfg: &StabilityConfig) -> Segmentation {
    let conf = vec![1.0; labels.len()];
    stabilize_with_confidence("", labels, &conf, cfg)
}

fn stabilize_with_confidence(
    episode_id: &str,
    labels: &[Label],
    confidence: &[f64],
    cfg: &StabilityConfig,
) -> Segmentation {
    let stable = stabilize_labels(labels, cfg);
    from_frames(episode_id, &stable, confidence)
}

/// Segments from per-frame labels; each segment's confidence is the mean of
/// its frames' confidences.
/// Length-weighted mean over runs of equal values, so a constant slice
/// returns its value exactly.
fn mean_confidence(values: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut i = 0;
    while i < values.len() {
        let j = i + values[i..].iter().take_while(|&&v| v == values[i]).count();
        total += values[i] * (j - i) as f64;
        i = j;
    }
    if values.iter().all(|&v| v == values[0]) {
        return values[0].clamp(0.0, 1.0);
    }
    (total / values.len() as f64).clamp(0.0, 1.0)
}

fn from_frames(episode_id: &str, labels: &[Label], confidence: &[f64]) -> Segmentation {
    let segments = runs(labels)
        .into_iter()
        .map(|r| {
            Segment::new(r.start, r.end - 1, r.label, mean_confidence(&confidence[r.start..r.end]))
        })
        .collect();
    Segmentation::new(episode_id, segments)
}

/// Per-frame labels and confidences of a full-coverage segmentation.
fn frames_of(seg: &Segmentation, len: usize) -> Result<(Vec<Label>, Vec<f64>)> {
    seg.validate_within(len)?;
    if !seg.covers(len) {
        return Err(Error::Validation(format!(
            "segmentation of {} does not cover all {len} frames",
            seg.episode_id
        )));
    }
    let mut labels = vec![Label::Precision; len];
    let mut conf = vec![0.0; len];
    for s in &seg.segments {
        labels[s.start..=s.end].fill(s.label);
        conf[s.start..=s.end].fill(s.confidence);
    }
    Ok((labels, conf))
}

/// Re-applies the stability rules to a full-coverage segmentation.
pub fn restabilize(seg: &Segmentation, len: usize, cfg: &StabilityConfig) -> Result<Segmentation> {
    let (labels, conf) = frames_of(seg, len)?;
    Ok(stabilize_with_confidence(&seg.episode_id, &labels, &conf, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trend {
    Falling,
    Flat,
    Rising,
}

fn trend(r: Option<&RelationSeries>, start: usize, end: usize) -> Option<Trend> {
    let slope = r?.slope(start, end)?;
    Some(if slope > TREND_DEAD_BAND {
        Trend::Rising
    } else if slope < -TREND_DEAD_BAND {
        Trend::Falling
    } else {
        Trend::Flat
    })
}

/// Fills every uncovered gap by extending one adjacent segment, then
/// re-applies the stability rules.
///
/// A neighbour whose internal `r_t` trend matches the gap's trend wins over
/// one that does not; otherwise (or among two matches) the higher-confidence
/// neighbour wins, and a full tie goes to the earlier neighbour.
pub fn coverage_completion(
    seg: &Segmentation,
    relation: Option<&RelationSeries>,
    len: usize,
    cfg: &StabilityConfig,
) -> Result<Segmentation> {
    seg.validate_within(len)?;
    if len == 0 {
        return Ok(Segmentation::new(seg.episode_id.clone(), Vec::new()));
    }
    let mut labels = vec![Label::Precision; len];
    let mut conf = vec![DEFAULT_CONFIDENCE; len];
    for s in &seg.segments {
        labels[s.start..=s.end].fill(s.label);
        conf[s.start..=s.end].fill(s.confidence);
    }

    let segs = &seg.segments;
    let mut gaps = Vec::new();
    let mut next_free = 0;
    for (i, s) in segs.iter().enumerate() {
        if s.start > next_free {
            gaps.push((next_free, s.start - 1, i.checked_sub(1), Some(i)));
        }
        next_free = s.end + 1;
    }
    if next_free < len {
        gaps.push((next_free, len - 1, segs.len().checked_sub(1), None));
    }

    for (gs, ge, left, right) in gaps {
        let chosen = match (left, right) {
            (None, None) => None,
            (Some(l), None) => Some(l),
            (None, Some(r)) => Some(r),
            (Some(l), Some(r)) => {
                Some(if right_wins(&segs[l], &segs[r], relation, gs, ge) { r } else { l })
            }
        };
        if let Some(k) = chosen {
            labels[gs..=ge].fill(segs[k].label);
            conf[gs..=ge].fill(segs[k].confidence);
        }
    }

    Ok(stabilize_with_confidence(&seg.episode_id, &labels, &conf, cfg))
}

/// True when the right-hand neighbour should extend over the gap.
fn right_wins(
    left: &Segment,
    right: &Segment,
    relation: Option<&RelationSeries>,
    gap_start: usize,
    gap_end: usize,
) -> bool {
    let by_confidence = right.confidence > left.confidence;
    let Some(gap_trend) = trend(relation, gap_start, gap_end) else {
        return by_confidence;
    };
    let left_matches = trend(relation, left.start, left.end) == Some(gap_trend);
    let right_matches = trend(relation, right.start, right.end) == Some(gap_trend);
    match (left_matches, right_matches) {
        (true, false) => false,
        (false, true) => true,
        _ => by_confidence,
    }
}

/// Frames `t` with `|g[t+lookahead] − g[t]| >= threshold` on any gripper.
pub fn detect_gripper_events(ep: &Episode, cfg: &GripperForceConfig) -> Vec<usize> {
    let n = ep.len();
    if n <= cfg.lookahead {
        return Vec::new();
    }
    (0..n - cfg.lookahead)
        .filter(|&t| {
            let now = &ep.frames[t].gripper;
            let later = &ep.frames[t + cfg.lookahead].gripper;
            now.iter()
                .zip(later)
                .any(|(a, b)| (b - a).abs() >= cfg.threshold)
        })
        .collect()
}

/// DBSCAN on sorted frame indices with `|a − b|` as the metric.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are returned in order of discovery (ascending),
/// each sorted; noise is dropped.
pub fn dbscan_1d(points: &[usize], eps: usize, min_pts: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    debug_assert!(points.windows(2).all(|w| w[0] <= w[1]), "points must be sorted");
    // neighbourhoods are contiguous index ranges in a sorted array
    let mut range = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0usize, 0usize);
    for i in 0..n {
        while points[i] - points[lo] > eps {
            lo += 1;
        }
        if hi < i {
            hi = i;
        }
        while hi + 1 < n && points[hi + 1] - points[i] <= eps {
            hi += 1;
        }
        range.push((lo, hi));
    }
    let is_core = |i: usize| range[i].1 - range[i].0 + 1 >= min_pts;

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if assigned[i].is_some() || !is_core(i) {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut stack = vec![i];
        assigned[i] = Some(id);
        while let Some(p) = stack.pop() {
            members.push(p);
            if !is_core(p) {
                continue;
            }
            let (a, b) = range[p];
            for q in a..=b {
                if assigned[q].is_none() {
                    assigned[q] = Some(id);
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members.into_iter().map(|k| points[k]).collect());
    }
    clusters
}

/// Padded `[min − pad, max + pad]` window of each cluster, clipped to the episode.
pub fn event_windows(clusters: &[Vec<usize>], pad: usize, len: usize) -> Vec<(usize, usize)> {
    clusters
        .iter()
        .filter_map(|c| {
            let lo = *c.iter().min()?;
            let hi = *c.iter().max()?;
            let lo = lo.saturating_sub(pad);
            let hi = (hi + pad).min(len.checked_sub(1)?);
            (lo <= hi).then_some((lo, hi))
        })
        .collect()
}

/// Overrides each padded cluster window to precision. Only ever turns
/// casual frames into precision.
pub fn force_gripper_precision(
    seg: &Segmentation,
    clusters: &[Vec<usize>],
    pad: usize,
    len: usize,
) -> Result<Segmentation> {
    let (mut labels, mut conf) = frames_of(seg, len)?;
    for (lo, hi) in event_windows(clusters, pad, len) {
        for t in lo..=hi {
            if labels[t] == Label::Casual {
                labels[t] = Label::Precision;
                conf[t] = 1.0;
            }
        }
    }
    Ok(from_frames(&seg.episode_id, &labels, &conf))
}

/// Coverage completion (with stability) followed by gripper-event forcing.
/// Forcing runs last so stability rules can never shrink an event window.
pub fn refine(
    seg: &Segmentation,
    ep: &Episode,
    relation: Option<&RelationSeries>,
    stability: &StabilityConfig,
    gripper: &GripperForceConfig,
) -> Result<Segmentation> {
    gripper.validate()?;
    let completed = coverage_completion(seg, relation, ep.len(), stability)?;
    let events = detect_gripper_events(ep, gripper);
    let clusters = dbscan_1d(&events, gripper.dbscan_eps, gripper.dbscan_min_pts);
    let mut out = force_gripper_precision(&completed, &clusters, gripper.pad, ep.len())?;
    out.episode_id = ep.id.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Frame;
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use Label::{Casual as C, Precision as P};

    fn seq(parts: &[(Label, usize)]) -> Vec<Label> {
        parts.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n)).collect()
    }

    fn spans(seg: &Segmentation) -> Vec<(usize, usize, Label)> {
        seg.segments.iter().map(|s| (s.start, s.end, s.label)).collect()
    }

    #[test]
    fn stability_table() {
        let cfg = StabilityConfig::default();
        let cases: Vec<(Vec<Label>, Vec<(usize, usize, Label)>)> = vec![
            (seq(&[(P, 30)]), vec![(0, 29, P)]),
            (seq(&[(P, 20), (C, 2), (P, 20)]), vec![(0, 41, P)]),
            (seq(&[(P, 10), (C, 10), (P, 3), (C, 10)]), vec![(0, 9, P), (10, 32, C)]),
            // 5-frame casual run survives hysteresis but is a micro-oscillation
            (seq(&[(P, 20), (C, 5), (P, 20)]), vec![(0, 44, P)]),
            // 6-frame run is not micro but is shorter than L_min = 8
            (seq(&[(P, 20), (C, 6), (P, 20)]), vec![(0, 45, P)]),
            // 8 frames survive everything
            (seq(&[(P, 20), (C, 8), (P, 20)]), vec![(0, 19, P), (20, 27, C), (28, 47, P)]),
            // short leading run joins its only neighbour
            (seq(&[(C, 4), (P, 30)]), vec![(0, 33, P)]),
            // hysteresis: 2-frame switch reverts
            (seq(&[(C, 12), (P, 2), (C, 12)]), vec![(0, 25, C)]),
            // shorter than L_min overall
            (seq(&[(C, 3), (P, 3)]), vec![(0, 5, P)]),
            (seq(&[(C, 10), (P, 7), (C, 30)]), vec![(0, 46, C)]),
            // a 1-frame blip inside a run is reverted by hysteresis first
            (seq(&[(P, 9), (C, 7), (P, 1), (C, 1), (P, 20)]), vec![(0, 8, P), (9, 17, C), (18, 37, P)]),
        ];
        for (input, expected) in cases {
            let got = apply_stability(&input, &cfg);
            assert_eq!(spans(&got), expected, "input runs {:?}", runs(&input));
            assert!(got.covers(input.len()));
        }
    }

    #[test]
    fn merge_gap_rule_in_isolation() {
        let cfg = StabilityConfig {
            min_segment_len: 1,
            merge_gap: 5,
            hysteresis: 1,
            micro_len: 0,
        };
        let got = apply_stability(&seq(&[(P, 10), (C, 10), (P, 3), (C, 10)]), &cfg);
        assert_eq!(spans(&got), vec![(0, 9, P), (10, 32, C)]);
        let got = apply_stability(&seq(&[(P, 10), (C, 10), (P, 5), (C, 10)]), &cfg);
        assert_eq!(spans(&got).len(), 4);
    }

    #[test]
    fn min_length_tie_goes_earlier() {
        let cfg = StabilityConfig {
            min_segment_len: 5,
            merge_gap: 0,
            hysteresis: 1,
            micro_len: 0,
        };
        let got = apply_stability(&seq(&[(P, 6), (C, 2), (P, 6)]), &cfg);
        assert_eq!(spans(&got), vec![(0, 13, P)]);
        let mut labels = seq(&[(C, 6), (P, 2), (C, 1), (P, 6)]);
        enforce_min_len(&mut labels, 5);
        assert_eq!(runs(&labels).len(), 2);
    }

    #[test]
    fn empty_labels() {
        let got = apply_stability(&[], &StabilityConfig::default());
        assert!(got.segments.is_empty());
    }

    fn series(values: Vec<Option<f64>>) -> RelationSeries {
        RelationSeries {
            gripper_label: "g".into(),
            object_label: "o".into(),
            camera_id: "head".into(),
            values,
        }
    }

    #[test]
    fn completion_without_gaps_is_stable() {
        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 19, P, 0.9), Segment::new(20, 39, C, 0.6)],
        );
        let out = coverage_completion(&seg, None, 40, &StabilityConfig::default()).unwrap();
        assert_eq!(out, seg);
    }

    #[test]
    fn completion_follows_trend() {
        // precision [0,19] flat, gap [20,29] rising, casual [30,49] rising
        let values = (0..50)
            .map(|t| Some(if t < 20 { 1.0 } else { 1.0 + 0.05 * (t - 19) as f64 }))
            .collect();
        let r = series(values);
        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 19, P, 0.9), Segment::new(30, 49, C, 0.6)],
        );
        let out = coverage_completion(&seg, Some(&r), 50, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 19, P), (20, 49, C)]);
        assert!((out.segments[1].confidence - 0.6).abs() < 1e-12);
    }

    #[test]
    fn completion_falls_back_to_confidence() {
        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 19, C, 0.5), Segment::new(30, 49, P, 0.8)],
        );
        let out = coverage_completion(&seg, None, 50, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 19, C), (20, 49, P)]);

        let r = series(vec![None; 50]);
        let out = coverage_completion(&seg, Some(&r), 50, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 19, C), (20, 49, P)]);

        // equal confidence: earlier neighbour
        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 19, C, 0.7), Segment::new(30, 49, P, 0.7)],
        );
        let out = coverage_completion(&seg, None, 50, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 29, C), (30, 49, P)]);
    }

    #[test]
    fn completion_both_match_uses_confidence() {
        let r = series((0..50).map(|t| Some(t as f64 * 0.1)).collect());
        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 19, C, 0.4), Segment::new(30, 49, P, 0.9)],
        );
        let out = coverage_completion(&seg, Some(&r), 50, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 19, C), (20, 49, P)]);
    }

    #[test]
    fn completion_edges_and_empty() {
        let seg = Segmentation::new("e", vec![Segment::new(10, 29, C, 0.7)]);
        let out = coverage_completion(&seg, None, 40, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 39, C)]);
        let out = coverage_completion(&Segmentation::new("e", vec![]), None, 12, &StabilityConfig::default()).unwrap();
        assert_eq!(spans(&out), vec![(0, 11, P)]);
    }

    fn gripper_episode(channels: Vec<Vec<f64>>) -> Episode {
        let n = channels[0].len();
        Episode {
            id: "g".into(),
            frames: (0..n)
                .map(|t| Frame::new(t, vec![0.0], vec![0.0], channels.iter().map(|c| c[t]).collect()))
                .collect(),
            control_hz: 50.0,
            cameras: BTreeMap::new(),
        }
    }

    #[test]
    fn gripper_event_detection() {
        let cfg = GripperForceConfig::default();
        assert!(detect_gripper_events(&gripper_episode(vec![vec![0.4; 20]]), &cfg).is_empty());

        let mut g = vec![0.0; 10];
        g[4..].fill(0.05);
        assert_eq!(detect_gripper_events(&gripper_episode(vec![g]), &cfg), vec![0, 1, 2, 3]);

        let left = vec![0.2; 12];
        let mut right = vec![0.0; 12];
        right[8..].fill(1.0);
        let events = detect_gripper_events(&gripper_episode(vec![left, right]), &cfg);
        assert_eq!(events, vec![4, 5, 6, 7]);

        // below threshold
        let mut g = vec![0.0; 10];
        g[5..].fill(0.02);
        assert!(detect_gripper_events(&gripper_episode(vec![g]), &cfg).is_empty());

        // too short
        assert!(detect_gripper_events(&gripper_episode(vec![vec![0.0, 1.0, 0.0]]), &cfg).is_empty());
    }

    #[test]
    fn dbscan_examples() {
        assert_eq!(
            dbscan_1d(&[10, 11, 12, 50, 51], 3, 2),
            vec![vec![10, 11, 12], vec![50, 51]]
        );
        assert!(dbscan_1d(&[], 3, 2).is_empty());
        assert!(dbscan_1d(&[7], 3, 2).is_empty());
        assert_eq!(dbscan_1d(&[7], 3, 1), vec![vec![7]]);
        // border point reachable from one core only
        assert_eq!(dbscan_1d(&[0, 2, 4, 9], 4, 3), vec![vec![0, 2, 4]]);
    }

    #[test]
    fn forcing_examples() {
        let seg = Segmentation::new("e", vec![Segment::new(0, 199, C, 0.7)]);
        let cluster = vec![(100..=104).collect::<Vec<_>>()];
        let out = force_gripper_precision(&seg, &cluster, 2, 200).unwrap();
        assert_eq!(spans(&out), vec![(0, 97, C), (98, 106, P), (107, 199, C)]);

        let seg = Segmentation::new(
            "e",
            vec![Segment::new(0, 49, C, 0.7), Segment::new(50, 149, P, 0.9), Segment::new(150, 199, C, 0.7)],
        );
        let out = force_gripper_precision(&seg, &[vec![80, 90]], 2, 200).unwrap();
        assert_eq!(out, seg);

        let seg = Segmentation::new("e", vec![Segment::new(0, 99, C, 0.7)]);
        let out = force_gripper_precision(&seg, &[vec![97, 98]], 2, 100).unwrap();
        assert_eq!(spans(&out), vec![(0, 94, C), (95, 99, P)]);

        let partial = Segmentation::new("e", vec![Segment::new(0, 10, C, 0.7)]);
        assert!(force_gripper_precision(&partial, &[], 2, 100).is_err());
    }

    /// Textbook DBSCAN with explicit O(n²) neighbourhood queries.
    fn dbscan_oracle(points: &[usize], eps: usize, min_pts: usize) -> Vec<Vec<usize>> {
        let n = points.len();
        let neighbours = |i: usize| -> Vec<usize> {
            (0..n).filter(|&j| points[i].abs_diff(points[j]) <= eps).collect()
        };
        let mut label: Vec<Option<usize>> = vec![None; n];
        let mut visited = vec![false; n];
        let mut count = 0;
        for i in 0..n {
            if visited[i] {
                continue;
            }
            visited[i] = true;
            let nb = neighbours(i);
            if nb.len() < min_pts {
                continue;
            }
            let c = count;
            count += 1;
            label[i] = Some(c);
            let mut queue: std::collections::VecDeque<usize> = nb.into_iter().collect();
            while let Some(q) = queue.pop_front() {
                if !visited[q] {
                    visited[q] = true;
                    let nq = neighbours(q);
                    if nq.len() >= min_pts {
                        queue.extend(nq);
                    }
                }
                if label[q].is_none() {
                    label[q] = Some(c);
                }
            }
        }
        let mut clusters = vec![Vec::new(); count];
        for (i, l) in label.iter().enumerate() {
            if let Some(c) = l {
                clusters[*c].push(points[i]);
            }
        }
        clusters
    }

    fn label_seq() -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec((any::<bool>(), 1usize..15), 1..30).prop_map(|runs| {
            runs.into_iter()
                .flat_map(|(c, n)| std::iter::repeat_n(if c { C } else { P }, n))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dbscan_matches_oracle(mut pts in prop::collection::vec(0usize..400, 0..200), eps in 1usize..12, min_pts in 1usize..5) {
            pts.sort_unstable();
            prop_assert_eq!(dbscan_1d(&pts, eps, min_pts), dbscan_oracle(&pts, eps, min_pts));
        }

        #[test]
        fn stability_invariants(labels in label_seq()) {
            let cfg = StabilityConfig::default();
            let once = apply_stability(&labels, &cfg);
            prop_assert!(once.covers(labels.len()));
            for s in &once.segments {
                prop_assert!(s.len() >= cfg.min_segment_len.min(labels.len()));
            }
            for w in once.segments.windows(2) {
                prop_assert_ne!(w[0].label, w[1].label);
            }
            let relabeled = crate::transfer::expand_to_frames(&once, labels.len()).unwrap();
            prop_assert_eq!(apply_stability(&relabeled, &cfg), once);
        }

        #[test]
        fn forcing_is_monotone(labels in label_seq(), events in prop::collection::vec(0usize..400, 0..20)) {
            let seg = from_frames("e", &labels, &vec![0.5; labels.len()]);
            let mut events: Vec<usize> = events.into_iter().filter(|&e| e < labels.len()).collect();
            events.sort_unstable();
            let clusters = dbscan_1d(&events, 8, 2);
            let out = force_gripper_precision(&seg, &clusters, 2, labels.len()).unwrap();
            let after = crate::transfer::expand_to_frames(&out, labels.len()).unwrap();
            for (b, a) in labels.iter().zip(&after) {
                if *b == P {
                    prop_assert_eq!(*a, P);
                }
            }
            for (lo, hi) in event_windows(&clusters, 2, labels.len()) {
                prop_assert!(after[lo..=hi].iter().all(|&l| l == P));
            }
        }

        #[test]
        fn completion_covers(parts in prop::collection::vec((1usize..30, 0usize..10, any::<bool>(), 0.0..=1.0f64), 0..8), slope in -1.0..1.0f64) {
            let mut t = 0;
            let mut segs = Vec::new();
            for (l, gap, c, conf) in parts {
                t += gap;
                segs.push(Segment::new(t, t + l - 1, if c { C } else { P }, conf));
                t += l;
            }
            let len = t + 5;
            let r = series((0..len).map(|i| Some(slope * i as f64)).collect());
            let out = coverage_completion(&Segmentation::new("e", segs), Some(&r), len, &StabilityConfig::default()).unwrap();
            out.validate_within(len).unwrap();
            prop_assert!(out.covers(len));
        }
    }
}
