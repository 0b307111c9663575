//! Label transfer from the annotated reference episode to other episodes
//! through a DTW index map, with boundary snapping.

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Segment, Segmentation};
use crate::dtw::{self, AlignmentMap, AlignmentPath};
use crate::error::{Error, Result};
use crate::features::{FeatureSeries, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub rho: f64,
    pub snap_window: usize,
    pub snap_summary_len: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            rho: dtw::DEFAULT_RHO,
            snap_window: 12,
            snap_summary_len: 5,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0,1], got {}", self.rho)));
        }
        if !(0.05..=0.10).contains(&self.rho) {
            log::warn!("rho={} is outside the usual [0.05, 0.10] range", self.rho);
        }
        Ok(())
    }
}

/// Mean of rows `[c - (L-1)/2, c - (L-1)/2 + L - 1]`, truncated at the edges.
pub fn mean_pool(m: &Matrix, center: usize, len: usize) -> Vec<f64> {
    let len = len.max(1) as isize;
    let first = center as isize - (len - 1) / 2;
    let lo = first.max(0) as usize;
    let hi = ((first + len - 1) as usize).min(m.rows() - 1).max(lo);
    let mut acc = vec![0.0; m.cols()];
    for i in lo..=hi {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
    let n = (hi - lo + 1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Moves `idx` to the candidate within `±window` whose pooled summary is
/// closest to `source_summary`. Ties go to the candidate nearest `idx`,
/// then to the smaller index.
pub fn snap_boundary(
    idx: usize,
    source_summary: &[f64],
    target: &Matrix,
    window: usize,
    summary_len: usize,
) -> usize {
    if window == 0 || target.rows() == 0 {
        return idx;
    }
    let idx = idx.min(target.rows() - 1);
    let lo = idx.saturating_sub(window);
    let hi = (idx + window).min(target.rows() - 1);
    let mut best = idx;
    let mut best_key = (f64::INFINITY, usize::MAX, usize::MAX);
    for c in lo..=hi {
        let summary = mean_pool(target, c, summary_len);
        let d = dtw::frame_distance(&summary, source_summary);
        let key = (d, c.abs_diff(idx), c);
        if key.partial_cmp(&best_key) == Some(std::cmp::Ordering::Less) {
            best_key = key;
            best = c;
        }
    }
    best
}

/// Maps every reference segment through `map`, snaps both ends, trims
/// overlaps in favour of the earlier segment, and drops segments that
/// collapse. Gaps are allowed in the result.
pub fn transfer_labels(
    seg0: &Segmentation,
    map: &AlignmentMap,
    source: &FeatureSeries,
    target: &FeatureSeries,
    cfg: &TransferConfig,
) -> Result<Segmentation> {
    let t0 = source.len();
    let tk = target.len();
    if map.len() != t0 {
        return Err(Error::Validation(format!(
            "alignment map has {} entries but the source episode has {t0} frames",
            map.len()
        )));
    }
    seg0.validate_within(t0)?;
    if source.matrix.cols() != target.matrix.cols() {
        return Err(Error::Shape("source and target feature widths differ".into()));
    }

    let mut out: Vec<Segment> = Vec::with_capacity(seg0.segments.len());
    for seg in &seg0.segments {
        let snap = |src_idx: usize| {
            let summary = mean_pool(&source.matrix, src_idx, cfg.snap_summary_len);
            snap_boundary(
                map.get(src_idx),
                &summary,
                &target.matrix,
                cfg.snap_window,
                cfg.snap_summary_len,
            )
        };
        let mut start = snap(seg.start);
        let end = snap(seg.end);
        if end < start {
            log::warn!(
                "{}: segment [{},{}] inverted after snapping ({start} > {end}); dropped",
                target.episode_id,
                seg.start,
                seg.end
            );
            continue;
        }
        if let Some(prev) = out.last() {
            start = start.max(prev.end + 1);
        }
        if end < start || end >= tk {
            log::warn!(
                "{}: segment [{},{}] vanished after overlap trimming; dropped",
                target.episode_id,
                seg.start,
                seg.end
            );
            continue;
        }
        out.push(Segment::new(start, end, seg.label, seg.confidence));
    }

    let result = Segmentation::new(target.episode_id.clone(), out);
    result.validate_within(tk)?;
    Ok(result)
}

/// Per-frame labels; uncovered frames are precision.
pub fn expand_to_frames(seg: &Segmentation, len: usize) -> Result<Vec<Label>> {
    seg.validate_within(len)?;
    let mut labels = vec![Label::Precision; len];
    for s in &seg.segments {
        labels[s.start..=s.end].fill(s.label);
    }
    Ok(labels)
}

/// Result of aligning one target episode against the reference.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub segmentation: Segmentation,
    pub path: AlignmentPath,
    pub map: AlignmentMap,
}

/// Banded DTW, index map and label transfer in one step.
pub fn transfer_episode(
    seg0: &Segmentation,
    source: &FeatureSeries,
    target: &FeatureSeries,
    cfg: &TransferConfig,
) -> Result<Transfer> {
    cfg.validate()?;
    let path = dtw::banded_dtw(&source.matrix, &target.matrix, cfg.rho)?;
    let map = dtw::path_to_map(&path, source.len(), target.len(), cfg.rho)?;
    let segmentation = transfer_labels(seg0, &map, source, target, cfg)?;
    Ok(Transfer {
        segmentation,
        path,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(id: &str, m: Matrix) -> FeatureSeries {
        let cols = m.cols();
        FeatureSeries {
            episode_id: id.into(),
            matrix: m,
            column_names: (0..cols).map(|c| format!("c{c}")).collect(),
            means: vec![0.0; cols],
            stds: vec![1.0; cols],
        }
    }

    fn signal(len: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| {
                let x = t as f64 / 10.0;
                vec![x.sin() + 0.3 * (2.7 * x).cos(), (0.37 * x).cos() * x.sqrt()]
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn seg(parts: &[(usize, usize, Label)]) -> Segmentation {
        Segmentation::new(
            "e",
            parts.iter().map(|&(s, e, l)| Segment::new(s, e, l, 0.8)).collect(),
        )
    }

    #[test]
    fn mean_pool_truncates() {
        let m = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mean_pool(&m, 0, 5), vec![1.0]);
        assert_eq!(mean_pool(&m, 2, 5), vec![1.5]);
        assert_eq!(mean_pool(&m, 3, 1), vec![3.0]);
        assert_eq!(mean_pool(&m, 1, 2), vec![1.5]);
    }

    #[test]
    fn self_transfer_is_identity() {
        let f = series("e", signal(120));
        let s = seg(&[(0, 39, Label::Precision), (40, 79, Label::Casual), (80, 119, Label::Precision)]);
        let map = AlignmentMap::identity(120);
        let out = transfer_labels(&s, &map, &f, &f, &TransferConfig::default()).unwrap();
        assert_eq!(out, s);
        let out = transfer_episode(&s, &f, &f, &TransferConfig::default()).unwrap();
        assert_eq!(out.segmentation, s);
        assert_eq!(out.map.map, (0..120).collect::<Vec<_>>());
    }

    #[test]
    fn snap_window_zero_is_noop() {
        let m = signal(50);
        assert_eq!(snap_boundary(17, &[100.0, 100.0], &m, 0, 5), 17);
    }

    #[test]
    fn snap_recovers_shift() {
        let base = signal(200);
        // target[t] = base[t - 3]
        let mut rows = vec![base.row(0).to_vec(); 3];
        rows.extend((0..197).map(|t| base.row(t).to_vec()));
        let shifted = Matrix::from_rows(&rows).unwrap();
        let boundary = 100;
        let summary = mean_pool(&base, boundary, 5);
        assert_eq!(snap_boundary(boundary, &summary, &shifted, 12, 5), boundary + 3);
    }

    #[test]
    fn snap_tie_prefers_nearest() {
        let flat = Matrix::from_vec(30, 1, vec![1.0; 30]).unwrap();
        assert_eq!(snap_boundary(10, &[0.0], &flat, 5, 5), 10);
        // target x[t] = |t - 10|: candidates 8 and 12 are equally good, 8 wins
        let v: Vec<f64> = (0..30).map(|t| (t as f64 - 10.0).abs()).collect();
        let m = Matrix::from_vec(30, 1, v).unwrap();
        assert_eq!(snap_boundary(10, &[2.0], &m, 5, 1), 8);
    }

    #[test]
    fn time_stretched_copy() {
        let base = signal(100);
        let stretched: Vec<Vec<f64>> = (0..200).map(|t| base.row(t / 2).to_vec()).collect();
        let f0 = series("src", base);
        let fk = series("dst", Matrix::from_rows(&stretched).unwrap());
        let s = seg(&[(0, 49, Label::Precision), (50, 99, Label::Casual)]);
        let cfg = TransferConfig::default();
        let out = transfer_episode(&s, &f0, &fk, &cfg).unwrap().segmentation;
        assert_eq!(out.segments.len(), 2);
        assert!(out.segments[0].end.abs_diff(99) <= cfg.snap_window);
        assert!(out.segments[1].end.abs_diff(199) <= cfg.snap_window);
        assert_eq!(out.labels(), vec![Label::Precision, Label::Casual]);
    }

    #[test]
    fn overlapping_spans_trimmed() {
        let f0 = series("src", signal(50));
        let fk = series("dst", signal(60));
        // source segments [0,9] and [10,19] mapped onto [10,30] and [25,40]
        let mut map: Vec<usize> = vec![0; 50];
        map[0] = 10;
        map[9] = 30;
        map[10] = 25;
        map[19] = 40;
        let map = AlignmentMap { map, band_halfwidth: 0, rho: 0.08 };
        let cfg = TransferConfig { snap_window: 0, ..Default::default() };
        let s = seg(&[(0, 9, Label::Precision), (10, 19, Label::Casual)]);
        let out = transfer_labels(&s, &map, &f0, &fk, &cfg).unwrap();
        let spans: Vec<_> = out.segments.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(10, 30), (31, 40)]);
    }

    #[test]
    fn swallowed_segment_is_dropped() {
        let f0 = series("src", signal(30));
        let fk = series("dst", signal(30));
        let mut map: Vec<usize> = (0..30).collect();
        map[10] = 5;
        map[14] = 8;
        let map = AlignmentMap { map, band_halfwidth: 0, rho: 0.08 };
        let cfg = TransferConfig { snap_window: 0, ..Default::default() };
        let s = seg(&[(0, 9, Label::Precision), (10, 14, Label::Casual), (15, 29, Label::Precision)]);
        let out = transfer_labels(&s, &map, &f0, &fk, &cfg).unwrap();
        assert_eq!(out.labels(), vec![Label::Precision, Label::Precision]);
    }

    #[test]
    fn map_length_mismatch() {
        let f = series("e", signal(20));
        let map = AlignmentMap::identity(19);
        let s = seg(&[(0, 9, Label::Casual)]);
        assert!(matches!(
            transfer_labels(&s, &map, &f, &f, &TransferConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn expand_examples() {
        use Label::{Casual as C, Precision as P};
        let s = seg(&[(2, 4, C)]);
        assert_eq!(expand_to_frames(&s, 10).unwrap(), vec![P, P, C, C, C, P, P, P, P, P]);
        let s = seg(&[(0, 1, C), (2, 3, P)]);
        assert_eq!(expand_to_frames(&s, 4).unwrap(), vec![C, C, P, P]);
        assert_eq!(expand_to_frames(&seg(&[]), 5).unwrap(), vec![P; 5]);
        assert!(expand_to_frames(&seg(&[(0, 5, C)]), 5).is_err());
    }

    fn arb_segmentation(len: usize) -> impl Strategy<Value = Segmentation> {
        prop::collection::vec((1usize..20, 0usize..4, any::<bool>()), 1..8).prop_map(move |parts| {
            let mut t = 0;
            let mut segs = Vec::new();
            for (l, gap, casual) in parts {
                t += gap;
                if t + l > len {
                    break;
                }
                let label = if casual { Label::Casual } else { Label::Precision };
                segs.push(Segment::new(t, t + l - 1, label, 0.7));
                t += l;
            }
            Segmentation::new("e", segs)
        })
    }

    fn is_subsequence(sub: &[Label], full: &[Label]) -> bool {
        let mut it = full.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    }

    proptest! {
        #[test]
        fn identity_transfer_with_zero_window(s in arb_segmentation(80)) {
            let f = series("e", signal(80));
            let cfg = TransferConfig { snap_window: 0, ..Default::default() };
            let out = transfer_labels(&s, &AlignmentMap::identity(80), &f, &f, &cfg).unwrap();
            prop_assert_eq!(out, s);
        }

        #[test]
        fn output_is_ordered_subsequence(s in arb_segmentation(80), len in 20usize..160, w in 0usize..15) {
            let f0 = series("src", signal(80));
            let fk = series("dst", signal(len));
            let cfg = TransferConfig { snap_window: w, ..Default::default() };
            let out = transfer_episode(&s, &f0, &fk, &cfg).unwrap().segmentation;
            out.validate_within(len).unwrap();
            prop_assert!(is_subsequence(&out.labels(), &s.labels()));
        }
    }
}
