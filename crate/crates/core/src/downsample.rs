//! Acceleration-aware dataset compilation: per-label replicate-before-
//! downsample and chunk-horizon rescaling.

use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, Frame, Label, Segmentation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonMode {
    /// `K' = ⌈K/2⌉`
    Half,
    /// Smallest `K'` whose median chunk displacement on retained frames
    /// reaches the median `K`-chunk displacement on the source frames.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelPlan {
    pub n_precision: usize,
    pub n_casual: usize,
    pub chunk_horizon: usize,
    pub horizon_mode: HorizonMode,
}

impl Default for AccelPlan {
    fn default() -> Self {
        Self {
            n_precision: 2,
            n_casual: 4,
            chunk_horizon: 100,
            horizon_mode: HorizonMode::Half,
        }
    }
}

impl AccelPlan {
    pub fn new(n_precision: usize, n_casual: usize) -> Self {
        Self {
            n_precision,
            n_casual,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_precision < 1 {
            return Err(Error::Config("n_precision must be >= 1".into()));
        }
        if self.n_casual < self.n_precision {
            return Err(Error::Config(format!(
                "n_casual ({}) must be >= n_precision ({})",
                self.n_casual, self.n_precision
            )));
        }
        if self.chunk_horizon < 1 {
            return Err(Error::Config("chunk_horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn factor(&self, label: Label) -> usize {
        match label {
            Label::Precision => self.n_precision,
            Label::Casual => self.n_casual,
        }
    }

    /// Number of replica episodes emitted per source episode.
    pub fn replica_count(&self) -> usize {
        self.n_precision.max(self.n_casual)
    }
}

/// `{t ∈ [s,e] : (t−s) mod N = m}` in ascending order.
pub fn rbd_segment(start: usize, end: usize, factor: usize, offset: usize) -> Result<Vec<usize>> {
    if factor == 0 || offset >= factor {
        return Err(Error::Domain(format!(
            "offset {offset} must be smaller than factor {factor}"
        )));
    }
    if start > end {
        return Err(Error::Domain(format!("empty range [{start},{end}]")));
    }
    Ok((start + offset..=end).step_by(factor).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaEpisode {
    /// `<source_id>#r<m>`
    pub id: String,
    pub source_id: String,
    pub replica: usize,
    /// Original frame indices, strictly increasing.
    pub retained: Vec<usize>,
}

impl ReplicaEpisode {
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// The replica as a standalone episode: frames re-indexed from 0, each
    /// carrying its original index in `source_index`. `None` if empty.
    pub fn to_episode(&self, source: &Episode) -> Option<Episode> {
        if self.retained.is_empty() {
            return None;
        }
        let frames = self
            .retained
            .iter()
            .enumerate()
            .map(|(i, &t)| Frame {
                index: i,
                source_index: Some(t),
                ..source.frames[t].clone()
            })
            .collect();
        Some(Episode {
            id: self.id.clone(),
            frames,
            control_hz: source.control_hz,
            cameras: source.cameras.clone(),
        })
    }
}

/// Replica `r` keeps offset `r mod N_y` inside every segment of label `y`.
pub fn compile_episode(ep: &Episode, seg: &Segmentation, plan: &AccelPlan) -> Result<Vec<ReplicaEpisode>> {
    plan.validate()?;
    seg.validate_within(ep.len())?;
    if !seg.covers(ep.len()) {
        return Err(Error::Validation(format!(
            "segmentation of {} leaves frames uncovered; run coverage completion first",
            ep.id
        )));
    }
    (0..plan.replica_count())
        .map(|r| {
            let mut retained = Vec::new();
            for s in &seg.segments {
                let n = plan.factor(s.label);
                retained.extend(rbd_segment(s.start, s.end, n, r % n)?);
            }
            Ok(ReplicaEpisode {
                id: format!("{}#r{r}", ep.id),
                source_id: ep.id.clone(),
                replica: r,
                retained,
            })
        })
        .collect()
}

/// Compiles every episode with its segmentation (matched by position).
pub fn compile_dataset(
    episodes: &[Episode],
    segs: &[Segmentation],
    plan: &AccelPlan,
) -> Result<Vec<ReplicaEpisode>> {
    if episodes.len() != segs.len() {
        return Err(Error::Validation(format!(
            "{} episodes but {} segmentations",
            episodes.len(),
            segs.len()
        )));
    }
    let mut out = Vec::new();
    for (ep, seg) in episodes.iter().zip(segs) {
        if seg.episode_id != ep.id {
            return Err(Error::Validation(format!(
                "segmentation for {} paired with episode {}",
                seg.episode_id, ep.id
            )));
        }
        out.extend(compile_episode(ep, seg, plan)?);
    }
    Ok(out)
}

/// Source length divided by mean replica length.
pub fn compression_ratio(source_len: usize, replicas: &[ReplicaEpisode]) -> f64 {
    let total: usize = replicas.iter().map(ReplicaEpisode::len).sum();
    if total == 0 {
        return f64::INFINITY;
    }
    source_len as f64 * replicas.len() as f64 / total as f64
}

/// `1 / ((1 − f_c)/N_p + f_c/N_c)`
pub fn predicted_ratio(casual_fraction: f64, n_precision: usize, n_casual: usize) -> f64 {
    1.0 / ((1.0 - casual_fraction) / n_precision as f64 + casual_fraction / n_casual as f64)
}

/// Positions used for displacement: `ee_pos` when every frame has it,
/// joint positions otherwise.
fn positions(ep: &Episode) -> Vec<&[f64]> {
    if ep.has_ee_pos() {
        ep.frames.iter().map(|f| f.ee_pos.as_deref().unwrap_or_default()).collect()
    } else {
        ep.frames.iter().map(|f| f.joint_pos.as_slice()).collect()
    }
}

fn step_lengths(points: &[&[f64]]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(w[1])
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median over start points of the displacement summed over `k` steps.
fn median_chunk_displacement(steps: &[f64], k: usize) -> Option<f64> {
    if k == 0 || steps.len() < k {
        return None;
    }
    let mut sums = Vec::with_capacity(steps.len() - k + 1);
    let mut acc: f64 = steps[..k].iter().sum();
    sums.push(acc);
    for t in k..steps.len() {
        acc += steps[t] - steps[t - k];
        sums.push(acc);
    }
    median(sums)
}

/// Effective chunk horizon `K'` for a policy trained on the retained frames.
pub fn rescale_horizon(ep: &Episode, k: usize, retained: &[usize], mode: HorizonMode) -> Result<usize> {
    if k == 0 {
        return Err(Error::Domain("chunk horizon must be >= 1".into()));
    }
    if retained.is_empty() {
        return Err(Error::Domain("retained frame list is empty".into()));
    }
    if let Some(&bad) = retained.iter().find(|&&t| t >= ep.len()) {
        return Err(Error::Domain(format!("retained index {bad} out of range")));
    }
    match mode {
        HorizonMode::Half => Ok(k.div_ceil(2)),
        HorizonMode::Geometric => {
            if retained.len() == ep.len() && retained.iter().enumerate().all(|(i, &t)| i == t) {
                return Ok(k);
            }
            let pos = positions(ep);
            let source_steps = step_lengths(&pos);
            // Short episodes: a single truncated chunk.
            let target = median_chunk_displacement(&source_steps, k)
                .unwrap_or_else(|| source_steps.iter().sum());
            if target <= 0.0 {
                return Ok(k);
            }
            let kept: Vec<&[f64]> = retained.iter().map(|&t| pos[t]).collect();
            let kept_steps = step_lengths(&kept);
            for candidate in 1..k {
                let Some(disp) = median_chunk_displacement(&kept_steps, candidate) else {
                    break;
                };
                if disp >= target * (1.0 - 1e-9) {
                    return Ok(candidate);
                }
            }
            Ok(k)
        }
    }
}
