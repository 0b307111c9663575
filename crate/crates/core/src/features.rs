//! Per-frame proprioceptive feature vectors for alignment.
//!
//! Row `t` concatenates `a_t, Δa_t, v_t, Δv_t, ‖a_t‖, ‖v_t‖, ‖Δa_t‖, ‖Δq_t‖,
//! ‖Δv_t‖, ∠(a_t, a_t+Δa_t), ∠(v_t, v_t+Δv_t)`, then every column is z-scored.
//! `Δx_0` is the zero vector. Without recorded joint velocities, `v_t := Δq_t`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};

/// Columns whose raw standard deviation is at or below this are treated as
/// constant and z-score to zero.
const MIN_STD: f64 = 1e-12;

/// Dense row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows have differing lengths".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |i| self.get(i, j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-column mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ColumnStats {
    pub fn of(m: &Matrix) -> Self {
        let n = m.rows().max(1) as f64;
        let means: Vec<f64> = (0..m.cols()).map(|j| m.column(j).sum::<f64>() / n).collect();
        let stds = (0..m.cols())
            .map(|j| {
                let mu = means[j];
                (m.column(j).map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
            })
            .collect();
        Self { means, stds }
    }

    /// Pooled statistics over several raw matrices of equal width.
    pub fn pooled(mats: &[Matrix]) -> Result<Self> {
        let cols = mats.first().map_or(0, Matrix::cols);
        if mats.iter().any(|m| m.cols() != cols) {
            return Err(Error::Shape("feature widths differ across episodes".into()));
        }
        let n: usize = mats.iter().map(Matrix::rows).sum();
        let n = n.max(1) as f64;
        let means: Vec<f64> = (0..cols)
            .map(|j| mats.iter().flat_map(|m| m.column(j)).sum::<f64>() / n)
            .collect();
        let stds = (0..cols)
            .map(|j| {
                let mu = means[j];
                let ss: f64 = mats
                    .iter()
                    .flat_map(|m| m.column(j))
                    .map(|x| (x - mu) * (x - mu))
                    .sum();
                (ss / n).sqrt()
            })
            .collect();
        Ok(Self { means, stds })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub episode_id: String,
    pub matrix: Matrix,
    pub column_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureSeries {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

/// Angle in `[0, π]` between two vectors; 0 when either is (near) zero.
pub fn angle_between(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx < 1e-12 || ny < 1e-12 {
        return 0.0;
    }
    // 2·atan2(|x̂−ŷ|, |x̂+ŷ|) stays accurate near 0 and π, unlike acos
    let (mut d, mut s) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (ua, ub) = (a / nx, b / ny);
        d += (ua - ub) * (ua - ub);
        s += (ua + ub) * (ua + ub);
    }
    2.0 * d.sqrt().atan2(s.sqrt())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff(cur: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
    match prev {
        Some(p) => cur.iter().zip(p).map(|(c, p)| c - p).collect(),
        None => vec![0.0; cur.len()],
    }
}

fn add(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

pub fn column_names(d_a: usize, d_v: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * d_a + 2 * d_v + 7);
    for (prefix, d) in [("a", d_a), ("da", d_a), ("v", d_v), ("dv", d_v)] {
        names.extend((0..d).map(|i| format!("{prefix}[{i}]")));
    }
    names.extend(
        ["norm_a", "norm_v", "norm_da", "norm_dq", "norm_dv", "angle_a", "angle_v"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Unscaled feature rows.
pub fn raw_features(ep: &Episode) -> Result<Matrix> {
    let t_len = ep.len();
    if t_len < 2 {
        return Err(Error::Shape(format!(
            "episode {} has {t_len} frame(s); at least 2 are required for features",
            ep.id
        )));
    }
    let dq: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let prev = t.checked_sub(1).map(|p| ep.frames[p].joint_pos.as_slice());
            diff(&ep.frames[t].joint_pos, prev)
        })
        .collect();
    let vel: Vec<Vec<f64>> = if ep.has_joint_vel() {
        ep.frames
            .iter()
            .map(|f| f.joint_vel.clone().unwrap_or_default())
            .collect()
    } else {
        dq.clone()
    };

    let d_a = ep.action_dim();
    let d_v = vel[0].len();
    let width = 2 * d_a + 2 * d_v + 7;
    let mut m = Matrix::zeros(t_len, width);
    for t in 0..t_len {
        let a = &ep.frames[t].action;
        let da = diff(a, t.checked_sub(1).map(|p| ep.frames[p].action.as_slice()));
        let v = &vel[t];
        let dv = diff(v, t.checked_sub(1).map(|p| vel[p].as_slice()));

        let row = m.row_mut(t);
        let mut k = 0;
        for x in a.iter().chain(&da).chain(v).chain(&dv) {
            row[k] = *x;
            k += 1;
        }
        let tail = [
            norm(a),
            norm(v),
            norm(&da),
            norm(&dq[t]),
            norm(&dv),
            angle_between(a, &add(a, &da)),
            angle_between(v, &add(v, &dv)),
        ];
        row[k..].copy_from_slice(&tail);
    }
    Ok(m)
}

/// Z-scores every column with the supplied statistics; constant columns
/// become zero.
pub fn zscore(raw: &Matrix, stats: &ColumnStats) -> Result<Matrix> {
    if stats.means.len() != raw.cols() || stats.stds.len() != raw.cols() {
        return Err(Error::Shape(format!(
            "statistics for {} columns applied to {} columns",
            stats.means.len(),
            raw.cols()
        )));
    }
    let mut out = raw.clone();
    for i in 0..out.rows() {
        for (j, x) in out.row_mut(i).iter_mut().enumerate() {
            let sd = stats.stds[j];
            *x = if sd > MIN_STD {
                (*x - stats.means[j]) / sd
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Features z-scored with this episode's own statistics.
pub fn build_features(ep: &Episode) -> Result<FeatureSeries> {
    let raw = raw_features(ep)?;
    let stats = ColumnStats::of(&raw);
    finish(ep, raw, stats)
}

/// Features z-scored with externally supplied (e.g. dataset-wide) statistics.
pub fn build_features_with_stats(ep: &Episode, stats: &ColumnStats) -> Result<FeatureSeries> {
    let raw = raw_features(ep)?;
    finish(ep, raw, stats.clone())
}

/// Dataset-wide column statistics, for the global z-scoring mode.
pub fn global_stats(episodes: &[Episode]) -> Result<ColumnStats> {
    let raws = episodes.iter().map(raw_features).collect::<Result<Vec<_>>>()?;
    ColumnStats::pooled(&raws)
}

fn finish(ep: &Episode, raw: Matrix, stats: ColumnStats) -> Result<FeatureSeries> {
    let matrix = zscore(&raw, &stats)?;
    if !matrix.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite features for episode {}",
            ep.id
        )));
    }
    let d_a = ep.action_dim();
    let d_v = (raw.cols() - 7 - 2 * d_a) / 2;
    Ok(FeatureSeries {
        episode_id: ep.id.clone(),
        matrix,
        column_names: column_names(d_a, d_v),
        means: stats.means,
        stds: stats.stds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub episode_id: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub column_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Writes the matrix as little-endian f64, row-major, plus a JSON sidecar.
pub fn write_features(fs_: &FeatureSeries, bin_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
    let bin_path = bin_path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    let bytes: Vec<u8> = fs_
        .matrix
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
    let sidecar = FeatureSidecar {
        episode_id: fs_.episode_id.clone(),
        rows: fs_.matrix.rows(),
        cols: fs_.matrix.cols(),
        dtype: "f64le".into(),
        column_names: fs_.column_names.clone(),
        means: fs_.means.clone(),
        stds: fs_.stds.clone(),
    };
    let mut text = serde_json::to_string(&sidecar)?;
    text.push('\n');
    fs::write(sidecar_path, text).map_err(|e| Error::io(sidecar_path, e))
}

pub fn read_features(bin_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<FeatureSeries> {
    let bin_path = bin_path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape("feature file length is not a multiple of 8".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(FeatureSeries {
        episode_id: sidecar.episode_id,
        matrix: Matrix::from_vec(sidecar.rows, sidecar.cols, data)?,
        column_names: sidecar.column_names,
        means: sidecar.means,
        stds: sidecar.stds,
    })
}
