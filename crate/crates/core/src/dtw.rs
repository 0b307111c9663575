//! Banded dynamic time warping with a Sakoe–Chiba corridor.
//!
//! The corridor follows the scaled diagonal joining `(0, 0)` and
//! `(T0-1, Tk-1)`. Cell `(i, j)` is inside when
//!
//! ```text
//! |i·(Tk-1) − j·(T0-1)| ≤ b · max(T0-1, Tk-1)
//! ```
//!
//! i.e. the half-width `b` is measured in frames of the longer sequence. The
//! condition is symmetric under swapping the two sequences, so the optimal
//! cost is too. Only the cells inside the corridor are stored, giving
//! `O(max(T0, Tk) · b)` time and memory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Matrix;

/// Default band ratio ρ.
pub const DEFAULT_RHO: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
    pub band_halfwidth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub map: Vec<usize>,
    pub band_halfwidth: usize,
    pub rho: f64,
}

impl AlignmentMap {
    pub fn identity(len: usize) -> Self {
        Self {
            map: (0..len).collect(),
            band_halfwidth: 0,
            rho: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, t: usize) -> usize {
        self.map[t]
    }
}

/// Inclusive j-range of row `i` inside the corridor, or `None` if empty.
fn row_range(i: usize, t0: usize, tk: usize, b: usize) -> Option<(usize, usize)> {
    let a = (tk - 1) as u128;
    let c = (t0 - 1) as u128;
    let w = (b as u128) * (t0.max(tk) - 1) as u128;
    let center = i as u128 * a;
    if c == 0 {
        // single source frame: every target index lies on the (degenerate) diagonal
        return Some((0, tk - 1));
    }
    // j·c ∈ [center − w, center + w]
    let lo_num = center.saturating_sub(w);
    let lo = lo_num.div_ceil(c);
    let hi = ((center + w) / c).min(tk as u128 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// True when a monotone `(1,0)/(0,1)/(1,1)` path joins the corners inside
/// the corridor of half-width `b`.
pub fn band_is_feasible(t0: usize, tk: usize, b: usize) -> bool {
    if t0 == 0 || tk == 0 {
        return false;
    }
    let mut prev: Option<(usize, usize)> = None;
    for i in 0..t0 {
        let Some((lo, hi)) = row_range(i, t0, tk, b) else {
            return false;
        };
        match prev {
            None if lo != 0 => return false,
            Some((plo, phi)) if lo > phi + 1 || hi < plo => return false,
            _ => {}
        }
        prev = Some((lo, hi));
    }
    prev.is_some_and(|(_, hi)| hi == tk - 1)
}

/// `b = ⌊ρ·max(T0,Tk)⌋`, widened to `⌈|T0−Tk|/2⌉ + 1` when the raw corridor
/// admits no monotone path.
pub fn compute_band(t0: usize, tk: usize, rho: f64) -> Result<usize> {
    if t0 == 0 || tk == 0 {
        return Err(Error::Domain("sequence lengths must be at least 1".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("band ratio must lie in (0,1], got {rho}")));
    }
    let b = (rho * t0.max(tk) as f64).floor() as usize;
    if band_is_feasible(t0, tk, b) {
        return Ok(b);
    }
    let widened = b.max(t0.abs_diff(tk).div_ceil(2) + 1);
    if band_is_feasible(t0, tk, widened) {
        return Ok(widened);
    }
    // Not reachable for the corridor geometry above, kept as a hard guarantee.
    let mut w = widened;
    while !band_is_feasible(t0, tk, w) {
        w += 1;
    }
    Ok(w)
}

/// Euclidean distance between two feature rows.
#[inline]
pub fn frame_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

const FROM_DIAG: u8 = 0;
const FROM_UP: u8 = 1; // (i-1, j)
const FROM_LEFT: u8 = 2; // (i, j-1)

struct BandRow {
    lo: usize,
    cost: Vec<f64>,
    step: Vec<u8>,
}

impl BandRow {
    #[inline]
    fn at(&self, j: usize) -> f64 {
        if j < self.lo || j >= self.lo + self.cost.len() {
            f64::INFINITY
        } else {
            self.cost[j - self.lo]
        }
    }
}

/// DTW with the band derived from `rho` via [`compute_band`].
pub fn banded_dtw(x0: &Matrix, xk: &Matrix, rho: f64) -> Result<AlignmentPath> {
    check_inputs(x0, xk)?;
    let b = compute_band(x0.rows(), xk.rows(), rho)?;
    banded_dtw_with_halfwidth(x0, xk, b)
}

fn check_inputs(x0: &Matrix, xk: &Matrix) -> Result<()> {
    if x0.cols() != xk.cols() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            x0.cols(),
            xk.cols()
        )));
    }
    if x0.rows() == 0 || xk.rows() == 0 {
        return Err(Error::Shape("cannot align an empty sequence".into()));
    }
    if !x0.is_finite() || !xk.is_finite() {
        return Err(Error::Domain("non-finite feature values".into()));
    }
    Ok(())
}

/// DTW restricted to a corridor of explicit half-width `b`. Fails with a
/// domain error when the corridor admits no path.
pub fn banded_dtw_with_halfwidth(x0: &Matrix, xk: &Matrix, b: usize) -> Result<AlignmentPath> {
    check_inputs(x0, xk)?;
    let (t0, tk) = (x0.rows(), xk.rows());
    if !band_is_feasible(t0, tk, b) {
        return Err(Error::Domain(format!(
            "band half-width {b} admits no path for lengths {t0} and {tk}"
        )));
    }

    let mut rows: Vec<BandRow> = Vec::with_capacity(t0);
    for i in 0..t0 {
        let (lo, hi) = row_range(i, t0, tk, b).expect("feasible band has non-empty rows");
        let width = hi - lo + 1;
        let mut cost = vec![f64::INFINITY; width];
        let mut step = vec![FROM_DIAG; width];
        let xi = x0.row(i);
        for j in lo..=hi {
            let d = frame_distance(xi, xk.row(j));
            let k = j - lo;
            if i == 0 && j == 0 {
                cost[k] = d;
                continue;
            }
            let (diag, up) = match rows.last() {
                Some(prev) if j > 0 => (prev.at(j - 1), prev.at(j)),
                Some(prev) => (f64::INFINITY, prev.at(j)),
                None => (f64::INFINITY, f64::INFINITY),
            };
            let left = if k > 0 { cost[k - 1] } else { f64::INFINITY };
            // ties prefer the diagonal, then the vertical step
            let (best, from) = if diag <= up && diag <= left {
                (diag, FROM_DIAG)
            } else if up <= left {
                (up, FROM_UP)
            } else {
                (left, FROM_LEFT)
            };
            cost[k] = d + best;
            step[k] = from;
        }
        rows.push(BandRow { lo, cost, step });
    }

    let total = rows[t0 - 1].at(tk - 1);
    if !total.is_finite() {
        return Err(Error::Domain("alignment path broke inside the band".into()));
    }

    let mut pairs = Vec::with_capacity(t0 + tk);
    let (mut i, mut j) = (t0 - 1, tk - 1);
    loop {
        pairs.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        let row = &rows[i];
        match row.step[j - row.lo] {
            FROM_DIAG => {
                i -= 1;
                j -= 1;
            }
            FROM_UP => i -= 1,
            _ => j -= 1,
        }
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        cost: total,
        band_halfwidth: b,
    })
}

/// Checks the path invariants: corner endpoints and unit monotone steps.
pub fn validate_path(path: &AlignmentPath, t0: usize, tk: usize) -> Result<()> {
    let (Some(&first), Some(&last)) = (path.pairs.first(), path.pairs.last()) else {
        return Err(Error::Validation("empty alignment path".into()));
    };
    if first != (0, 0) || last != (t0 - 1, tk - 1) {
        return Err(Error::Validation(format!(
            "path runs {first:?}..{last:?}, expected (0,0)..({},{})",
            t0 - 1,
            tk - 1
        )));
    }
    for w in path.pairs.windows(2) {
        let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
        if di > 1 || dj > 1 || di + dj == 0 {
            return Err(Error::Validation(format!(
                "illegal step {:?} -> {:?}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Averages matched target indices per source frame (round half to even),
/// enforces non-decreasingness, and pins the corners to `0` and `Tk-1`.
/// A single source frame maps to `Tk-1`.
pub fn path_to_map(path: &AlignmentPath, t0: usize, tk: usize, rho: f64) -> Result<AlignmentMap> {
    validate_path(path, t0, tk)?;
    let mut sums = vec![0usize; t0];
    let mut counts = vec![0usize; t0];
    for &(i, j) in &path.pairs {
        sums[i] += j;
        counts[i] += 1;
    }
    let mut map = Vec::with_capacity(t0);
    for i in 0..t0 {
        let mean = sums[i] as f64 / counts[i] as f64;
        let mut m = mean.round_ties_even() as usize;
        if let Some(&prev) = map.last() {
            m = m.max(prev);
        }
        map.push(m.min(tk - 1));
    }
    map[0] = 0;
    map[t0 - 1] = tk - 1;
    Ok(AlignmentMap {
        map,
        band_halfwidth: path.band_halfwidth,
        rho,
    })
}

#[derive(Serialize)]
struct PathDump<'a> {
    rho: f64,
    b: usize,
    cost: f64,
    pairs: &'a [(usize, usize)],
}

/// Debug dump: `{"rho":…,"b":…,"cost":…,"pairs":[[i,j],…]}`.
pub fn write_path(path: &AlignmentPath, rho: f64, file: impl AsRef<Path>) -> Result<()> {
    let file = file.as_ref();
    let dump = PathDump {
        rho,
        b: path.band_halfwidth,
        cost: path.cost,
        pairs: &path.pairs,
    };
    let mut text = serde_json::to_string(&dump)?;
    text.push('\n');
    fs::write(file, text).map_err(|e| Error::io(file, e))
}
