//! Read-only segment reports and an SVG label timeline.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::dataset::{Episode, Label, Segmentation};
use crate::error::{Error, Result};
use crate::geometry::{primary_relation, RelationConfig, RelationSeries};
use crate::segmentation::{dbscan_1d, detect_gripper_events, event_windows, GripperForceConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRow {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub len: usize,
    pub confidence: f64,
    pub mean_r: Option<f64>,
    /// Gripper clusters whose padded window overlaps the segment.
    pub gripper_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRow {
    pub first: usize,
    pub last: usize,
    pub window: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub episode_id: String,
    pub len: usize,
    pub covered: usize,
    pub rows: Vec<SegmentRow>,
    pub clusters: Vec<ClusterRow>,
    #[serde(skip)]
    pub relation: Option<RelationSeries>,
}

impl InspectReport {
    pub fn coverage_percent(&self) -> f64 {
        if self.len == 0 {
            return 100.0;
        }
        100.0 * self.covered as f64 / self.len as f64
    }
}

pub fn inspect(
    ep: &Episode,
    seg: &Segmentation,
    relation_cfg: &RelationConfig,
    gripper_cfg: &GripperForceConfig,
) -> Result<InspectReport> {
    if seg.episode_id != ep.id {
        return Err(Error::Validation(format!(
            "segmentation is for episode {}, but episode is {}",
            seg.episode_id, ep.id
        )));
    }
    seg.validate_within(ep.len())?;
    let relation = primary_relation(ep, relation_cfg);
    let events = detect_gripper_events(ep, gripper_cfg);
    let clustered = dbscan_1d(&events, gripper_cfg.dbscan_eps, gripper_cfg.dbscan_min_pts);
    let windows = event_windows(&clustered, gripper_cfg.pad, ep.len());
    let clusters: Vec<ClusterRow> = clustered
        .iter()
        .zip(&windows)
        .map(|(c, &w)| ClusterRow {
            first: c.iter().copied().min().unwrap_or(w.0),
            last: c.iter().copied().max().unwrap_or(w.1),
            window: w,
        })
        .collect();
    let rows = seg
        .segments
        .iter()
        .map(|s| SegmentRow {
            start: s.start,
            end: s.end,
            label: s.label,
            len: s.len(),
            confidence: s.confidence,
            mean_r: relation.as_ref().and_then(|r| r.mean(s.start, s.end)),
            gripper_events: windows.iter().filter(|&&(lo, hi)| lo <= s.end && hi >= s.start).count(),
        })
        .collect();
    Ok(InspectReport {
        episode_id: ep.id.clone(),
        len: ep.len(),
        covered: seg.covered_frames(),
        rows,
        clusters,
        relation,
    })
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "episode {} ({} frames)", self.episode_id, self.len)?;
        writeln!(
            f,
            "{:>6} {:>6} {:>9} {:>6} {:>6} {:>10} {:>7}",
            "start", "end", "label", "len", "conf", "mean_r", "events"
        )?;
        for r in &self.rows {
            let mean_r = r.mean_r.map_or("-".to_string(), |m| format!("{m:.4}"));
            writeln!(
                f,
                "{:>6} {:>6} {:>9} {:>6} {:>6.2} {:>10} {:>7}",
                r.start, r.end, r.label, r.len, r.confidence, mean_r, r.gripper_events
            )?;
        }
        if self.covered == self.len {
            writeln!(f, "coverage: 100%")?;
        } else {
            writeln!(f, "coverage: {:.1}%", self.coverage_percent().min(99.9))?;
        }
        writeln!(f, "gripper clusters: {}", self.clusters.len())?;
        for c in &self.clusters {
            writeln!(f, "  events {}..{} -> window [{},{}]", c.first, c.last, c.window.0, c.window.1)?;
        }
        Ok(())
    }
}

/// Label bands along the time axis with `r_t` drawn on top.
pub fn render_svg(report: &InspectReport) -> String {
    const W: f64 = 1000.0;
    const H: f64 = 200.0;
    const BAND: f64 = 30.0;
    let n = report.len.max(1) as f64;
    let x = |t: usize| t as f64 * W / n;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" viewBox="0 0 {W} {}">"#,
        H + BAND,
        H + BAND
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{W}" height="{}" fill="white"/>"#, H + BAND);
    for r in &report.rows {
        let color = match r.label {
            Label::Precision => "#d95f02",
            Label::Casual => "#1b9e77",
        };
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{H}" width="{:.2}" height="{BAND}" fill="{color}"><title>{} [{},{}]</title></rect>"#,
            x(r.start),
            x(r.end + 1) - x(r.start),
            r.label,
            r.start,
            r.end
        );
    }
    for c in &report.clusters {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="0" width="{:.2}" height="{H}" fill="#7570b3" fill-opacity="0.2"/>"##,
            x(c.window.0),
            x(c.window.1 + 1) - x(c.window.0)
        );
    }
    if let Some(rel) = &report.relation {
        let max = rel.values.iter().flatten().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            let mut d = String::new();
            let mut pen_down = false;
            for (t, v) in rel.values.iter().enumerate() {
                match v {
                    Some(v) => {
                        let y = H - 5.0 - v / max * (H - 10.0);
                        let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, x(t), y);
                        pen_down = true;
                    }
                    None => pen_down = false,
                }
            }
            let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, d.trim_end());
        }
    }
    svg.push_str("</svg>\n");
    svg
}
