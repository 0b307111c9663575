//! Pinhole back-projection of tracked object centers and gripper–object
//! distance series.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CameraIntrinsics, Episode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn distance(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// `p = Z K^-1 [u, v, 1]^T` with `Z = depth * z_scale`.
pub fn back_project(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics) -> Result<Point3> {
    if !(u.is_finite() && v.is_finite() && depth.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite back-projection input (u={u}, v={v}, depth={depth})"
        )));
    }
    intr.validate().map_err(|e| Error::Domain(e.to_string()))?;
    let z = depth * intr.z_scale;
    Ok(Point3 {
        x: (u - intr.cx) / intr.fx * z,
        y: (v - intr.cy) / intr.fy * z,
        z,
    })
}

/// Inverse of [`back_project`]: returns `(u, v, depth)`.
pub fn project(p: &Point3, intr: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    if p.z == 0.0 || !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(Error::Domain(format!("cannot project point {p:?}")));
    }
    if intr.z_scale == 0.0 {
        return Err(Error::Domain("z_scale is zero".into()));
    }
    let u = intr.fx * p.x / p.z + intr.cx;
    let v = intr.fy * p.y / p.z + intr.cy;
    Ok((u, v, p.z / intr.z_scale))
}

/// Which track labels count as grippers and which camera is preferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationConfig {
    pub head_camera: String,
    /// Explicit gripper labels. When empty, any label containing "gripper"
    /// is treated as a gripper.
    pub gripper_labels: Vec<String>,
    /// Linearly fill interior gaps of at most this many frames. 0 disables.
    pub interpolate_max_gap: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            head_camera: "head".into(),
            gripper_labels: Vec::new(),
            interpolate_max_gap: 0,
        }
    }
}

impl RelationConfig {
    pub fn is_gripper(&self, label: &str) -> bool {
        if self.gripper_labels.is_empty() {
            label.to_ascii_lowercase().contains("gripper")
        } else {
            self.gripper_labels.iter().any(|g| g == label)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSeries {
    #[serde(rename = "gripper")]
    pub gripper_label: String,
    #[serde(rename = "object")]
    pub object_label: String,
    #[serde(rename = "camera")]
    pub camera_id: String,
    pub values: Vec<Option<f64>>,
}

impl RelationSeries {
    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Least-squares slope of the present values over `[start, end]`, in
    /// distance units per frame. `None` when fewer than two values exist.
    pub fn slope(&self, start: usize, end: usize) -> Option<f64> {
        let end = end.min(self.values.len().checked_sub(1)?);
        if start > end {
            return None;
        }
        let pts: Vec<(f64, f64)> = (start..=end)
            .filter_map(|t| self.values[t].map(|r| (t as f64, r)))
            .collect();
        least_squares_slope(&pts)
    }

    pub fn mean(&self, start: usize, end: usize) -> Option<f64> {
        let end = end.min(self.values.len().checked_sub(1)?);
        let present: Vec<f64> = self.values.get(start..=end)?.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Fills interior gaps of at most `max_gap` frames by linear interpolation.
    /// Leading and trailing gaps stay absent.
    pub fn interpolate_gaps(&mut self, max_gap: usize) {
        let mut last: Option<(usize, f64)> = None;
        for t in 0..self.values.len() {
            let Some(r) = self.values[t] else { continue };
            if let Some((t0, r0)) = last {
                let gap = t - t0 - 1;
                if gap > 0 && gap <= max_gap {
                    for k in t0 + 1..t {
                        let w = (k - t0) as f64 / (t - t0) as f64;
                        self.values[k] = Some(r0 + w * (r - r0));
                    }
                }
            }
            last = Some((t, r));
        }
    }
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn center_3d(ep: &Episode, t: usize, label: &str, camera: &str) -> Option<Point3> {
    let intr = ep.cameras.get(camera)?;
    let p = ep.frames[t].track(label, camera)?;
    back_project(p.u, p.v, p.depth, intr).ok()
}

fn label_seen(ep: &Episode, label: &str, camera: &str) -> bool {
    ep.frames.iter().any(|f| f.track(label, camera).is_some())
}

/// Distance between two tracked labels in one camera, frame by frame.
pub fn relation_series(
    ep: &Episode,
    gripper_label: &str,
    object_label: &str,
    camera_id: &str,
) -> Result<RelationSeries> {
    if !ep.cameras.contains_key(camera_id) {
        return Err(Error::Lookup(format!("unknown camera {camera_id}")));
    }
    for label in [gripper_label, object_label] {
        if !label_seen(ep, label, camera_id) {
            return Err(Error::Lookup(format!(
                "label {label} never tracked in camera {camera_id}"
            )));
        }
    }
    let values = (0..ep.len())
        .map(|t| {
            let g = center_3d(ep, t, gripper_label, camera_id)?;
            let o = center_3d(ep, t, object_label, camera_id)?;
            Some(g.distance(&o))
        })
        .collect();
    Ok(RelationSeries {
        gripper_label: gripper_label.to_string(),
        object_label: object_label.to_string(),
        camera_id: camera_id.to_string(),
        values,
    })
}

/// Labels tracked anywhere in the episode, split into (grippers, objects).
pub fn tracked_labels(ep: &Episode, cfg: &RelationConfig) -> (Vec<String>, Vec<String>) {
    let all: BTreeSet<&String> = ep
        .frames
        .iter()
        .filter_map(|f| f.tracks.as_ref())
        .flat_map(|t| t.keys())
        .collect();
    all.into_iter()
        .cloned()
        .partition(|label| cfg.is_gripper(label))
}

/// Every (gripper, object, camera) series with at least one tracked value
/// for both labels, in lexicographic order.
pub fn all_relations(ep: &Episode, cfg: &RelationConfig) -> Vec<RelationSeries> {
    let (grippers, objects) = tracked_labels(ep, cfg);
    let mut out = Vec::new();
    for g in &grippers {
        for o in &objects {
            for cam in ep.cameras.keys() {
                if let Ok(mut series) = relation_series(ep, g, o, cam) {
                    if cfg.interpolate_max_gap > 0 {
                        series.interpolate_gaps(cfg.interpolate_max_gap);
                    }
                    out.push(series);
                }
            }
        }
    }
    out
}

/// The series with the most valid values. Ties prefer the head camera, then
/// lexicographic (gripper, object, camera) order.
pub fn primary_relation(ep: &Episode, cfg: &RelationConfig) -> Option<RelationSeries> {
    let mut best: Option<RelationSeries> = None;
    for series in all_relations(ep, cfg) {
        let better = match &best {
            None => true,
            Some(b) => {
                let key = |s: &RelationSeries| (s.valid_count(), s.camera_id == cfg.head_camera);
                key(&series) > key(b)
            }
        };
        if better {
            best = Some(series);
        }
    }
    best.filter(|s| s.valid_count() > 0)
}

/// Number of (gripper, object) pairs with both centers available at frame `t`.
pub fn valid_relations_at(ep: &Episode, t: usize, camera: &str, cfg: &RelationConfig) -> usize {
    let Some(tracks) = ep.frames[t].tracks.as_ref() else {
        return 0;
    };
    let present: Vec<&String> = tracks
        .iter()
        .filter(|(_, per_cam)| per_cam.contains_key(camera))
        .map(|(label, _)| label)
        .collect();
    let grippers = present.iter().filter(|l| cfg.is_gripper(l)).count();
    grippers * (present.len() - grippers)
}

/// The head camera when it has a valid relation at `frame`, otherwise the
/// camera with the most valid relations (ties: smallest id). `None` when no
/// camera has any.
pub fn select_camera(ep: &Episode, frame: usize, cfg: &RelationConfig) -> Option<String> {
    if frame >= ep.len() {
        return None;
    }
    if ep.cameras.contains_key(&cfg.head_camera)
        && valid_relations_at(ep, frame, &cfg.head_camera, cfg) > 0
    {
        return Some(cfg.head_camera.clone());
    }
    let mut best: Option<(&String, usize)> = None;
    // BTreeMap iteration is sorted, so strict `>` keeps the smallest id on ties.
    for cam in ep.cameras.keys() {
        let n = valid_relations_at(ep, frame, cam, cfg);
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((cam, n));
        }
    }
    best.map(|(cam, _)| cam.clone())
}

/// Per-frame centers and relations for the camera chosen by [`select_camera`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRelations {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera: Option<String>,
    pub center_3d: BTreeMap<String, [f64; 3]>,
    pub relations_3d: Vec<RelationValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationValue {
    pub gripper: String,
    pub object: String,
    pub r: f64,
}

pub fn frame_relations(ep: &Episode, t: usize, cfg: &RelationConfig) -> FrameRelations {
    let camera = select_camera(ep, t, cfg);
    let mut center = BTreeMap::new();
    let mut relations = Vec::new();
    if let Some(cam) = &camera {
        if let Some(tracks) = &ep.frames[t].tracks {
            for label in tracks.keys() {
                if let Some(p) = center_3d(ep, t, label, cam) {
                    center.insert(label.clone(), p.to_array());
                }
            }
        }
        let (grippers, objects): (Vec<_>, Vec<_>) =
            center.keys().cloned().partition(|l| cfg.is_gripper(l));
        for g in &grippers {
            for o in &objects {
                let (pg, po) = (center[g], center[o]);
                let r = Point3 { x: pg[0], y: pg[1], z: pg[2] }
                    .distance(&Point3 { x: po[0], y: po[1], z: po[2] });
                relations.push(RelationValue {
                    gripper: g.clone(),
                    object: o.clone(),
                    r,
                });
            }
        }
    }
    FrameRelations {
        index: t,
        camera,
        center_3d: center,
        relations_3d: relations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationsFile {
    pub pairs: Vec<RelationSeries>,
}

pub fn write_relations(pairs: &[RelationSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = RelationsFile {
        pairs: pairs.to_vec(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_relations(path: impl AsRef<Path>) -> Result<Vec<RelationSeries>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RelationsFile = serde_json::from_str(&text)?;
    Ok(file.pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, TrackPoint, Tracks};
    use proptest::prelude::*;

    fn identity() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0)
    }

    fn tracks(entries: &[(&str, &str, f64, f64, f64)]) -> Tracks {
        let mut t = Tracks::new();
        for &(label, cam, u, v, depth) in entries {
            t.entry(label.to_string())
                .or_default()
                .insert(cam.to_string(), TrackPoint { u, v, depth });
        }
        t
    }

    fn episode(cams: &[&str], per_frame: Vec<Tracks>) -> Episode {
        Episode {
            id: "g".into(),
            frames: per_frame
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut f = Frame::new(i, vec![0.0], vec![0.0], vec![0.0]);
                    f.tracks = Some(t);
                    f
                })
                .collect(),
            control_hz: 30.0,
            cameras: cams.iter().map(|c| (c.to_string(), identity())).collect(),
        }
    }

    #[test]
    fn back_project_examples() {
        let p = back_project(2.0, 3.0, 4.0, &identity()).unwrap();
        assert_eq!(p, Point3 { x: 8.0, y: 12.0, z: 4.0 });

        let intr = CameraIntrinsics::new(525.0, 530.0, 311.5, 250.25);
        let p = back_project(311.5, 250.25, 5.0, &intr).unwrap();
        assert_eq!(p, Point3 { x: 0.0, y: 0.0, z: 5.0 });

        let intr = CameraIntrinsics {
            z_scale: 0.5,
            ..CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0)
        };
        let p = back_project(320.0, 240.0, 2.0, &intr).unwrap();
        assert_eq!(p, Point3 { x: 0.0, y: 0.0, z: 1.0 });
    }

    #[test]
    fn back_project_rejects_non_finite() {
        assert!(matches!(
            back_project(f64::NAN, 0.0, 1.0, &identity()),
            Err(Error::Domain(_))
        ));
        assert!(back_project(0.0, 0.0, f64::INFINITY, &identity()).is_err());
    }

    #[test]
    fn coincident_points_have_zero_distance() {
        let frames = (0..5)
            .map(|t| tracks(&[("gripper", "head", 3.0, t as f64, 2.0), ("cup", "head", 3.0, t as f64, 2.0)]))
            .collect();
        let ep = episode(&["head"], frames);
        let r = relation_series(&ep, "gripper", "cup", "head").unwrap();
        assert!(r.values.iter().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn object_moving_along_z() {
        let frames = (1..=5)
            .map(|z| tracks(&[("gripper", "head", 0.0, 0.0, 1.0), ("cup", "head", 0.0, 0.0, z as f64)]))
            .collect();
        let ep = episode(&["head"], frames);
        let r = relation_series(&ep, "gripper", "cup", "head").unwrap();
        let expected: Vec<_> = (0..5).map(|d| Some(d as f64)).collect();
        assert_eq!(r.values, expected);
    }

    #[test]
    fn missing_track_gives_absent_value() {
        let frames = (0..10)
            .map(|t| {
                if t == 7 {
                    tracks(&[("gripper", "head", 0.0, 0.0, 1.0)])
                } else {
                    tracks(&[("gripper", "head", 0.0, 0.0, 1.0), ("cup", "head", 0.0, 0.0, 3.0)])
                }
            })
            .collect();
        let ep = episode(&["head"], frames);
        let mut r = relation_series(&ep, "gripper", "cup", "head").unwrap();
        assert_eq!(r.values[7], None);
        assert_eq!(r.values[6], Some(2.0));
        assert_eq!(r.values[8], Some(2.0));
        r.interpolate_gaps(10);
        assert_eq!(r.values[7], Some(2.0));
    }

    #[test]
    fn interpolation_respects_max_gap_and_edges() {
        let mut r = RelationSeries {
            gripper_label: "g".into(),
            object_label: "o".into(),
            camera_id: "c".into(),
            values: vec![None, Some(0.0), None, None, Some(3.0), None],
        };
        r.interpolate_gaps(1);
        assert_eq!(r.values[2], None);
        r.interpolate_gaps(2);
        assert_eq!(r.values, vec![None, Some(0.0), Some(1.0), Some(2.0), Some(3.0), None]);
    }

    #[test]
    fn unknown_label_is_lookup_error() {
        let ep = episode(&["head"], vec![tracks(&[("gripper", "head", 0.0, 0.0, 1.0)])]);
        assert!(matches!(
            relation_series(&ep, "gripper", "bowl", "head"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn camera_selection() {
        let cfg = RelationConfig::default();
        let ep = episode(
            &["head", "wrist"],
            vec![tracks(&[
                ("gripper", "head", 0.0, 0.0, 1.0),
                ("cup", "head", 0.0, 0.0, 1.0),
                ("gripper", "wrist", 0.0, 0.0, 1.0),
                ("cup", "wrist", 0.0, 0.0, 1.0),
                ("bowl", "wrist", 0.0, 0.0, 1.0),
            ])],
        );
        assert_eq!(select_camera(&ep, 0, &cfg).as_deref(), Some("head"));

        let ep = episode(
            &["wrist_l", "wrist_r"],
            vec![tracks(&[
                ("gripper", "wrist_l", 0.0, 0.0, 1.0),
                ("cup", "wrist_l", 0.0, 0.0, 1.0),
                ("bowl", "wrist_l", 0.0, 0.0, 1.0),
                ("gripper", "wrist_r", 0.0, 0.0, 1.0),
                ("cup", "wrist_r", 0.0, 0.0, 1.0),
            ])],
        );
        assert_eq!(select_camera(&ep, 0, &cfg).as_deref(), Some("wrist_l"));

        let ep = episode(
            &["b_cam", "a_cam"],
            vec![tracks(&[
                ("gripper", "b_cam", 0.0, 0.0, 1.0),
                ("cup", "b_cam", 0.0, 0.0, 1.0),
                ("gripper", "a_cam", 0.0, 0.0, 1.0),
                ("cup", "a_cam", 0.0, 0.0, 1.0),
            ])],
        );
        assert_eq!(select_camera(&ep, 0, &cfg).as_deref(), Some("a_cam"));

        let ep = episode(&["head"], vec![tracks(&[("cup", "head", 0.0, 0.0, 1.0)])]);
        assert_eq!(select_camera(&ep, 0, &cfg), None);
    }

    #[test]
    fn head_without_relations_falls_back() {
        let cfg = RelationConfig::default();
        let ep = episode(
            &["head", "wrist"],
            vec![tracks(&[
                ("cup", "head", 0.0, 0.0, 1.0),
                ("gripper", "wrist", 0.0, 0.0, 1.0),
                ("cup", "wrist", 0.0, 0.0, 1.0),
            ])],
        );
        assert_eq!(select_camera(&ep, 0, &cfg).as_deref(), Some("wrist"));
        let fr = frame_relations(&ep, 0, &cfg);
        assert_eq!(fr.relations_3d.len(), 1);
    }

    #[test]
    fn explicit_gripper_labels() {
        let cfg = RelationConfig {
            gripper_labels: vec!["hand".into()],
            ..Default::default()
        };
        assert!(cfg.is_gripper("hand"));
        assert!(!cfg.is_gripper("left_gripper"));
        assert!(RelationConfig::default().is_gripper("Left_Gripper"));
    }

    #[test]
    fn slope_sign() {
        let r = RelationSeries {
            gripper_label: "g".into(),
            object_label: "o".into(),
            camera_id: "c".into(),
            values: vec![Some(0.0), None, Some(2.0), Some(3.0)],
        };
        assert!((r.slope(0, 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.slope(1, 1), None);
    }

    fn intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
        (50.0..2000.0f64, 50.0..2000.0f64, -500.0..1500.0f64, -500.0..1500.0f64, 0.01..10.0f64)
            .prop_map(|(fx, fy, cx, cy, z_scale)| CameraIntrinsics { fx, fy, cx, cy, z_scale })
    }

    proptest! {
        #[test]
        fn symmetric_in_labels(zs in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64, 0.1..5.0f64, 0.0..640.0f64, 0.0..480.0f64, 0.1..5.0f64), 1..20)) {
            let frames = zs.iter().map(|&(u1, v1, z1, u2, v2, z2)| {
                tracks(&[("gripper", "head", u1, v1, z1), ("cup", "head", u2, v2, z2)])
            }).collect();
            let mut ep = episode(&["head"], frames);
            ep.cameras.insert("head".into(), CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0));
            let a = relation_series(&ep, "gripper", "cup", "head").unwrap();
            let b = relation_series(&ep, "cup", "gripper", "head").unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn depth_scaling_scales_distances(
            zs in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64, 0.1..5.0f64, 0.0..640.0f64, 0.0..480.0f64, 0.1..5.0f64), 1..20),
            k in -3i32..4,
        ) {
            let alpha = 2f64.powi(k);
            let build = |s: f64| {
                let frames = zs.iter().map(|&(u1, v1, z1, u2, v2, z2)| {
                    tracks(&[("gripper", "head", u1, v1, z1 * s), ("cup", "head", u2, v2, z2 * s)])
                }).collect();
                let mut ep = episode(&["head"], frames);
                ep.cameras.insert("head".into(), CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0));
                relation_series(&ep, "gripper", "cup", "head").unwrap()
            };
            let base = build(1.0);
            let scaled = build(alpha);
            for (a, b) in base.values.iter().zip(&scaled.values) {
                let (a, b) = (a.unwrap(), b.unwrap());
                prop_assert!((b - alpha * a).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn projection_round_trip(u in -1000.0..2000.0f64, v in -1000.0..2000.0f64, d in 0.01..100.0f64, intr in intrinsics()) {
            let p = back_project(u, v, d, &intr).unwrap();
            let (u2, v2, d2) = project(&p, &intr).unwrap();
            prop_assert!((u2 - u).abs() <= 1e-9 * u.abs().max(1.0));
            prop_assert!((v2 - v).abs() <= 1e-9 * v.abs().max(1.0));
            prop_assert!((d2 - d).abs() <= 1e-9 * d);
        }
    }
}
