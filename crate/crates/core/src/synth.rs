//! Seeded synthetic corpora: a shared pick-and-place scene rendered through
//! random monotone time warps, with known segment boundaries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    write_episode, write_segmentation, CameraIntrinsics, Episode, Frame, Label, Segment, Segmentation, TrackPoint,
};
use crate::error::{Error, Result};
use crate::geometry::{project, Point3};

pub const CAMERA: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub episodes: usize,
    /// Length of the reference episode; others scale with their speed.
    pub frames: usize,
    pub joints: usize,
    pub grippers: usize,
    /// Global speed factor range for non-reference episodes.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Amplitude of the sinusoidal speed modulation (relative).
    pub warp_amp: f64,
    /// Std-dev of additive noise on actions and joint positions.
    pub noise: f64,
    pub velocities: bool,
    pub control_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            episodes: 3,
            frames: 600,
            joints: 6,
            grippers: 1,
            speed_min: 0.56,
            speed_max: 1.8,
            warp_amp: 0.1,
            noise: 0.0005,
            velocities: true,
            control_hz: 50.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 20 || self.joints == 0 || self.grippers == 0 {
            return Err(Error::Config("synth needs frames >= 20, joints >= 1, grippers >= 1".into()));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config("synth speed range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..0.5).contains(&self.warp_amp) || !(self.noise >= 0.0) {
            return Err(Error::Config("synth warp_amp must lie in [0,0.5) and noise >= 0".into()));
        }
        Ok(())
    }
}

/// Corpus-wide parameters, in phase units `s ∈ [0,1]`.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Two (amplitude, frequency, phase) sinusoid terms per joint.
    joint_terms: Vec<[(f64, f64, f64); 2]>,
    joint_drift: Vec<f64>,
    start: [f64; 3],
    object: [f64; 3],
    goal: [f64; 3],
    retreat: [f64; 3],
    /// casual `[0,s1)`, precision `[s1,s2]`, casual `(s2,1]`
    pub precision_start: f64,
    pub precision_end: f64,
    pub grasp: f64,
    pub release: f64,
    /// Phase width of one gripper open/close transition.
    pub gripper_width: f64,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp3(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w, a[2] + (b[2] - a[2]) * w]
}

impl Scene {
    pub fn sample(rng: &mut impl Rng, joints: usize, nominal_frames: usize) -> Self {
        let joint_terms = (0..joints)
            .map(|_| {
                [0, 1].map(|_| {
                    (
                        rng.random_range(0.3..1.0),
                        rng.random_range(0.3..1.7),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
            })
            .collect();
        let joint_drift = (0..joints).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut point = |x: (f64, f64), y: (f64, f64), z: (f64, f64)| {
            [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1), rng.random_range(z.0..z.1)]
        };
        let start = point((-0.35, -0.25), (-0.25, -0.15), (0.6, 0.7));
        let object = point((-0.05, 0.05), (0.05, 0.15), (0.95, 1.05));
        let goal = point((0.2, 0.3), (0.05, 0.15), (0.85, 0.95));
        let retreat = point((0.25, 0.35), (-0.25, -0.15), (0.6, 0.7));
        let precision_start = rng.random_range(0.30..0.36);
        let precision_end = rng.random_range(0.62..0.68);
        let span = precision_end - precision_start;
        Self {
            joint_terms,
            joint_drift,
            start,
            object,
            goal,
            retreat,
            precision_start,
            precision_end,
            grasp: precision_start + 0.25 * span,
            release: precision_start + 0.75 * span,
            gripper_width: 6.0 / (nominal_frames.max(2) - 1) as f64,
        }
    }

    pub fn label_at(&self, s: f64) -> Label {
        if s < self.precision_start || s > self.precision_end {
            Label::Casual
        } else {
            Label::Precision
        }
    }

    pub fn joints_at(&self, s: f64) -> Vec<f64> {
        self.joint_terms
            .iter()
            .zip(&self.joint_drift)
            .map(|(terms, drift)| {
                terms.iter().map(|&(a, f, p)| a * (2.0 * PI * f * s + p).sin()).sum::<f64>() + drift * s
            })
            .collect()
    }

    /// Normalized opening: 1 open, 0 closed.
    pub fn gripper_at(&self, s: f64) -> f64 {
        let close = smoothstep((s - self.grasp) / self.gripper_width);
        let open = smoothstep((s - self.release) / self.gripper_width);
        1.0 - close + open
    }

    /// End-effector position in the camera frame.
    pub fn effector_at(&self, s: f64) -> [f64; 3] {
        if s < self.grasp {
            lerp3(self.start, self.object, smoothstep(s / self.grasp))
        } else if s < self.release {
            lerp3(self.object, self.goal, smoothstep((s - self.grasp) / (self.release - self.grasp)))
        } else {
            lerp3(self.goal, self.retreat, smoothstep((s - self.release) / (1.0 - self.release)))
        }
    }

    pub fn object_at(&self, s: f64) -> [f64; 3] {
        if s < self.grasp {
            self.object
        } else if s < self.release {
            self.effector_at(s)
        } else {
            self.goal
        }
    }
}

/// Monotone phase for each of `len` frames: `s(u) = u + amp·sin(π·cycles·u)/(π·cycles)`
/// with `u = j/(len−1)`. Endpoints map to 0 and 1 and the local speed stays
/// within `[1−amp, 1+amp]` of nominal.
pub fn warp_phase(len: usize, amp: f64, cycles: u32) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    let c = PI * cycles.max(1) as f64;
    (0..len)
        .map(|j| {
            let u = j as f64 / (len - 1) as f64;
            (u + amp * (c * u).sin() / c).clamp(0.0, 1.0)
        })
        .collect()
}

/// Ground-truth segmentation implied by the scene at the given phases.
pub fn truth_segmentation(id: &str, scene: &Scene, phases: &[f64]) -> Segmentation {
    let mut segments: Vec<Segment> = Vec::new();
    for (t, &s) in phases.iter().enumerate() {
        let label = scene.label_at(s);
        match segments.last_mut() {
            Some(last) if last.label == label => last.end = t,
            _ => segments.push(Segment::new(t, t, label, 1.0)),
        }
    }
    Segmentation::new(id, segments)
}

pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0)
}

fn track(p: [f64; 3], intr: &CameraIntrinsics) -> Result<TrackPoint> {
    let (u, v, depth) = project(&Point3 { x: p[0], y: p[1], z: p[2] }, intr)?;
    Ok(TrackPoint { u, v, depth })
}

/// Renders an episode following `phases` through `scene`.
pub fn render(
    id: &str,
    scene: &Scene,
    phases: &[f64],
    spec: &SynthSpec,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let intr = intrinsics();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = |v: Vec<f64>, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        if spec.noise > 0.0 {
            v.into_iter().map(|x| x + noise.sample(rng)).collect()
        } else {
            v
        }
    };
    let lead = 2.0 / (spec.frames - 1) as f64;
    let mut frames = Vec::with_capacity(phases.len());
    let mut prev_q: Option<Vec<f64>> = None;
    for (t, &s) in phases.iter().enumerate() {
        let q = jitter(scene.joints_at(s), rng);
        let action = jitter(scene.joints_at((s + lead).min(1.0)), rng);
        let g = scene.gripper_at(s).clamp(0.0, 1.0);
        let mut gripper = vec![g];
        gripper.extend(std::iter::repeat_n(1.0, spec.grippers - 1));
        let ee = scene.effector_at(s);
        let mut objects = BTreeMap::new();
        objects.insert(
            "gripper".to_string(),
            BTreeMap::from([(CAMERA.to_string(), track(ee, &intr)?)]),
        );
        objects.insert(
            "object".to_string(),
            BTreeMap::from([(CAMERA.to_string(), track(scene.object_at(s), &intr)?)]),
        );
        let mut frame = Frame::new(t, action, q.clone(), gripper);
        if spec.velocities {
            frame.joint_vel = Some(match &prev_q {
                Some(p) => q.iter().zip(p).map(|(a, b)| (a - b) * spec.control_hz).collect(),
                None => vec![0.0; q.len()],
            });
        }
        frame.tracks = Some(objects);
        frame.ee_pos = Some(ee.to_vec());
        prev_q = Some(q);
        frames.push(frame);
    }
    let ep = Episode {
        id: id.to_string(),
        frames,
        control_hz: spec.control_hz,
        cameras: BTreeMap::from([(CAMERA.to_string(), intr)]),
    };
    ep.validate()?;
    Ok(ep)
}

#[derive(Debug, Clone)]
pub struct SynthEpisode {
    pub episode: Episode,
    pub truth: Segmentation,
    pub phases: Vec<f64>,
    /// Global speed relative to the reference episode.
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub scene: Scene,
    pub episodes: Vec<SynthEpisode>,
}

pub fn episode_id(k: usize) -> String {
    format!("ep{k:03}")
}

/// Episode 0 runs at nominal speed; the others use a random global speed in
/// `[speed_min, speed_max]` with a sinusoidal modulation on top.
pub fn generate(seed: u64, spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(&mut rng, spec.joints, spec.frames);
    let mut episodes = Vec::with_capacity(spec.episodes);
    for k in 0..spec.episodes {
        let (speed, phases) = if k == 0 {
            (1.0, warp_phase(spec.frames, 0.0, 1))
        } else {
            let speed = rng.random_range(spec.speed_min..=spec.speed_max);
            let len = ((spec.frames as f64 / speed).round() as usize).max(2);
            let amp = rng.random_range(0.0..=spec.warp_amp);
            let cycles = rng.random_range(1..=3);
            (speed, warp_phase(len, amp, cycles))
        };
        let id = episode_id(k);
        let episode = render(&id, &scene, &phases, spec, &mut rng)?;
        let truth = truth_segmentation(&id, &scene, &phases);
        episodes.push(SynthEpisode {
            episode,
            truth,
            phases,
            speed,
        });
    }
    Ok(Corpus { scene, episodes })
}

/// Writes `<id>.episode.jsonl` for every episode, the reference labels as
/// `<ep0>.segments.json`, and all ground truth under `truth/`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let truth_dir = dir.join("truth");
    fs::create_dir_all(&truth_dir).map_err(|e| Error::io(&truth_dir, e))?;
    let mut written = Vec::new();
    for (k, se) in corpus.episodes.iter().enumerate() {
        let p = dir.join(format!("{}.episode.jsonl", se.episode.id));
        write_episode(&se.episode, &p)?;
        written.push(p);
        let t = truth_dir.join(format!("{}.segments.json", se.episode.id));
        write_segmentation(&se.truth, &t)?;
        written.push(t);
        if k == 0 {
            let s = dir.join(format!("{}.segments.json", se.episode.id));
            write_segmentation(&se.truth, &s)?;
            written.push(s);
        }
    }
    Ok(written)
}
