//! Episode-0 segmentation sources: fixture files, a generic HTTP endpoint
//! with token-budgeted frame sampling, and a deterministic mock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Episode, Label, Segment, Segmentation, DEFAULT_CONFIDENCE};
use crate::error::{Error, Result};
use crate::geometry::{frame_relations, FrameRelations, RelationConfig};
use crate::segmentation::StabilityConfig;

const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub max_chars: usize,
    pub per_frame_chars: usize,
    pub k_samples: usize,
}

impl PromptBudget {
    /// Largest `k ≤ len` with `k · per_frame_chars ≤ max_chars`, by binary search.
    pub fn new(len: usize, per_frame_chars: usize, max_chars: usize) -> Result<Self> {
        if per_frame_chars == 0 || max_chars == 0 {
            return Err(Error::Domain("per_frame_chars and max_chars must be positive".into()));
        }
        let fits = |k: usize| k.checked_mul(per_frame_chars).is_some_and(|c| c <= max_chars);
        let (mut lo, mut hi) = (0usize, len);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        if lo == 0 {
            return Err(Error::Domain(format!(
                "budget too small: {max_chars} chars cannot hold one frame of {per_frame_chars} chars"
            )));
        }
        Ok(Self {
            max_chars,
            per_frame_chars,
            k_samples: lo,
        })
    }
}

/// `round(linspace(0, len−1, k))`; unique because `k ≤ len`.
pub fn linspace_indices(len: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let span = (len - 1) as u128;
            let steps = (k - 1) as u128;
            (0..k as u128)
                .map(|i| ((2 * i * span + steps) / (2 * steps)) as usize)
                .collect()
        }
    }
}

pub fn budget_sample(len: usize, per_frame_chars: usize, max_chars: usize) -> Result<Vec<usize>> {
    let budget = PromptBudget::new(len, per_frame_chars, max_chars)?;
    Ok(linspace_indices(len, budget.k_samples))
}

fn round_value(v: &Value, scale: f64) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or_default();
            let r = (x * scale).round() / scale;
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.iter().map(|i| round_value(i, scale)).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, i)| (k.clone(), round_value(i, scale)))
                .collect(),
        ),
        other => other.clone(),
    }
}

/// Compact JSON with floats rounded to `decimals` places and sorted keys.
pub fn slim_json<T: Serialize>(payload: &T, decimals: u32) -> Result<String> {
    let value = serde_json::to_value(payload)?;
    let scale = 10f64.powi(decimals as i32);
    Ok(serde_json::to_string(&round_value(&value, scale))?)
}

/// Constants the endpoint is asked to respect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHints {
    pub min_segment_len: usize,
    pub merge_gap: usize,
    pub hysteresis: usize,
    pub micro_len: usize,
    pub preferred_segments: [usize; 2],
}

impl From<&StabilityConfig> for PolicyHints {
    fn from(cfg: &StabilityConfig) -> Self {
        Self {
            min_segment_len: cfg.min_segment_len,
            merge_gap: cfg.merge_gap,
            hysteresis: cfg.hysteresis,
            micro_len: cfg.micro_len,
            preferred_segments: [3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub episode_id: String,
    pub episode_len: usize,
    pub task_summary: String,
    pub frames: Vec<FrameRelations>,
    pub policy_hints: PolicyHints,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<String>,
}

/// Samples frames under the character budget. The per-frame size is that of
/// the median-size serialized frame.
pub fn build_request(
    ep: &Episode,
    task_summary: &str,
    relation_cfg: &RelationConfig,
    stability: &StabilityConfig,
    max_chars: usize,
    decimals: u32,
) -> Result<(ProviderRequest, PromptBudget)> {
    let all: Vec<FrameRelations> = (0..ep.len()).map(|t| frame_relations(ep, t, relation_cfg)).collect();
    let mut sizes = all
        .iter()
        .map(|f| slim_json(f, decimals).map(|s| s.chars().count() + 1))
        .collect::<Result<Vec<_>>>()?;
    sizes.sort_unstable();
    let per_frame = sizes.get(sizes.len() / 2).copied().unwrap_or(1);
    let budget = PromptBudget::new(ep.len(), per_frame, max_chars)?;
    let frames = linspace_indices(ep.len(), budget.k_samples)
        .into_iter()
        .map(|t| all[t].clone())
        .collect();
    Ok((
        ProviderRequest {
            episode_id: ep.id.clone(),
            episode_len: ep.len(),
            task_summary: task_summary.to_string(),
            frames,
            policy_hints: stability.into(),
            instructions: None,
        },
        budget,
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    #[serde(default)]
    episode_id: Option<String>,
    segments: Vec<RawSegment>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    start: i64,
    end: i64,
    label: Label,
    #[serde(default)]
    confidence: Option<f64>,
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_CHARS).collect();
    if body.chars().count() > EXCERPT_CHARS {
        s.push('…');
    }
    s
}

/// Strict parse of `{"segments":[…]}`. Out-of-range indices are clipped,
/// overlaps and malformed records are protocol errors.
pub fn parse_response(body: &str, episode_id: &str, len: usize) -> Result<Segmentation> {
    let raw: RawResponse = serde_json::from_str(body)
        .map_err(|e| Error::Protocol(format!("malformed response ({e}); body: {}", excerpt(body))))?;
    if let Some(id) = &raw.episode_id {
        if id != episode_id {
            return Err(Error::Validation(format!(
                "segmentation is for episode {id}, expected {episode_id}"
            )));
        }
    }
    if len == 0 {
        return Err(Error::Domain("episode is empty".into()));
    }
    let last = (len - 1) as i64;
    let mut segments = Vec::with_capacity(raw.segments.len());
    for s in raw.segments {
        if s.start > s.end {
            return Err(Error::Protocol(format!(
                "segment [{},{}] has start after end; body: {}",
                s.start,
                s.end,
                excerpt(body)
            )));
        }
        let confidence = s.confidence.unwrap_or(DEFAULT_CONFIDENCE);
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Protocol(format!(
                "confidence {confidence} outside [0,1] in segment [{},{}]",
                s.start, s.end
            )));
        }
        let (start, end) = (s.start.max(0), s.end.min(last));
        if start > end {
            log::warn!("{episode_id}: dropping segment [{},{}] outside [0,{last}]", s.start, s.end);
            continue;
        }
        if (start, end) != (s.start, s.end) {
            log::warn!("{episode_id}: clipping segment [{},{}] to [{start},{end}]", s.start, s.end);
        }
        segments.push(Segment::new(start as usize, end as usize, s.label, confidence));
    }
    segments.sort_by_key(|s| (s.start, s.end));
    if let Some(w) = segments.windows(2).find(|w| w[0].end >= w[1].start) {
        return Err(Error::Protocol(format!(
            "overlapping segments [{},{}] and [{},{}]",
            w[0].start, w[0].end, w[1].start, w[1].end
        )));
    }
    let seg = Segmentation::new(episode_id, segments);
    seg.validate_within(len)?;
    Ok(seg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub url: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
    #[serde(default = "default_decimals")]
    pub decimals: u32,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Directory holding `system.txt` and `few_shot.txt`.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

fn default_max_chars() -> usize {
    24_000
}
fn default_decimals() -> u32 {
    3
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    120
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            headers: BTreeMap::new(),
            max_chars: default_max_chars(),
            decimals: default_decimals(),
            attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            prompt_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    File { path: PathBuf },
    Http(HttpConfig),
    Mock,
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProviderConfig::Http(h) => {
                if h.attempts == 0 {
                    return Err(Error::Config("provider attempts must be >= 1".into()));
                }
                if h.max_chars == 0 {
                    return Err(Error::Config("provider max_chars must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

pub trait SegmentationProvider {
    fn fetch(&self, req: &ProviderRequest) -> Result<Segmentation>;
}

pub struct FileProvider {
    pub path: PathBuf,
}

impl SegmentationProvider for FileProvider {
    fn fetch(&self, req: &ProviderRequest) -> Result<Segmentation> {
        let body = fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        parse_response(&body, &req.episode_id, req.episode_len)
    }
}

/// Casual wherever the first shared relation grows between consecutive
/// sampled frames, precision otherwise; intervals without a shared relation
/// stay unlabeled.
pub struct MockProvider;

fn shared_relation(a: &FrameRelations, b: &FrameRelations) -> Option<(f64, f64)> {
    let mut pairs: Vec<_> = a
        .relations_3d
        .iter()
        .filter_map(|ra| {
            b.relations_3d
                .iter()
                .find(|rb| rb.gripper == ra.gripper && rb.object == ra.object)
                .map(|rb| ((&ra.gripper, &ra.object), ra.r, rb.r))
        })
        .collect();
    pairs.sort_by(|x, y| x.0.cmp(&y.0));
    pairs.first().map(|&(_, ra, rb)| (ra, rb))
}

impl SegmentationProvider for MockProvider {
    fn fetch(&self, req: &ProviderRequest) -> Result<Segmentation> {
        let mut segments: Vec<Segment> = Vec::new();
        let n = req.frames.len();
        for (k, w) in req.frames.windows(2).enumerate() {
            let Some((ra, rb)) = shared_relation(&w[0], &w[1]) else {
                continue;
            };
            let label = if rb > ra { Label::Casual } else { Label::Precision };
            let start = w[0].index;
            let end = if k + 2 == n { w[1].index } else { w[1].index - 1 };
            match segments.last_mut() {
                Some(last) if last.label == label && last.end + 1 == start => last.end = end,
                _ => segments.push(Segment::new(start, end, label, 0.8)),
            }
        }
        let seg = Segmentation::new(req.episode_id.clone(), segments);
        seg.validate_within(req.episode_len)?;
        Ok(seg)
    }
}

pub struct HttpProvider {
    pub config: HttpConfig,
    pub log_dir: Option<PathBuf>,
}

enum Attempt {
    Retry(Error),
    Fatal(Error),
}

impl HttpProvider {
    fn instructions(&self) -> Result<Option<String>> {
        let Some(dir) = &self.config.prompt_dir else {
            return Ok(None);
        };
        let mut text = String::new();
        for name in ["system.txt", "few_shot.txt"] {
            let p = dir.join(name);
            if p.exists() {
                text.push_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
                text.push('\n');
            }
        }
        Ok((!text.is_empty()).then_some(text))
    }

    fn log(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.log_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(name);
            fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &str) -> std::result::Result<String, Attempt> {
        let mut rb = client
            .post(&self.config.url)
            .header("content-type", "application/json")
            .body(body.to_string());
        for (k, v) in &self.config.headers {
            rb = rb.header(k, v);
        }
        let resp = rb
            .send()
            .map_err(|e| Attempt::Retry(Error::Network(format!("{}: {e}", self.config.url))))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Attempt::Retry(Error::Network(format!("reading response: {e}"))))?;
        if status.is_success() {
            Ok(text)
        } else if status.is_server_error() || status.as_u16() == 429 {
            Err(Attempt::Retry(Error::Network(format!("HTTP {status}; body: {}", excerpt(&text)))))
        } else {
            Err(Attempt::Fatal(Error::Protocol(format!("HTTP {status}; body: {}", excerpt(&text)))))
        }
    }
}

impl SegmentationProvider for HttpProvider {
    fn fetch(&self, req: &ProviderRequest) -> Result<Segmentation> {
        let mut req = req.clone();
        req.instructions = self.instructions()?;
        let body = slim_json(&req, self.config.decimals)?;
        self.log(&format!("{}.request.json", req.episode_id), &body)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| Error::Network(e.to_string()))?;
        let mut last_err = None;
        for attempt in 0..self.config.attempts {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.attempt(&client, &body) {
                Ok(text) => {
                    self.log(&format!("{}.response.json", req.episode_id), &text)?;
                    return parse_response(&text, &req.episode_id, req.episode_len);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::warn!("{}: attempt {} failed: {e}", req.episode_id, attempt + 1);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Network("no attempts made".into())))
    }
}

/// Instantiates the configured provider. `log_dir` receives HTTP traffic.
pub fn make_provider(cfg: &ProviderConfig, log_dir: Option<&Path>) -> Result<Box<dyn SegmentationProvider + Send + Sync>> {
    cfg.validate()?;
    Ok(match cfg {
        ProviderConfig::File { path } => Box::new(FileProvider { path: path.clone() }),
        ProviderConfig::Mock => Box::new(MockProvider),
        ProviderConfig::Http(h) => Box::new(HttpProvider {
            config: h.clone(),
            log_dir: log_dir.map(Path::to_path_buf),
        }),
    })
}

/// Character budget used for request sampling under this provider.
pub fn request_budget(cfg: &ProviderConfig) -> (usize, u32) {
    match cfg {
        ProviderConfig::Http(h) => (h.max_chars, h.decimals),
        _ => (default_max_chars(), default_decimals()),
    }
}

pub fn fetch_segmentation(req: &ProviderRequest, cfg: &ProviderConfig, log_dir: Option<&Path>) -> Result<Segmentation> {
    make_provider(cfg, log_dir)?.fetch(req)
}
