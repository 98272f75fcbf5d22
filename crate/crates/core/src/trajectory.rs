//! Domain types shared by every other module: images, regions, coordinate
//! frames, reasoning steps, trajectories and token accounting.
//!
//! A [`Trajectory`] is the record of one interactive episode. Its steps
//! alternate between model output (`Think`, `ToolCall`, `Answer`) and
//! engine-injected `Observation`s carrying the zoomed view. The prefix of
//! steps before index `i` is the history the policy conditioned on when it
//! produced step `i`.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Mode;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("region {region} is invalid in a {width}x{height} frame")]
    InvalidRegion {
        region: Region,
        width: u32,
        height: u32,
    },
    #[error("history index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("jsonl line {line}: {message}")]
    Schema { line: usize, message: String },
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Where the pixels of an image live.
#[derive(Clone)]
pub enum ImageSource {
    /// Row-major RGB payload held in memory.
    Raster(Arc<RgbImage>),
    /// An image file on disk, decoded on demand.
    Path(PathBuf),
    /// Dimensions only. Used for synthetic manifests and for observations
    /// read back from JSONL, where pixels are not retained.
    Detached,
}

impl fmt::Debug for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::Raster(r) => write!(f, "Raster({}x{})", r.width(), r.height()),
            ImageSource::Path(p) => write!(f, "Path({})", p.display()),
            ImageSource::Detached => f.write_str("Detached"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageRef {
    id: String,
    width: u32,
    height: u32,
    source: ImageSource,
}

impl ImageRef {
    pub fn detached(id: impl Into<String>, width: u32, height: u32) -> Result<Self, TrajectoryError> {
        check_dims(width, height)?;
        Ok(Self {
            id: id.into(),
            width,
            height,
            source: ImageSource::Detached,
        })
    }

    pub fn from_raster(id: impl Into<String>, raster: RgbImage) -> Result<Self, TrajectoryError> {
        let (width, height) = raster.dimensions();
        check_dims(width, height)?;
        Ok(Self {
            id: id.into(),
            width,
            height,
            source: ImageSource::Raster(Arc::new(raster)),
        })
    }

    /// Raster from a raw row-major RGB buffer.
    pub fn from_rgb(
        id: impl Into<String>,
        width: u32,
        height: u32,
        rgb: Vec<u8>,
    ) -> Result<Self, TrajectoryError> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize * 3;
        if rgb.len() != expected {
            return Err(TrajectoryError::InvalidImage(format!(
                "raster has {} bytes, expected {expected} for {width}x{height}",
                rgb.len()
            )));
        }
        let raster = RgbImage::from_raw(width, height, rgb)
            .ok_or_else(|| TrajectoryError::InvalidImage("raster size mismatch".into()))?;
        Self::from_raster(id, raster)
    }

    /// File-backed image with caller-supplied dimensions.
    pub fn from_path_with_dims(
        id: impl Into<String>,
        path: impl Into<PathBuf>,
        width: u32,
        height: u32,
    ) -> Result<Self, TrajectoryError> {
        check_dims(width, height)?;
        Ok(Self {
            id: id.into(),
            width,
            height,
            source: ImageSource::Path(path.into()),
        })
    }

    /// File-backed image; dimensions are read from the file header.
    pub fn open(id: impl Into<String>, path: impl Into<PathBuf>) -> Result<Self, TrajectoryError> {
        let path = path.into();
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| TrajectoryError::InvalidImage(format!("{}: {e}", path.display())))?;
        Self::from_path_with_dims(id, path, width, height)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn source(&self) -> &ImageSource {
        &self.source
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match &self.source {
            ImageSource::Path(p) => Some(p),
            _ => None,
        }
    }

    pub fn has_pixels(&self) -> bool {
        !matches!(self.source, ImageSource::Detached)
    }

    /// Decode the pixels, loading from disk for path-backed images.
    /// Returns `None` for detached images.
    pub fn raster(&self) -> Result<Option<Arc<RgbImage>>, TrajectoryError> {
        match &self.source {
            ImageSource::Raster(r) => Ok(Some(Arc::clone(r))),
            ImageSource::Detached => Ok(None),
            ImageSource::Path(p) => {
                let img = image::open(p)
                    .map_err(|e| TrajectoryError::InvalidImage(format!("{}: {e}", p.display())))?
                    .to_rgb8();
                if img.dimensions() != (self.width, self.height) {
                    return Err(TrajectoryError::InvalidImage(format!(
                        "{} decodes to {}x{}, declared {}x{}",
                        p.display(),
                        img.width(),
                        img.height(),
                        self.width,
                        self.height
                    )));
                }
                Ok(Some(Arc::new(img)))
            }
        }
    }

    /// Same image with the pixels decoded into memory.
    pub fn materialized(&self) -> Result<Self, TrajectoryError> {
        match self.raster()? {
            Some(r) if !matches!(self.source, ImageSource::Raster(_)) => Ok(Self {
                source: ImageSource::Raster(r),
                ..self.clone()
            }),
            _ => Ok(self.clone()),
        }
    }

    /// Full-frame region of this image.
    pub fn bounds(&self) -> Region {
        Region::new(0, 0, self.width as i64, self.height as i64)
    }
}

impl PartialEq for ImageRef {
    /// Identity is (id, dimensions, path); pixel payloads are not compared.
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.width == other.width
            && self.height == other.height
            && self.path() == other.path()
    }
}

fn check_dims(width: u32, height: u32) -> Result<(), TrajectoryError> {
    if width == 0 || height == 0 {
        return Err(TrajectoryError::InvalidImage(format!(
            "dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ImageJson {
    id: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
}

impl Serialize for ImageRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ImageJson {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            path: self.path().map(|p| p.to_path_buf()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = ImageJson::deserialize(d)?;
        let r = match j.path {
            Some(p) => ImageRef::from_path_with_dims(j.id, p, j.width, j.height),
            None => ImageRef::detached(j.id, j.width, j.height),
        };
        r.map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Regions and frames
// ---------------------------------------------------------------------------

/// Pixel box with exclusive upper bounds: width is `x2 - x1`.
///
/// Coordinates are signed so that model-emitted boxes can be represented
/// before validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct Region {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl From<[i64; 4]> for Region {
    fn from(b: [i64; 4]) -> Self {
        Region::new(b[0], b[1], b[2], b[3])
    }
}

impl From<Region> for [i64; 4] {
    fn from(r: Region) -> Self {
        [r.x1, r.y1, r.x2, r.y2]
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Region {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn is_valid_in(&self, width: u32, height: u32) -> bool {
        0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= width as i64
            && 0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= height as i64
    }

    pub fn validate_in(&self, width: u32, height: u32) -> Result<(), TrajectoryError> {
        if self.is_valid_in(width, height) {
            Ok(())
        } else {
            Err(TrajectoryError::InvalidRegion {
                region: *self,
                width,
                height,
            })
        }
    }

    /// Clamp into the frame. `None` if nothing of positive area is left.
    pub fn clamped_to(&self, width: u32, height: u32) -> Option<Region> {
        let (w, h) = (width as i64, height as i64);
        let r = Region::new(
            self.x1.clamp(0, w),
            self.y1.clamp(0, h),
            self.x2.clamp(0, w),
            self.y2.clamp(0, h),
        );
        (r.x1 < r.x2 && r.y1 < r.y2).then_some(r)
    }

    pub fn contains_point(&self, x: i64, y: i64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }
}

pub type Rational = Ratio<i64>;

/// Region with rational corners, used for exact frame arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactRegion {
    pub x1: Rational,
    pub y1: Rational,
    pub x2: Rational,
    pub y2: Rational,
}

impl From<Region> for ExactRegion {
    fn from(r: Region) -> Self {
        Self {
            x1: Rational::from_integer(r.x1),
            y1: Rational::from_integer(r.y1),
            x2: Rational::from_integer(r.x2),
            y2: Rational::from_integer(r.y2),
        }
    }
}

impl ExactRegion {
    pub fn is_integral(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_integer())
    }

    /// Integer region when every corner is integral.
    pub fn to_region(&self) -> Option<Region> {
        self.is_integral().then(|| {
            Region::new(
                self.x1.to_integer(),
                self.y1.to_integer(),
                self.x2.to_integer(),
                self.y2.to_integer(),
            )
        })
    }

    /// Smallest integer region covering this one.
    pub fn covering(&self) -> Region {
        Region::new(
            self.x1.floor().to_integer(),
            self.y1.floor().to_integer(),
            self.x2.ceil().to_integer(),
            self.y2.ceil().to_integer(),
        )
    }
}

/// Affine map from a parent frame into a child frame:
/// `child = (parent - offset) * scale`.
///
/// `scale` counts child pixels per parent pixel; offsets are in parent
/// pixels. A crop of `region` enlarged by `k` is
/// `FrameTransform::zoom(region, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameTransform {
    pub scale: Rational,
    pub offset_x: Rational,
    pub offset_y: Rational,
}

impl Default for FrameTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl FrameTransform {
    pub fn identity() -> Self {
        Self {
            scale: Rational::from_integer(1),
            offset_x: Rational::from_integer(0),
            offset_y: Rational::from_integer(0),
        }
    }

    pub fn new(scale: Rational, offset_x: Rational, offset_y: Rational) -> Self {
        assert!(scale > Rational::from_integer(0), "frame scale must be positive");
        Self {
            scale,
            offset_x,
            offset_y,
        }
    }

    /// Transform produced by cropping `region` and enlarging it `factor` times.
    pub fn zoom(region: Region, factor: u32) -> Self {
        Self::new(
            Rational::from_integer(factor as i64),
            Rational::from_integer(region.x1),
            Rational::from_integer(region.y1),
        )
    }

    /// `self` followed by `next` (parent → child → grandchild).
    pub fn then(&self, next: &FrameTransform) -> FrameTransform {
        FrameTransform {
            scale: self.scale * next.scale,
            offset_x: self.offset_x + next.offset_x / self.scale,
            offset_y: self.offset_y + next.offset_y / self.scale,
        }
    }

    pub fn forward(&self, r: &ExactRegion) -> ExactRegion {
        ExactRegion {
            x1: (r.x1 - self.offset_x) * self.scale,
            y1: (r.y1 - self.offset_y) * self.scale,
            x2: (r.x2 - self.offset_x) * self.scale,
            y2: (r.y2 - self.offset_y) * self.scale,
        }
    }

    pub fn inverse(&self, r: &ExactRegion) -> ExactRegion {
        ExactRegion {
            x1: r.x1 / self.scale + self.offset_x,
            y1: r.y1 / self.scale + self.offset_y,
            x2: r.x2 / self.scale + self.offset_x,
            y2: r.y2 / self.scale + self.offset_y,
        }
    }
}

/// Compose a root-first chain into a single root → deepest transform.
pub fn compose_chain(chain: &[FrameTransform]) -> FrameTransform {
    chain
        .iter()
        .fold(FrameTransform::identity(), |acc, t| acc.then(t))
}

/// Map a region in the deepest frame of `chain` back to root pixels, exactly.
pub fn to_root_exact(region: Region, chain: &[FrameTransform]) -> ExactRegion {
    let root = chain
        .iter()
        .rev()
        .fold(ExactRegion::from(region), |r, t| t.inverse(&r));
    debug_assert!(root.x1 < root.x2 && root.y1 < root.y2);
    root
}

/// Map a region in the deepest frame of `chain` back to root pixels.
///
/// Exact when the mapped corners are integral; otherwise the smallest
/// covering integer box is returned.
pub fn to_root_frame(region: Region, chain: &[FrameTransform]) -> Region {
    let exact = to_root_exact(region, chain);
    exact.to_region().unwrap_or_else(|| exact.covering())
}

/// Map a root-frame region down into the deepest frame of `chain`.
pub fn from_root_exact(region: &ExactRegion, chain: &[FrameTransform]) -> ExactRegion {
    chain.iter().fold(*region, |r, t| t.forward(&r))
}

// ---------------------------------------------------------------------------
// Steps and trajectories
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StepKind {
    Think,
    ToolCall,
    Observation,
    Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRecord {
    Think {
        text: String,
    },
    /// One zoom request. `region` is in the frame of the most recent
    /// observation, or the root image when there is none.
    ToolCall {
        region: Region,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        clamped: bool,
    },
    Observation {
        image: ImageRef,
        added_visual_tokens: u64,
    },
    Answer {
        text: String,
    },
}

impl StepRecord {
    pub fn think(text: impl Into<String>) -> Self {
        StepRecord::Think { text: text.into() }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        StepRecord::Answer { text: text.into() }
    }

    pub fn tool_call(region: Region) -> Self {
        StepRecord::ToolCall {
            region,
            clamped: false,
        }
    }

    pub fn kind(&self) -> StepKind {
        match self {
            StepRecord::Think { .. } => StepKind::Think,
            StepRecord::ToolCall { .. } => StepKind::ToolCall,
            StepRecord::Observation { .. } => StepKind::Observation,
            StepRecord::Answer { .. } => StepKind::Answer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Terminal {
    Answered { answer: String },
    StepLimit,
    Error { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub image: ImageRef,
    pub query: String,
    pub steps: Vec<StepRecord>,
    pub terminal: Terminal,
    /// Lenient-mode repairs applied during the episode (e.g. clamped boxes).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn new(image: ImageRef, query: impl Into<String>) -> Self {
        Self {
            image,
            query: query.into(),
            steps: Vec::new(),
            terminal: Terminal::StepLimit,
            warnings: Vec::new(),
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.terminal {
            Terminal::Answered { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn zoom_calls(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.kind() == StepKind::ToolCall)
            .count()
    }

    pub fn tool_regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.steps.iter().filter_map(|s| match s {
            StepRecord::ToolCall { region, .. } => Some(*region),
            _ => None,
        })
    }

    /// Check the step-ordering invariants.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        validate_steps(&self.steps)
    }

    /// Frame chain (root first) implied by the zooms in this trajectory.
    pub fn frame_chain(&self, zoom_factor: u32) -> Vec<FrameTransform> {
        self.tool_regions()
            .map(|r| FrameTransform::zoom(r, zoom_factor))
            .collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

fn validate_steps(steps: &[StepRecord]) -> Result<(), TrajectoryError> {
    for (i, step) in steps.iter().enumerate() {
        match step {
            StepRecord::Observation { .. } => {
                if i == 0 || steps[i - 1].kind() != StepKind::ToolCall {
                    return Err(TrajectoryError::Malformed(format!(
                        "observation at step {i} does not follow a tool call"
                    )));
                }
            }
            StepRecord::Answer { .. } if i + 1 != steps.len() => {
                return Err(TrajectoryError::Malformed(format!(
                    "answer at step {i} is not the last step"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// The steps strictly before 1-based step `i`; `i` ranges over
/// `1..=steps.len() + 1`.
pub fn rebuild_history(traj: &Trajectory, i: usize) -> Result<&[StepRecord], TrajectoryError> {
    let len = traj.steps.len();
    if i == 0 || i > len + 1 {
        return Err(TrajectoryError::IndexOutOfRange { index: i, len });
    }
    Ok(&traj.steps[..i - 1])
}

// ---------------------------------------------------------------------------
// Token accounting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub base_visual_tokens: u64,
    pub added_visual_tokens: u64,
    pub zoom_calls: u64,
    pub text_tokens: u64,
}

impl TokenLedger {
    pub fn total_visual_tokens(&self) -> u64 {
        self.base_visual_tokens + self.added_visual_tokens
    }
}

/// Approximate text token count: each maximal alphanumeric run is one
/// token, as is every other non-whitespace character.
pub fn count_text_tokens(text: &str) -> u64 {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Ledger for a step list. Fails if an observation has no preceding tool call.
pub fn ledger_of_steps(steps: &[StepRecord], base_tokens: u64) -> Result<TokenLedger, TrajectoryError> {
    let mut ledger = TokenLedger {
        base_visual_tokens: base_tokens,
        ..TokenLedger::default()
    };
    for (i, step) in steps.iter().enumerate() {
        match step {
            StepRecord::Think { text } | StepRecord::Answer { text } => {
                ledger.text_tokens += count_text_tokens(text);
            }
            StepRecord::ToolCall { .. } => ledger.zoom_calls += 1,
            StepRecord::Observation {
                added_visual_tokens,
                ..
            } => {
                if i == 0 || steps[i - 1].kind() != StepKind::ToolCall {
                    return Err(TrajectoryError::Malformed(format!(
                        "observation at step {i} does not follow a tool call"
                    )));
                }
                ledger.added_visual_tokens += added_visual_tokens;
            }
        }
    }
    Ok(ledger)
}

pub fn ledger_of(traj: &Trajectory, base_tokens: u64) -> Result<TokenLedger, TrajectoryError> {
    ledger_of_steps(&traj.steps, base_tokens)
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

const TRAJECTORY_KEYS: &[&str] = &["image", "query", "steps", "terminal", "warnings"];
const IMAGE_KEYS: &[&str] = &["id", "width", "height", "path"];

fn reject_unknown(obj: &Value, allowed: &[&str], what: &str) -> Result<(), String> {
    let map = obj
        .as_object()
        .ok_or_else(|| format!("{what} must be an object"))?;
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(format!("unknown field `{k}` in {what}")),
        None => Ok(()),
    }
}

fn check_trajectory_fields(v: &Value) -> Result<(), String> {
    reject_unknown(v, TRAJECTORY_KEYS, "trajectory")?;
    if let Some(img) = v.get("image") {
        reject_unknown(img, IMAGE_KEYS, "image")?;
    }
    if let Some(steps) = v.get("steps").and_then(Value::as_array) {
        for step in steps {
            let allowed: &[&str] = match step.get("kind").and_then(Value::as_str) {
                Some("think") | Some("answer") => &["kind", "text"],
                Some("tool_call") => &["kind", "region", "clamped"],
                Some("observation") => &["kind", "image", "added_visual_tokens"],
                _ => continue,
            };
            reject_unknown(step, allowed, "step")?;
            if let Some(img) = step.get("image") {
                reject_unknown(img, IMAGE_KEYS, "observation image")?;
            }
        }
    }
    if let Some(t) = v.get("terminal") {
        let allowed: &[&str] = match t.get("status").and_then(Value::as_str) {
            Some("answered") => &["status", "answer"],
            Some("error") => &["status", "reason"],
            _ => &["status"],
        };
        reject_unknown(t, allowed, "terminal")?;
    }
    Ok(())
}

/// Parse a trajectory from a JSON value. Strict mode rejects unknown fields
/// and trajectories violating the step-ordering invariants.
pub fn trajectory_from_value(v: Value, mode: Mode) -> Result<Trajectory, String> {
    if mode == Mode::Strict {
        check_trajectory_fields(&v)?;
    }
    let t: Trajectory = serde_json::from_value(v).map_err(|e| e.to_string())?;
    if mode == Mode::Strict {
        t.validate().map_err(|e| e.to_string())?;
    }
    Ok(t)
}

/// Read one trajectory per non-blank line.
pub fn read_trajectories_jsonl(text: &str, mode: Mode) -> Result<Vec<Trajectory>, TrajectoryError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let schema = |message: String| TrajectoryError::Schema { line: i + 1, message };
            let v: Value = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
            trajectory_from_value(v, mode).map_err(schema)
        })
        .collect()
}

pub fn write_trajectories_jsonl(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        out.push_str(&t.to_json_line());
        out.push('\n');
    }
    out
}
