//! The interactive crop-and-zoom loop.
//!
//! Each turn the policy's output is parsed; every zoom request crops the
//! current view (the latest observation, or the root image), enlarges it by
//! the zoom factor and appends it to the trajectory as an observation. The
//! episode ends on an answer, a limit, or an error.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::policy::{Policy, TurnContext};
use crate::protocol::{parse_output, Segment, ToolCallPayload, ZOOM_TOOL_NAME};
use crate::trajectory::{
    FrameTransform, ImageRef, Region, StepRecord, Terminal, Trajectory,
    TrajectoryError,
};
use crate::Mode;

pub const DEFAULT_PATCH_SIZE: u32 = 28;
pub const DEFAULT_ZOOM_FACTOR: u32 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FocusError {
    #[error("invalid region {region} for a {width}x{height} view")]
    InvalidRegion {
        region: Region,
        width: u32,
        height: u32,
    },
    #[error("dimensions must be positive (got {width}x{height}, patch {patch})")]
    ZeroDimension { width: u32, height: u32, patch: u32 },
    #[error(transparent)]
    Image(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLimits {
    pub max_tool_calls: u32,
    pub max_total_added_tokens: u64,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        Self {
            max_tool_calls: 6,
            max_total_added_tokens: 16384,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub patch_size: u32,
    pub zoom_factor: u32,
    pub upsample: Upsample,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            zoom_factor: DEFAULT_ZOOM_FACTOR,
            upsample: Upsample::Nearest,
        }
    }
}

/// `ceil(width / patch) * ceil(height / patch)`.
pub fn count_visual_tokens(width: u32, height: u32, patch: u32) -> Result<u64, FocusError> {
    if width == 0 || height == 0 || patch == 0 {
        return Err(FocusError::ZeroDimension { width, height, patch });
    }
    Ok(width.div_ceil(patch) as u64 * height.div_ceil(patch) as u64)
}

/// Result of a crop-and-enlarge.
#[derive(Debug, Clone)]
pub struct Zoomed {
    pub image: ImageRef,
    /// The region actually cropped (differs from the request when clamped).
    pub region: Region,
    pub clamped: bool,
}

/// Crop `region` out of `image` and enlarge it twice with nearest-neighbour
/// sampling.
pub fn crop_zoom(image: &ImageRef, region: Region) -> Result<ImageRef, FocusError> {
    crop_zoom_with(image, region, Mode::Strict, DEFAULT_ZOOM_FACTOR, Upsample::Nearest)
        .map(|z| z.image)
}

/// Crop and enlarge by `factor`. Lenient mode clamps out-of-bounds regions
/// into the image and flags the result as clamped.
pub fn crop_zoom_with(
    image: &ImageRef,
    region: Region,
    mode: Mode,
    factor: u32,
    upsample: Upsample,
) -> Result<Zoomed, FocusError> {
    let (w, h) = (image.width(), image.height());
    let invalid = || FocusError::InvalidRegion {
        region,
        width: w,
        height: h,
    };
    let (effective, clamped) = if region.is_valid_in(w, h) {
        (region, false)
    } else if mode == Mode::Lenient && region.x1 < region.x2 && region.y1 < region.y2 {
        (region.clamped_to(w, h).ok_or_else(invalid)?, true)
    } else {
        return Err(invalid());
    };
    assert!(factor >= 1, "zoom factor must be at least 1");

    let out_w = (effective.width() as u32) * factor;
    let out_h = (effective.height() as u32) * factor;
    let id = format!("{}/zoom{}", image.id(), effective);
    let zoomed = match image.raster()? {
        Some(src) => {
            let raster = match upsample {
                Upsample::Nearest => upsample_nearest(&src, effective, factor),
                Upsample::Bilinear => upsample_bilinear(&src, effective, factor),
            };
            ImageRef::from_raster(id, raster)?
        }
        None => ImageRef::detached(id, out_w, out_h)?,
    };
    Ok(Zoomed {
        image: zoomed,
        region: effective,
        clamped,
    })
}

fn upsample_nearest(src: &RgbImage, r: Region, factor: u32) -> RgbImage {
    let (x0, y0) = (r.x1 as u32, r.y1 as u32);
    RgbImage::from_fn(r.width() as u32 * factor, r.height() as u32 * factor, |x, y| {
        *src.get_pixel(x0 + x / factor, y0 + y / factor)
    })
}

fn upsample_bilinear(src: &RgbImage, r: Region, factor: u32) -> RgbImage {
    let (cw, ch) = (r.width() as f64, r.height() as f64);
    let f = factor as f64;
    RgbImage::from_fn(r.width() as u32 * factor, r.height() as u32 * factor, |x, y| {
        let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, cw - 1.0);
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, ch - 1.0);
        let (ix, iy) = (sx.floor() as u32, sy.floor() as u32);
        let (fx, fy) = (sx - ix as f64, sy - iy as f64);
        let ix1 = (ix + 1).min(cw as u32 - 1);
        let iy1 = (iy + 1).min(ch as u32 - 1);
        let px = |xx: u32, yy: u32| src.get_pixel(r.x1 as u32 + xx, r.y1 as u32 + yy);
        let (p00, p10, p01, p11) = (px(ix, iy), px(ix1, iy), px(ix, iy1), px(ix1, iy1));
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bot = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            *o = (top * (1.0 - fy) + bot * fy).round() as u8;
        }
        Rgb(out)
    })
}

/// Mutable state of one episode. Confined to the thread running it.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub root_image: ImageRef,
    /// Root-first frame chain; one transform per observation.
    pub chain: Vec<FrameTransform>,
    pub view: ImageRef,
    pub trajectory: Trajectory,
    pub steps_used: u32,
    pub added_tokens: u64,
    pub limits: EpisodeLimits,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FocusEngine {
    pub config: EngineConfig,
}

impl FocusEngine {
    pub fn new(config: EngineConfig) -> Self {
        Self { config }
    }

    /// Base visual-token cost of the root image.
    pub fn base_tokens(&self, image: &ImageRef) -> u64 {
        count_visual_tokens(image.width(), image.height(), self.config.patch_size)
            .expect("images have positive dimensions")
    }

    /// Run one episode. Only a root image that cannot be decoded is an
    /// `Err`; everything that happens during the episode is recorded in the
    /// trajectory's terminal state.
    pub fn run(
        &self,
        policy: &dyn Policy,
        query: &str,
        image: &ImageRef,
        limits: EpisodeLimits,
        mode: Mode,
        seed: u64,
    ) -> Result<Trajectory, FocusError> {
        self.run_with_state(policy, query, image, limits, mode, seed)
            .map(|s| s.trajectory)
    }

    pub fn run_with_state(
        &self,
        policy: &dyn Policy,
        query: &str,
        image: &ImageRef,
        limits: EpisodeLimits,
        mode: Mode,
        seed: u64,
    ) -> Result<EpisodeState, FocusError> {
        // Decode path-backed roots once rather than per crop.
        let root = image.materialized()?;
        let mut st = EpisodeState {
            root_image: image.clone(),
            chain: Vec::new(),
            view: root,
            trajectory: Trajectory::new(image.clone(), query),
            steps_used: 0,
            added_tokens: 0,
            limits,
        };

        for turn in 0.. {
            let ctx = TurnContext {
                query,
                image,
                history: &st.trajectory.steps,
                turn,
                seed,
            };
            let raw = match policy.next_turn(&ctx) {
                Ok(raw) => raw,
                Err(e) => return Ok(finish(st, Terminal::Error { reason: format!("PolicyError: {e}") })),
            };
            let segments = match parse_output(&raw, mode) {
                Ok(s) => s,
                Err(e) => return Ok(finish(st, Terminal::Error { reason: format!("ParseError: {e}") })),
            };

            let mut acted = false;
            for seg in segments {
                match seg {
                    Segment::Think(text) => st.trajectory.steps.push(StepRecord::Think { text }),
                    Segment::Answer(text) => {
                        st.trajectory.steps.push(StepRecord::Answer { text: text.clone() });
                        return Ok(finish(st, Terminal::Answered { answer: text }));
                    }
                    Segment::ToolCall(payload) => {
                        acted = true;
                        let call = match payload {
                            ToolCallPayload::Parsed(call) => call,
                            ToolCallPayload::Unparseable { reason, .. } => {
                                let reason = format!("ParseError: {reason}");
                                return Ok(finish(st, Terminal::Error { reason }));
                            }
                        };
                        if call.name != ZOOM_TOOL_NAME {
                            let reason = format!("UnknownTool: {}", call.name);
                            return Ok(finish(st, Terminal::Error { reason }));
                        }
                        if let Some(t) = self.apply_zoom(&mut st, call.region(), mode)? {
                            return Ok(finish(st, t));
                        }
                    }
                }
            }
            if !acted {
                let reason = "NoAction: turn produced neither a tool call nor an answer".into();
                return Ok(finish(st, Terminal::Error { reason }));
            }
        }
        unreachable!("the turn loop only exits by returning")
    }

    /// Execute one zoom. Returns a terminal state if the episode must stop.
    fn apply_zoom(
        &self,
        st: &mut EpisodeState,
        region: Region,
        mode: Mode,
    ) -> Result<Option<Terminal>, FocusError> {
        if st.steps_used >= st.limits.max_tool_calls {
            return Ok(Some(Terminal::StepLimit));
        }
        let zoomed = match crop_zoom_with(
            &st.view,
            region,
            mode,
            self.config.zoom_factor,
            self.config.upsample,
        ) {
            Ok(z) => z,
            Err(FocusError::InvalidRegion { region, width, height }) => {
                let reason = format!("InvalidRegion: {region} in a {width}x{height} view");
                return Ok(Some(Terminal::Error { reason }));
            }
            Err(e) => return Err(e),
        };
        let tokens = count_visual_tokens(
            zoomed.image.width(),
            zoomed.image.height(),
            self.config.patch_size,
        )?;
        if st.added_tokens + tokens > st.limits.max_total_added_tokens {
            return Ok(Some(Terminal::StepLimit));
        }
        if zoomed.clamped {
            st.trajectory
                .warnings
                .push(format!("clamped {region} to {} in a {}x{} view", zoomed.region, st.view.width(), st.view.height()));
        }
        st.trajectory.steps.push(StepRecord::ToolCall {
            region: zoomed.region,
            clamped: zoomed.clamped,
        });
        st.trajectory.steps.push(StepRecord::Observation {
            image: zoomed.image.clone(),
            added_visual_tokens: tokens,
        });
        st.chain
            .push(FrameTransform::zoom(zoomed.region, self.config.zoom_factor));
        st.steps_used += 1;
        st.added_tokens += tokens;
        st.view = zoomed.image;
        Ok(None)
    }
}

fn finish(mut st: EpisodeState, terminal: Terminal) -> EpisodeState {
    st.trajectory.terminal = terminal;
    st
}

/// Run an episode with the default engine configuration and seed 0.
pub fn run_episode(
    policy: &dyn Policy,
    query: &str,
    image: &ImageRef,
    limits: EpisodeLimits,
    mode: Mode,
) -> Result<Trajectory, FocusError> {
    FocusEngine::default().run(policy, query, image, limits, mode, 0)
}
