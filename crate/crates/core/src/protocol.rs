//! The model-output grammar.
//!
//! A model turn is a sequence of tag-delimited segments:
//!
//! ```text
//! <think>...</think>
//! <tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [x1, y1, x2, y2]}}</tool_call>
//! <answer>...</answer>
//! ```
//!
//! Strict mode allows only whitespace between tags, forbids nesting and
//! requires `<answer>` to be the last segment. Lenient mode skips stray
//! text, recovers unclosed trailing segments and keeps malformed tool-call
//! payloads as [`ToolCallPayload::Unparseable`] instead of failing.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::trajectory::{Region, StepRecord, Trajectory};
use crate::Mode;

pub const ZOOM_TOOL_NAME: &str = "image_zoom_in_tool";

const THINK: (&str, &str) = ("<think>", "</think>");
const TOOL_CALL: (&str, &str) = ("<tool_call>", "</tool_call>");
const ANSWER: (&str, &str) = ("<answer>", "</answer>");
const ALL_TAGS: [&str; 6] = [
    "<think>",
    "</think>",
    "<tool_call>",
    "</tool_call>",
    "<answer>",
    "</answer>",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("empty input")]
    EmptyInput,
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("no segments found")]
    NoSegments,
    #[error("unknown tag `{tag}` at byte {at}")]
    UnknownTag { tag: String, at: usize },
    #[error("text outside tags at byte {at}")]
    TextOutsideTags { at: usize },
    #[error("unclosed `{tag}` at byte {at}")]
    Unclosed { tag: &'static str, at: usize },
    #[error("stray `{tag}` at byte {at}")]
    StrayClose { tag: &'static str, at: usize },
    #[error("`{inner}` nested inside `{outer}` at byte {at}")]
    Nested {
        outer: &'static str,
        inner: &'static str,
        at: usize,
    },
    #[error("segment after <answer> at byte {at}")]
    AnswerNotLast { at: usize },
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("no segments to serialize")]
    EmptySegments,
    #[error("segment {index} violates the grammar: {reason}")]
    InvalidSegment { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub bbox_2d: [i64; 4],
}

impl ToolInvocation {
    pub fn zoom(region: Region) -> Self {
        Self {
            name: ZOOM_TOOL_NAME.to_string(),
            bbox_2d: region.into(),
        }
    }

    pub fn region(&self) -> Region {
        Region::from(self.bbox_2d)
    }

    /// Wire payload with the exact key layout
    /// `{"name": ..., "arguments": {"bbox_2d": [...]}}`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Args {
            bbox_2d: [i64; 4],
        }
        #[derive(Serialize)]
        struct Wire<'a> {
            name: &'a str,
            arguments: Args,
        }
        serde_json::to_string(&Wire {
            name: &self.name,
            arguments: Args {
                bbox_2d: self.bbox_2d,
            },
        })
        .expect("tool call serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolCallPayload {
    Parsed(ToolInvocation),
    /// Lenient mode only: the raw body and why it failed to parse.
    Unparseable { raw: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Think(String),
    ToolCall(ToolCallPayload),
    Answer(String),
}

impl Segment {
    pub fn zoom(region: Region) -> Self {
        Segment::ToolCall(ToolCallPayload::Parsed(ToolInvocation::zoom(region)))
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parse raw bytes; invalid UTF-8 is a structured error.
pub fn parse_output_bytes(bytes: &[u8], mode: Mode) -> Result<Vec<Segment>, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ProtocolError::InvalidUtf8)?;
    parse_output(text, mode)
}

pub fn parse_output(text: &str, mode: Mode) -> Result<Vec<Segment>, ProtocolError> {
    if text.trim().is_empty() {
        return Err(ProtocolError::EmptyInput);
    }
    let strict = mode == Mode::Strict;
    let mut segments = Vec::new();
    let mut pos = 0;

    while pos < text.len() {
        let rest = &text[pos..];
        let Some(lt) = rest.find('<') else {
            if strict && !rest.trim().is_empty() {
                return Err(ProtocolError::TextOutsideTags {
                    at: pos + (rest.len() - rest.trim_start().len()),
                });
            }
            break;
        };
        let gap = &rest[..lt];
        if strict && !gap.trim().is_empty() {
            return Err(ProtocolError::TextOutsideTags {
                at: pos + (gap.len() - gap.trim_start().len()),
            });
        }
        let at = pos + lt;
        let here = &text[at..];

        let opener = [THINK, TOOL_CALL, ANSWER]
            .into_iter()
            .find(|(open, _)| here.starts_with(open));
        let Some((open, close)) = opener else {
            if let Some(tag) = ALL_TAGS.iter().find(|t| here.starts_with(**t)) {
                if strict {
                    return Err(ProtocolError::StrayClose { tag, at });
                }
                pos = at + tag.len();
                continue;
            }
            if strict {
                return Err(match tag_like(here) {
                    Some(tag) => ProtocolError::UnknownTag {
                        tag: tag.to_string(),
                        at,
                    },
                    None => ProtocolError::TextOutsideTags { at },
                });
            }
            pos = at + 1;
            continue;
        };

        if strict && matches!(segments.last(), Some(Segment::Answer(_))) {
            return Err(ProtocolError::AnswerNotLast { at });
        }

        let body_start = at + open.len();
        let body_rest = &text[body_start..];
        let (body, next) = match body_rest.find(close) {
            Some(end) => (&body_rest[..end], body_start + end + close.len()),
            None if strict => return Err(ProtocolError::Unclosed { tag: open, at }),
            None => (body_rest, text.len()),
        };
        if strict {
            if let Some((inner, off)) = first_tag_in(body) {
                return Err(ProtocolError::Nested {
                    outer: open,
                    inner,
                    at: body_start + off,
                });
            }
        }

        let seg = match open {
            "<think>" => Segment::Think(body.trim().to_string()),
            "<answer>" => Segment::Answer(body.trim().to_string()),
            _ => match parse_tool_call(body, mode) {
                Ok(call) => Segment::ToolCall(ToolCallPayload::Parsed(call)),
                Err(e) if strict => return Err(e),
                Err(e) => Segment::ToolCall(ToolCallPayload::Unparseable {
                    raw: body.trim().to_string(),
                    reason: e.to_string(),
                }),
            },
        };
        segments.push(seg);
        pos = next;
    }

    if segments.is_empty() {
        return Err(ProtocolError::NoSegments);
    }
    Ok(segments)
}

/// `<name>` or `</name>` at the start of `s`, if it looks like a tag.
fn tag_like(s: &str) -> Option<&str> {
    let end = s.find('>')?;
    let inner = s[1..end].strip_prefix('/').unwrap_or(&s[1..end]);
    let mut chars = inner.chars();
    let first = chars.next()?;
    let ok = (first.is_ascii_alphabetic() || first == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    ok.then(|| &s[..=end])
}

fn first_tag_in(body: &str) -> Option<(&'static str, usize)> {
    ALL_TAGS
        .iter()
        .filter_map(|t| body.find(t).map(|i| (*t, i)))
        .min_by_key(|(_, i)| *i)
}

fn parse_tool_call(body: &str, mode: Mode) -> Result<ToolInvocation, ProtocolError> {
    let bad = |m: &str| ProtocolError::MalformedToolCall(m.to_string());
    let v: Value = serde_json::from_str(body.trim()).map_err(|e| bad(&e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("payload is not an object"))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string `name`"))?;
    let args = obj
        .get("arguments")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("missing object `arguments`"))?;
    let bbox = args
        .get("bbox_2d")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array `arguments.bbox_2d`"))?;

    if mode == Mode::Strict {
        if name != ZOOM_TOOL_NAME {
            return Err(bad(&format!("unknown tool `{name}`")));
        }
        if obj.len() != 2 {
            return Err(bad("unexpected keys in payload"));
        }
        if args.len() != 1 {
            return Err(bad("unexpected keys in `arguments`"));
        }
    }
    if bbox.len() != 4 {
        return Err(bad("bbox_2d must have exactly 4 entries"));
    }
    let mut out = [0i64; 4];
    for (slot, val) in out.iter_mut().zip(bbox) {
        *slot = match (val.as_i64(), mode) {
            (Some(i), _) => i,
            (None, Mode::Lenient) => val
                .as_f64()
                .filter(|f| f.is_finite() && f.abs() < 1e15)
                .map(|f| f.round() as i64)
                .ok_or_else(|| bad("bbox_2d entries must be numbers"))?,
            (None, Mode::Strict) => return Err(bad("bbox_2d entries must be integers")),
        };
    }
    Ok(ToolInvocation {
        name: name.to_string(),
        bbox_2d: out,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn check_text(index: usize, text: &str) -> Result<(), ProtocolError> {
    let invalid = |reason: &str| ProtocolError::InvalidSegment {
        index,
        reason: reason.to_string(),
    };
    if text.trim() != text {
        return Err(invalid("text has surrounding whitespace"));
    }
    if let Some((tag, _)) = first_tag_in(text) {
        return Err(invalid(&format!("text contains `{tag}`")));
    }
    Ok(())
}

pub fn serialize_segments(segments: &[Segment]) -> Result<String, ProtocolError> {
    if segments.is_empty() {
        return Err(ProtocolError::EmptySegments);
    }
    let parts = segments
        .iter()
        .enumerate()
        .map(|(i, seg)| match seg {
            Segment::Think(t) => check_text(i, t).map(|_| format!("<think>{t}</think>")),
            Segment::Answer(t) => check_text(i, t).map(|_| format!("<answer>{t}</answer>")),
            Segment::ToolCall(ToolCallPayload::Parsed(call)) => {
                Ok(format!("<tool_call>{}</tool_call>", call.to_json()))
            }
            Segment::ToolCall(ToolCallPayload::Unparseable { .. }) => {
                Err(ProtocolError::InvalidSegment {
                    index: i,
                    reason: "unparseable tool call".into(),
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.join("\n"))
}

// ---------------------------------------------------------------------------
// Format classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Direct,
    ZoomIn,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub valid: bool,
    pub shape: Shape,
}

impl FormatVerdict {
    fn of(shape: Shape) -> Self {
        Self {
            valid: shape != Shape::Invalid,
            shape,
        }
    }
}

/// Direct: thinks then exactly one final answer, no tool calls.
/// ZoomIn: at least one tool call, every run of consecutive tool calls
/// immediately preceded by a think, final answer. Anything else is Invalid.
pub fn classify_format(segments: &[Segment]) -> FormatVerdict {
    let Some((Segment::Answer(_), body)) = segments.split_last() else {
        return FormatVerdict::of(Shape::Invalid);
    };
    let mut tool_calls = 0;
    for (i, seg) in body.iter().enumerate() {
        match seg {
            Segment::Answer(_) => return FormatVerdict::of(Shape::Invalid),
            Segment::ToolCall(ToolCallPayload::Unparseable { .. }) => {
                return FormatVerdict::of(Shape::Invalid)
            }
            Segment::ToolCall(ToolCallPayload::Parsed(_)) => {
                tool_calls += 1;
                let run_head = !matches!(body.get(i.wrapping_sub(1)), Some(Segment::ToolCall(_)));
                if run_head && !matches!(i.checked_sub(1).map(|j| &body[j]), Some(Segment::Think(_))) {
                    return FormatVerdict::of(Shape::Invalid);
                }
            }
            Segment::Think(_) => {}
        }
    }
    FormatVerdict::of(if tool_calls == 0 {
        Shape::Direct
    } else {
        Shape::ZoomIn
    })
}

/// Model-output segments of a trajectory (observations dropped).
pub fn segments_of(traj: &Trajectory) -> Vec<Segment> {
    traj.steps
        .iter()
        .filter_map(|s| match s {
            StepRecord::Think { text } => Some(Segment::Think(text.clone())),
            StepRecord::ToolCall { region, .. } => Some(Segment::zoom(*region)),
            StepRecord::Answer { text } => Some(Segment::Answer(text.clone())),
            StepRecord::Observation { .. } => None,
        })
        .collect()
}

/// Format verdict of a whole episode. Episodes that did not end in an
/// answer are Invalid.
pub fn classify_trajectory(traj: &Trajectory) -> FormatVerdict {
    if traj.answer().is_none() {
        return FormatVerdict::of(Shape::Invalid);
    }
    classify_format(&segments_of(traj))
}
