//! BVH motion-capture text format: skeleton hierarchy plus per-frame channel
//! table. The parser reports line/column on every failure and never panics on
//! malformed input; the serializer prints channels with six decimal places,
//! which makes serialize ∘ parse a fixed point after one round trip.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Hard cap on hierarchy nesting so hostile input cannot exhaust the stack.
const MAX_DEPTH: usize = 64;

/// One animated degree of freedom of a joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Xposition => "Xposition",
            Channel::Yposition => "Yposition",
            Channel::Zposition => "Zposition",
            Channel::Xrotation => "Xrotation",
            Channel::Yrotation => "Yrotation",
            Channel::Zrotation => "Zrotation",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s {
            "Xposition" => Some(Channel::Xposition),
            "Yposition" => Some(Channel::Yposition),
            "Zposition" => Some(Channel::Zposition),
            "Xrotation" => Some(Channel::Xrotation),
            "Yrotation" => Some(Channel::Yrotation),
            "Zrotation" => Some(Channel::Zrotation),
            _ => None,
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(
            self,
            Channel::Xrotation | Channel::Yrotation | Channel::Zrotation
        )
    }

    pub fn is_position(self) -> bool {
        !self.is_rotation()
    }

    /// Axis index for rotation channels (X = 0, Y = 1, Z = 2).
    pub fn axis(self) -> usize {
        match self {
            Channel::Xposition | Channel::Xrotation => 0,
            Channel::Yposition | Channel::Yrotation => 1,
            Channel::Zposition | Channel::Zrotation => 2,
        }
    }
}

/// One node of the skeleton hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint; `None` exactly for the root.
    pub parent: Option<usize>,
    /// Offset from the parent in file units.
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
    /// End-effector offset when the file declares an `End Site` block.
    pub end_offset: Option<[f64; 3]>,
}

/// Joint hierarchy in file order: parents always precede children and there
/// is exactly one root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::data(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        for (i, joint) in joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= i {
                    return Err(Error::data(format!(
                        "joint {} appears before its parent",
                        joint.name
                    )));
                }
            }
            if !joint.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::data(format!(
                    "joint {} has a non-finite offset",
                    joint.name
                )));
            }
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Total declared channel count, i.e. the motion-table width K.
    pub fn total_channels(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    /// Column of the first channel of each joint in the motion table.
    pub fn channel_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.joints.len());
        let mut at = 0;
        for joint in &self.joints {
            offsets.push(at);
            at += joint.channels.len();
        }
        offsets
    }

    /// Child indices per joint, in file order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.joints.len()];
        for (i, joint) in self.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                out[p].push(i);
            }
        }
        out
    }
}

/// Per-frame channel values matching a skeleton's declared channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionChannels {
    /// Seconds per frame.
    pub frame_time: f64,
    /// F×K values in declaration order.
    pub values: Array2<f64>,
}

impl MotionChannels {
    pub fn new(frame_time: f64, values: Array2<f64>) -> Result<Self> {
        if !(frame_time.is_finite() && frame_time > 0.0) {
            return Err(Error::data(format!("invalid frame time {frame_time}")));
        }
        if values.nrows() == 0 {
            return Err(Error::data("motion must contain at least one frame"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::data("motion table contains non-finite values"));
        }
        Ok(Self { frame_time, values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn frame_rate(&self) -> f64 {
        1.0 / self.frame_time
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    line: usize,
    col: usize,
}

/// Whitespace-separated tokens with braces split off, each tagged with its
/// 1-based source position.
fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let mut start: Option<usize> = None;
        for (byte, ch) in line.char_indices() {
            if ch.is_whitespace() || ch == '{' || ch == '}' {
                if let Some(s) = start.take() {
                    tokens.push(Token {
                        text: &line[s..byte],
                        line: line_idx + 1,
                        col: s + 1,
                    });
                }
                if ch == '{' || ch == '}' {
                    tokens.push(Token {
                        text: &line[byte..byte + 1],
                        line: line_idx + 1,
                        col: byte + 1,
                    });
                }
            } else if start.is_none() {
                start = Some(byte);
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                text: &line[s..],
                line: line_idx + 1,
                col: s + 1,
            });
        }
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    last_line: usize,
    last_col: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let tokens = tokenize(text);
        let (last_line, last_col) = tokens
            .last()
            .map(|t| (t.line, t.col + t.text.len()))
            .unwrap_or((1, 1));
        Parser {
            tokens,
            pos: 0,
            last_line,
            last_col,
        }
    }

    fn peek(&self) -> Option<Token<'a>> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self, what: &str) -> Result<Token<'a>> {
        match self.tokens.get(self.pos) {
            Some(&t) => {
                self.pos += 1;
                Ok(t)
            }
            None => Err(Error::Parse {
                line: self.last_line,
                col: self.last_col,
                msg: format!("unexpected end of input, expected {what}"),
            }),
        }
    }

    fn err_at(t: Token<'_>, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        }
    }

    fn expect(&mut self, keyword: &str) -> Result<Token<'a>> {
        let t = self.next(&format!("`{keyword}`"))?;
        if t.text != keyword {
            return Err(Self::err_at(
                t,
                format!("expected `{keyword}`, found `{}`", t.text),
            ));
        }
        Ok(t)
    }

    fn parse_f64(&mut self, what: &str) -> Result<f64> {
        let t = self.next(what)?;
        match t.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Self::err_at(
                t,
                format!("expected a finite number for {what}, found `{}`", t.text),
            )),
        }
    }

    fn parse_usize(&mut self, what: &str) -> Result<usize> {
        let t = self.next(what)?;
        t.text.parse::<usize>().map_err(|_| {
            Self::err_at(
                t,
                format!("expected a nonnegative integer for {what}, found `{}`", t.text),
            )
        })
    }

    fn parse_offset(&mut self) -> Result<[f64; 3]> {
        self.expect("OFFSET")?;
        Ok([
            self.parse_f64("an offset component")?,
            self.parse_f64("an offset component")?,
            self.parse_f64("an offset component")?,
        ])
    }

    /// Parse one `ROOT`/`JOINT` block (the keyword is already consumed) and
    /// append it plus its descendants to `joints`.
    fn parse_joint(
        &mut self,
        parent: Option<usize>,
        depth: usize,
        joints: &mut Vec<Joint>,
    ) -> Result<()> {
        if depth > MAX_DEPTH {
            let t = self.peek();
            return Err(Error::Parse {
                line: t.map_or(self.last_line, |t| t.line),
                col: t.map_or(self.last_col, |t| t.col),
                msg: format!("hierarchy nesting exceeds {MAX_DEPTH} levels"),
            });
        }
        let name_tok = self.next("a joint name")?;
        if name_tok.text == "{" || name_tok.text == "}" {
            return Err(Self::err_at(name_tok, "expected a joint name"));
        }
        self.expect("{")?;
        let offset = self.parse_offset()?;
        self.expect("CHANNELS")?;
        let n_channels = self.parse_usize("the channel count")?;
        let mut channels = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let t = self.next("a channel label")?;
            let c = Channel::parse(t.text)
                .ok_or_else(|| Self::err_at(t, format!("unknown channel label `{}`", t.text)))?;
            channels.push(c);
        }
        let index = joints.len();
        joints.push(Joint {
            name: name_tok.text.to_string(),
            parent,
            offset,
            channels,
            end_offset: None,
        });
        loop {
            let t = self.next("`JOINT`, `End Site`, or `}`")?;
            match t.text {
                "}" => return Ok(()),
                "JOINT" => self.parse_joint(Some(index), depth + 1, joints)?,
                "End" => {
                    let site = self.next("`Site`")?;
                    if !site.text.eq_ignore_ascii_case("site") {
                        return Err(Self::err_at(site, "expected `Site` after `End`"));
                    }
                    if joints[index].end_offset.is_some() {
                        return Err(Self::err_at(t, "joint declares more than one End Site"));
                    }
                    self.expect("{")?;
                    let end = self.parse_offset()?;
                    self.expect("}")?;
                    joints[index].end_offset = Some(end);
                }
                other => {
                    return Err(Self::err_at(
                        t,
                        format!("expected `JOINT`, `End Site`, or `}}`, found `{other}`"),
                    ))
                }
            }
        }
    }

    /// Accept a keyword that may or may not carry its trailing colon as part
    /// of the same token (`Frames:` vs `Frames :`).
    fn expect_keyword_colon(&mut self, word: &str) -> Result<()> {
        let t = self.next(&format!("`{word}:`"))?;
        if t.text == format!("{word}:") {
            return Ok(());
        }
        if t.text == word {
            let colon = self.next("`:`")?;
            if colon.text == ":" {
                return Ok(());
            }
            return Err(Self::err_at(colon, format!("expected `:` after `{word}`")));
        }
        Err(Self::err_at(t, format!("expected `{word}:`, found `{}`", t.text)))
    }
}

/// Parse a complete BVH document into its skeleton and motion table.
pub fn parse_bvh(text: &str) -> Result<(Skeleton, MotionChannels)> {
    let mut p = Parser::new(text);
    p.expect("HIERARCHY")?;
    p.expect("ROOT")?;
    let mut joints = Vec::new();
    p.parse_joint(None, 0, &mut joints)?;
    let skeleton = Skeleton::new(joints)?;
    let width = skeleton.total_channels();

    p.expect("MOTION")?;
    p.expect_keyword_colon("Frames")?;
    let n_frames = p.parse_usize("the frame count")?;
    p.expect("Frame")?;
    p.expect_keyword_colon("Time")?;
    let frame_time = p.parse_f64("the frame time")?;
    if n_frames == 0 {
        return Err(Error::Parse {
            line: p.last_line,
            col: p.last_col,
            msg: "motion must contain at least one frame".into(),
        });
    }

    let mut values = Array2::zeros((n_frames, width));
    for f in 0..n_frames {
        let first = p.next(&format!("frame row {}", f + 1))?;
        let row_line = first.line;
        p.pos -= 1;
        for c in 0..width {
            match p.peek() {
                Some(t) if t.line == row_line => {
                    values[[f, c]] = p.parse_f64("a channel value")?;
                }
                _ => {
                    return Err(Error::Parse {
                        line: row_line,
                        col: 1,
                        msg: format!(
                            "frame row {} has {} of {} channel values",
                            f + 1,
                            c,
                            width
                        ),
                    })
                }
            }
        }
        if let Some(t) = p.peek() {
            if t.line == row_line {
                return Err(Parser::err_at(
                    t,
                    format!("frame row {} has more than {} channel values", f + 1, width),
                ));
            }
        }
    }
    if let Some(t) = p.peek() {
        return Err(Parser::err_at(t, "unexpected content after the last frame"));
    }

    let motion = MotionChannels::new(frame_time, values)?;
    Ok((skeleton, motion))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn write_joint(
    out: &mut String,
    skeleton: &Skeleton,
    children: &[Vec<usize>],
    index: usize,
    depth: usize,
) {
    let joint = &skeleton.joints()[index];
    let pad = "\t".repeat(depth);
    let keyword = if joint.parent.is_none() { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{pad}{keyword} {}", joint.name);
    let _ = writeln!(out, "{pad}{{");
    let inner = "\t".repeat(depth + 1);
    let _ = writeln!(
        out,
        "{inner}OFFSET {:.6} {:.6} {:.6}",
        joint.offset[0], joint.offset[1], joint.offset[2]
    );
    let mut channels = format!("{inner}CHANNELS {}", joint.channels.len());
    for c in &joint.channels {
        channels.push(' ');
        channels.push_str(c.as_str());
    }
    let _ = writeln!(out, "{channels}");
    for &child in &children[index] {
        write_joint(out, skeleton, children, child, depth + 1);
    }
    if let Some(end) = joint.end_offset {
        let _ = writeln!(out, "{inner}End Site");
        let _ = writeln!(out, "{inner}{{");
        let _ = writeln!(
            out,
            "{inner}\tOFFSET {:.6} {:.6} {:.6}",
            end[0], end[1], end[2]
        );
        let _ = writeln!(out, "{inner}}}");
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Serialize a skeleton and motion table as BVH text. Channel values and
/// offsets are printed with six decimal places; round trips stay within
/// 5e-7 of the input and are exact once the values already carry at most
/// six decimals.
pub fn serialize_bvh(skeleton: &Skeleton, motion: &MotionChannels) -> Result<String> {
    if motion.values.ncols() != skeleton.total_channels() {
        return Err(Error::contract(format!(
            "motion table has {} columns but the skeleton declares {} channels",
            motion.values.ncols(),
            skeleton.total_channels()
        )));
    }
    if motion.values.nrows() == 0 {
        return Err(Error::contract("motion must contain at least one frame"));
    }
    if !motion.values.iter().all(|v| v.is_finite()) || !motion.frame_time.is_finite() {
        return Err(Error::contract("motion table contains non-finite values"));
    }

    let mut out = String::new();
    out.push_str("HIERARCHY\n");
    let children = skeleton.children();
    let root = skeleton
        .joints()
        .iter()
        .position(|j| j.parent.is_none())
        .expect("validated skeleton has a root");
    write_joint(&mut out, skeleton, &children, root, 0);
    out.push_str("MOTION\n");
    let _ = writeln!(out, "Frames: {}", motion.frames());
    let _ = writeln!(out, "Frame Time: {:.7}", motion.frame_time);
    for row in motion.values.rows() {
        let mut line = String::new();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v:.6}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}
