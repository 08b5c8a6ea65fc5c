//! Core sequence containers shared across the pipeline: pose sequences (the
//! diffusion variable), conditioning sequences (acoustic features plus a style
//! one-hot), and generic named feature matrices.

use crate::error::{Error, Result};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

/// A named contiguous span of pose-feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpan {
    pub name: String,
    pub start: usize,
    pub width: usize,
}

/// Column layout of a pose feature vector: per-joint exponential-map triples
/// plus root channels, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub spans: Vec<FeatureSpan>,
}

impl FeatureLayout {
    pub fn total_width(&self) -> usize {
        self.spans.iter().map(|s| s.width).sum()
    }

    pub fn push(&mut self, name: impl Into<String>, width: usize) {
        let start = self.total_width();
        self.spans.push(FeatureSpan {
            name: name.into(),
            start,
            width,
        });
    }

    pub fn span(&self, name: &str) -> Option<&FeatureSpan> {
        self.spans.iter().find(|s| s.name == name)
    }
}

/// T×D matrix of pose features at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
    pub layout: FeatureLayout,
}

impl PoseSequence {
    pub fn new(frames: Array2<f64>, frame_rate: f64, layout: FeatureLayout) -> Result<Self> {
        if layout.total_width() != frames.ncols() {
            return Err(Error::contract(format!(
                "pose width {} does not match layout width {}",
                frames.ncols(),
                layout.total_width()
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::data("pose sequence contains non-finite values"));
        }
        Ok(Self {
            frames,
            frame_rate,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// T×C conditioning matrix: per-frame acoustic features concatenated with a
/// style span. The style span is either a one-hot vector (conditional) or all
/// zeros (the unconditional sentinel), and is constant over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    pub frames: Array2<f64>,
    pub audio_width: usize,
    pub style_width: usize,
}

impl ConditioningSequence {
    pub fn new(frames: Array2<f64>, audio_width: usize, style_width: usize) -> Result<Self> {
        if frames.ncols() != audio_width + style_width {
            return Err(Error::contract(format!(
                "conditioning width {} != audio {} + style {}",
                frames.ncols(),
                audio_width,
                style_width
            )));
        }
        Ok(Self {
            frames,
            audio_width,
            style_width,
        })
    }

    /// Audio features plus a one-hot style held constant over all frames.
    pub fn from_audio_and_style(
        audio: &Array2<f64>,
        style: &[f64],
        n_styles: usize,
    ) -> Result<Self> {
        if style.len() != n_styles {
            return Err(Error::contract("style vector width mismatch"));
        }
        let t = audio.nrows();
        let a = audio.ncols();
        let mut frames = Array2::zeros((t, a + n_styles));
        frames.slice_mut(s![.., ..a]).assign(audio);
        for (j, &v) in style.iter().enumerate() {
            frames.slice_mut(s![.., a + j]).fill(v);
        }
        Self::new(frames, a, n_styles)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    /// Copy with the style span replaced by the given vector on every frame.
    pub fn with_style(&self, style: &[f64]) -> Result<Self> {
        if style.len() != self.style_width {
            return Err(Error::contract(format!(
                "style vector has width {}, expected {}",
                style.len(),
                self.style_width
            )));
        }
        let mut out = self.clone();
        for (j, &v) in style.iter().enumerate() {
            out.frames
                .slice_mut(s![.., self.audio_width + j])
                .fill(v);
        }
        Ok(out)
    }

    /// Copy with the style span zeroed: the unconditional sentinel.
    pub fn with_zero_style(&self) -> Self {
        let mut out = self.clone();
        out.frames.slice_mut(s![.., self.audio_width..]).fill(0.0);
        out
    }

    /// Check the style-span invariants: constant over time, one-hot or zero.
    pub fn validate_style(&self) -> Result<()> {
        if self.style_width == 0 || self.is_empty() {
            return Ok(());
        }
        let first = self.frames.slice(s![0, self.audio_width..]).to_owned();
        for t in 1..self.len() {
            let row = self.frames.slice(s![t, self.audio_width..]);
            if row
                .iter()
                .zip(first.iter())
                .any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(Error::data(format!("style span varies at frame {t}")));
            }
        }
        let ones = first.iter().filter(|v| (**v - 1.0).abs() < 1e-12).count();
        let zeros = first.iter().filter(|v| v.abs() < 1e-12).count();
        if !(ones + zeros == self.style_width && ones <= 1) {
            return Err(Error::data(
                "style span is neither one-hot nor the all-zero sentinel",
            ));
        }
        Ok(())
    }
}

/// T×A feature matrix with named columns at a declared frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
    pub columns: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>, frame_rate: f64, columns: Vec<String>) -> Result<Self> {
        if columns.len() != frames.ncols() {
            return Err(Error::contract(format!(
                "{} column names for {} columns",
                columns.len(),
                frames.ncols()
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::data("feature matrix contains non-finite values"));
        }
        Ok(Self {
            frames,
            frame_rate,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Concatenate columns of several matrices sharing a frame rate and count.
    pub fn hstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("hstack of zero matrices"))?;
        let t = first.len();
        let rate = first.frame_rate;
        let mut columns = Vec::new();
        let width: usize = parts.iter().map(|p| p.frames.ncols()).sum();
        let mut frames = Array2::zeros((t, width));
        let mut at = 0;
        for p in parts {
            if p.len() != t {
                return Err(Error::contract("hstack frame-count mismatch"));
            }
            if (p.frame_rate - rate).abs() > 1e-9 {
                return Err(Error::contract("hstack frame-rate mismatch"));
            }
            frames
                .slice_mut(s![.., at..at + p.frames.ncols()])
                .assign(&p.frames);
            columns.extend(p.columns.iter().cloned());
            at += p.frames.ncols();
        }
        FeatureMatrix::new(frames, rate, columns)
    }
}
