//! Acoustic conditioning features: MFCCs from mono waveforms, spectral flux
//! and 6-band chroma for music, ingestion of precomputed per-frame activation
//! columns, and rate alignment to the motion pipeline.
//!
//! All extractors share one short-time framing: the analysis window spans
//! 2048 samples at 44.1 kHz scaled to the actual sample rate (≈46.4 ms) and
//! the hop is `sample_rate / frame_rate` samples, rounded per frame, so the
//! output frame rate equals the pipeline rate and the three extractors
//! always agree on frame count. MFCCs use pre-emphasis, a periodic Hann
//! window, the magnitude spectrum, 26 triangular HTK-mel filters, a natural
//! log floored at 1e-10, and an orthonormal DCT-II including the 0th
//! (energy) coefficient.

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;

/// Analysis window length as a fraction of the sample rate: 2048 samples at
/// 44.1 kHz.
pub const WINDOW_SECONDS: f64 = 2048.0 / 44100.0;

/// Mono audio in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("waveform is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::data("sample rate must be positive"));
        }
        if !samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0) {
            return Err(Error::data(
                "waveform samples must be finite and within [-1, 1]",
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Load a 16-bit PCM mono WAV file.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::data(format!(
            "{}: expected 16-bit integer PCM, found {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Short-time analysis parameters shared by every extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    /// Output frame rate (the motion pipeline rate).
    pub frame_rate: f64,
    /// Number of triangular mel filters.
    pub n_mel: usize,
    /// Pre-emphasis coefficient applied before MFCC analysis.
    pub pre_emphasis: f64,
    /// Floor applied to mel energies before the log.
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            frame_rate: 30.0,
            n_mel: 26,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl AudioConfig {
    fn validate(&self) -> Result<()> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::config("audio frame rate must be positive"));
        }
        if self.n_mel < 2 {
            return Err(Error::config("mel filterbank needs at least two bands"));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::config("pre-emphasis must lie in [0, 1)"));
        }
        if !(self.log_floor.is_finite() && self.log_floor > 0.0) {
            return Err(Error::config("log floor must be positive"));
        }
        Ok(())
    }

    /// Analysis window length in samples at the given rate.
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (f64::from(sample_rate) * WINDOW_SECONDS).round() as usize
    }
}

/// Start sample of each analysis frame: `round(f · hop)` while the window
/// still fits, with `hop = sample_rate / frame_rate`.
fn frame_starts(n_samples: usize, window: usize, sample_rate: u32, frame_rate: f64) -> Vec<usize> {
    let hop = f64::from(sample_rate) / frame_rate;
    let mut starts = Vec::new();
    let mut f = 0usize;
    loop {
        let start = (f as f64 * hop).round() as usize;
        if start + window > n_samples {
            return starts;
        }
        starts.push(start);
        f += 1;
    }
}

/// Periodic Hann window.
fn hann(window: usize) -> Vec<f64> {
    (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect()
}

/// Magnitude spectra of all analysis frames: T × (fft/2 + 1).
/// `emphasized` selects whether the pre-emphasized signal is analyzed.
fn magnitude_frames(w: &Waveform, cfg: &AudioConfig, emphasized: bool) -> Result<Array2<f64>> {
    cfg.validate()?;
    let window = cfg.window_samples(w.sample_rate());
    if w.len() <= window {
        return Err(Error::data(format!(
            "audio of {} samples is shorter than one {window}-sample analysis window",
            w.len()
        )));
    }
    let signal: Vec<f64> = if emphasized {
        let mut out = Vec::with_capacity(w.len());
        out.push(w.samples()[0]);
        for i in 1..w.len() {
            out.push(w.samples()[i] - cfg.pre_emphasis * w.samples()[i - 1]);
        }
        out
    } else {
        w.samples().to_vec()
    };
    let starts = frame_starts(w.len(), window, w.sample_rate(), cfg.frame_rate);
    let taper = hann(window);
    let fft_size = window.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let n_bins = fft_size / 2 + 1;
    let mut out = Array2::zeros((starts.len(), n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for (f, &start) in starts.iter().enumerate() {
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < window {
                signal[start + i] * taper[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, slot) in buf.iter().take(n_bins).enumerate() {
            out[[f, k]] = slot.norm();
        }
    }
    Ok(out)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank: n_mel × n_bins weights with edges equally
/// spaced on the HTK mel scale from 0 Hz to Nyquist.
fn mel_filterbank(n_mel: usize, n_bins: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|m| mel_to_hz(top * m as f64 / (n_mel + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mel, n_bins));
    for m in 0..n_mel {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * f64::from(sample_rate) / fft_size as f64;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            bank[[m, k]] = rising.min(falling).max(0.0);
        }
    }
    bank
}

/// Orthonormal DCT-II of `input`, truncated to `n_out` coefficients.
fn dct_ii(input: &[f64], n_out: usize) -> Vec<f64> {
    let m = input.len() as f64;
    (0..n_out)
        .map(|i| {
            let scale = if i == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let sum: f64 = input
                .iter()
                .enumerate()
                .map(|(j, v)| v * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / m).cos())
                .sum();
            scale * sum
        })
        .collect()
}

/// Mel-frequency cepstral coefficients, including the 0th (energy)
/// coefficient, at the pipeline frame rate.
pub fn mfcc(w: &Waveform, n_coeffs: usize, cfg: &AudioConfig) -> Result<FeatureMatrix> {
    if n_coeffs == 0 {
        return Err(Error::config("mfcc needs at least one coefficient"));
    }
    if n_coeffs > cfg.n_mel {
        return Err(Error::config(format!(
            "mfcc coefficient count {n_coeffs} exceeds the {} mel bands",
            cfg.n_mel
        )));
    }
    let mags = magnitude_frames(w, cfg, true)?;
    let window = cfg.window_samples(w.sample_rate());
    let fft_size = window.next_power_of_two();
    let bank = mel_filterbank(cfg.n_mel, mags.ncols(), fft_size, w.sample_rate());
    let mut out = Array2::zeros((mags.nrows(), n_coeffs));
    for (f, row) in mags.rows().into_iter().enumerate() {
        let mut log_mel = vec![0.0; cfg.n_mel];
        for (m, slot) in log_mel.iter_mut().enumerate() {
            let energy: f64 = row
                .iter()
                .enumerate()
                .map(|(k, v)| bank[[m, k]] * v)
                .sum();
            *slot = energy.max(cfg.log_floor).ln();
        }
        for (i, c) in dct_ii(&log_mel, n_coeffs).into_iter().enumerate() {
            out[[f, i]] = c;
        }
    }
    let columns = (0..n_coeffs).map(|i| format!("mfcc{i}")).collect();
    FeatureMatrix::new(out, cfg.frame_rate, columns)
}

/// Half-wave-rectified frame-to-frame increase of the magnitude spectrum,
/// summed over bins. The first frame is zero.
pub fn spectral_flux(w: &Waveform, cfg: &AudioConfig) -> Result<FeatureMatrix> {
    let mags = magnitude_frames(w, cfg, false)?;
    let mut out = Array2::zeros((mags.nrows(), 1));
    for f in 1..mags.nrows() {
        let mut flux = 0.0;
        for k in 0..mags.ncols() {
            flux += (mags[[f, k]] - mags[[f - 1, k]]).max(0.0);
        }
        out[[f, 0]] = flux;
    }
    FeatureMatrix::new(out, cfg.frame_rate, vec!["flux".into()])
}

/// Pitch class of a frequency, 0 = A, on the 12-tone equal-tempered scale
/// referenced to A4 = 440 Hz.
fn pitch_class(hz: f64) -> usize {
    let steps = (12.0 * (hz / 440.0).log2()).round() as i64;
    steps.rem_euclid(12) as usize
}

/// Spectrum energy folded onto 12 pitch classes and pooled into 6 bands by
/// pairing adjacent classes (A/A♯, B/C, C♯/D, D♯/E, F/F♯, G/G♯), then
/// L1-normalized per frame. Zero-energy frames map to the uniform vector.
pub fn chroma(w: &Waveform, cfg: &AudioConfig) -> Result<FeatureMatrix> {
    let mags = magnitude_frames(w, cfg, false)?;
    let window = cfg.window_samples(w.sample_rate());
    let fft_size = window.next_power_of_two();
    let bin_hz = f64::from(w.sample_rate()) / fft_size as f64;
    let mut out = Array2::zeros((mags.nrows(), 6));
    for (f, row) in mags.rows().into_iter().enumerate() {
        let mut bands = [0.0f64; 6];
        for (k, v) in row.iter().enumerate() {
            let hz = k as f64 * bin_hz;
            // Skip DC and anything below A0; fold energy (squared magnitude).
            if hz >= 27.5 && hz <= f64::from(w.sample_rate()) / 2.0 {
                bands[pitch_class(hz) / 2] += v * v;
            }
        }
        let total: f64 = bands.iter().sum();
        for (b, slot) in bands.iter().enumerate() {
            out[[f, b]] = if total > 0.0 { slot / total } else { 1.0 / 6.0 };
        }
    }
    let columns = (0..6).map(|b| format!("chroma{b}")).collect();
    FeatureMatrix::new(out, cfg.frame_rate, columns)
}

// ---------------------------------------------------------------------------
// Precomputed feature columns (CSV)
// ---------------------------------------------------------------------------

/// Parse the two-line-header feature CSV: column names, then
/// `frame_rate,<hz>`, then one comma-separated row per frame.
pub fn parse_feature_csv(text: &str) -> Result<FeatureMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            col: 1,
            msg: "missing column-name header".into(),
        })?;
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    if columns.iter().any(|c| c.is_empty()) {
        return Err(Error::Parse {
            line: 1,
            col: 1,
            msg: "empty column name in header".into(),
        });
    }
    let (_, rate_line) = lines.next().ok_or_else(|| Error::Parse {
        line: 2,
        col: 1,
        msg: "missing frame-rate declaration".into(),
    })?;
    let rate = match rate_line.split_once(',') {
        Some(("frame_rate", v)) => v.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|r| r.is_finite() && *r > 0.0)
    .ok_or_else(|| Error::Parse {
        line: 2,
        col: 1,
        msg: format!("expected `frame_rate,<hz>`, found `{rate_line}`"),
    })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line: idx + 1,
                col: 1,
                msg: format!(
                    "row has {} cells, expected {}",
                    cells.len(),
                    columns.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        col: c + 1,
                        msg: format!("expected a finite number, found `{}`", cell.trim()),
                    })
                }
            }
        }
        rows.push(row);
    }
    let mut frames = Array2::zeros((rows.len(), columns.len()));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            frames[[i, j]] = *v;
        }
    }
    FeatureMatrix::new(frames, rate, columns)
}

/// Serialize a feature matrix in the two-line-header CSV format. Floats use
/// the shortest representation that parses back exactly, so read ∘ write is
/// the identity.
pub fn write_feature_csv(m: &FeatureMatrix) -> Result<String> {
    if m.columns.iter().any(|c| c.contains(',') || c.contains('\n')) {
        return Err(Error::contract("column names must not contain ',' or newlines"));
    }
    let mut out = String::new();
    out.push_str(&m.columns.join(","));
    out.push('\n');
    out.push_str(&format!("frame_rate,{}\n", m.frame_rate));
    for row in m.frames.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Load a precomputed per-frame feature file (e.g. beat and downbeat
/// activations) in the two-line-header CSV format.
pub fn load_precomputed(path: &Path) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    parse_feature_csv(&text)
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// Largest tolerated duration mismatch between a feature track and the
/// motion it conditions.
pub const ALIGN_SLACK_SECONDS: f64 = 0.5;

/// Linearly resample a feature track to exactly `target_frames` at
/// `target_rate`, extending edge values where the source is marginally
/// shorter. Durations differing by more than half a second are rejected.
pub fn align(m: &FeatureMatrix, target_rate: f64, target_frames: usize) -> Result<FeatureMatrix> {
    if !(target_rate.is_finite() && target_rate > 0.0) || target_frames == 0 {
        return Err(Error::contract("alignment target must be positive"));
    }
    if m.is_empty() {
        return Err(Error::data("cannot align an empty feature track"));
    }
    let src_len = m.len();
    let src_duration = (src_len - 1) as f64 / m.frame_rate;
    let dst_duration = (target_frames - 1) as f64 / target_rate;
    if (src_duration - dst_duration).abs() > ALIGN_SLACK_SECONDS {
        return Err(Error::data(format!(
            "feature track covers {src_duration:.3}s but the target spans {dst_duration:.3}s"
        )));
    }
    let mut out = Array2::zeros((target_frames, m.frames.ncols()));
    for j in 0..target_frames {
        let s = (j as f64 / target_rate) * m.frame_rate;
        let i0 = (s.floor().max(0.0) as usize).min(src_len - 1);
        let lambda = s - i0 as f64;
        if lambda.abs() < 1e-12 || i0 + 1 >= src_len {
            for c in 0..m.frames.ncols() {
                out[[j, c]] = m.frames[[i0, c]];
            }
        } else {
            for c in 0..m.frames.ncols() {
                out[[j, c]] =
                    (1.0 - lambda) * m.frames[[i0, c]] + lambda * m.frames[[i0 + 1, c]];
            }
        }
    }
    FeatureMatrix::new(out, target_rate, m.columns.clone())
}

/// The music conditioning stack in its fixed column order: MFCC(5), flux(1),
/// chroma(6), then the two precomputed activation columns (beat, downbeat)
/// aligned to the analysis frames. 14 columns total.
pub fn dance_features(
    w: &Waveform,
    cfg: &AudioConfig,
    activations: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    if activations.frames.ncols() != 2 {
        return Err(Error::data(format!(
            "expected 2 activation columns (beat, downbeat), found {}",
            activations.frames.ncols()
        )));
    }
    let mf = mfcc(w, 5, cfg)?;
    let flux = spectral_flux(w, cfg)?;
    let ch = chroma(w, cfg)?;
    let beats = align(activations, cfg.frame_rate, mf.len())?;
    FeatureMatrix::hstack(&[&mf, &flux, &ch, &beats])
}
