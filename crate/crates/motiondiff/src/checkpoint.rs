//! Self-describing checkpoint files.
//!
//! Byte layout, in order:
//!
//! | offset | size | content                                             |
//! |--------|------|-----------------------------------------------------|
//! | 0      | 8    | magic `b"MDIFFCK1"`                                 |
//! | 8      | 4    | `u32` little-endian header length `H`               |
//! | 12     | `H`  | UTF-8 JSON header (see [`Header`] fields below)     |
//! | 12+H   | ...  | record payloads, concatenated in header order       |
//!
//! Each record payload is `product(shape)` little-endian `f32` values. The
//! header lists every record as `{name, shape}`: first the denoiser
//! parameter slots in layout order, then (when optimizer moments are
//! present) the same slots prefixed `opt.m/` and `opt.v/`. The header also
//! carries the denoiser/schedule/training configuration, normalization
//! statistics, style labels, the step counter, and a SHA-256 digest of the
//! configuration so mismatched resumes fail loudly.
//!
//! Values are quantized to `f32` on save; the training loop keeps its state
//! on the `f32` grid so save → load → save is byte-identical.

use crate::denoiser::{build_layout, DenoiserConfig};
use crate::error::{Error, Result};
use crate::motion::MotionMeta;
use crate::schedule::ScheduleConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MDIFFCK1";
const FORMAT_VERSION: u32 = 1;

/// First- and second-moment optimizer state, parallel to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A complete training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub norm_stats: BTreeMap<String, Vec<f64>>,
    pub style_labels: Vec<String>,
    /// Skeleton and pose layout, when the model was trained on motion data.
    /// Makes a checkpoint self-contained for writing animation files.
    pub motion_meta: Option<MotionMeta>,
    pub params: Vec<f64>,
    pub moments: Option<AdamMoments>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    norm_stats: BTreeMap<String, Vec<f64>>,
    style_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motion_meta: Option<MotionMeta>,
    config_digest: String,
    records: Vec<RecordMeta>,
}

/// Hex SHA-256 over the canonical JSON of the three configuration blocks.
pub fn config_digest(
    denoiser: &DenoiserConfig,
    schedule: &ScheduleConfig,
    train: &TrainConfig,
) -> String {
    let canonical = serde_json::to_vec(&(denoiser, schedule, train))
        .expect("configuration structs serialize infallibly");
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        config_digest(&self.denoiser, &self.schedule, &self.train)
    }

    fn record_plan(&self) -> Result<Vec<RecordMeta>> {
        let layout = build_layout(&self.denoiser);
        if self.params.len() != layout.total_len() {
            return Err(Error::Checkpoint(format!(
                "parameter vector has {} values, config layout needs {}",
                self.params.len(),
                layout.total_len()
            )));
        }
        let mut records: Vec<RecordMeta> = layout
            .slots()
            .iter()
            .map(|s| RecordMeta {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        if let Some(moments) = &self.moments {
            if moments.m.len() != self.params.len() || moments.v.len() != self.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer moments do not match parameter count".into(),
                ));
            }
            for prefix in ["opt.m/", "opt.v/"] {
                records.extend(layout.slots().iter().map(|s| RecordMeta {
                    name: format!("{prefix}{}", s.name),
                    shape: s.shape.clone(),
                }));
            }
        }
        Ok(records)
    }

    /// Serializes to the documented byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.record_plan()?;
        let header = Header {
            format_version: FORMAT_VERSION,
            step: self.step,
            denoiser: self.denoiser.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            norm_stats: self.norm_stats.clone(),
            style_labels: self.style_labels.clone(),
            motion_meta: self.motion_meta.clone(),
            config_digest: self.digest(),
            records,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
        let payload_len: usize = self.params.len()
            + self
                .moments
                .as_ref()
                .map(|m| m.m.len() + m.v.len())
                .unwrap_or(0);
        let mut out = Vec::with_capacity(12 + header_json.len() + 4 * payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        let mut push_values = |values: &[f64]| {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        push_values(&self.params);
        if let Some(moments) = &self.moments {
            push_values(&moments.m);
            push_values(&moments.v);
        }
        Ok(out)
    }

    /// Parses the documented byte layout, validating magic, version, record
    /// plan, payload length, and the configuration digest.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let expected_digest =
            config_digest(&header.denoiser, &header.schedule, &header.train);
        if header.config_digest != expected_digest {
            return Err(Error::Checkpoint(
                "configuration digest mismatch (corrupt or edited header)".into(),
            ));
        }
        let layout = build_layout(&header.denoiser);
        let total = layout.total_len();
        let expected_records: Vec<(String, Vec<usize>)> = {
            let mut r: Vec<(String, Vec<usize>)> = layout
                .slots()
                .iter()
                .map(|s| (s.name.clone(), s.shape.clone()))
                .collect();
            if header.records.len() > layout.slots().len() {
                for prefix in ["opt.m/", "opt.v/"] {
                    r.extend(
                        layout
                            .slots()
                            .iter()
                            .map(|s| (format!("{prefix}{}", s.name), s.shape.clone())),
                    );
                }
            }
            r
        };
        if header.records.len() != expected_records.len()
            || header
                .records
                .iter()
                .zip(&expected_records)
                .any(|(a, (name, shape))| &a.name != name || &a.shape != shape)
        {
            return Err(Error::Checkpoint(
                "record list does not match the configuration layout".into(),
            ));
        }
        let has_moments = header.records.len() > layout.slots().len();
        let value_count = if has_moments { 3 * total } else { total };
        let payload = &bytes[12 + header_len..];
        if payload.len() != 4 * value_count {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                4 * value_count
            )));
        }
        let mut values = Vec::with_capacity(value_count);
        for chunk in payload.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let params = values[..total].to_vec();
        let moments = if has_moments {
            Some(AdamMoments {
                m: values[total..2 * total].to_vec(),
                v: values[2 * total..].to_vec(),
            })
        } else {
            None
        };
        Ok(Self {
            step: header.step,
            denoiser: header.denoiser,
            schedule: header.schedule,
            train: header.train,
            norm_stats: header.norm_stats,
            style_labels: header.style_labels,
            motion_meta: header.motion_meta,
            params,
            moments,
        })
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over the destination only after a complete write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let tmp_name = format!(".{name}.tmp{}", std::process::id());
        let tmp = match path.parent().filter(|p| !p.as_os_str().is_empty()) {
            Some(d) => d.join(tmp_name),
            None => std::path::PathBuf::from(tmp_name),
        };
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Snap a value to the nearest `f32`-representable number. Training state is
/// kept on this grid after every update so checkpoint quantization is
/// lossless and interrupted runs resume bitwise.
pub fn round_to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// In-place [`round_to_f32`] over a vector.
pub fn round_vec_to_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = round_to_f32(*v);
    }
}
