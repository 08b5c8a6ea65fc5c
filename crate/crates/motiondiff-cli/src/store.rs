//! The feature store: aligned pose and audio feature sequences for a whole
//! corpus, with normalization statistics, style labels, and the motion
//! metadata needed to reverse the pipeline. One JSON document; rewriting
//! from the same inputs is byte-identical.

use anyhow::{anyhow, bail, Context, Result};
use motiondiff::motion::{MotionMeta, NormStats};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const STORE_FILE: &str = "store.json";

/// One clip: raw (unnormalized) pose features and audio conditioning
/// features at the shared frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreItem {
    pub name: String,
    pub style: String,
    pub pose: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
}

/// The persisted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStore {
    pub frame_rate: f64,
    pub pose_width: usize,
    pub audio_width: usize,
    pub audio_columns: Vec<String>,
    pub style_labels: Vec<String>,
    pub pose_mean: Vec<f64>,
    pub pose_std: Vec<f64>,
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
    pub motion_meta: MotionMeta,
    pub items: Vec<StoreItem>,
}

pub fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            bail!("row {i} has {} values, expected {width}", row.len());
        }
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

impl FeatureStore {
    pub fn pose_stats(&self) -> NormStats {
        NormStats {
            mean: self.pose_mean.clone(),
            std: self.pose_std.clone(),
        }
    }

    pub fn audio_stats(&self) -> NormStats {
        NormStats {
            mean: self.audio_mean.clone(),
            std: self.audio_std.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(STORE_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Loads from a store directory or a direct path to the JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(STORE_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file)
            .with_context(|| format!("cannot read feature store {}", file.display()))?;
        let store: FeatureStore = serde_json::from_str(&text)
            .with_context(|| format!("malformed feature store {}", file.display()))?;
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            bail!("feature store holds no items");
        }
        if self.style_labels.is_empty() {
            bail!("feature store lists no styles");
        }
        if self.pose_mean.len() != self.pose_width
            || self.pose_std.len() != self.pose_width
            || self.audio_mean.len() != self.audio_width
            || self.audio_std.len() != self.audio_width
            || self.audio_columns.len() != self.audio_width
        {
            bail!("feature store statistics do not match declared widths");
        }
        for item in &self.items {
            if item.pose.len() != item.audio.len() {
                bail!(
                    "item {}: {} pose frames vs {} audio frames",
                    item.name,
                    item.pose.len(),
                    item.audio.len()
                );
            }
            if !self.style_labels.contains(&item.style) {
                bail!("item {} has unlisted style {}", item.name, item.style);
            }
        }
        Ok(())
    }

    /// One-hot vector for a style given by name or numeric index.
    pub fn one_hot(labels: &[String], style: &str) -> Result<Vec<f64>> {
        let idx = match style.parse::<usize>() {
            Ok(i) if i < labels.len() => i,
            Ok(i) => {
                return Err(anyhow!(crate::Usage(format!(
                    "style index {i} out of range; {} styles: {}",
                    labels.len(),
                    labels.join(", ")
                ))))
            }
            Err(_) => labels.iter().position(|l| l == style).ok_or_else(|| {
                anyhow!(crate::Usage(format!(
                    "unknown style `{style}`; available: {}",
                    labels.join(", ")
                )))
            })?,
        };
        let mut v = vec![0.0; labels.len()];
        v[idx] = 1.0;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use motiondiff::bvh::parse_bvh;
    use motiondiff::motion::{make_pose_features, PoseOptions};

    fn tiny_store() -> FeatureStore {
        let text = "HIERARCHY\nROOT Hips\n{\n\tOFFSET 0 0 0\n\tCHANNELS 6 Xposition Yposition \
                    Zposition Zrotation Xrotation Yrotation\n\tEnd Site\n\t{\n\t\tOFFSET 0 1 0\n\
                    \t}\n}\nMOTION\nFrames: 2\nFrame Time: 0.05\n0 1 0 0 0 0\n0 1 0.1 0 0 2\n";
        let (skeleton, motion) = parse_bvh(text).unwrap();
        let (_, layout) =
            make_pose_features(&skeleton, &motion, &PoseOptions::default()).unwrap();
        FeatureStore {
            frame_rate: 20.0,
            pose_width: 7,
            audio_width: 2,
            audio_columns: vec!["mfcc0".into(), "flux".into()],
            style_labels: vec!["calm".into(), "wild".into()],
            pose_mean: vec![0.0; 7],
            pose_std: vec![1.0; 7],
            audio_mean: vec![0.0; 2],
            audio_std: vec![1.0; 2],
            motion_meta: MotionMeta { skeleton, layout },
            items: vec![StoreItem {
                name: "clip".into(),
                style: "calm".into(),
                pose: vec![vec![0.5; 7]; 3],
                audio: vec![vec![0.25; 2]; 3],
            }],
        }
    }

    #[test]
    fn save_load_is_lossless_and_rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store();
        let p1 = store.save(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        let bytes1 = std::fs::read(&p1).unwrap();
        let p2_dir = tempfile::tempdir().unwrap();
        let p2 = back.save(p2_dir.path()).unwrap();
        assert_eq!(bytes1, std::fs::read(&p2).unwrap());
    }

    #[test]
    fn validation_rejects_inconsistencies() {
        let mut store = tiny_store();
        store.items[0].audio.pop();
        assert!(store.validate().is_err());

        let mut store = tiny_store();
        store.items[0].style = "unknown".into();
        assert!(store.validate().is_err());

        let mut store = tiny_store();
        store.items.clear();
        assert!(store.validate().is_err());
    }

    #[test]
    fn one_hot_accepts_names_and_indices() {
        let labels = vec!["calm".to_string(), "wild".to_string()];
        assert_eq!(FeatureStore::one_hot(&labels, "calm").unwrap(), [1.0, 0.0]);
        assert_eq!(FeatureStore::one_hot(&labels, "1").unwrap(), [0.0, 1.0]);
        let err = FeatureStore::one_hot(&labels, "angry").unwrap_err();
        assert!(err.to_string().contains("calm, wild"));
        assert!(FeatureStore::one_hot(&labels, "5").is_err());
    }

    #[test]
    fn row_matrix_conversions() {
        let m = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let rows = matrix_to_rows(&m);
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(rows_to_matrix(&rows, 2).unwrap(), m);
        assert!(rows_to_matrix(&rows, 3).is_err());
    }
}
