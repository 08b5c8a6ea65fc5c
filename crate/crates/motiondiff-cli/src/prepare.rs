//! `prepare`: scan a data directory for paired BVH and WAV clips (plus
//! optional precomputed-feature CSVs), run the motion and audio feature
//! pipelines, and persist everything as one feature store.

use anyhow::{bail, Context, Result};
use motiondiff::audio::{self, AudioConfig};
use motiondiff::bvh::parse_bvh;
use motiondiff::motion::{
    make_pose_features, resample_motion, MotionMeta, NormStats, PoseOptions,
};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use walkdir::WalkDir;

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::store::{matrix_to_rows, FeatureStore, StoreItem};

/// The three files a clip may contribute, keyed by (style, stem).
#[derive(Default)]
struct ClipFiles {
    bvh: Option<PathBuf>,
    wav: Option<PathBuf>,
    csv: Option<PathBuf>,
}

/// Style label for a file: its parent directory's name, or "default" for
/// files directly inside the data directory.
fn style_of(path: &Path, root: &Path) -> String {
    match path.parent() {
        Some(parent) if parent != root => parent
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into()),
        _ => "default".into(),
    }
}

fn scan(root: &Path) -> Result<BTreeMap<(String, String), ClipFiles>> {
    let mut clips: BTreeMap<(String, String), ClipFiles> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("cannot scan {}", root.display()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let key = (
            style_of(path, root),
            stem.to_string_lossy().into_owned(),
        );
        let slot = clips.entry(key).or_default();
        match ext.to_string_lossy().to_lowercase().as_str() {
            "bvh" => slot.bvh = Some(path.to_path_buf()),
            "wav" => slot.wav = Some(path.to_path_buf()),
            "csv" => slot.csv = Some(path.to_path_buf()),
            _ => {}
        }
    }
    Ok(clips)
}

pub fn run(data_dir: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    let mut manifest = RunManifest::begin("prepare", cfg.digest(), None);
    manifest.input(data_dir);
    if let Some(p) = config_path {
        manifest.input(p);
    }

    let clips = scan(data_dir)?;
    let audio_cfg = AudioConfig {
        frame_rate: cfg.data.frame_rate,
        ..AudioConfig::default()
    };
    let pose_options = PoseOptions {
        frozen_patterns: cfg.data.frozen_patterns.clone(),
    };

    let mut meta: Option<MotionMeta> = None;
    let mut audio_columns: Option<Vec<String>> = None;
    let mut items: Vec<StoreItem> = Vec::new();
    let mut pose_mats: Vec<Array2<f64>> = Vec::new();
    let mut audio_mats: Vec<Array2<f64>> = Vec::new();
    let mut styles: Vec<String> = Vec::new();

    for ((style, stem), files) in &clips {
        let (Some(bvh_path), Some(wav_path)) = (&files.bvh, &files.wav) else {
            let have = files
                .bvh
                .as_deref()
                .or(files.wav.as_deref())
                .or(files.csv.as_deref());
            if let Some(path) = have {
                eprintln!("skipping unpaired {}", path.display());
            }
            continue;
        };

        let text = std::fs::read_to_string(bvh_path)
            .with_context(|| format!("cannot read {}", bvh_path.display()))?;
        let (skeleton, motion) =
            parse_bvh(&text).with_context(|| bvh_path.display().to_string())?;
        let resampled = resample_motion(&skeleton, &motion, cfg.data.frame_rate)?;
        let (pose, layout) = make_pose_features(&skeleton, &resampled, &pose_options)?;

        let clip_meta = MotionMeta { skeleton, layout };
        match &meta {
            None => meta = Some(clip_meta),
            Some(first) if *first != clip_meta => {
                bail!(
                    "{} uses a different skeleton or layout than earlier clips; \
                     a corpus must share one skeleton",
                    bvh_path.display()
                );
            }
            Some(_) => {}
        }

        let wave = audio::load_wav(wav_path)?;
        let mfcc = audio::mfcc(&wave, cfg.data.mfcc_coeffs, &audio_cfg)?;
        let flux = audio::spectral_flux(&wave, &audio_cfg)?;
        let chroma = audio::chroma(&wave, &audio_cfg)?;
        let mut stack = motiondiff::data::FeatureMatrix::hstack(&[&mfcc, &flux, &chroma])?;
        if let Some(csv_path) = &files.csv {
            let extra = audio::load_precomputed(csv_path)?;
            let aligned = audio::align(&extra, cfg.data.frame_rate, stack.len())?;
            stack = motiondiff::data::FeatureMatrix::hstack(&[&stack, &aligned])?;
        }
        match &audio_columns {
            None => audio_columns = Some(stack.columns.clone()),
            Some(first) if *first != stack.columns => {
                bail!(
                    "{} yields audio columns [{}] but earlier clips yield [{}]; \
                     every clip needs the same conditioning stack",
                    wav_path.display(),
                    stack.columns.join(", "),
                    first.join(", ")
                );
            }
            Some(_) => {}
        }

        // Conditioning is cut or edge-padded to the pose length; more than
        // half a second of mismatch is rejected by `align`.
        let n_frames = pose.len();
        let audio_frames = stack.len();
        let aligned = audio::align(&stack, cfg.data.frame_rate, n_frames)
            .with_context(|| format!("{}: audio/motion mismatch", wav_path.display()))?;
        println!(
            "{style}/{stem}: frames={n_frames} rate={} audio_frames={audio_frames} tail={}",
            cfg.data.frame_rate,
            audio_frames as i64 - n_frames as i64
        );

        manifest.input(bvh_path);
        manifest.input(wav_path);
        if let Some(csv) = &files.csv {
            manifest.input(csv);
        }
        if !styles.contains(style) {
            styles.push(style.clone());
        }
        items.push(StoreItem {
            name: stem.clone(),
            style: style.clone(),
            pose: matrix_to_rows(&pose.frames),
            audio: matrix_to_rows(&aligned.frames),
        });
        pose_mats.push(pose.frames);
        audio_mats.push(aligned.frames);
    }

    if items.is_empty() {
        bail!("no training pairs under {}", data_dir.display());
    }
    styles.sort();

    let pose_refs: Vec<&Array2<f64>> = pose_mats.iter().collect();
    let audio_refs: Vec<&Array2<f64>> = audio_mats.iter().collect();
    let pose_stats = NormStats::compute(&pose_refs)?;
    let audio_stats = NormStats::compute(&audio_refs)?;
    let columns = audio_columns.expect("items imply columns");

    let store = FeatureStore {
        frame_rate: cfg.data.frame_rate,
        pose_width: pose_stats.mean.len(),
        audio_width: columns.len(),
        audio_columns: columns,
        style_labels: styles,
        pose_mean: pose_stats.mean,
        pose_std: pose_stats.std,
        audio_mean: audio_stats.mean,
        audio_std: audio_stats.std,
        motion_meta: meta.expect("items imply metadata"),
        items,
    };
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    let store_path = store.save(out)?;
    println!(
        "stored {} clip(s), {} style(s) -> {}",
        store.items.len(),
        store.style_labels.len(),
        store_path.display()
    );
    manifest.output(&store_path);
    manifest.write(out)?;
    Ok(())
}
