//! `sample`: run reverse diffusion from a trained checkpoint and write the
//! result as BVH. Supports unconditional sampling, single-style
//! classifier-free guidance at any strength, and two-style guided
//! interpolation with optional temperature, with one output file per
//! requested gamma.

use anyhow::{anyhow, bail, Context, Result};
use motiondiff::audio::{self, AudioConfig};
use motiondiff::bvh::serialize_bvh;
use motiondiff::checkpoint::Checkpoint;
use motiondiff::data::{ConditioningSequence, FeatureMatrix};
use motiondiff::denoiser::{Denoiser, DenoiserModel};
use motiondiff::diffusion::{self, GuidanceSpec};
use motiondiff::motion::{features_to_motion, NormStats};
use ndarray::Array2;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::store::FeatureStore;
use crate::Usage;

pub struct SampleArgs {
    pub input: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub style: Option<String>,
    pub styles: Option<Vec<String>>,
    pub gamma: Option<Vec<f64>>,
    pub temperature: Option<f64>,
    pub frames: Option<usize>,
    pub seed: Option<u64>,
}

fn stats_from(ck: &Checkpoint, mean_key: &str, std_key: &str) -> Result<NormStats> {
    let mean = ck
        .norm_stats
        .get(mean_key)
        .ok_or_else(|| anyhow!("checkpoint lacks {mean_key} statistics"))?;
    let std = ck
        .norm_stats
        .get(std_key)
        .ok_or_else(|| anyhow!("checkpoint lacks {std_key} statistics"))?;
    Ok(NormStats {
        mean: mean.clone(),
        std: std.clone(),
    })
}

/// Audio conditioning columns for the run: extracted from a WAV, loaded from
/// a feature CSV, or all zeros when no input is given.
fn conditioning_features(
    input: Option<&Path>,
    audio_width: usize,
    frame_rate: f64,
    frames_flag: Option<usize>,
    default_frames: usize,
    cfg: &PipelineConfig,
) -> Result<Array2<f64>> {
    let Some(path) = input else {
        let t = frames_flag.unwrap_or(default_frames);
        if t == 0 {
            return Err(anyhow!(Usage("--frames must be positive".into())));
        }
        return Ok(Array2::zeros((t, audio_width)));
    };
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let stack: FeatureMatrix = match ext.as_str() {
        "wav" => {
            let wave = audio::load_wav(path)?;
            let audio_cfg = AudioConfig {
                frame_rate,
                ..AudioConfig::default()
            };
            let mfcc = audio::mfcc(&wave, cfg.data.mfcc_coeffs, &audio_cfg)?;
            let flux = audio::spectral_flux(&wave, &audio_cfg)?;
            let chroma = audio::chroma(&wave, &audio_cfg)?;
            FeatureMatrix::hstack(&[&mfcc, &flux, &chroma])?
        }
        "csv" => audio::load_precomputed(path)?,
        other => {
            return Err(anyhow!(Usage(format!(
                "conditioning input must be .wav or .csv, found .{other}"
            ))))
        }
    };
    if stack.frames.ncols() != audio_width {
        bail!(
            "{} yields {} conditioning columns, the checkpoint expects {audio_width}",
            path.display(),
            stack.frames.ncols()
        );
    }
    let aligned = match frames_flag {
        Some(t) => audio::align(&stack, frame_rate, t)?,
        None => audio::align(&stack, frame_rate, stack.len())?,
    };
    Ok(aligned.frames)
}

pub fn run(args: SampleArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let ck = Checkpoint::load(&args.checkpoint)
        .map_err(|e| anyhow!("cannot load checkpoint {}: {e}", args.checkpoint.display()))?;
    let meta = ck
        .motion_meta
        .clone()
        .ok_or_else(|| anyhow!("checkpoint was trained without motion metadata; cannot write BVH"))?;
    let labels = &ck.style_labels;
    let n_styles = labels.len();
    let audio_width = ck
        .denoiser
        .cond_dim
        .checked_sub(n_styles)
        .ok_or_else(|| anyhow!("checkpoint lists more styles than conditioning channels"))?;
    let pose_stats = stats_from(&ck, "pose_mean", "pose_std")?;
    let frame_rate = meta.layout.frame_rate;

    // Conditioning: audio columns (normalized with the training statistics)
    // plus a zeroed style span that guidance overwrites per expert.
    let raw = conditioning_features(
        args.input.as_deref(),
        audio_width,
        frame_rate,
        args.frames,
        cfg.sample.frames,
        &cfg,
    )?;
    let audio_cols = if args.input.is_some() && audio_width > 0 {
        stats_from(&ck, "audio_mean", "audio_std")?.normalize(&raw)?
    } else {
        raw
    };
    let n_frames = audio_cols.nrows();
    let mut cond_frames = Array2::zeros((n_frames, audio_width + n_styles));
    for t in 0..n_frames {
        for c in 0..audio_width {
            cond_frames[[t, c]] = audio_cols[[t, c]];
        }
    }
    let cond = ConditioningSequence::new(cond_frames, audio_width, n_styles)?;

    // Guidance: one spec per requested gamma.
    let gammas = args.gamma.unwrap_or_else(|| vec![cfg.sample.gamma]);
    if gammas.is_empty() {
        return Err(anyhow!(Usage("--gamma needs at least one value".into())));
    }
    let temperature = args.temperature.unwrap_or(cfg.sample.temperature);
    enum StyleMode {
        Unconditional,
        Guided(Vec<f64>),
        Pair(Vec<f64>, Vec<f64>),
    }
    let mode = match (&args.style, &args.styles) {
        (Some(_), Some(_)) => unreachable!("clap forbids --style with --styles"),
        (Some(name), None) => StyleMode::Guided(FeatureStore::one_hot(labels, name)?),
        (None, Some(pair)) => {
            if pair.len() != 2 {
                return Err(anyhow!(Usage(format!(
                    "--styles takes exactly two comma-separated names, got {}",
                    pair.len()
                ))));
            }
            StyleMode::Pair(
                FeatureStore::one_hot(labels, &pair[0])?,
                FeatureStore::one_hot(labels, &pair[1])?,
            )
        }
        (None, None) => StyleMode::Unconditional,
    };
    if temperature != 1.0 && !matches!(mode, StyleMode::Pair(..)) {
        return Err(anyhow!(Usage(
            "--temperature applies only to two-style interpolation (--styles)".into()
        )));
    }

    let net = Denoiser::new(ck.denoiser.clone())?;
    let model = DenoiserModel::new(net, ck.params.clone())?;
    let sched = ck.schedule.build()?;
    let seed = args.seed.unwrap_or(cfg.train.seed);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut manifest = RunManifest::begin("sample", cfg.digest(), Some(seed));
    manifest.input(&args.checkpoint);
    if let Some(p) = &args.config {
        manifest.input(p);
    }
    if let Some(p) = &args.input {
        manifest.input(p);
    }

    for &gamma in &gammas {
        let spec = match &mode {
            StyleMode::Unconditional => GuidanceSpec::unconditional(),
            StyleMode::Guided(style) => GuidanceSpec::guided(style.clone(), gamma),
            StyleMode::Pair(a, b) => {
                let spec = GuidanceSpec::interpolated_pair(a.clone(), b.clone(), gamma)?;
                if temperature != 1.0 {
                    spec.with_temperature(temperature)?
                } else {
                    spec
                }
            }
        };
        let x = diffusion::sample(
            &model,
            &cond,
            n_frames,
            ck.denoiser.input_dim,
            &sched,
            &spec,
            seed,
        )?;
        let denorm = pose_stats.denormalize(&x)?;
        let motion = features_to_motion(&meta.skeleton, &meta.layout, &denorm)?;
        let text = serialize_bvh(&meta.skeleton, &motion)?;
        let path = args.out.join(format!("sample_g{gamma}.bvh"));
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!(
            "gamma={gamma}: {} frames at {frame_rate} fps -> {}",
            n_frames,
            path.display()
        );
        manifest.output(&path);
    }
    manifest.write(&args.out)?;
    Ok(())
}
