//! `train`: fit the denoiser to a prepared feature store, emitting
//! checkpoints at the configured cadence plus a loss log and manifest.

use anyhow::{anyhow, bail, Context, Result};
use motiondiff::checkpoint::Checkpoint;
use motiondiff::data::ConditioningSequence;
use motiondiff::denoiser::Denoiser;
use motiondiff::motion::window_dataset;
use motiondiff::training::{train_with, write_loss_log, Dataset, Trainer, TrainingExample};
use std::collections::BTreeMap;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::store::{rows_to_matrix, FeatureStore};

pub fn run(
    store_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = PipelineConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let store = FeatureStore::load(store_path)?;
    let n_styles = store.style_labels.len();
    let pose_stats = store.pose_stats();
    let audio_stats = store.audio_stats();

    let mut examples: Vec<TrainingExample> = Vec::new();
    for item in &store.items {
        let pose = rows_to_matrix(&item.pose, store.pose_width)
            .with_context(|| format!("item {}: pose", item.name))?;
        let audio = rows_to_matrix(&item.audio, store.audio_width)
            .with_context(|| format!("item {}: audio", item.name))?;
        let pose_n = pose_stats.normalize(&pose)?;
        let audio_n = audio_stats.normalize(&audio)?;
        let one_hot = FeatureStore::one_hot(&store.style_labels, &item.style)?;
        let cond = ConditioningSequence::from_audio_and_style(&audio_n, &one_hot, n_styles)?;
        let windows = window_dataset(&pose_n, &cond, cfg.windowing.window, cfg.windowing.hop)?;
        if windows.is_empty() {
            eprintln!(
                "warning: {} has {} frames, shorter than the {}-frame window; skipped",
                item.name,
                pose_n.nrows(),
                cfg.windowing.window
            );
        }
        examples.extend(windows);
    }
    if examples.is_empty() {
        bail!(
            "no training windows: every clip is shorter than window={}",
            cfg.windowing.window
        );
    }
    let dataset = Dataset::new(examples)?;
    println!(
        "dataset: {} windows of {} frames ({} pose dims, {} conditioning dims)",
        dataset.len(),
        cfg.windowing.window,
        dataset.input_dim(),
        dataset.cond_dim()
    );

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)
                .map_err(|e| anyhow!("cannot resume from {}: {e}", path.display()))?;
            println!("resuming from {} at step {}", path.display(), ck.step);
            Trainer::resume(ck)?
        }
        None => {
            let denoiser_cfg = cfg
                .model
                .to_denoiser(dataset.input_dim(), dataset.cond_dim());
            Trainer::new(Denoiser::new(denoiser_cfg)?, cfg.schedule.clone(), cfg.train.clone())?
        }
    };
    let mut norm_stats = BTreeMap::new();
    norm_stats.insert("pose_mean".to_string(), store.pose_mean.clone());
    norm_stats.insert("pose_std".to_string(), store.pose_std.clone());
    norm_stats.insert("audio_mean".to_string(), store.audio_mean.clone());
    norm_stats.insert("audio_std".to_string(), store.audio_std.clone());
    trainer.set_metadata(
        norm_stats,
        store.style_labels.clone(),
        Some(store.motion_meta.clone()),
    );

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))?;
    let mut manifest = RunManifest::begin("train", cfg.digest(), Some(trainer.config().seed));
    manifest.input(store_path);
    if let Some(p) = config_path {
        manifest.input(p);
    }
    if let Some(p) = resume {
        manifest.input(p);
    }

    let mut emitted: Vec<std::path::PathBuf> = Vec::new();
    let reports = train_with(&mut trainer, &dataset, &mut |ck: &Checkpoint| {
        let path = out.join(format!("step_{:08}.ckpt", ck.step));
        ck.save(&path)?;
        println!("checkpoint step={} -> {}", ck.step, path.display());
        emitted.push(path);
        Ok(())
    })?;
    for path in &emitted {
        manifest.output(path);
    }

    // A stable alias for the newest state, so downstream commands need no
    // step arithmetic.
    let final_path = out.join("model.ckpt");
    trainer.checkpoint().save(&final_path)?;
    manifest.output(&final_path);

    let loss_path = out.join("loss.csv");
    write_loss_log(&loss_path, &reports)?;
    manifest.output(&loss_path);
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!(
            "trained {} steps: loss {:.6} -> {:.6}",
            reports.len(),
            first.loss,
            last.loss
        );
    }
    manifest.write(out)?;
    Ok(())
}
