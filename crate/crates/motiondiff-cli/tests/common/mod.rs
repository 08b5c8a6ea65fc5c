//! Shared fixtures for the binary-level test suites: a tiny two-style
//! motion/audio corpus, a small pipeline config, and helpers that run the
//! compiled `motiondiff` executable.

#![allow(dead_code)] // each integration-test target uses a different subset

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motiondiff"))
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().unwrap_or(-1)
}

/// A 2-joint skeleton with gentle, style-dependent motion. Exactly 20 fps,
/// so resampling to the pipeline rate is the identity.
pub fn write_bvh(path: &Path, n_frames: usize, phase: f64) {
    let mut text = String::from(
        "HIERARCHY\nROOT Hips\n{\n\tOFFSET 0.0 0.0 0.0\n\tCHANNELS 6 Xposition Yposition \
         Zposition Zrotation Xrotation Yrotation\n\tJOINT Spine\n\t{\n\t\tOFFSET 0.0 5.0 0.0\n\
         \t\tCHANNELS 3 Zrotation Xrotation Yrotation\n\t\tEnd Site\n\t\t{\n\t\t\tOFFSET 0.0 \
         5.0 0.0\n\t\t}\n\t}\n}\nMOTION\n",
    );
    text.push_str(&format!("Frames: {n_frames}\nFrame Time: 0.0500000\n"));
    for t in 0..n_frames {
        let s = t as f64 / 20.0;
        let w = 2.0 * std::f64::consts::PI * 0.5 * s + phase;
        text.push_str(&format!(
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            0.2 * s,
            10.0 + 0.5 * w.sin(),
            0.5 * s,
            3.0 * w.cos(),
            5.0 * w.sin(),
            10.0 * s / (n_frames as f64 / 30.0),
            4.0 * (w + 0.3).sin(),
            2.0 * (w + 0.7).cos(),
            1.5 * w.sin(),
        ));
    }
    std::fs::write(path, text).unwrap();
}

/// A sine tone, 16-bit mono PCM at 16 kHz.
pub fn write_wav(path: &Path, seconds: f64, freq: f64) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).unwrap();
    let n = (seconds * 16_000.0) as usize;
    for i in 0..n {
        let v = (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin();
        writer.write_sample((v * 12_000.0) as i16).unwrap();
    }
    writer.finalize().unwrap();
}

/// Two styles, three clips, 1.5 seconds each (30 frames at 20 fps).
pub fn write_corpus(dir: &Path) {
    for (style, clips, phase) in [
        ("energetic", vec!["clip1", "clip2"], 0.0),
        ("calm", vec!["clip3"], std::f64::consts::PI),
    ] {
        let sub = dir.join(style);
        std::fs::create_dir_all(&sub).unwrap();
        for (i, clip) in clips.iter().enumerate() {
            write_bvh(&sub.join(format!("{clip}.bvh")), 30, phase + 0.1 * i as f64);
            write_wav(&sub.join(format!("{clip}.wav")), 1.5, 440.0 + 110.0 * i as f64);
        }
    }
}

pub fn write_config(path: &Path) {
    std::fs::write(
        path,
        r#"
[data]
frame_rate = 20.0
mfcc_coeffs = 3

[windowing]
window = 10
hop = 5

[model]
n_blocks = 2
layers_per_block = 1
dilation_cycle = 3
n_heads = 2
attention_width = 16
feedforward_width = 32
step_embed_dim = 8
max_relative_distance = 4

[schedule]
n_steps = 10

[train]
lr_max = 1e-3
warmup_steps = 2
batch_size = 2
total_steps = 4
checkpoint_interval = 2
seed = 1

[sample]
frames = 12
"#,
    )
    .unwrap();
}

/// Builds corpus + config, runs prepare, returns (root, config, store dir).
pub fn prepared() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    write_corpus(&data);
    let config = root.path().join("pipeline.toml");
    write_config(&config);
    let store = root.path().join("store");
    run_ok(bin().arg("prepare").arg(&data).args([
        "--config",
        config.to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
    ]));
    (root, config, store)
}

pub fn train_into(root: &Path, config: &Path, store: &Path) -> PathBuf {
    let run = root.join("run");
    run_ok(bin().arg("train").arg(store).args([
        "--config",
        config.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    run
}
