//! Pose feature engineering on top of the BVH carrier: exponential-map
//! conversion relative to the T-pose, resampling to the pipeline frame rate,
//! the heading-relative root parameterization (height, yaw delta, forward and
//! sideways velocity), z-score normalization, and training-window extraction.
//!
//! Conventions: world up is +Y and a character with identity root rotation
//! faces +Z, so heading is `atan2(f_x, f_z)` of the rotated forward axis.
//! Removing the heading from the root keeps the features invariant to where
//! the capture happens to point; reconstruction starts every clip at the
//! origin facing +Z.

use crate::bvh::{Channel, MotionChannels, Skeleton};
use crate::data::{ConditioningSequence, FeatureLayout, PoseSequence};
use crate::error::{Error, Result};
use crate::rotation::{
    axis_rotation, euler_to_matrix, expmap_to_matrix, mat_apply, mat_mul, matrix_to_euler,
    matrix_to_expmap, nearest_representative, Mat3, RotationOrder,
};
use crate::training::TrainingExample;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

/// Number of root feature columns: height, yaw delta, forward, sideways.
pub const ROOT_WIDTH: usize = 4;

/// Wrap an angle into (−π, π]. Values already in range pass through
/// bit-exactly.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -std::f64::consts::PI && a <= std::f64::consts::PI {
        return a;
    }
    std::f64::consts::PI - (std::f64::consts::PI - a).rem_euclid(2.0 * std::f64::consts::PI)
}

/// One frame of pose content: a canonical exponential-map triple per joint
/// (zero for joints without rotation channels) plus the root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMapPose {
    pub joint_rotations: Vec<[f64; 3]>,
    pub root_position: [f64; 3],
}

/// Per-frame locomotion parameterization: yaw rotation delta (radians),
/// forward velocity, and sideways velocity (units per frame), with the
/// translation deltas expressed in the previous frame's heading frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PathControl {
    /// T×3 columns: yaw delta, forward, sideways. First frame is zero.
    pub frames: Array2<f64>,
}

/// Options for feature extraction: joints whose name contains one of the
/// given patterns (case-insensitive) are frozen to their first-frame channel
/// values instead of entering the feature vector — the fixed-hand-pose
/// treatment for finger joints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseOptions {
    pub frozen_patterns: Vec<String>,
}

/// Everything needed to map a feature matrix back onto a skeleton: which
/// joints contribute exponential-map triples, the frozen channel rows, the
/// named column spans, and the frame rate. Serialized into checkpoints so a
/// trained model is self-contained for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseLayout {
    /// Joint indices contributing exp-map triples, in skeleton order.
    pub expmap_joints: Vec<usize>,
    /// (joint index, first-frame channel values) for frozen joints.
    pub frozen: Vec<(usize, Vec<f64>)>,
    pub feature: FeatureLayout,
    pub frame_rate: f64,
}

/// Skeleton plus layout: the motion-side metadata a checkpoint carries so
/// `sample` can write BVH without access to the feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionMeta {
    pub skeleton: Skeleton,
    pub layout: PoseLayout,
}

/// Per-column z-score statistics with a variance floor, so constant columns
/// survive the round trip unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Population statistics over the rows of all given matrices.
    pub fn compute(parts: &[&Array2<f64>]) -> Result<NormStats> {
        let width = parts
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::contract("statistics of zero matrices"))?;
        let mut count = 0usize;
        let mut sum = vec![0.0; width];
        let mut sum_sq = vec![0.0; width];
        for m in parts {
            if m.ncols() != width {
                return Err(Error::contract("statistics over mismatched widths"));
            }
            for row in m.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
            count += m.nrows();
        }
        if count == 0 {
            return Err(Error::contract("statistics of zero frames"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.width() || self.std.len() != self.mean.len() {
            return Err(Error::contract(format!(
                "{} columns against statistics of width {}",
                x.ncols(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

/// Rotation order and channel columns of one joint's rotation triple.
#[derive(Clone)]
struct JointRotation {
    order: RotationOrder,
    /// Motion-table columns of the three rotation channels in declared order.
    cols: [usize; 3],
}

/// Resolve a joint's rotation channels into an order, or `None` when the
/// joint declares no rotation channels at all.
fn joint_rotation(skeleton: &Skeleton, joint: usize, base: usize) -> Result<Option<JointRotation>> {
    let channels = &skeleton.joints()[joint].channels;
    let rot: Vec<(usize, Channel)> = channels
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_rotation())
        .map(|(i, c)| (base + i, *c))
        .collect();
    if rot.is_empty() {
        return Ok(None);
    }
    if rot.len() != 3 {
        return Err(Error::config(format!(
            "joint {} declares {} rotation channels, expected exactly 3",
            skeleton.joints()[joint].name,
            rot.len()
        )));
    }
    let axes = [rot[0].1.axis(), rot[1].1.axis(), rot[2].1.axis()];
    let order = RotationOrder::from_axes(axes).map_err(|_| {
        Error::config(format!(
            "joint {} rotation channels do not form a distinct-axis order",
            skeleton.joints()[joint].name
        ))
    })?;
    Ok(Some(JointRotation {
        order,
        cols: [rot[0].0, rot[1].0, rot[2].0],
    }))
}

/// Columns of the root's three position channels.
fn root_position_cols(skeleton: &Skeleton) -> Result<[usize; 3]> {
    let root = skeleton
        .joints()
        .iter()
        .position(|j| j.parent.is_none())
        .ok_or_else(|| Error::config("skeleton has no root"))?;
    let base = skeleton.channel_offsets()[root];
    let mut cols = [usize::MAX; 3];
    for (i, c) in skeleton.joints()[root].channels.iter().enumerate() {
        if c.is_position() {
            cols[c.axis()] = base + i;
        }
    }
    if cols.contains(&usize::MAX) {
        return Err(Error::config(
            "root joint must declare X, Y, and Z position channels",
        ));
    }
    Ok(cols)
}

fn local_rotation(motion: &MotionChannels, frame: usize, jr: &JointRotation) -> Mat3 {
    let a = [
        motion.values[[frame, jr.cols[0]]],
        motion.values[[frame, jr.cols[1]]],
        motion.values[[frame, jr.cols[2]]],
    ];
    euler_to_matrix(a, jr.order)
}

/// Convert raw channels into per-frame exponential-map poses. Joint entries
/// follow skeleton order; joints without rotation channels stay zero.
pub fn motion_to_poses(skeleton: &Skeleton, motion: &MotionChannels) -> Result<Vec<ExpMapPose>> {
    if motion.values.ncols() != skeleton.total_channels() {
        return Err(Error::contract(format!(
            "motion table has {} columns but the skeleton declares {} channels",
            motion.values.ncols(),
            skeleton.total_channels()
        )));
    }
    let offsets = skeleton.channel_offsets();
    let rotations: Vec<Option<JointRotation>> = (0..skeleton.len())
        .map(|j| joint_rotation(skeleton, j, offsets[j]))
        .collect::<Result<_>>()?;
    let pos_cols = root_position_cols(skeleton)?;

    let mut poses = Vec::with_capacity(motion.frames());
    for f in 0..motion.frames() {
        let mut joint_rotations = vec![[0.0; 3]; skeleton.len()];
        for (j, jr) in rotations.iter().enumerate() {
            if let Some(jr) = jr {
                joint_rotations[j] = matrix_to_expmap(&local_rotation(motion, f, jr));
            }
        }
        let root_position = [
            motion.values[[f, pos_cols[0]]],
            motion.values[[f, pos_cols[1]]],
            motion.values[[f, pos_cols[2]]],
        ];
        poses.push(ExpMapPose {
            joint_rotations,
            root_position,
        });
    }
    Ok(poses)
}

/// Heading angle of a root rotation: yaw of the rotated +Z axis about +Y.
/// Returns `None` when the forward axis is within ~1e-8 of vertical.
fn heading_of(root: &Mat3) -> Option<f64> {
    let f = mat_apply(root, [0.0, 0.0, 1.0]);
    if (f[0] * f[0] + f[2] * f[2]).sqrt() < 1e-8 {
        None
    } else {
        Some(f[0].atan2(f[2]))
    }
}

/// Build the locomotion path parameterization from per-frame root positions
/// (T×3 world coordinates) and yaw angles (radians).
pub fn make_path_control(positions: &Array2<f64>, yaw: &[f64]) -> Result<PathControl> {
    let t_len = positions.nrows();
    if positions.ncols() != 3 {
        return Err(Error::contract("root trajectory must be T×3"));
    }
    if yaw.len() != t_len {
        return Err(Error::contract("yaw count must match trajectory length"));
    }
    if t_len < 2 {
        return Err(Error::data(
            "path control needs at least two frames of trajectory",
        ));
    }
    let mut frames = Array2::zeros((t_len, 3));
    for t in 1..t_len {
        let psi = yaw[t - 1];
        let (sin_psi, cos_psi) = psi.sin_cos();
        let dx = positions[[t, 0]] - positions[[t - 1, 0]];
        let dz = positions[[t, 2]] - positions[[t - 1, 2]];
        frames[[t, 0]] = wrap_angle(yaw[t] - yaw[t - 1]);
        // Heading frame: forward = (sin ψ, cos ψ), right = (cos ψ, −sin ψ).
        frames[[t, 1]] = dx * sin_psi + dz * cos_psi;
        frames[[t, 2]] = dx * cos_psi - dz * sin_psi;
    }
    Ok(PathControl { frames })
}

/// Extract the normalization-ready pose feature matrix: exp-map triples for
/// every non-frozen rotating joint (the root's triple has its heading
/// removed) followed by the root block [height, yaw delta, forward,
/// sideways].
pub fn make_pose_features(
    skeleton: &Skeleton,
    motion: &MotionChannels,
    options: &PoseOptions,
) -> Result<(PoseSequence, PoseLayout)> {
    if motion.values.ncols() != skeleton.total_channels() {
        return Err(Error::config(format!(
            "motion table has {} columns but the skeleton declares {} channels",
            motion.values.ncols(),
            skeleton.total_channels()
        )));
    }
    let offsets = skeleton.channel_offsets();
    let root = skeleton
        .joints()
        .iter()
        .position(|j| j.parent.is_none())
        .expect("validated skeleton has a root");
    let pos_cols = root_position_cols(skeleton)?;

    let is_frozen = |name: &str| {
        let lower = name.to_lowercase();
        options
            .frozen_patterns
            .iter()
            .any(|p| lower.contains(&p.to_lowercase()))
    };

    let mut expmap_joints = Vec::new();
    let mut frozen = Vec::new();
    let mut rotations: Vec<Option<JointRotation>> = vec![None; skeleton.len()];
    for (j, joint) in skeleton.joints().iter().enumerate() {
        if j != root && is_frozen(&joint.name) {
            let cols = joint.channels.len();
            let row: Vec<f64> = (0..cols)
                .map(|c| motion.values[[0, offsets[j] + c]])
                .collect();
            frozen.push((j, row));
            continue;
        }
        let jr = joint_rotation(skeleton, j, offsets[j])?;
        if j != root {
            for (i, c) in joint.channels.iter().enumerate() {
                if c.is_position() {
                    return Err(Error::config(format!(
                        "joint {} declares position channel {}; only the root may translate \
                         (freeze the joint instead)",
                        joint.name,
                        offsets[j] + i
                    )));
                }
            }
        }
        if let Some(jr) = jr {
            expmap_joints.push(j);
            rotations[j] = Some(jr);
        } else if j == root {
            return Err(Error::config("root joint must declare rotation channels"));
        }
    }

    let mut feature = FeatureLayout::default();
    for &j in &expmap_joints {
        feature.push(format!("{}.expmap", skeleton.joints()[j].name), 3);
    }
    feature.push("root", ROOT_WIDTH);
    let width = feature.total_width();

    let t_len = motion.frames();
    let mut frames = Array2::zeros((t_len, width));
    let mut yaw = Vec::with_capacity(t_len);
    let mut positions = Array2::zeros((t_len, 3));
    for f in 0..t_len {
        let mut at = 0;
        let root_mat = local_rotation(
            motion,
            f,
            rotations[root].as_ref().expect("root order resolved"),
        );
        let psi = heading_of(&root_mat)
            .or_else(|| yaw.last().copied())
            .unwrap_or(0.0);
        yaw.push(psi);
        for &j in &expmap_joints {
            let jr = rotations[j].as_ref().expect("resolved above");
            let r = if j == root {
                // Heading-removed tilt keeps the features rotation-invariant
                // about the vertical axis.
                let tilt = mat_mul(&axis_rotation(1, -psi), &root_mat);
                matrix_to_expmap(&tilt)
            } else {
                matrix_to_expmap(&local_rotation(motion, f, jr))
            };
            frames[[f, at]] = r[0];
            frames[[f, at + 1]] = r[1];
            frames[[f, at + 2]] = r[2];
            at += 3;
        }
        for (k, &col) in pos_cols.iter().enumerate() {
            positions[[f, k]] = motion.values[[f, col]];
        }
        frames[[f, at]] = positions[[f, 1]]; // height
    }
    if t_len >= 2 {
        let path = make_path_control(&positions, &yaw)?;
        frames
            .slice_mut(s![.., width - 3..])
            .assign(&path.frames);
    }

    let layout = PoseLayout {
        expmap_joints,
        frozen,
        feature,
        frame_rate: motion.frame_rate(),
    };
    let pose = PoseSequence::new(frames, motion.frame_rate(), layout.feature.clone())?;
    Ok((pose, layout))
}

/// Map a feature matrix back onto raw BVH channels. The clip starts at the
/// origin facing +Z; heading and planar position are integrated from the
/// root block.
pub fn features_to_motion(
    skeleton: &Skeleton,
    layout: &PoseLayout,
    frames: &Array2<f64>,
) -> Result<MotionChannels> {
    if frames.ncols() != layout.feature.total_width() {
        return Err(Error::contract(format!(
            "feature width {} does not match layout width {}",
            frames.ncols(),
            layout.feature.total_width()
        )));
    }
    if frames.nrows() == 0 {
        return Err(Error::contract("cannot reconstruct zero frames"));
    }
    if !(layout.frame_rate.is_finite() && layout.frame_rate > 0.0) {
        return Err(Error::contract("layout frame rate must be positive"));
    }
    let offsets = skeleton.channel_offsets();
    let root = skeleton
        .joints()
        .iter()
        .position(|j| j.parent.is_none())
        .ok_or_else(|| Error::config("skeleton has no root"))?;
    let pos_cols = root_position_cols(skeleton)?;
    for &j in &layout.expmap_joints {
        if j >= skeleton.len() {
            return Err(Error::contract("layout references a missing joint"));
        }
    }

    let t_len = frames.nrows();
    let mut values = Array2::zeros((t_len, skeleton.total_channels()));
    let root_block = layout.feature.total_width() - ROOT_WIDTH;

    // Frozen joints repeat their stored channel row on every frame.
    for (j, row) in &layout.frozen {
        for (c, v) in row.iter().enumerate() {
            for f in 0..t_len {
                values[[f, offsets[*j] + c]] = *v;
            }
        }
    }

    let mut psi = 0.0f64;
    let mut x = 0.0f64;
    let mut z = 0.0f64;
    for f in 0..t_len {
        if f > 0 {
            let (sin_prev, cos_prev) = psi.sin_cos();
            let fwd = frames[[f, root_block + 2]];
            let side = frames[[f, root_block + 3]];
            x += fwd * sin_prev + side * cos_prev;
            z += fwd * cos_prev - side * sin_prev;
            psi = wrap_angle(psi + frames[[f, root_block + 1]]);
        }
        values[[f, pos_cols[0]]] = x;
        values[[f, pos_cols[1]]] = frames[[f, root_block]];
        values[[f, pos_cols[2]]] = z;

        let mut at = 0;
        for &j in &layout.expmap_joints {
            let jr = joint_rotation(skeleton, j, offsets[j])?.ok_or_else(|| {
                Error::contract(format!(
                    "layout expects rotation channels on joint {}",
                    skeleton.joints()[j].name
                ))
            })?;
            let r = [frames[[f, at]], frames[[f, at + 1]], frames[[f, at + 2]]];
            let mut mat = expmap_to_matrix(r);
            if j == root {
                mat = mat_mul(&axis_rotation(1, psi), &mat);
            }
            let angles = matrix_to_euler(&mat, jr.order);
            for (i, col) in jr.cols.iter().enumerate() {
                values[[f, *col]] = angles[i];
            }
            at += 3;
        }
    }
    MotionChannels::new(1.0 / layout.frame_rate, values)
}

/// Resample raw channels to a new frame rate: linear interpolation on
/// position channels and on exponential-map components of each rotation
/// triple (taking the antipodal representative nearest the earlier frame).
/// Output instants that land exactly on input frames copy them verbatim.
pub fn resample_motion(
    skeleton: &Skeleton,
    motion: &MotionChannels,
    target_rate: f64,
) -> Result<MotionChannels> {
    if !(target_rate.is_finite() && target_rate > 0.0) {
        return Err(Error::contract(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    if motion.values.ncols() != skeleton.total_channels() {
        return Err(Error::contract(
            "motion table width does not match the skeleton",
        ));
    }
    let src_rate = motion.frame_rate();
    if (target_rate - src_rate).abs() < 1e-9 * src_rate {
        return Ok(motion.clone());
    }
    let offsets = skeleton.channel_offsets();
    let rotations: Vec<Option<JointRotation>> = (0..skeleton.len())
        .map(|j| joint_rotation(skeleton, j, offsets[j]))
        .collect::<Result<_>>()?;

    let f_in = motion.frames();
    let duration = (f_in - 1) as f64 / src_rate;
    let f_out = (duration * target_rate).floor() as usize + 1;
    let width = motion.values.ncols();
    let mut values = Array2::zeros((f_out, width));
    for f in 0..f_out {
        let s = (f as f64 / target_rate) * src_rate;
        let i0 = (s.floor() as usize).min(f_in - 1);
        let lambda = s - i0 as f64;
        if lambda.abs() < 1e-9 || i0 + 1 >= f_in {
            for c in 0..width {
                values[[f, c]] = motion.values[[i0, c]];
            }
            continue;
        }
        // Positions (and any other non-rotation channels) interpolate
        // directly; rotation triples interpolate in exp-map space.
        for c in 0..width {
            values[[f, c]] = (1.0 - lambda) * motion.values[[i0, c]]
                + lambda * motion.values[[i0 + 1, c]];
        }
        for jr in rotations.iter().flatten() {
            let e0 = matrix_to_expmap(&local_rotation(motion, i0, jr));
            let e1 = matrix_to_expmap(&local_rotation(motion, i0 + 1, jr));
            let e1 = nearest_representative(e0, e1);
            let e = [
                (1.0 - lambda) * e0[0] + lambda * e1[0],
                (1.0 - lambda) * e0[1] + lambda * e1[1],
                (1.0 - lambda) * e0[2] + lambda * e1[2],
            ];
            let angles = matrix_to_euler(&expmap_to_matrix(e), jr.order);
            for (i, col) in jr.cols.iter().enumerate() {
                values[[f, *col]] = angles[i];
            }
        }
    }
    MotionChannels::new(1.0 / target_rate, values)
}

/// Slice aligned (pose, conditioning) windows at the given hop. Sequences
/// shorter than the window yield no items (the caller decides whether that
/// deserves a warning); tail frames that do not fill a window are dropped.
pub fn window_dataset(
    pose: &Array2<f64>,
    cond: &ConditioningSequence,
    window: usize,
    hop: usize,
) -> Result<Vec<TrainingExample>> {
    if window == 0 || hop == 0 {
        return Err(Error::contract("window and hop must be positive"));
    }
    let t_len = pose.nrows();
    if cond.len() != t_len {
        return Err(Error::contract(format!(
            "pose has {} frames but conditioning has {}",
            t_len,
            cond.len()
        )));
    }
    let mut items = Vec::new();
    let mut start = 0;
    while start + window <= t_len {
        let x0 = pose.slice(s![start..start + window, ..]).to_owned();
        let c = ConditioningSequence::new(
            cond.frames.slice(s![start..start + window, ..]).to_owned(),
            cond.audio_width,
            cond.style_width,
        )?;
        items.push(TrainingExample { x0, cond: c });
        start += hop;
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::parse_bvh;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    /// Three-joint skeleton: translating/rotating root, a spine, and a
    /// "finger" joint for freeze tests. K = 6 + 3 + 3 = 12.
    fn fixture(frames: &[[f64; 12]], frame_time: f64) -> (Skeleton, MotionChannels) {
        let mut text = String::from(
            "\
HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0 10 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    JOINT LeftFinger
    {
      OFFSET 2 0 0
      CHANNELS 3 Xrotation Yrotation Zrotation
    }
  }
}
MOTION
",
        );
        text.push_str(&format!("Frames: {}\n", frames.len()));
        text.push_str(&format!("Frame Time: {frame_time}\n"));
        for row in frames {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
        parse_bvh(&text).unwrap()
    }

    fn zero_rows(n: usize) -> Vec<[f64; 12]> {
        vec![[0.0; 12]; n]
    }

    #[test]
    fn t_pose_gives_zero_expmap_features() {
        let mut rows = zero_rows(3);
        for (i, row) in rows.iter_mut().enumerate() {
            row[1] = 90.0 + i as f64; // height varies, rotations stay zero
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let (pose, layout) = make_pose_features(&skel, &motion, &PoseOptions::default()).unwrap();
        // 3 joints × 3 + 4 root columns.
        assert_eq!(pose.dim(), 13);
        assert_eq!(layout.expmap_joints, vec![0, 1, 2]);
        // All exp-map columns zero at the T-pose.
        assert_eq!(pose.frames.slice(s![.., ..9]).sum(), 0.0);
        // Root block: height copied through, deltas zero for a stationary root.
        assert_eq!(pose.frames[[2, 9]], 92.0);
        assert_eq!(pose.frames.slice(s![.., 10..]).sum(), 0.0);
    }

    #[test]
    fn feature_width_follows_layout_arithmetic() {
        let (skel, motion) = fixture(&zero_rows(2), 1.0 / 30.0);
        let (pose, _) = make_pose_features(&skel, &motion, &PoseOptions::default()).unwrap();
        assert_eq!(pose.dim(), 3 * skel.len() + ROOT_WIDTH);
    }

    #[test]
    fn frozen_joints_leave_features_and_return_on_reconstruction() {
        let mut rows = zero_rows(4);
        for (i, row) in rows.iter_mut().enumerate() {
            row[9] = 25.0; // LeftFinger Xrotation, constant
            row[6] = 5.0 * i as f64; // Spine Zrotation varies
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let options = PoseOptions {
            frozen_patterns: vec!["finger".into()],
        };
        let (pose, layout) = make_pose_features(&skel, &motion, &options).unwrap();
        assert_eq!(pose.dim(), 3 * 2 + ROOT_WIDTH);
        assert_eq!(layout.frozen, vec![(2, vec![25.0, 0.0, 0.0])]);

        let back = features_to_motion(&skel, &layout, &pose.frames).unwrap();
        for f in 0..4 {
            assert!((back.values[[f, 9]] - 25.0).abs() < 1e-9);
            assert!((back.values[[f, 6]] - 5.0 * f as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_roundtrip_reproduces_motion_started_at_origin() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut rows = zero_rows(6);
        for (i, row) in rows.iter_mut().enumerate() {
            if i == 0 {
                // Reconstruction pins frame 0 at the origin facing +Z, so
                // start the source clip with an identity root rotation at
                // the origin (any tilt couples into the extracted heading).
                row[0] = 0.0;
                row[2] = 0.0;
            } else {
                row[0] = rng.gen_range(-5.0..5.0);
                row[2] = rng.gen_range(-5.0..5.0);
                row[3] = rng.gen_range(-15.0..15.0); // root tilt z
                row[4] = rng.gen_range(-15.0..15.0); // root tilt x
                row[5] = rng.gen_range(-60.0..60.0); // root yaw
            }
            row[1] = 90.0 + rng.gen_range(-1.0..1.0);
            for cell in row.iter_mut().skip(6) {
                *cell = rng.gen_range(-120.0..120.0);
            }
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let (pose, layout) = make_pose_features(&skel, &motion, &PoseOptions::default()).unwrap();
        let back = features_to_motion(&skel, &layout, &pose.frames).unwrap();
        assert_eq!(back.frames(), motion.frames());
        // Compare joint rotations as matrices (Euler triples may differ in
        // representation) and root positions directly.
        for f in 0..motion.frames() {
            for j in 0..skel.len() {
                let base = skel.channel_offsets()[j];
                let jr = joint_rotation(&skel, j, base).unwrap().unwrap();
                let a = local_rotation(&motion, f, &jr);
                let b = local_rotation(&back, f, &jr);
                for i in 0..3 {
                    for k in 0..3 {
                        assert!(
                            (a[i][k] - b[i][k]).abs() < 1e-9,
                            "frame {f} joint {j}: {:?} vs {:?}",
                            a,
                            b
                        );
                    }
                }
            }
            for c in 0..3 {
                assert!(
                    (back.values[[f, c]] - motion.values[[f, c]]).abs() < 1e-8,
                    "frame {f} position channel {c}"
                );
            }
        }
        // A second pass through the features is bit-for-bit stable enough to
        // stay under the same tolerance.
        let (pose2, _) = make_pose_features(&skel, &back, &PoseOptions::default()).unwrap();
        for (a, b) in pose.frames.iter().zip(pose2.frames.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn heading_removal_makes_features_yaw_invariant() {
        let mut rows = zero_rows(3);
        for (i, row) in rows.iter_mut().enumerate() {
            row[3] = 10.0; // constant tilt
            row[6] = 20.0 + i as f64;
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let (pose_a, _) = make_pose_features(&skel, &motion, &PoseOptions::default()).unwrap();

        // Same clip rotated 90° about the vertical axis (yaw channel shifted).
        // Tilt channels are not directly comparable after pre-rotation, so
        // rotate positions and compose the rotation on the matrix level.
        let mut rotated = motion.clone();
        for f in 0..motion.frames() {
            // positions: (x, z) -> (z, -x) is a +90° yaw about +Y.
            let (x, z) = (motion.values[[f, 0]], motion.values[[f, 2]]);
            rotated.values[[f, 0]] = z;
            rotated.values[[f, 2]] = -x;
            let jr = joint_rotation(&skel, 0, 0).unwrap().unwrap();
            let m = local_rotation(&motion, f, &jr);
            let pre = mat_mul(&axis_rotation(1, -PI / 2.0), &m);
            let angles = matrix_to_euler(&pre, jr.order);
            for (i, col) in jr.cols.iter().enumerate() {
                rotated.values[[f, *col]] = angles[i];
            }
        }
        let (pose_b, _) = make_pose_features(&skel, &rotated, &PoseOptions::default()).unwrap();
        for (a, b) in pose_a.frames.iter().zip(pose_b.frames.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn path_control_stationary_is_zero() {
        let positions = Array2::zeros((5, 3));
        let yaw = vec![0.7; 5];
        let path = make_path_control(&positions, &yaw).unwrap();
        assert_eq!(path.frames.sum(), 0.0);
    }

    #[test]
    fn path_control_straight_walk_is_pure_forward() {
        let psi: f64 = 0.9;
        let v = 1.25;
        let mut positions = Array2::zeros((6, 3));
        for t in 0..6 {
            positions[[t, 0]] = v * t as f64 * psi.sin();
            positions[[t, 2]] = v * t as f64 * psi.cos();
        }
        let yaw = vec![psi; 6];
        let path = make_path_control(&positions, &yaw).unwrap();
        for t in 1..6 {
            assert!((path.frames[[t, 0]]).abs() < 1e-12);
            assert!((path.frames[[t, 1]] - v).abs() < 1e-12);
            assert!((path.frames[[t, 2]]).abs() < 1e-12);
        }
    }

    #[test]
    fn path_control_circle_has_constant_rates() {
        // Radius 2, 0.3 rad per frame, heading tangent to the circle:
        // yaw delta = 0.3, forward = 2·sin 0.3, sideways = 2·(1 − cos 0.3).
        let radius = 2.0;
        let omega = 0.3;
        let n = 50;
        let mut positions = Array2::zeros((n, 3));
        let mut yaw = Vec::with_capacity(n);
        for t in 0..n {
            let theta = omega * t as f64;
            positions[[t, 0]] = radius * theta.sin();
            positions[[t, 2]] = radius * theta.cos();
            yaw.push(wrap_angle(theta + PI / 2.0));
        }
        let path = make_path_control(&positions, &yaw).unwrap();
        let forward = 0.5910404133226791; // 2·sin 0.3
        let sideways = 0.08932702174878804; // 2·(1 − cos 0.3)
        for t in 1..n {
            assert!((path.frames[[t, 0]] - omega).abs() < 1e-12, "t={t}");
            assert!((path.frames[[t, 1]] - forward).abs() < 1e-12, "t={t}");
            assert!((path.frames[[t, 2]] - sideways).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn path_control_rejects_degenerate_input() {
        let positions = Array2::zeros((1, 3));
        assert!(make_path_control(&positions, &[0.0]).is_err());
        let positions = Array2::zeros((3, 2));
        assert!(make_path_control(&positions, &[0.0; 3]).is_err());
    }

    #[test]
    fn resample_identity_rate_is_exact() {
        let mut rows = zero_rows(5);
        for (i, row) in rows.iter_mut().enumerate() {
            row[6] = 3.0 * i as f64;
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let out = resample_motion(&skel, &motion, 30.0).unwrap();
        assert_eq!(out, motion);
    }

    #[test]
    fn resample_constant_pose_stays_constant() {
        let mut rows = zero_rows(8);
        for row in rows.iter_mut() {
            row[3] = 40.0;
            row[6] = -25.0;
        }
        let (skel, motion) = fixture(&rows, 1.0 / 60.0);
        for rate in [24.0, 30.0, 90.0] {
            let out = resample_motion(&skel, &motion, rate).unwrap();
            for f in 0..out.frames() {
                assert!((out.values[[f, 3]] - 40.0).abs() < 1e-9);
                assert!((out.values[[f, 6]] + 25.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn downsample_ramp_hits_every_second_frame() {
        let mut rows = zero_rows(11);
        for (i, row) in rows.iter_mut().enumerate() {
            row[0] = 0.5 * i as f64; // linear position ramp
            row[6] = 2.0 * i as f64; // linear angle ramp (small, no wrap)
        }
        let (skel, motion) = fixture(&rows, 1.0 / 60.0);
        let out = resample_motion(&skel, &motion, 30.0).unwrap();
        assert_eq!(out.frames(), 6);
        for f in 0..6 {
            assert!((out.values[[f, 0]] - motion.values[[2 * f, 0]]).abs() < 1e-9);
            assert!((out.values[[f, 6]] - motion.values[[2 * f, 6]]).abs() < 1e-9);
        }
        assert!((out.frame_time - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_midpoints_interpolate_linearly() {
        let mut rows = zero_rows(4);
        for (i, row) in rows.iter_mut().enumerate() {
            row[2] = 10.0 * i as f64;
            row[7] = 8.0 * i as f64; // single-axis ramp: exp-map lerp == angle lerp
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let out = resample_motion(&skel, &motion, 60.0).unwrap();
        assert_eq!(out.frames(), 7);
        assert!((out.values[[1, 2]] - 5.0).abs() < 1e-9);
        assert!((out.values[[3, 7]] - 12.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_roundtrip_is_tight() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((40, 7), |(i, j)| {
            if j == 6 {
                4.25 // constant column exercises the variance floor
            } else {
                rng.gen_range(-3.0..3.0) * (j as f64 + 1.0) + i as f64 * 0.01
            }
        });
        let stats = NormStats::compute(&[&x]).unwrap();
        let normalized = stats.normalize(&x).unwrap();
        // Non-constant columns have near-zero mean and unit variance.
        let col0: Vec<f64> = normalized.column(0).to_vec();
        let m: f64 = col0.iter().sum::<f64>() / col0.len() as f64;
        let v: f64 = col0.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / col0.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
        let back = stats.denormalize(&normalized).unwrap();
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Width mismatch rejected.
        assert!(stats.normalize(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn window_counts_match_formula() {
        let cond = ConditioningSequence::new(Array2::zeros((10, 3)), 2, 1).unwrap();
        let pose = Array2::zeros((10, 4));
        assert_eq!(window_dataset(&pose, &cond, 10, 3).unwrap().len(), 1);
        assert_eq!(window_dataset(&pose, &cond, 7, 3).unwrap().len(), 2);
        assert_eq!(window_dataset(&pose, &cond, 11, 3).unwrap().len(), 0);
        assert!(window_dataset(&pose, &cond, 0, 3).is_err());
        let short = ConditioningSequence::new(Array2::zeros((9, 3)), 2, 1).unwrap();
        assert!(window_dataset(&pose, &short, 5, 2).is_err());
    }

    #[test]
    fn window_slices_are_aligned() {
        let pose = Array2::from_shape_fn((9, 2), |(i, j)| (10 * i + j) as f64);
        let audio = Array2::from_shape_fn((9, 1), |(i, _)| i as f64);
        let cond = ConditioningSequence::from_audio_and_style(&audio, &[1.0], 1).unwrap();
        let items = window_dataset(&pose, &cond, 4, 2).unwrap();
        assert_eq!(items.len(), 3);
        for (k, item) in items.iter().enumerate() {
            assert_eq!(item.x0.nrows(), 4);
            assert_eq!(item.x0[[0, 0]], (20 * k) as f64);
            assert_eq!(item.cond.frames[[0, 0]], (2 * k) as f64);
            item.cond.validate_style().unwrap();
        }
    }

    #[test]
    fn expmap_pose_norms_are_canonical() {
        let mut rows = zero_rows(5);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for row in rows.iter_mut() {
            for cell in row.iter_mut().skip(3) {
                *cell = rng.gen_range(-360.0..360.0);
            }
        }
        let (skel, motion) = fixture(&rows, 1.0 / 30.0);
        let poses = motion_to_poses(&skel, &motion).unwrap();
        assert_eq!(poses.len(), 5);
        for pose in &poses {
            for r in &pose.joint_rotations {
                let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                assert!(norm <= PI + 1e-12);
            }
        }
    }

    #[test]
    fn wrap_angle_range_and_fixed_points() {
        assert_eq!(wrap_angle(0.3), 0.3);
        assert!((wrap_angle(2.0 * PI + 0.3) - 0.3).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn mismatched_widths_are_configuration_errors() {
        let (skel, motion) = fixture(&zero_rows(2), 1.0 / 30.0);
        let narrow = MotionChannels {
            frame_time: motion.frame_time,
            values: motion.values.slice(s![.., ..7]).to_owned(),
        };
        assert!(make_pose_features(&skel, &narrow, &PoseOptions::default()).is_err());

        let (_, layout) = make_pose_features(&skel, &motion, &PoseOptions::default()).unwrap();
        assert!(features_to_motion(&skel, &layout, &array![[1.0, 2.0]]).is_err());
    }

    proptest! {
        /// Window count always equals the brute-force enumeration.
        #[test]
        fn window_count_matches_bruteforce(
            t_len in 1usize..40,
            window in 1usize..12,
            hop in 1usize..6,
        ) {
            let cond = ConditioningSequence::new(Array2::zeros((t_len, 2)), 1, 1).unwrap();
            let pose = Array2::zeros((t_len, 3));
            let items = window_dataset(&pose, &cond, window, hop).unwrap();
            let brute = (0..t_len).step_by(hop).filter(|s| s + window <= t_len).count();
            prop_assert_eq!(items.len(), brute);
            if window <= t_len {
                prop_assert_eq!(items.len(), (t_len - window) / hop + 1);
            }
        }
    }
}
