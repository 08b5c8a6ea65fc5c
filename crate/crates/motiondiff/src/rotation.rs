//! Rotation conversions: intrinsic Euler angles (BVH channel convention, in
//! degrees), 3×3 rotation matrices, and exponential-map (axis-angle) vectors
//! in radians with the canonical representative ‖r‖ ≤ π.
//!
//! Matrices act on column vectors, `v' = R v`, in a right-handed frame. An
//! Euler triple with order `Xyz` composes as `R = Rx(a)·Ry(b)·Rz(c)`: the
//! first listed axis is the outermost rotation, which is how BVH channel
//! lists are interpreted. Small angles are handled by Taylor expansion below
//! 1e-8 so no conversion ever divides by a vanishing norm.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// 3×3 matrix in row-major nested arrays.
pub type Mat3 = [[f64; 3]; 3];

/// Threshold under which Rodrigues / log-map factors switch to their Taylor
/// series (‖r‖ or θ in radians).
pub const SMALL_ANGLE: f64 = 1e-8;

/// Intrinsic rotation order: the listed axes compose left to right, first
/// axis outermost (`Xyz` ⇒ `Rx·Ry·Rz`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationOrder {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl RotationOrder {
    /// Axis indices (0 = X, 1 = Y, 2 = Z) in composition order.
    pub fn axes(self) -> [usize; 3] {
        match self {
            RotationOrder::Xyz => [0, 1, 2],
            RotationOrder::Xzy => [0, 2, 1],
            RotationOrder::Yxz => [1, 0, 2],
            RotationOrder::Yzx => [1, 2, 0],
            RotationOrder::Zxy => [2, 0, 1],
            RotationOrder::Zyx => [2, 1, 0],
        }
    }

    /// Build an order from three distinct axis indices.
    pub fn from_axes(axes: [usize; 3]) -> Result<Self> {
        match axes {
            [0, 1, 2] => Ok(RotationOrder::Xyz),
            [0, 2, 1] => Ok(RotationOrder::Xzy),
            [1, 0, 2] => Ok(RotationOrder::Yxz),
            [1, 2, 0] => Ok(RotationOrder::Yzx),
            [2, 0, 1] => Ok(RotationOrder::Zxy),
            [2, 1, 0] => Ok(RotationOrder::Zyx),
            _ => Err(Error::data(format!(
                "rotation axes {axes:?} are not a permutation of X, Y, Z"
            ))),
        }
    }

    /// Sign of the axis permutation: +1 for cyclic orders, −1 otherwise.
    fn perm_sign(self) -> f64 {
        match self {
            RotationOrder::Xyz | RotationOrder::Yzx | RotationOrder::Zxy => 1.0,
            _ => -1.0,
        }
    }
}

pub fn mat_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[j][i];
        }
    }
    out
}

pub fn mat_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

/// Rotation about a coordinate axis (0 = X, 1 = Y, 2 = Z) by `radians`.
pub fn axis_rotation(axis: usize, radians: f64) -> Mat3 {
    assert!(axis < 3, "axis index out of range");
    let (s, c) = radians.sin_cos();
    let j = (axis + 1) % 3;
    let k = (axis + 2) % 3;
    let mut m = mat_identity();
    m[j][j] = c;
    m[k][k] = c;
    m[j][k] = -s;
    m[k][j] = s;
    m
}

/// Compose intrinsic rotations in the declared order. Angles in degrees.
pub fn euler_to_matrix(angles_deg: [f64; 3], order: RotationOrder) -> Mat3 {
    let [i, j, k] = order.axes();
    let a = axis_rotation(i, angles_deg[0].to_radians());
    let b = axis_rotation(j, angles_deg[1].to_radians());
    let c = axis_rotation(k, angles_deg[2].to_radians());
    mat_mul(&mat_mul(&a, &b), &c)
}

/// Extract intrinsic Euler angles (degrees) from a rotation matrix.
///
/// The middle angle lands in [−90°, 90°]. At a gimbal pole (middle angle
/// ±90°) the first and last rotations share an axis; the convention here
/// zeroes the last angle and folds the combined rotation into the first.
pub fn matrix_to_euler(m: &Mat3, order: RotationOrder) -> [f64; 3] {
    let [i, j, k] = order.axes();
    let eps = order.perm_sign();
    let sb = (eps * m[i][k]).clamp(-1.0, 1.0);
    // Below this margin the two atan2 branches read pure round-off; solve the
    // degenerate one-angle problem instead. Kept tiny on purpose: the asin
    // branch stays accurate (≈1e-8 in the reconstructed matrix) much closer
    // to the pole than a loose cutoff would.
    if 1.0 - sb.abs() < 4e-16 {
        let beta = std::f64::consts::FRAC_PI_2.copysign(sb);
        // With the last angle fixed at zero, M·Rj(−β) must equal Ri(α).
        let mm = mat_mul(m, &axis_rotation(j, -beta));
        let alpha = (eps * mm[k][j]).atan2(mm[j][j]);
        return [alpha.to_degrees(), beta.to_degrees(), 0.0];
    }
    let beta = sb.asin();
    let alpha = (-eps * m[j][k]).atan2(m[k][k]);
    let gamma = (-eps * m[i][j]).atan2(m[i][i]);
    [alpha.to_degrees(), beta.to_degrees(), gamma.to_degrees()]
}

/// Rodrigues' formula: exponential-map vector (radians) to rotation matrix.
pub fn expmap_to_matrix(r: [f64; 3]) -> Mat3 {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let theta = theta2.sqrt();
    // R = I + A·K + B·K² with K = skew(r), A = sin θ/θ, B = (1−cos θ)/θ².
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let (x, y, z) = (r[0], r[1], r[2]);
    [
        [
            1.0 - b * (y * y + z * z),
            b * x * y - a * z,
            b * x * z + a * y,
        ],
        [
            b * x * y + a * z,
            1.0 - b * (x * x + z * z),
            b * y * z - a * x,
        ],
        [
            b * x * z - a * y,
            b * y * z + a * x,
            1.0 - b * (x * x + y * y),
        ],
    ]
}

/// Matrix logarithm: rotation matrix to the canonical exponential-map vector
/// with ‖r‖ ≤ π. Near the half-turn singularity the axis is recovered from
/// the symmetric part, which stays well conditioned where the skew part
/// vanishes.
pub fn matrix_to_expmap(m: &Mat3) -> [f64; 3] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    // vee(M − Mᵀ) = 2 sin θ · axis
    let v = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    let vee_norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    // Recover θ from both the skew norm (2 sin θ) and the trace (1 + 2 cos θ):
    // atan2 stays fully conditioned where acos alone would lose ~8 digits
    // near θ = π.
    let theta = (vee_norm / 2.0).atan2(cos_theta);
    if theta < SMALL_ANGLE {
        // θ/(2 sin θ) → 1/2 with an O(θ²) correction below resolution here.
        return [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0];
    }
    if theta > std::f64::consts::PI - 1e-4 {
        // sin θ ≈ 0: the skew part no longer determines the axis; read it
        // from the symmetric part, (M + Mᵀ)/2 = cos θ·I + (1 − cos θ)·nnᵀ.
        let denom = 1.0 - cos_theta;
        let mut nn = [[0.0; 3]; 3];
        for (i, row) in nn.iter_mut().enumerate() {
            for (j, val) in row.iter_mut().enumerate() {
                let sym = (m[i][j] + m[j][i]) / 2.0;
                let diag = if i == j { cos_theta } else { 0.0 };
                *val = (sym - diag) / denom;
            }
        }
        let lead = (0..3).max_by(|&a, &b| nn[a][a].total_cmp(&nn[b][b])).unwrap();
        let mut n = [0.0; 3];
        n[lead] = nn[lead][lead].max(0.0).sqrt();
        for j in 0..3 {
            if j != lead {
                n[j] = nn[j][lead] / n[lead];
            }
        }
        // Orient along the skew part while it is still informative; at an
        // exact half turn both signs name the same rotation, so pick the
        // representative whose leading component is nonnegative.
        let dot = v[0] * n[0] + v[1] * n[1] + v[2] * n[2];
        let flip = if dot.abs() > 1e-9 {
            dot < 0.0
        } else {
            let lead_val = n.iter().find(|c| c.abs() > 1e-6).copied().unwrap_or(1.0);
            lead_val < 0.0
        };
        if flip {
            for c in &mut n {
                *c = -*c;
            }
        }
        return [theta * n[0], theta * n[1], theta * n[2]];
    }
    let scale = theta / vee_norm;
    [v[0] * scale, v[1] * scale, v[2] * scale]
}

/// Intrinsic Euler angles (degrees) to the canonical exponential map.
pub fn euler_to_expmap(angles_deg: [f64; 3], order: RotationOrder) -> [f64; 3] {
    matrix_to_expmap(&euler_to_matrix(angles_deg, order))
}

/// Exponential map back to Euler angles (degrees) in the given order.
pub fn expmap_to_euler(r: [f64; 3], order: RotationOrder) -> [f64; 3] {
    matrix_to_euler(&expmap_to_matrix(r), order)
}

/// Reduce an exponential-map vector to the antipodal representative with
/// ‖r‖ ≤ π (ties keep the rotation unchanged up to sign).
pub fn canonicalize_expmap(r: [f64; 3]) -> [f64; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta <= std::f64::consts::PI || theta < SMALL_ANGLE {
        return r;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = theta.rem_euclid(two_pi);
    let target = if wrapped > std::f64::consts::PI {
        wrapped - two_pi
    } else {
        wrapped
    };
    let scale = target / theta;
    [r[0] * scale, r[1] * scale, r[2] * scale]
}

/// Pick the (possibly non-canonical) antipodal representative of `b` nearest
/// to `a`, so that straight-line interpolation between successive frames does
/// not jump across the ±π boundary.
pub fn nearest_representative(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let theta = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if theta < SMALL_ANGLE {
        return b;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let alt_scale = (theta - two_pi) / theta;
    let alt = [b[0] * alt_scale, b[1] * alt_scale, b[2] * alt_scale];
    let d = |p: [f64; 3]| {
        (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2) + (p[2] - a[2]).powi(2)
    };
    if d(alt) < d(b) {
        alt
    } else {
        b
    }
}
