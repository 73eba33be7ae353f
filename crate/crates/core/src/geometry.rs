//! Camera poses, rotation interpolation and per-frame pose embeddings.
//!
//! Conventions: quaternions are scalar-first `(w, x, y, z)` and canonicalized
//! to `w >= 0`; extrinsics map world to camera, `X_cam = R * X_world + t`;
//! the camera looks down its `+z` axis with `+x` right and `+y` down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Tolerance on quaternion norm accepted as "unit".
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Dot-product threshold above which slerp falls back to normalized lerp.
pub const NLERP_THRESHOLD: f64 = 1.0 - 1e-7;

/// Number of harmonic frequencies per component in the ray encoding.
pub const RAY_FREQUENCIES: usize = 15;

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the components and canonicalizes the sign to `w >= 0`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion { w, x, y, z };
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidRotation { norm: n });
        }
        Ok(q.scale(1.0 / n).canonical())
    }

    /// Accepts already-unit components verbatim (no renormalization).
    pub fn from_unit(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion { w, x, y, z };
        q.check_unit()?;
        Ok(q)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm3(axis);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidRotation { norm: n });
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion::new(c, axis[0] / n * s, axis[1] / n * s, axis[2] / n * s)
    }

    /// Shepperd's method; the result is canonicalized to `w >= 0`.
    pub fn from_rotation_matrix(m: &Mat3) -> Result<Self> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        Quaternion::new(w, x, y, z)
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Quaternion {
        Quaternion {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn negate(&self) -> Quaternion {
        self.scale(-1.0)
    }

    pub fn canonical(&self) -> Quaternion {
        if self.w < 0.0 {
            self.negate()
        } else {
            *self
        }
    }

    /// Hamilton product `self * other`.
    pub fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Angle of the rotation taking `self` to `other`, in `[0, pi]`.
    pub fn rotation_angle_to(&self, other: &Quaternion) -> f64 {
        2.0 * self.dot(other).abs().min(1.0).acos()
    }

    pub fn check_unit(&self) -> Result<()> {
        let n = self.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidRotation { norm: n });
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Range {
            what: "tau",
            value: tau,
            expected: "[0, 1]",
        });
    }
    Ok(())
}

/// Spherical linear interpolation along the shortest geodesic.
pub fn slerp(q0: &Quaternion, q1: &Quaternion, tau: f64) -> Result<Quaternion> {
    q0.check_unit()?;
    q1.check_unit()?;
    check_tau(tau)?;
    if tau == 0.0 || q0 == q1 {
        return Ok(*q0);
    }
    if tau == 1.0 {
        return Ok(*q1);
    }
    let mut end = *q1;
    let mut cos_theta = q0.dot(q1);
    if cos_theta < 0.0 {
        end = end.negate();
        cos_theta = -cos_theta;
    }
    let out = if cos_theta > NLERP_THRESHOLD {
        Quaternion {
            w: (1.0 - tau) * q0.w + tau * end.w,
            x: (1.0 - tau) * q0.x + tau * end.x,
            y: (1.0 - tau) * q0.y + tau * end.y,
            z: (1.0 - tau) * q0.z + tau * end.z,
        }
    } else {
        let theta = cos_theta.acos();
        let sin_theta = theta.sin();
        let a = ((1.0 - tau) * theta).sin() / sin_theta;
        let b = (tau * theta).sin() / sin_theta;
        Quaternion {
            w: a * q0.w + b * end.w,
            x: a * q0.x + b * end.x,
            y: a * q0.y + b * end.y,
            z: a * q0.z + b * end.z,
        }
    };
    Ok(out.scale(1.0 / out.norm()))
}

pub fn lerp_translation(t0: Vec3, t1: Vec3, tau: f64) -> Result<Vec3> {
    check_tau(tau)?;
    if tau == 1.0 {
        return Ok(t1);
    }
    Ok([
        t0[0] + tau * (t1[0] - t0[0]),
        t0[1] + tau * (t1[1] - t0[1]),
        t0[2] + tau * (t1[2] - t0[2]),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "quat", with = "quat_array")]
    pub rotation: Quaternion,
    #[serde(rename = "trans")]
    pub translation: Vec3,
}

mod quat_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Quaternion;

    pub fn serialize<S: Serializer>(q: &Quaternion, s: S) -> Result<S::Ok, S::Error> {
        q.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Quaternion, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        Quaternion::from_unit(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

impl CameraPose {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Quaternion, translation: Vec3) -> Result<Self> {
        let pose = CameraPose {
            fx,
            fy,
            cx,
            cy,
            rotation: rotation.canonical(),
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Pinhole intrinsics from a horizontal field of view, principal point at the image center.
    pub fn with_fov(fov_x: f64, width: usize, height: usize, rotation: Quaternion, translation: Vec3) -> Result<Self> {
        let f = width as f64 / 2.0 / (fov_x / 2.0).tan();
        CameraPose::new(f, f, width as f64 / 2.0, height as f64 / 2.0, rotation, translation)
    }

    /// Camera at `eye` looking toward `target`, world `+z` up.
    pub fn look_at(fov_x: f64, width: usize, height: usize, eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = sub3(target, eye);
        if norm3(forward) < 1e-12 {
            return Err(Error::Size("look_at with coincident eye and target".into()));
        }
        let forward = normalize3(forward);
        let yaw = forward[1].atan2(forward[0]);
        let pitch = forward[2].clamp(-1.0, 1.0).asin();
        CameraPose::from_yaw_pitch(fov_x, width, height, eye, yaw, pitch)
    }

    /// Camera at `eye` with heading `yaw` (about world `+z`) and elevation `pitch`.
    pub fn from_yaw_pitch(fov_x: f64, width: usize, height: usize, eye: Vec3, yaw: f64, pitch: f64) -> Result<Self> {
        let rotation = world_to_camera_rotation(yaw, pitch)?;
        let r = rotation.to_rotation_matrix();
        let t = scale3(mat_vec(&r, eye), -1.0);
        CameraPose::with_fov(fov_x, width, height, rotation, t)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("fx", self.fx), ("fy", self.fy)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Range {
                    what,
                    value: v,
                    expected: "> 0",
                });
            }
        }
        for (what, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(Error::Range {
                    what,
                    value: v,
                    expected: "finite",
                });
            }
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range {
                what: "translation",
                value: f64::NAN,
                expected: "finite",
            });
        }
        self.rotation.check_unit()
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix()
    }

    /// World-space camera center `-R^T t`.
    pub fn center(&self) -> Vec3 {
        scale3(mat_t_vec(&self.rotation_matrix(), self.translation), -1.0)
    }

    /// Row-major `[R | t; 0 0 0 1]`.
    pub fn extrinsic_matrix(&self) -> [f64; 16] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// World-space ray through image point `(u, v)`: camera center and unit direction.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let r = self.rotation_matrix();
        let d_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        (self.center(), normalize3(mat_t_vec(&r, d_cam)))
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize) -> (Vec3, Vec3) {
        self.ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = add3(mat_vec(&self.rotation_matrix(), p), self.translation);
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }

    fn same_extrinsics(&self, other: &CameraPose) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

fn world_to_camera_rotation(yaw: f64, pitch: f64) -> Result<Quaternion> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = [cp * cy, cp * sy, sp];
    let right = [sy, -cy, 0.0];
    let down = cross3(forward, right);
    // Rows of world-to-camera are the camera axes in world coordinates.
    Quaternion::from_rotation_matrix(&[right, down, forward])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseTrack {
    pub poses: Vec<CameraPose>,
}

impl PoseTrack {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::Size(format!(
                "pose track needs at least 2 poses, got {}",
                poses.len()
            )));
        }
        Ok(PoseTrack { poses })
    }

    pub fn constant(pose: CameraPose, len: usize) -> Result<Self> {
        PoseTrack::new(vec![pose; len])
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> &CameraPose {
        &self.poses[0]
    }

    pub fn last(&self) -> &CameraPose {
        &self.poses[self.poses.len() - 1]
    }

    pub fn concat(tracks: &[&PoseTrack]) -> Result<Self> {
        PoseTrack::new(tracks.iter().flat_map(|t| t.poses.iter().copied()).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CameraPose> {
        self.poses.iter()
    }
}

/// Normalized time of element `j` (0-based) in a track of `len` poses.
pub fn normalized_time(j: usize, len: usize) -> f64 {
    j as f64 / (len - 1) as f64
}

/// Transition track from the last exo pose to the first ego pose.
///
/// Rotations follow slerp, translations lerp, and every pose carries the exo
/// intrinsics. Both endpoints reproduce the input extrinsics exactly.
pub fn interpolate_pose_track(exo_last: &CameraPose, ego_first: &CameraPose, len: usize) -> Result<PoseTrack> {
    if len < 2 {
        return Err(Error::Size(format!("transition track length must be >= 2, got {len}")));
    }
    exo_last.validate()?;
    ego_first.validate()?;
    let mut poses = Vec::with_capacity(len);
    for j in 0..len {
        let tau = normalized_time(j, len);
        let (rotation, translation) = if j == 0 {
            (exo_last.rotation, exo_last.translation)
        } else if j == len - 1 {
            (ego_first.rotation, ego_first.translation)
        } else if exo_last.same_extrinsics(ego_first) {
            (exo_last.rotation, exo_last.translation)
        } else {
            (
                slerp(&exo_last.rotation, &ego_first.rotation, tau)?.canonical(),
                lerp_translation(exo_last.translation, ego_first.translation, tau)?,
            )
        };
        poses.push(CameraPose {
            fx: exo_last.fx,
            fy: exo_last.fy,
            cx: exo_last.cx,
            cy: exo_last.cy,
            rotation,
            translation,
        });
    }
    PoseTrack::new(poses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Global,
    Ray,
    Plucker,
}

impl EmbedMode {
    /// Values per pixel for per-pixel modes, per frame for `Global`.
    pub fn channels(self) -> usize {
        match self {
            EmbedMode::Global => 16,
            EmbedMode::Ray => 6 * RAY_FREQUENCIES * 2,
            EmbedMode::Plucker => 6,
        }
    }

    pub fn is_per_pixel(self) -> bool {
        !matches!(self, EmbedMode::Global)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMode::Global => "global",
            EmbedMode::Ray => "ray",
            EmbedMode::Plucker => "plucker",
        }
    }
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(EmbedMode::Global),
            "ray" => Ok(EmbedMode::Ray),
            "plucker" => Ok(EmbedMode::Plucker),
            other => Err(Error::Mode(format!("embedding mode `{other}`"))),
        }
    }
}

/// Per-frame pose embedding. Per-pixel modes are stored `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEmbedding {
    pub mode: EmbedMode,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PoseEmbedding {
    pub fn expected_len(mode: EmbedMode, height: usize, width: usize) -> usize {
        if mode.is_per_pixel() {
            height * width * mode.channels()
        } else {
            mode.channels()
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.mode.channels();
        let at = (row * self.width + col) * c;
        &self.data[at..at + c]
    }

    /// Frame-level summary vector: the embedding itself for `Global`, the per-channel
    /// pixel mean otherwise.
    pub fn pooled(&self) -> Vec<f64> {
        if !self.mode.is_per_pixel() {
            return self.data.clone();
        }
        let c = self.mode.channels();
        let mut out = vec![0.0; c];
        for px in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (self.height * self.width) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Size(format!(
            "embedding dims must be >= 1, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Embeds `pose` for an `height x width` image.
///
/// * `Global`: the flattened world-to-camera extrinsic matrix.
/// * `Plucker`: per pixel `(d, o x d)` with `d` the unit world ray direction.
/// * `Ray`: per pixel, sin/cos harmonics at frequencies `pi * (f + 1)` for
///   `f < 15` of `(o / scene_radius, d)`, laid out component-major.
pub fn pose_embedding(
    pose: &CameraPose,
    mode: EmbedMode,
    height: usize,
    width: usize,
    scene_radius: f64,
) -> Result<PoseEmbedding> {
    check_dims(height, width)?;
    pose.validate()?;
    let data = match mode {
        EmbedMode::Global => pose.extrinsic_matrix().to_vec(),
        EmbedMode::Plucker => {
            let mut data = Vec::with_capacity(height * width * 6);
            for row in 0..height {
                for col in 0..width {
                    let (o, d) = pose.pixel_ray(col, row);
                    let m = cross3(o, d);
                    data.extend_from_slice(&d);
                    data.extend_from_slice(&m);
                }
            }
            data
        }
        EmbedMode::Ray => {
            if !(scene_radius > 0.0) {
                return Err(Error::Range {
                    what: "scene_radius",
                    value: scene_radius,
                    expected: "> 0",
                });
            }
            let mut data = Vec::with_capacity(height * width * mode.channels());
            for row in 0..height {
                for col in 0..width {
                    let (o, d) = pose.pixel_ray(col, row);
                    let o = scale3(o, 1.0 / scene_radius);
                    for v in o.iter().chain(d.iter()) {
                        for f in 0..RAY_FREQUENCIES {
                            let (s, c) = (std::f64::consts::PI * (f + 1) as f64 * v).sin_cos();
                            data.push(s);
                            data.push(c);
                        }
                    }
                }
            }
            data
        }
    };
    Ok(PoseEmbedding {
        mode,
        height,
        width,
        data,
    })
}

pub fn zero_embedding(mode: EmbedMode, height: usize, width: usize) -> Result<PoseEmbedding> {
    check_dims(height, width)?;
    Ok(PoseEmbedding {
        mode,
        height,
        width,
        data: vec![0.0; PoseEmbedding::expected_len(mode, height, width)],
    })
}
