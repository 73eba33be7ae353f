//! Procedural scenes, a ray-cast renderer, and paired exo/ego episode generation.
//!
//! World frame is `+z` up with the ground plane at `z = 0`. The renderer also
//! serves as the exact transition oracle: the transition clip is rendered along
//! the interpolated pose track, so its first and last frames coincide with the
//! last exo frame and the first ego frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use crate::geometry::{
    add3, dot3, interpolate_pose_track, norm3, normalize3, scale3, sub3, CameraPose, PoseTrack, Vec3,
};

pub const CHANNELS: usize = 3;
pub const BACKGROUND: [f64; 3] = [0.55, 0.7, 0.9];
/// Source frames between two kept frames.
pub const SKIP_STEP: usize = 4;
pub const MAX_ATTEMPTS: u64 = 10;

const CHECKER_CELL: f64 = 0.75;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    /// Axis-aligned cube; `size` is its half extent.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: Vec3,
    pub size: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub ground_color: [f64; 3],
    pub light_dir: Vec3,
    /// Bounding radius around the origin containing every object and camera.
    pub radius: f64,
}

/// Knobs of the synthetic world; defaults give the toy setting.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub scene_radius: f64,
    pub object_spread: f64,
    pub fov: f64,
    pub exo_distance: (f64, f64),
    pub exo_height: (f64, f64),
    pub ego_height: f64,
    /// Largest yaw/pitch change between kept frames, radians.
    pub max_turn: f64,
    /// Largest translation between kept frames as a fraction of `scene_radius`.
    pub max_step_frac: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            scene_radius: 8.0,
            object_spread: 3.0,
            fov: 60f64.to_radians(),
            exo_distance: (5.5, 6.5),
            exo_height: (2.5, 3.5),
            ego_height: 1.6,
            max_turn: 10f64.to_radians(),
            max_step_frac: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Size("scene needs at least one object".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) {
                return Err(Error::Size(format!("object {i} has non-positive size {}", o.size)));
            }
            if norm3(o.center) + o.size * 3f64.sqrt() > self.radius {
                return Err(Error::Size(format!(
                    "object {i} extends beyond scene radius {}",
                    self.radius
                )));
            }
        }
        if (norm3(self.light_dir) - 1.0).abs() > 1e-9 {
            return Err(Error::Size("light_dir must be a unit vector".into()));
        }
        Ok(())
    }

    /// True if `p` lies inside some object grown by `margin`.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        self.objects.iter().any(|o| {
            let d = sub3(p, o.center);
            match o.shape {
                Shape::Sphere => norm3(d) < o.size + margin,
                Shape::Box => d.iter().all(|v| v.abs() < o.size + margin),
            }
        })
    }
}

/// Nearest positive ray parameter and outward normal.
fn intersect(obj: &SceneObject, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    match obj.shape {
        Shape::Sphere => {
            let oc = sub3(origin, obj.center);
            let b = dot3(oc, dir);
            let c = dot3(oc, oc) - obj.size * obj.size;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let s = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
            if s <= HIT_EPS {
                return None;
            }
            let p = add3(origin, scale3(dir, s));
            Some((s, normalize3(sub3(p, obj.center))))
        }
        Shape::Box => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            let mut sign = 1.0;
            for a in 0..3 {
                let lo = obj.center[a] - obj.size;
                let hi = obj.center[a] + obj.size;
                if dir[a].abs() < 1e-15 {
                    if origin[a] < lo || origin[a] > hi {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (lo - origin[a]) / dir[a];
                let mut t1 = (hi - origin[a]) / dir[a];
                let mut s = -1.0;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    s = 1.0;
                }
                if t0 > t_near {
                    t_near = t0;
                    axis = a;
                    sign = s;
                }
                t_far = t_far.min(t1);
            }
            if t_near > t_far || t_near <= HIT_EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((t_near, n))
        }
    }
}

/// Shaded color seen along a ray.
pub fn trace(scene: &SceneSpec, origin: Vec3, dir: Vec3) -> [f64; 3] {
    let mut best: Option<(f64, Vec3, [f64; 3])> = None;
    for obj in &scene.objects {
        if let Some((s, n)) = intersect(obj, origin, dir) {
            if best.as_ref().is_none_or(|b| s < b.0) {
                best = Some((s, n, obj.color));
            }
        }
    }
    if dir[2] < 0.0 && origin[2] > 0.0 {
        let s = -origin[2] / dir[2];
        if best.as_ref().is_none_or(|b| s < b.0) {
            let p = add3(origin, scale3(dir, s));
            let parity = ((p[0] / CHECKER_CELL).floor() + (p[1] / CHECKER_CELL).floor()) as i64;
            let base = if parity.rem_euclid(2) == 0 {
                scene.ground_color
            } else {
                scale3(scene.ground_color, 0.6)
            };
            best = Some((s, [0.0, 0.0, 1.0], base));
        }
    }
    match best {
        Some((_, n, color)) => {
            let lambert = dot3(n, scene.light_dir).max(0.0);
            [color[0] * lambert, color[1] * lambert, color[2] * lambert]
        }
        None => BACKGROUND,
    }
}

/// Renders a `3 x H x W` frame in `[0, 1]`.
pub fn render(scene: &SceneSpec, pose: &CameraPose, height: usize, width: usize) -> Result<Vec<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::Render(format!("empty image {height}x{width}")));
    }
    pose.validate()
        .map_err(|e| Error::Render(format!("degenerate pose: {e}")))?;
    let center = pose.center();
    if scene.contains(center, 0.0) {
        return Err(Error::Render("camera is inside an object".into()));
    }
    let plane = height * width;
    let mut out = vec![0f32; CHANNELS * plane];
    for row in 0..height {
        for col in 0..width {
            let (o, d) = pose.pixel_ray(col, row);
            let n = norm3(d);
            if !n.is_finite() || n == 0.0 {
                return Err(Error::Render(format!("zero-norm ray at pixel ({col}, {row})")));
            }
            let c = trace(scene, o, d);
            for ch in 0..CHANNELS {
                out[ch * plane + row * width + col] = c[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

pub fn render_track(scene: &SceneSpec, track: &PoseTrack, height: usize, width: usize) -> Result<FrameClip> {
    let frames = track
        .iter()
        .map(|p| render(scene, p, height, width))
        .collect::<Result<Vec<_>>>()?;
    FrameClip::from_frames(CHANNELS, height, width, &frames)
}

/// Keeps `count` frames, every `step`-th starting at the first.
pub fn temporal_subsample<T: Clone>(frames: &[T], step: usize, count: usize) -> Result<Vec<T>> {
    if step == 0 {
        return Err(Error::Size("subsample step must be >= 1".into()));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let needed = 1 + (count - 1) * step;
    if needed > frames.len() {
        return Err(Error::Size(format!(
            "{count} frames at step {step} need {needed} source frames, have {}",
            frames.len()
        )));
    }
    Ok(frames.iter().step_by(step).take(count).cloned().collect())
}

/// Whether `len` has the `4n + 1` form required by boundary-frame interpolators.
pub fn is_four_n_plus_one(len: usize) -> bool {
    len % 4 == 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub scene: SceneSpec,
    pub exo: FrameClip,
    pub ego: FrameClip,
    pub interp: FrameClip,
    pub exo_poses: PoseTrack,
    pub interp_poses: PoseTrack,
    pub ego_poses: PoseTrack,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.exo.frames
    }

    pub fn is_empty(&self) -> bool {
        self.exo.frames == 0
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.exo.frames;
        let lens = [
            self.ego.frames,
            self.interp.frames,
            self.exo_poses.len(),
            self.interp_poses.len(),
            self.ego_poses.len(),
        ];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::Size(format!(
                "episode segment lengths disagree: exo {t}, others {lens:?}"
            )));
        }
        if !self.exo.same_frame_shape(&self.ego) || !self.exo.same_frame_shape(&self.interp) {
            return Err(Error::Shape("episode clips have different frame shapes".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

fn sample_scene(rng: &mut ChaCha8Rng, seed: u64, params: &WorldParams) -> SceneSpec {
    let count = rng.random_range(4..=7);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere
        } else {
            Shape::Box
        };
        let size = uniform(rng, (0.35, 0.9));
        let r = params.object_spread * rng.random::<f64>().sqrt();
        let a = uniform(rng, (0.0, std::f64::consts::TAU));
        let color = [
            uniform(rng, (0.15, 1.0)),
            uniform(rng, (0.15, 1.0)),
            uniform(rng, (0.15, 1.0)),
        ];
        objects.push(SceneObject {
            shape,
            center: [r * a.cos(), r * a.sin(), size],
            size,
            color,
        });
    }
    let ground_color = [
        uniform(rng, (0.3, 0.8)),
        uniform(rng, (0.3, 0.8)),
        uniform(rng, (0.3, 0.8)),
    ];
    let az = uniform(rng, (0.0, std::f64::consts::TAU));
    let el = uniform(rng, (35f64.to_radians(), 75f64.to_radians()));
    let light_dir = normalize3([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
    SceneSpec {
        seed,
        objects,
        ground_color,
        light_dir,
        radius: params.scene_radius,
    }
}

fn camera_ok(scene: &SceneSpec, pose: &CameraPose, params: &WorldParams) -> bool {
    let c = pose.center();
    norm3(c) < params.scene_radius && c[2] > 0.2 && !scene.contains(c, 0.15)
}

fn try_episode(
    seed: u64,
    attempt: u64,
    len: usize,
    height: usize,
    width: usize,
    params: &WorldParams,
) -> Result<Option<EpisodeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let scene = sample_scene(&mut rng, seed, params);
    scene.validate()?;

    let exo_az = uniform(&mut rng, (0.0, std::f64::consts::TAU));
    let exo_dist = uniform(&mut rng, params.exo_distance);
    let eye = [
        exo_dist * exo_az.cos(),
        exo_dist * exo_az.sin(),
        uniform(&mut rng, params.exo_height),
    ];
    let target = [uniform(&mut rng, (-0.5, 0.5)), uniform(&mut rng, (-0.5, 0.5)), 0.4];
    let exo_pose = CameraPose::look_at(params.fov, width, height, eye, target)?;

    // Ego actor stands on the far side of the scene from the exo camera.
    let actor_az = exo_az + std::f64::consts::PI + uniform(&mut rng, (-0.9, 0.9));
    let actor_r = uniform(&mut rng, (1.5, 3.0));
    let mut pos = [actor_r * actor_az.cos(), actor_r * actor_az.sin(), params.ego_height];
    let to_center = (-pos[1]).atan2(-pos[0]);
    let mut yaw = to_center + uniform(&mut rng, (-0.5, 0.5));
    let mut pitch = uniform(&mut rng, (-35f64.to_radians(), -15f64.to_radians()));

    let sub_turn = params.max_turn / SKIP_STEP as f64;
    let sub_step = params.max_step_frac * params.scene_radius / SKIP_STEP as f64;
    let yaw_rate = uniform(&mut rng, (-0.6, 0.6)) * sub_turn;
    let speed = uniform(&mut rng, (0.2, 0.8)) * sub_step;
    let source_len = 1 + (len - 1) * SKIP_STEP;
    let mut source = Vec::with_capacity(source_len);
    for i in 0..source_len {
        if i > 0 {
            let dyaw = (yaw_rate + uniform(&mut rng, (-0.4, 0.4)) * sub_turn).clamp(-sub_turn, sub_turn);
            let dpitch = uniform(&mut rng, (-0.4, 0.4)) * sub_turn;
            yaw += dyaw;
            pitch = (pitch + dpitch).clamp(-60f64.to_radians(), 10f64.to_radians());
            let lateral = uniform(&mut rng, (-0.3, 0.3)) * speed;
            let step = [
                speed * yaw.cos() - lateral * yaw.sin(),
                speed * yaw.sin() + lateral * yaw.cos(),
                0.0,
            ];
            let n = norm3(step);
            let step = if n > sub_step { scale3(step, sub_step / n) } else { step };
            pos = add3(pos, step);
        }
        source.push(CameraPose::from_yaw_pitch(params.fov, width, height, pos, yaw, pitch)?);
    }
    let ego_poses = PoseTrack::new(temporal_subsample(&source, SKIP_STEP, len)?)?;
    let exo_poses = PoseTrack::constant(exo_pose, len)?;
    let interp_poses = interpolate_pose_track(exo_poses.last(), ego_poses.first(), len)?;

    let all_ok = std::iter::once(&exo_pose)
        .chain(ego_poses.iter())
        .chain(interp_poses.iter())
        .all(|p| camera_ok(&scene, p, params));
    if !all_ok {
        return Ok(None);
    }

    let exo_frame = render(&scene, &exo_pose, height, width)?;
    let exo = FrameClip::from_frames(CHANNELS, height, width, &vec![exo_frame; len])?;
    let ego = render_track(&scene, &ego_poses, height, width)?;
    let interp = render_track(&scene, &interp_poses, height, width)?;
    Ok(Some(EpisodeRecord {
        scene,
        exo,
        ego,
        interp,
        exo_poses,
        interp_poses,
        ego_poses,
    }))
}

pub fn generate_episode_with(
    params: &WorldParams,
    seed: u64,
    len: usize,
    height: usize,
    width: usize,
) -> Result<EpisodeRecord> {
    if len < 2 {
        return Err(Error::Size(format!("episode length must be >= 2, got {len}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Size(format!(
            "image size must be positive, got {height}x{width}"
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(ep) = try_episode(seed, attempt, len, height, width, params)? {
            return Ok(ep);
        }
    }
    Err(Error::Episode(format!(
        "seed {seed}: trajectory left the scene bounds in all {MAX_ATTEMPTS} attempts"
    )))
}

/// Deterministic episode for `seed` with the default world parameters.
pub fn generate_episode(seed: u64, len: usize, height: usize, width: usize) -> Result<EpisodeRecord> {
    generate_episode_with(&WorldParams::default(), seed, len, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;

    fn sphere_scene() -> SceneSpec {
        SceneSpec {
            seed: 0,
            objects: vec![SceneObject {
                shape: Shape::Sphere,
                center: [0.0, 0.0, 5.0],
                size: 1.0,
                color: [1.0, 0.5, 0.25],
            }],
            ground_color: [0.5, 0.5, 0.5],
            light_dir: [0.0, 0.0, -1.0],
            radius: 10.0,
        }
    }

    fn upward_pose(size: usize) -> CameraPose {
        CameraPose::with_fov(60f64.to_radians(), size, size, Quaternion::IDENTITY, [0.0; 3]).unwrap()
    }

    #[test]
    fn no_hits_gives_background() {
        let mut scene = sphere_scene();
        scene.objects[0].center = [0.0, 0.0, -50.0];
        let frame = render(&scene, &upward_pose(8), 8, 8).unwrap();
        for ch in 0..3 {
            assert!(frame[ch * 64..(ch + 1) * 64]
                .iter()
                .all(|&v| v == BACKGROUND[ch] as f32));
        }
    }

    #[test]
    fn sphere_on_axis_hits_center_not_corners() {
        let scene = sphere_scene();
        let pose = upward_pose(32);
        let frame = render(&scene, &pose, 32, 32).unwrap();
        let px = |row: usize, col: usize| {
            [
                frame[row * 32 + col],
                frame[1024 + row * 32 + col],
                frame[2048 + row * 32 + col],
            ]
        };
        let bg = BACKGROUND.map(|v| v as f32);
        // The sphere's lit side faces the camera: light points down, toward it.
        let (o, d) = pose.pixel_ray(16, 16);
        let oc = sub3(o, [0.0, 0.0, 5.0]);
        let b = dot3(oc, d);
        let s = -b - (b * b - (dot3(oc, oc) - 1.0)).sqrt();
        let n = normalize3(sub3(add3(o, scale3(d, s)), [0.0, 0.0, 5.0]));
        let lambert = dot3(n, [0.0, 0.0, -1.0]);
        let center = px(16, 16);
        assert!((center[0] as f64 - lambert).abs() < 1e-6);
        assert!((center[1] as f64 - 0.5 * lambert).abs() < 1e-6);
        for (r, c) in [(0, 0), (0, 31), (31, 0), (31, 31)] {
            assert_eq!(px(r, c), bg);
        }
    }

    #[test]
    fn render_is_deterministic_and_rejects_inside_camera() {
        let scene = sphere_scene();
        let pose = upward_pose(16);
        assert_eq!(
            render(&scene, &pose, 16, 16).unwrap(),
            render(&scene, &pose, 16, 16).unwrap()
        );
        let inside = CameraPose::new(10.0, 10.0, 8.0, 8.0, Quaternion::IDENTITY, [0.0, 0.0, -5.0]).unwrap();
        assert!(matches!(render(&scene, &inside, 16, 16), Err(Error::Render(_))));
    }

    #[test]
    fn box_normal_faces_ray() {
        let obj = SceneObject {
            shape: Shape::Box,
            center: [3.0, 0.0, 0.0],
            size: 1.0,
            color: [1.0; 3],
        };
        let (s, n) = intersect(&obj, [0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert_eq!(n, [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn subsample_examples() {
        let frames: Vec<usize> = (0..33).collect();
        let kept = temporal_subsample(&frames, 4, 9).unwrap();
        assert_eq!(kept, vec![0, 4, 8, 12, 16, 20, 24, 28, 32]);
        assert_eq!(temporal_subsample(&frames, 1, 33).unwrap(), frames);
        assert!(matches!(temporal_subsample(&frames[..10], 4, 9), Err(Error::Size(_))));
        assert!(is_four_n_plus_one(9) && !is_four_n_plus_one(8));
    }

    #[test]
    fn episode_structure() {
        let ep = generate_episode(42, 5, 16, 16).unwrap();
        ep.validate().unwrap();
        assert!(ep.exo_poses.iter().all(|p| p == ep.exo_poses.first()));
        assert_eq!(ep.interp.frame(0), ep.exo.frame(4));
        assert_eq!(ep.interp.frame(4), ep.ego.frame(0));
        assert_eq!(ep, generate_episode(42, 5, 16, 16).unwrap());
        assert!(matches!(generate_episode(1, 1, 16, 16), Err(Error::Size(_))));
    }

    #[test]
    fn ego_motion_within_limits() {
        let params = WorldParams::default();
        let ep = generate_episode(7, 9, 8, 8).unwrap();
        for w in ep.ego_poses.poses.windows(2) {
            let step = norm3(sub3(w[1].center(), w[0].center()));
            assert!(step <= params.max_step_frac * params.scene_radius + 1e-9);
            let turn = w[0].rotation.rotation_angle_to(&w[1].rotation);
            // Yaw and pitch each stay under the cap; their composition is bounded by the sum.
            assert!(turn <= 2.0 * params.max_turn + 1e-9, "turn {turn}");
        }
    }
}
