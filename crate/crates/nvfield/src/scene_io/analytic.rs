//! Analytic rigid-body scene generator: renders multi-view video frames,
//! per-body masks, and exposes the closed-form velocity field as an oracle.

use super::ppm::{write_image, write_mask, Image, Mask};
use super::{Aabb, CameraModel, FrameRecord, SceneManifest, Split};
use crate::renderer::composite_ray;
use crate::sampling::{rays_for_pixels, stratified_samples};
use crate::{Error, Result};
use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl Shape {
    fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => {
                Vector3::from_column_slice(half_extents).norm()
            }
        }
    }

    /// Test a point given in the body frame at t=0, relative to the center.
    fn contains_local(&self, local: &Vector3<f64>) -> bool {
        match self {
            Shape::Sphere { radius } => local.norm() <= *radius,
            Shape::Box { half_extents } => {
                local.x.abs() <= half_extents[0]
                    && local.y.abs() <= half_extents[1]
                    && local.z.abs() <= half_extents[2]
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Constant twist: linear velocity plus rotation about a pivot that
    /// translates along with the body.
    Twist {
        linear: [f64; 3],
        angular: [f64; 3],
        pivot: [f64; 3],
    },
    /// Constant acceleration: initial velocity plus a constant g-vector.
    Fall { u0: [f64; 3], g: [f64; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidBody {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Initial orientation as an axis-angle vector.
    #[serde(default)]
    pub orientation: [f64; 3],
    pub density: f64,
    pub albedo: [f64; 3],
    pub motion: Motion,
}

/// Rigid bodies with constant interior density over a black background.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub bodies: Vec<RigidBody>,
    #[serde(default = "Aabb::unit")]
    pub aabb: Aabb,
}

/// A body's pose at one timestamp, with the world-to-initial-frame mapping
/// prebaked for point containment tests.
struct BodyAt {
    rot_t_inv: Rotation3<f64>,
    /// World point minus this, rotated by `rot_t_inv`, lands in the t=0 frame
    /// around `restore`.
    anchor: Vector3<f64>,
    restore: Vector3<f64>,
    rot0_inv: Rotation3<f64>,
    center0: Vector3<f64>,
}

impl RigidBody {
    fn at(&self, t: f64) -> BodyAt {
        let center0 = Vector3::from_column_slice(&self.center);
        let rot0_inv = Rotation3::from_scaled_axis(Vector3::from_column_slice(&self.orientation))
            .inverse();
        match &self.motion {
            Motion::Twist { linear, angular, pivot } => {
                let u = Vector3::from_column_slice(linear);
                let w = Vector3::from_column_slice(angular);
                let pivot0 = Vector3::from_column_slice(pivot);
                let pivot_t = pivot0 + u * t;
                BodyAt {
                    rot_t_inv: Rotation3::from_scaled_axis(w * t).inverse(),
                    anchor: pivot_t,
                    restore: pivot0,
                    rot0_inv,
                    center0,
                }
            }
            Motion::Fall { u0, g } => {
                let offset = Vector3::from_column_slice(u0) * t
                    + Vector3::from_column_slice(g) * (0.5 * t * t);
                BodyAt {
                    rot_t_inv: Rotation3::identity(),
                    anchor: offset,
                    restore: Vector3::zeros(),
                    rot0_inv,
                    center0,
                }
            }
        }
    }

    /// Closed-form velocity of the material occupying point `p` at time `t`.
    fn velocity(&self, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match &self.motion {
            Motion::Twist { linear, angular, pivot } => {
                let u = Vector3::from_column_slice(linear);
                let w = Vector3::from_column_slice(angular);
                let pivot_t = Vector3::from_column_slice(pivot) + u * t;
                u + w.cross(&(p - pivot_t))
            }
            Motion::Fall { u0, g } => {
                Vector3::from_column_slice(u0) + Vector3::from_column_slice(g) * t
            }
        }
    }

    fn center_at(&self, t: f64) -> Vector3<f64> {
        let center0 = Vector3::from_column_slice(&self.center);
        match &self.motion {
            Motion::Twist { linear, angular, pivot } => {
                let u = Vector3::from_column_slice(linear);
                let w = Vector3::from_column_slice(angular);
                let pivot0 = Vector3::from_column_slice(pivot);
                pivot0 + u * t + Rotation3::from_scaled_axis(w * t) * (center0 - pivot0)
            }
            Motion::Fall { u0, g } => {
                center0
                    + Vector3::from_column_slice(u0) * t
                    + Vector3::from_column_slice(g) * (0.5 * t * t)
            }
        }
    }
}

impl BodyAt {
    fn contains(&self, body: &RigidBody, p: &Vector3<f64>) -> bool {
        let q = self.rot_t_inv * (p - self.anchor) + self.restore;
        let local = self.rot0_inv * (q - self.center0);
        body.shape.contains_local(&local)
    }
}

/// Scene frozen at one timestamp for fast point queries.
pub struct FrozenScene<'a> {
    scene: &'a AnalyticScene,
    at: Vec<BodyAt>,
}

impl<'a> FrozenScene<'a> {
    pub fn new(scene: &'a AnalyticScene, t: f64) -> Self {
        FrozenScene {
            scene,
            at: scene.bodies.iter().map(|b| b.at(t)).collect(),
        }
    }

    /// Index of the body containing `p`, lowest index wins on overlap.
    pub fn body_at(&self, p: &Vector3<f64>) -> Option<usize> {
        self.scene
            .bodies
            .iter()
            .zip(&self.at)
            .position(|(b, at)| at.contains(b, p))
    }

    pub fn density_albedo(&self, p: &Vector3<f64>) -> (f64, [f64; 3], Option<usize>) {
        match self.body_at(p) {
            Some(i) => (self.scene.bodies[i].density, self.scene.bodies[i].albedo, Some(i)),
            None => (0.0, [0.0; 3], None),
        }
    }
}

impl AnalyticScene {
    /// Every body must stay inside the AABB for the whole `[0,1]` horizon
    /// (bounding-sphere test on a fine time grid).
    pub fn validate(&self) -> Result<()> {
        for (i, body) in self.bodies.iter().enumerate() {
            if body.density <= 0.0 {
                return Err(Error::Invalid(format!("body {i}: density must be > 0")));
            }
            let r = body.shape.bounding_radius();
            for step in 0..=100 {
                let t = step as f64 / 100.0;
                let c = body.center_at(t);
                for axis in 0..3 {
                    if c[axis] - r < self.aabb.min[axis] || c[axis] + r > self.aabb.max[axis] {
                        return Err(Error::Invalid(format!(
                            "body {i} leaves the scene bounds at t = {t:.2}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn oracle(&self) -> VelocityOracle<'_> {
        VelocityOracle { scene: self }
    }
}

/// Ground-truth velocity queries against the closed-form motion.
pub struct VelocityOracle<'a> {
    scene: &'a AnalyticScene,
}

impl VelocityOracle<'_> {
    /// Velocity of the material at `(p, t)`; zero in free space.
    pub fn velocity(&self, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let frozen = FrozenScene::new(self.scene, t);
        match frozen.body_at(p) {
            Some(i) => self.scene.bodies[i].velocity(p, t),
            None => Vector3::zeros(),
        }
    }
}

/// Desk-scale dataset layout: cameras on a sphere looking at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub name: String,
    pub n_stamps: usize,
    pub train_frames: usize,
    pub image_size: usize,
    pub n_cameras: usize,
    pub n_train_cameras: usize,
    pub camera_radius: f64,
    pub gt_samples_per_ray: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stamps == 0 || self.image_size == 0 || self.n_cameras == 0 {
            return Err(Error::Config("generator: zero-sized dataset".into()));
        }
        if self.train_frames > self.n_stamps {
            return Err(Error::Config(format!(
                "generator: train_frames {} > n_stamps {}",
                self.train_frames, self.n_stamps
            )));
        }
        if self.n_train_cameras > self.n_cameras {
            return Err(Error::Config("generator: more train cameras than cameras".into()));
        }
        if self.gt_samples_per_ray == 0 {
            return Err(Error::Config("generator: gt_samples_per_ray must be >= 1".into()));
        }
        Ok(())
    }

    /// Normalized timestamp of frame `i`: frames live at `(i+1)/n` so the
    /// last training frame of a 3/4 split sits exactly at the keyframe grid.
    /// A single-stamp dataset sits at t = 0 (static capture).
    pub fn timestamp(&self, i: usize) -> f64 {
        if self.n_stamps == 1 {
            0.0
        } else {
            (i + 1) as f64 / self.n_stamps as f64
        }
    }
}

/// Deterministic camera ring: evenly spaced azimuths with cycling elevations.
pub fn camera_ring(n: usize, radius: f64, image_size: usize) -> Vec<CameraModel> {
    let elevations = [-25.0f64, 10.0, 40.0];
    let focal = 0.9 * image_size as f64;
    (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64 + 0.3;
            let el = elevations[i % elevations.len()].to_radians();
            let eye = Vector3::new(
                radius * el.cos() * az.cos(),
                radius * el.cos() * az.sin(),
                radius * el.sin(),
            );
            CameraModel::look_at(i as u32, eye, Vector3::zeros(), focal, image_size, image_size)
        })
        .collect()
}

/// Render one ground-truth frame: image plus per-body mask. Pixels whose
/// accumulated alpha stays below 0.5 are labeled background; otherwise the
/// label is the body with the largest accumulated weight (1-based).
pub fn render_gt_frame(
    scene: &AnalyticScene,
    camera: &CameraModel,
    t: f64,
    samples_per_ray: usize,
    near: f64,
    far: f64,
) -> Result<(Image, Mask)> {
    let frozen = FrozenScene::new(scene, t);
    let mut image = Image::new(camera.width, camera.height);
    let mut mask = Mask::new(camera.width, camera.height);
    let pixels = crate::sampling::all_pixels(camera);
    let rays = rays_for_pixels(camera, &pixels, t, &scene.aabb, near, far)?;
    let n_bodies = scene.bodies.len();
    for ray in &rays {
        if !ray.hits_bounds() {
            continue;
        }
        let (depths, deltas) = stratified_samples(ray, samples_per_ray, None);
        let s = depths.len();
        let mut sigma = vec![0.0f64; s];
        let mut color = vec![0.0f64; s * 3];
        let mut body_of = vec![None; s];
        for (i, &d) in depths.iter().enumerate() {
            let p = ray.point_at(d);
            let (dens, albedo, body) = frozen.density_albedo(&p);
            sigma[i] = dens;
            color[i * 3] = albedo[0];
            color[i * 3 + 1] = albedo[1];
            color[i * 3 + 2] = albedo[2];
            body_of[i] = body;
        }
        let mut per_body = vec![0.0f64; n_bodies];
        let (rgb, alpha) = composite_ray(&sigma, &color, &deltas, &mut |i, w| {
            if let Some(b) = body_of[i] {
                per_body[b] += w;
            }
        });
        image.set_pixel(ray.px, ray.py, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
        let label = if alpha < 0.5 {
            0
        } else {
            let mut best = 0usize;
            for b in 1..n_bodies {
                if per_body[b] > per_body[best] {
                    best = b;
                }
            }
            (best + 1) as u8
        };
        mask.labels[ray.py * camera.width + ray.px] = label;
    }
    Ok((image, mask))
}

/// Generate the full dataset on disk: frames, masks, and `manifest.json`.
/// The first `n_train_cameras` cameras observe the first `train_frames`
/// timestamps as the training split; the remaining cameras provide the
/// interpolation test split over the same window; every camera contributes
/// the trailing timestamps as the extrapolation split.
pub fn generate_scene(
    scene: &AnalyticScene,
    config: &GeneratorConfig,
    out_dir: &Path,
) -> Result<SceneManifest> {
    config.validate()?;
    scene.validate()?;
    std::fs::create_dir_all(out_dir.join("frames"))?;

    let cameras = camera_ring(config.n_cameras, config.camera_radius, config.image_size);
    let near = 0.05;
    let far = config.camera_radius + Vector3::from_column_slice(&scene.aabb.max).norm() + 2.0;

    let mut jobs: Vec<(u32, usize, f64, Split)> = Vec::new();
    for (ci, cam) in cameras.iter().enumerate() {
        for i in 0..config.n_stamps {
            let t = config.timestamp(i);
            let split = if i >= config.train_frames {
                Split::TestExtrap
            } else if ci < config.n_train_cameras {
                Split::Train
            } else {
                Split::TestInterp
            };
            jobs.push((cam.id, i, t, split));
        }
    }

    let frames: Result<Vec<FrameRecord>> = jobs
        .par_iter()
        .map(|&(cam_id, i, t, split)| {
            let cam = &cameras[cam_id as usize];
            let (image, mask) = render_gt_frame(scene, cam, t, config.gt_samples_per_ray, near, far)?;
            let image_rel = format!("frames/cam{cam_id}_t{i}.ppm");
            let mask_rel = format!("frames/cam{cam_id}_t{i}_mask.pgm");
            write_image(&image, &out_dir.join(&image_rel))?;
            write_mask(&mask, &out_dir.join(&mask_rel))?;
            Ok(FrameRecord {
                cam: cam_id,
                t,
                image: image_rel,
                mask: Some(mask_rel),
                split,
            })
        })
        .collect();

    let manifest = SceneManifest {
        cameras,
        frames: frames?,
        aabb: scene.aabb,
        near,
        far,
        n_stamps: config.n_stamps,
        motion: Some(scene.clone()),
    };
    super::save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
