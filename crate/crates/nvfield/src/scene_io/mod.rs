//! Dataset manifests, image IO, and the analytic dynamic-scene generator.

mod analytic;
mod ppm;

pub use analytic::{
    generate_scene, AnalyticScene, GeneratorConfig, Motion, RigidBody, Shape, VelocityOracle,
};
pub use ppm::{read_image, read_mask, write_image, write_mask, Image, Mask};

use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Axis-aligned bounding box in world units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn unit() -> Self {
        Aabb {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn half_extent(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.max[0] - self.min[0]),
            0.5 * (self.max[1] - self.min[1]),
            0.5 * (self.max[2] - self.min[2]),
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|i| self.max[i] <= self.min[i])
    }

    /// Slab intersection of a ray with the box; `None` when it misses.
    pub fn intersect_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Pinhole camera with a rigid camera-to-world transform. Camera axes are
/// x-right, y-down, z-forward; pixel (px, py) rays pass through the pixel
/// center (px + 0.5, py + 0.5).
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    /// Place a camera at `eye` looking at `target` with the world +z axis as
    /// "up" (falls back to +x when the view direction is vertical).
    pub fn look_at(
        id: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let up_hint = if forward.z.abs() > 0.999 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        };
        let right = forward.cross(&-up_hint).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        CameraModel {
            id,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: eye,
        }
    }

    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// World point to (px, py, depth); pixels in continuous image coords.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.rotation.transpose() * (p - self.translation);
        (
            self.cx + self.fx * cam.x / cam.z,
            self.cy + self.fy * cam.y / cam.z,
            cam.z,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Invalid(format!("camera {}: focal must be positive", self.id)));
        }
        let rt_r = self.rotation.transpose() * self.rotation;
        if (rt_r - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::Invalid(format!("camera {}: rotation not orthonormal", self.id)));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("camera {}: rotation determinant != +1", self.id)));
        }
        Ok(())
    }
}

/// Which evaluation protocol a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test-interp")]
    TestInterp,
    #[serde(rename = "test-extrap")]
    TestExtrap,
}

/// One observed frame: a camera, a normalized timestamp, and image paths
/// relative to the manifest location.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub cam: u32,
    pub t: f64,
    pub image: String,
    pub mask: Option<String>,
    pub split: Split,
}

/// The dataset contract: cameras, frames, scene bounds, and (for generated
/// scenes) the ground-truth motion spec backing the velocity oracle.
#[derive(Debug, Clone)]
pub struct SceneManifest {
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<FrameRecord>,
    pub aabb: Aabb,
    pub near: f64,
    pub far: f64,
    pub n_stamps: usize,
    pub motion: Option<AnalyticScene>,
}

impl SceneManifest {
    pub fn camera(&self, id: u32) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn frames_in_split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    /// Distinct timestamps of the training split, ascending.
    pub fn train_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = Vec::new();
        for f in self.frames_in_split(Split::Train) {
            if !times.iter().any(|&t| (t - f.t).abs() < 1e-12) {
                times.push(f.t);
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times
    }

    pub fn validate(&self) -> Result<()> {
        if self.aabb.is_degenerate() {
            return Err(Error::Invalid("manifest: degenerate aabb".into()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            if self.camera(f.cam).is_none() {
                return Err(Error::Invalid(format!(
                    "frame {i} ({}) references unknown camera id {}",
                    f.image, f.cam
                )));
            }
        }
        // Timestamps must form a uniform grid of n_stamps values.
        let mut times: Vec<f64> = Vec::new();
        for f in &self.frames {
            if !times.iter().any(|&t| (t - f.t).abs() < 1e-9) {
                times.push(f.t);
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if times.len() != self.n_stamps {
            return Err(Error::Invalid(format!(
                "manifest: {} distinct timestamps but n_stamps = {}",
                times.len(),
                self.n_stamps
            )));
        }
        if times.len() > 2 {
            let step = times[1] - times[0];
            for w in times.windows(2) {
                if ((w[1] - w[0]) - step).abs() > 1e-9 {
                    return Err(Error::Invalid(
                        "manifest: timestamps are not a uniform grid".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ── JSON wire format (field names fixed) ─────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CameraJson {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    w: usize,
    h: usize,
    /// Row-major 3x4 `[R | t]`.
    c2w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    cam: u32,
    t: f64,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    cameras: Vec<CameraJson>,
    frames: Vec<FrameJson>,
    aabb: Aabb,
    near: f64,
    far: f64,
    n_stamps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    motion: Option<AnalyticScene>,
}

pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let json = ManifestJson {
        cameras: manifest
            .cameras
            .iter()
            .map(|c| {
                let mut c2w = Vec::with_capacity(12);
                for r in 0..3 {
                    for col in 0..3 {
                        c2w.push(c.rotation[(r, col)]);
                    }
                    c2w.push(c.translation[r]);
                }
                CameraJson {
                    id: c.id,
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    w: c.width,
                    h: c.height,
                    c2w,
                }
            })
            .collect(),
        frames: manifest
            .frames
            .iter()
            .map(|f| FrameJson {
                cam: f.cam,
                t: f.t,
                image: f.image.clone(),
                mask: f.mask.clone(),
                split: f.split,
            })
            .collect(),
        aabb: manifest.aabb,
        near: manifest.near,
        far: manifest.far,
        n_stamps: manifest.n_stamps,
        motion: manifest.motion.clone(),
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::Invalid(format!("manifest encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path)?;
    let json: ManifestJson = serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("manifest decode: {e}")))?;
    let mut cameras = Vec::with_capacity(json.cameras.len());
    for c in &json.cameras {
        if c.c2w.len() != 12 {
            return Err(Error::Invalid(format!(
                "camera {}: c2w must have 12 entries, got {}",
                c.id,
                c.c2w.len()
            )));
        }
        let rotation = Matrix3::new(
            c.c2w[0], c.c2w[1], c.c2w[2], c.c2w[4], c.c2w[5], c.c2w[6], c.c2w[8], c.c2w[9],
            c.c2w[10],
        );
        let translation = Vector3::new(c.c2w[3], c.c2w[7], c.c2w[11]);
        cameras.push(CameraModel {
            id: c.id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.w,
            height: c.h,
            rotation,
            translation,
        });
    }
    let manifest = SceneManifest {
        cameras,
        frames: json
            .frames
            .into_iter()
            .map(|f| FrameRecord {
                cam: f.cam,
                t: f.t,
                image: f.image,
                mask: f.mask,
                split: f.split,
            })
            .collect(),
        aabb: json.aabb,
        near: json.near,
        far: json.far,
        n_stamps: json.n_stamps,
        motion: json.motion,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> SceneManifest {
        let cam = CameraModel::look_at(
            0,
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            40.0,
            32,
            32,
        );
        SceneManifest {
            cameras: vec![cam],
            frames: vec![
                FrameRecord {
                    cam: 0,
                    t: 0.5,
                    image: "frames/cam0_t0.ppm".into(),
                    mask: None,
                    split: Split::Train,
                },
                FrameRecord {
                    cam: 0,
                    t: 1.0,
                    image: "frames/cam0_t1.ppm".into(),
                    mask: Some("frames/cam0_t1_mask.pgm".into()),
                    split: Split::TestExtrap,
                },
            ],
            aabb: Aabb::unit(),
            near: 1.0,
            far: 5.0,
            n_stamps: 2,
            motion: None,
        }
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = tiny_manifest();
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.cameras.len(), 1);
        assert_eq!(loaded.frames.len(), 2);
        assert_eq!(loaded.frames[0].t, 0.5);
        assert_eq!(loaded.frames[1].split, Split::TestExtrap);
        assert_eq!(loaded.frames[1].mask.as_deref(), Some("frames/cam0_t1_mask.pgm"));
        assert_eq!(loaded.n_stamps, 2);
        assert!((loaded.cameras[0].rotation - m.cameras[0].rotation).abs().max() < 1e-15);
        assert_eq!(loaded.cameras[0].translation, m.cameras[0].translation);
    }

    #[test]
    fn unknown_camera_reference_fails_naming_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = tiny_manifest();
        m.frames[1].cam = 9;
        let err = save_manifest(&m, &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cam0_t1") && msg.contains('9'), "{msg}");
    }

    #[test]
    fn lookat_rotation_is_special_orthogonal() {
        let cam = CameraModel::look_at(
            1,
            Vector3::new(2.0, -1.0, 1.5),
            Vector3::zeros(),
            40.0,
            32,
            32,
        );
        cam.validate().unwrap();
        // Forward axis points from the eye to the target.
        let f = cam.forward_axis();
        let expected = (Vector3::zeros() - cam.translation).normalize();
        assert!((f - expected).norm() < 1e-12);
    }

    #[test]
    fn projection_inverts_ray_direction() {
        let cam = CameraModel::look_at(
            0,
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            40.0,
            32,
            32,
        );
        // The scene origin projects to the principal point.
        let (px, py, depth) = cam.project(&Vector3::zeros());
        assert!((px - 16.0).abs() < 1e-9);
        assert!((py - 16.0).abs() < 1e-9);
        assert!((depth - 3.0).abs() < 1e-12);
    }
}
