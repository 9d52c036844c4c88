//! Ray generation and the two stochastic samplers: stratified depths along
//! rays, and space-time points for the physics residuals.

use crate::scene_io::{Aabb, CameraModel};
use crate::{Error, Result};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One camera ray through a pixel center at a fixed timestamp. `near`/`far`
/// are already clipped to the scene bounds; a ray that misses them carries an
/// empty interval (`near >= far`).
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    pub px: usize,
    pub py: usize,
    pub t: f64,
}

impl Ray {
    pub fn hits_bounds(&self) -> bool {
        self.near < self.far
    }

    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.dir * s
    }
}

/// Rays through the centers of the listed pixels, with near/far clipped to
/// the AABB intersection.
pub fn rays_for_pixels(
    camera: &CameraModel,
    pixels: &[(usize, usize)],
    t: f64,
    aabb: &Aabb,
    near: f64,
    far: f64,
) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        if px >= camera.width || py >= camera.height {
            return Err(Error::Invalid(format!(
                "pixel ({px},{py}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        let cam_dir = Vector3::new(
            (px as f64 + 0.5 - camera.cx) / camera.fx,
            (py as f64 + 0.5 - camera.cy) / camera.fy,
            1.0,
        );
        let dir = (camera.rotation * cam_dir).normalize();
        let origin = camera.translation;
        let (mut n, mut f) = (near, far);
        match aabb.intersect_ray(&origin, &dir) {
            Some((t0, t1)) => {
                n = n.max(t0);
                f = f.min(t1);
            }
            None => {
                // Empty sample interval flags a miss.
                f = n;
            }
        }
        rays.push(Ray {
            origin,
            dir,
            near: n,
            far: f,
            px,
            py,
            t,
        });
    }
    Ok(rays)
}

/// All pixels of a camera in row-major order.
pub fn all_pixels(camera: &CameraModel) -> Vec<(usize, usize)> {
    let mut pixels = Vec::with_capacity(camera.width * camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            pixels.push((px, py));
        }
    }
    pixels
}

/// Stratified depths along a ray: one sample per equal bin, at the bin
/// midpoint when `jitter` is `None`, else uniform within the bin. The last
/// segment length runs to the far bound, so the lengths sum to
/// `far - depths[0]`.
pub fn stratified_samples(
    ray: &Ray,
    s: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Vec<f64>) {
    assert!(s >= 1, "need at least one sample per ray");
    if !ray.hits_bounds() {
        return (Vec::new(), Vec::new());
    }
    let span = ray.far - ray.near;
    let bin = span / s as f64;
    let mut depths = Vec::with_capacity(s);
    match jitter {
        Some(rng) => {
            for i in 0..s {
                let u: f64 = rng.gen();
                depths.push(ray.near + (i as f64 + u) * bin);
            }
        }
        None => {
            for i in 0..s {
                depths.push(ray.near + (i as f64 + 0.5) * bin);
            }
        }
    }
    let mut deltas = Vec::with_capacity(s);
    for i in 0..s - 1 {
        deltas.push(depths[i + 1] - depths[i]);
    }
    deltas.push(ray.far - depths[s - 1]);
    (depths, deltas)
}

/// `n` points uniform in `aabb x [0, t_max]`, reproducible per seed.
pub fn spacetime_samples(n: usize, aabb: &Aabb, t_max: f64, seed: u64) -> Vec<(Vector3<f64>, f64)> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Vector3::new(
            rng.gen_range(aabb.min[0]..aabb.max[0]),
            rng.gen_range(aabb.min[1]..aabb.max[1]),
            rng.gen_range(aabb.min[2]..aabb.max[2]),
        );
        let t = if t_max > 0.0 { rng.gen_range(0.0..t_max) } else { 0.0 };
        out.push((p, t));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera() -> CameraModel {
        CameraModel::look_at(
            0,
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            40.0,
            32,
            32,
        )
    }

    #[test]
    fn central_ray_hits_unit_box_at_two_and_four() {
        let cam = axis_camera();
        let f = cam.forward_axis();
        let (t0, t1) = Aabb::unit().intersect_ray(&cam.translation, &f).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12, "near {t0}");
        assert!((t1 - 4.0).abs() < 1e-12, "far {t1}");
    }

    #[test]
    fn near_principal_pixel_ray_tracks_forward_axis() {
        let cam = axis_camera();
        let rays = rays_for_pixels(&cam, &[(15, 15)], 0.0, &Aabb::unit(), 0.1, 10.0).unwrap();
        assert!(rays[0].dir.dot(&cam.forward_axis()) > 0.999);
        assert!(rays[0].hits_bounds());
        assert!((rays[0].near - 2.0).abs() < 0.05);
    }

    #[test]
    fn out_of_bounds_pixel_errors() {
        let cam = axis_camera();
        assert!(rays_for_pixels(&cam, &[(32, 0)], 0.0, &Aabb::unit(), 0.1, 10.0).is_err());
    }

    #[test]
    fn unit_directions() {
        let cam = axis_camera();
        let pixels = all_pixels(&cam);
        let rays = rays_for_pixels(&cam, &pixels, 0.0, &Aabb::unit(), 0.1, 10.0).unwrap();
        for r in rays {
            assert!((r.dir.norm() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let ray = Ray {
            origin: Vector3::zeros(),
            dir: Vector3::new(0.0, 0.0, 1.0),
            near: 0.0,
            far: 1.0,
            px: 0,
            py: 0,
            t: 0.0,
        };
        let (depths, deltas) = stratified_samples(&ray, 4, None);
        assert_eq!(depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(deltas, vec![0.25, 0.25, 0.25, 0.125]);

        let (d1, dl1) = stratified_samples(&ray, 1, None);
        assert_eq!(d1, vec![0.5]);
        assert_eq!(dl1, vec![0.5]);
    }

    #[test]
    fn stratified_depths_increase_and_deltas_bounded() {
        let ray = Ray {
            origin: Vector3::zeros(),
            dir: Vector3::new(0.0, 0.0, 1.0),
            near: 1.0,
            far: 3.5,
            px: 0,
            py: 0,
            t: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (depths, deltas) = stratified_samples(&ray, 16, Some(&mut rng));
        for w in depths.windows(2) {
            assert!(w[1] > w[0]);
        }
        let total: f64 = deltas.iter().sum();
        assert!(total <= 2.5 + 1e-12);
        assert!(deltas.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn empty_interval_yields_no_samples() {
        let ray = Ray {
            origin: Vector3::zeros(),
            dir: Vector3::new(0.0, 0.0, 1.0),
            near: 2.0,
            far: 2.0,
            px: 0,
            py: 0,
            t: 0.0,
        };
        let (depths, deltas) = stratified_samples(&ray, 8, None);
        assert!(depths.is_empty() && deltas.is_empty());
    }

    #[test]
    fn spacetime_samples_inside_bounds_and_reproducible() {
        let aabb = Aabb::unit();
        let a = spacetime_samples(500, &aabb, 1.0, 42);
        let b = spacetime_samples(500, &aabb, 1.0, 42);
        for ((pa, ta), (pb, tb)) in a.iter().zip(&b) {
            assert_eq!(pa, pb);
            assert_eq!(ta, tb);
        }
        for (p, t) in &a {
            assert!(aabb.contains(p));
            assert!((0.0..=1.0).contains(t));
        }
    }

    #[test]
    fn spacetime_mean_approaches_center() {
        let aabb = Aabb::unit();
        let n = 100_000;
        let samples = spacetime_samples(n, &aabb, 1.0, 7);
        let mut mean = Vector3::zeros();
        for (p, _) in &samples {
            mean += p;
        }
        mean /= n as f64;
        // Uniform on [-1,1]: sd of the mean is (2/sqrt(12))/sqrt(n).
        let three_sigma = 3.0 * (2.0 / 12f64.sqrt()) / (n as f64).sqrt();
        for i in 0..3 {
            assert!(mean[i].abs() < three_sigma, "axis {i}: {} vs {three_sigma}", mean[i]);
        }
    }
}
