//! Midpoint RK2 integration of points through a velocity field, and the
//! interframe shading procedure: transport each ray sample to its nearest
//! keyframe, retrieve density and appearance there, and decode color back at
//! the original sample.
//!
//! Gradients go through the unrolled integration steps directly
//! (discretize-then-differentiate), so the tape's reverse rules are exact for
//! the discrete scheme.

use crate::diffcore::{Graph, NodeId, ParamStore, Real, Tensor};
use crate::keyframe_field::{KeyframeField, KeyframeSchedule};
use crate::velocity_field::VelocityGraph;
use crate::{Error, Result};

/// Integration granularity: RK2 steps per unit of time span (at least one
/// step per transport).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OdeConfig {
    pub steps_per_unit: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { steps_per_unit: 8.0 }
    }
}

impl OdeConfig {
    pub fn steps_for(&self, span: f64) -> usize {
        ((self.steps_per_unit * span.abs()).ceil() as usize).max(1)
    }
}

/// Integrate `[n,3]` points from `t_from` to `t_to` (either order) with the
/// midpoint method: `k1 = v(p, t)`, `k2 = v(p + h/2 k1, t + h/2)`,
/// `p <- p + h k2`. Fails with the step index if the field goes non-finite.
pub fn rk2_integrate<R: Real>(
    g: &mut Graph<'_, R>,
    p0: NodeId,
    t_from: f64,
    t_to: f64,
    field: &impl VelocityGraph<R>,
    steps: usize,
) -> Result<NodeId> {
    assert!(steps >= 1, "rk2 needs at least one step");
    if t_from == t_to {
        return Ok(p0);
    }
    let n = g.shape(p0)[0];
    let h = (t_to - t_from) / steps as f64;
    let half = R::from_f64(h / 2.0);
    let full = R::from_f64(h);
    let mut p = p0;
    for step in 0..steps {
        let tau = t_from + h * step as f64;
        let t1 = g.constant(Tensor::full(&[n, 1], R::from_f64(tau)));
        let k1 = field.velocity_node(g, p, t1);
        if !g.value(k1).is_finite() {
            return Err(Error::Invalid(format!("non-finite velocity at rk2 step {step}")));
        }
        let k1h = g.scale(k1, half);
        let p_mid = g.add(p, k1h);
        let t2 = g.constant(Tensor::full(&[n, 1], R::from_f64(tau + h / 2.0)));
        let k2 = field.velocity_node(g, p_mid, t2);
        if !g.value(k2).is_finite() {
            return Err(Error::Invalid(format!("non-finite velocity at rk2 step {step}")));
        }
        let k2h = g.scale(k2, full);
        p = g.add(p, k2h);
    }
    Ok(p)
}

/// Plain-value RK2 through a forward-only graph.
pub fn rk2_points<R: Real>(
    store: &ParamStore<R>,
    field: &impl VelocityGraph<R>,
    points: &[[f64; 3]],
    t_from: f64,
    t_to: f64,
    steps: usize,
) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new(store);
    let n = points.len();
    let mut flat = Vec::with_capacity(n * 3);
    for p in points {
        flat.extend(p.iter().map(|&x| R::from_f64(x)));
    }
    let p0 = g.constant(Tensor::new(vec![n, 3], flat));
    let p1 = rk2_integrate(&mut g, p0, t_from, t_to, field, steps)?;
    Ok(g
        .value(p1)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
        .collect())
}

/// Shaded samples for one interframe batch.
pub struct ShadeOutput {
    /// `[n,1]` densities.
    pub sigma: NodeId,
    /// `[n,3]` decoded colors.
    pub color: NodeId,
    /// Keyframe index the samples were anchored to.
    pub keyframe: usize,
}

/// Interframe shading: transport ray samples at `t_i` to the nearest
/// keyframe (forward or backward in time), retrieve `(sigma, features)`
/// there, and decode view-dependent color with the original ray directions.
/// When `t_i` is itself a keyframe timestamp the transport degenerates to the
/// identity and this equals direct keyframe evaluation.
pub fn transport_samples<R: Real>(
    g: &mut Graph<'_, R>,
    field: &KeyframeField,
    schedule: &KeyframeSchedule,
    velocity: &impl VelocityGraph<R>,
    ode: &OdeConfig,
    points: NodeId,
    t_i: f64,
    dir_enc: NodeId,
) -> Result<ShadeOutput> {
    let keyframe = schedule.nearest_index(t_i);
    let t_k = schedule.time_of(keyframe);
    let span = t_k - t_i;
    let p_prime = if span.abs() < 1e-12 {
        points
    } else {
        rk2_integrate(g, points, t_i, t_k, velocity, ode.steps_for(span))?
    };
    let eval = field.eval(g, p_prime, keyframe);
    let color = field.decode_color(g, eval.features, dir_enc);
    Ok(ShadeOutput {
        sigma: eval.sigma,
        color,
        keyframe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_of, LrGroup};
    use crate::nn::posenc_vec;
    use crate::scene_io::Aabb;
    use crate::velocity_field::{AffineVelocity, VelocityField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation_field() -> AffineVelocity {
        AffineVelocity {
            matrix: [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            time_coeff: [0.0; 3],
            constant: [0.0; 3],
        }
    }

    #[test]
    fn constant_field_is_exact_for_any_step_count() {
        let store = ParamStore::<f64>::new();
        let field = AffineVelocity {
            matrix: [[0.0; 3]; 3],
            time_coeff: [0.0; 3],
            constant: [1.0, 0.0, 0.0],
        };
        for steps in [1, 3, 7] {
            let p = rk2_points(&store, &field, &[[0.0, 0.0, 0.0]], 0.0, 0.5, steps).unwrap();
            assert!((p[0][0] - 0.5).abs() < 1e-15, "steps {steps}: {:?}", p[0]);
            assert_eq!(p[0][1], 0.0);
            assert_eq!(p[0][2], 0.0);
        }
    }

    #[test]
    fn zero_span_is_identity() {
        let store = ParamStore::<f64>::new();
        let field = rotation_field();
        let p = rk2_points(&store, &field, &[[1.0, 2.0, 3.0]], 0.7, 0.7, 4).unwrap();
        assert_eq!(p[0], [1.0, 2.0, 3.0]);
    }

    /// Closed-form rotation oracle: integrating v = (-y, x, 0) for time T
    /// rotates about z by angle T.
    fn rotation_error(steps: usize) -> f64 {
        let store = ParamStore::<f64>::new();
        let field = rotation_field();
        let t_end = std::f64::consts::FRAC_PI_2;
        let p = rk2_points(&store, &field, &[[1.0, 0.0, 0.0]], 0.0, t_end, steps).unwrap();
        let expected = [0.0, 1.0, 0.0];
        ((p[0][0] - expected[0]).powi(2)
            + (p[0][1] - expected[1]).powi(2)
            + (p[0][2] - expected[2]).powi(2))
        .sqrt()
    }

    #[test]
    fn rotation_converges_at_second_order() {
        let errors: Vec<f64> = [4usize, 8, 16, 32].iter().map(|&s| rotation_error(s)).collect();
        // Least-squares slope of log(err) vs log(steps).
        let xs: Vec<f64> = [4f64, 8.0, 16.0, 32.0].iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((-2.2..=-1.8).contains(&slope), "order slope {slope}, errors {errors:?}");
    }

    #[test]
    fn round_trip_reversibility_shrinks_second_order() {
        let store = ParamStore::<f64>::new();
        let field = rotation_field();
        let start = [0.8, -0.3, 0.2];
        let err_for = |steps: usize| {
            let fwd = rk2_points(&store, &field, &[start], 0.0, 1.0, steps).unwrap();
            let back = rk2_points(&store, &field, &[fwd[0]], 1.0, 0.0, steps).unwrap();
            ((back[0][0] - start[0]).powi(2)
                + (back[0][1] - start[1]).powi(2)
                + (back[0][2] - start[2]).powi(2))
            .sqrt()
        };
        let e8 = err_for(8);
        let e16 = err_for(16);
        assert!(e8 < 1e-2);
        let ratio = e8 / e16.max(1e-300);
        assert!(ratio > 2.5, "reversibility ratio {ratio} (e8 {e8}, e16 {e16})");
    }

    fn shaded_setup() -> (ParamStore<f64>, KeyframeField, VelocityField, KeyframeSchedule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kf = KeyframeField::new(Aabb::unit(), 4);
        kf.init_params(&mut store, 8, &mut rng).unwrap();
        let vf = VelocityField::new(Aabb::unit());
        vf.init_params(&mut store, &mut rng).unwrap();
        let schedule = KeyframeSchedule::uniform(4, 0.8);
        (store, kf, vf, schedule)
    }

    fn sample_points() -> Tensor<f64> {
        Tensor::new(vec![4, 3], vec![
            0.2, 0.1, -0.3, -0.4, 0.5, 0.2, 0.0, -0.6, 0.1, 0.55, 0.3, -0.1,
        ])
    }

    fn dir_enc_const(g: &mut Graph<'_, f64>, n: usize) -> NodeId {
        let enc = posenc_vec(&[0.0, 0.0, 1.0], crate::keyframe_field::DIR_ENC_BANDS);
        let len = enc.len();
        let mut data = Vec::with_capacity(n * len);
        for _ in 0..n {
            data.extend_from_slice(&enc);
        }
        g.constant(Tensor::new(vec![n, len], data))
    }

    #[test]
    fn keyframe_time_equals_direct_evaluation() {
        let (store, kf, vf, schedule) = shaded_setup();
        let ode = OdeConfig::default();
        let mut g = Graph::new(&store);
        let pts = g.constant(sample_points());
        let enc = dir_enc_const(&mut g, 4);
        let out = transport_samples(&mut g, &kf, &schedule, &vf, &ode, pts, 0.4, enc).unwrap();
        assert_eq!(out.keyframe, 1);
        let direct = kf.eval(&mut g, pts, 1);
        assert_eq!(g.value(out.sigma).data(), g.value(direct.sigma).data());
    }

    #[test]
    fn zero_velocity_transport_is_identity_shading() {
        let (store, kf, vf, schedule) = shaded_setup();
        let ode = OdeConfig::default();
        let mut g = Graph::new(&store);
        let pts = g.constant(sample_points());
        let enc = dir_enc_const(&mut g, 4);
        // 0.55 is an interframe time anchored to keyframe 0.6 (index 2);
        // the velocity head is zero-initialized so transport moves nothing.
        let out = transport_samples(&mut g, &kf, &schedule, &vf, &ode, pts, 0.55, enc).unwrap();
        assert_eq!(out.keyframe, 2);
        let direct = kf.eval(&mut g, pts, 2);
        let a = g.value(out.sigma).data().to_vec();
        let b = g.value(direct.sigma).data().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn interframe_gradients_reach_both_parameter_groups() {
        let (mut store, kf, vf, schedule) = shaded_setup();
        // Give the velocity head nonzero weights so transport actually moves.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let head = format!("velocity.w{}", crate::velocity_field::HIDDEN_LAYERS);
        let idx = store.index_of(&head).unwrap();
        *store.value_mut(idx) =
            Tensor::fill_uniform(&[crate::velocity_field::HIDDEN, 6], &mut rng, -0.5, 0.5);

        let ode = OdeConfig::default();
        let mut g = Graph::new(&store);
        let pts = g.constant(sample_points());
        let enc = dir_enc_const(&mut g, 4);
        let out = transport_samples(&mut g, &kf, &schedule, &vf, &ode, pts, 0.5163, enc).unwrap();
        let s2 = g.mul(out.sigma, out.sigma);
        let c2 = g.mul(out.color, out.color);
        let ls = g.mean_all(s2);
        let lc = g.mean_all(c2);
        let loss = g.add(ls, lc);
        let grads = gradient_of(&g, loss).unwrap();
        let theta: Vec<usize> = store.indices_with_prefix("field.");
        let phi: Vec<usize> = store.indices_with_prefix("velocity.");
        assert!(grads.max_abs(&theta) > 0.0, "no gradient reached the radiance field");
        assert!(grads.max_abs(&phi) > 0.0, "no gradient reached the velocity field");
        drop(g);

        // And the transported-shading gradient agrees with finite differences.
        let err = crate::diffcore::finite_diff_check(&mut store, 1e-5, 400, 5, |g| {
            let pts = g.constant(sample_points());
            let enc = dir_enc_const(g, 4);
            let out =
                transport_samples(g, &kf, &schedule, &vf, &OdeConfig::default(), pts, 0.5163, enc)
                    .unwrap();
            let s2 = g.mul(out.sigma, out.sigma);
            let c2 = g.mul(out.color, out.color);
            let ls = g.mean_all(s2);
            let lc = g.mean_all(c2);
            g.add(ls, lc)
        })
        .unwrap();
        assert!(err < 1e-4, "transport FD error {err}");
        let _ = LrGroup::Planes;
    }
}
