//! Classical volume compositing and pixel rendering.
//!
//! One compositing routine serves every consumer: the tape's `composite`
//! primitive, the analytic ground-truth renderer, and mask rendering all call
//! [`composite_ray`].

use crate::diffcore::Real;

/// Composite one ray over a black background.
///
/// `sigma[i] >= 0` and `delta[i] > 0` are per-sample densities and segment
/// lengths, `color` is `3*s` interleaved RGB. Per-sample weights
/// `w_i = T_i (1 - exp(-sigma_i delta_i))` are handed to `weight_sink(i, w_i)`
/// as they are produced. Returns the composited RGB and accumulated alpha.
pub fn composite_ray<R: Real>(
    sigma: &[R],
    color: &[R],
    delta: &[R],
    weight_sink: &mut impl FnMut(usize, R),
) -> ([R; 3], R) {
    debug_assert_eq!(sigma.len(), delta.len());
    debug_assert_eq!(color.len(), sigma.len() * 3);
    let mut transmittance = R::one();
    let mut rgb = [R::zero(); 3];
    let mut alpha = R::zero();
    for i in 0..sigma.len() {
        let attenuation = (-(sigma[i] * delta[i])).exp();
        let w = transmittance * (R::one() - attenuation);
        rgb[0] = rgb[0] + w * color[i * 3];
        rgb[1] = rgb[1] + w * color[i * 3 + 1];
        rgb[2] = rgb[2] + w * color[i * 3 + 2];
        alpha = alpha + w;
        weight_sink(i, w);
        transmittance = transmittance * attenuation;
    }
    (rgb, alpha)
}
