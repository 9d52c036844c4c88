//! The keyframe radiance field: factorized feature planes fused by Hadamard
//! products, a keyframe-indexed time axis, and a view-dependent color decoder.
//!
//! Appearance pairs spatial planes with space-time planes,
//! `A = B(f_xy ⊙ g_zt ⊙ f_xz ⊙ g_yt ⊙ f_yz ⊙ g_xt)`, and density mirrors the
//! same layout with its own channel count summed into a scalar. Space-time
//! planes are interpolated only along their spatial axis; the time axis is
//! picked by keyframe index, never interpolated, so the field is piecewise
//! constant in time.

use crate::diffcore::{Graph, LrGroup, NodeId, ParamStore, Real, Tensor};
use crate::nn::{posenc_width, Mlp};
use crate::scene_io::Aabb;
use crate::{Error, Result};
use rand::Rng;

pub const M_SIGMA: usize = 24;
pub const M_APP: usize = 48;
pub const D_E: usize = 24;
pub const DIR_ENC_BANDS: usize = 2;
pub const COLOR_HIDDEN: usize = 128;

/// Uniformly spaced keyframe timestamps `t_k = k * t_train / K`, `k = 1..K`.
/// A single keyframe at `t_train = 0` degenerates to a static field anchored
/// at t = 0 (motion transfer).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSchedule {
    pub times: Vec<f64>,
    pub t_train: f64,
}

impl KeyframeSchedule {
    pub fn uniform(k: usize, t_train: f64) -> Self {
        assert!(k >= 1, "need at least one keyframe");
        let times = (1..=k).map(|i| i as f64 * t_train / k as f64).collect();
        KeyframeSchedule { times, t_train }
    }

    pub fn k(&self) -> usize {
        self.times.len()
    }

    /// Index of the nearest keyframe (0-based); ties break toward the
    /// earlier keyframe, and times beyond the last keyframe clamp to it.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &tk) in self.times.iter().enumerate() {
            let d = (tk - t).abs();
            if d < best_dist - 1e-15 {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    pub fn time_of(&self, index: usize) -> f64 {
        self.times[index]
    }

    /// Whether `t` coincides with a keyframe timestamp.
    pub fn is_keyframe_time(&self, t: f64) -> bool {
        self.times.iter().any(|&tk| (tk - t).abs() < 1e-9)
    }
}

/// Outputs of one field evaluation batch.
pub struct FieldEval {
    /// Pre-activation density `[n,1]`.
    pub sigma_raw: NodeId,
    /// Softplus density `[n,1]`.
    pub sigma: NodeId,
    /// Appearance feature `[n, D_E]`.
    pub features: NodeId,
}

/// Names and static structure of the keyframe field; the arrays themselves
/// live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct KeyframeField {
    pub aabb: Aabb,
    pub k: usize,
    color_mlp: Mlp,
}

const SPATIAL_PLANES: [(&str, [usize; 2]); 3] =
    [("xy", [0, 1]), ("xz", [0, 2]), ("yz", [1, 2])];
/// Space-time plane paired with each spatial plane, keyed by the remaining
/// spatial axis.
const TIME_PLANES: [(&str, usize); 3] = [("zt", 2), ("yt", 1), ("xt", 0)];

impl KeyframeField {
    pub fn new(aabb: Aabb, k: usize) -> Self {
        let color_in = D_E + posenc_width(3, DIR_ENC_BANDS);
        KeyframeField {
            aabb,
            k,
            color_mlp: Mlp::new("field.color", &[color_in, COLOR_HIDDEN, COLOR_HIDDEN, 3], false),
        }
    }

    /// Register plane grids, the feature projection, and the color MLP.
    /// Planes start near `0.1^(1/6)` so the six-plane product is small but
    /// alive; a product of zero-mean noise would collapse its gradients.
    pub fn init_params<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        resolution: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let scale = 0.1f64.powf(1.0 / 6.0);
        fn plane<R: Real>(
            store: &mut ParamStore<R>,
            rng: &mut impl Rng,
            scale: f64,
            name: String,
            shape: &[usize],
        ) -> Result<()> {
            let mut t = Tensor::fill_uniform(shape, rng, 0.9, 1.1);
            for v in t.data_mut() {
                *v = *v * R::from_f64(scale);
            }
            store.insert(&name, t, LrGroup::Planes)?;
            Ok(())
        }
        for (suffix, _) in SPATIAL_PLANES {
            plane(store, rng, scale, format!("field.app.{suffix}"), &[resolution, resolution, M_APP])?;
            plane(store, rng, scale, format!("field.den.{suffix}"), &[resolution, resolution, M_SIGMA])?;
        }
        for (suffix, _) in TIME_PLANES {
            plane(store, rng, scale, format!("field.app.{suffix}"), &[resolution, self.k, M_APP])?;
            plane(store, rng, scale, format!("field.den.{suffix}"), &[resolution, self.k, M_SIGMA])?;
        }
        let bound = (6.0 / M_APP as f64).sqrt();
        store.insert(
            "field.b",
            Tensor::fill_uniform(&[M_APP, D_E], rng, -bound, bound),
            LrGroup::FieldMlp,
        )?;
        self.color_mlp.init_params(store, rng, LrGroup::FieldMlp)?;
        Ok(())
    }

    /// Current spatial resolution, read off the stored planes.
    pub fn resolution<R: Real>(&self, store: &ParamStore<R>) -> usize {
        store
            .get("field.app.xy")
            .expect("keyframe field not initialized")
            .shape()[0]
    }

    /// Entry names of every feature plane (for optimizer resets).
    pub fn plane_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (suffix, _) in SPATIAL_PLANES {
            names.push(format!("field.app.{suffix}"));
            names.push(format!("field.den.{suffix}"));
        }
        for (suffix, _) in TIME_PLANES {
            names.push(format!("field.app.{suffix}"));
            names.push(format!("field.den.{suffix}"));
        }
        names
    }

    /// Normalize world coordinates into `[-1,1]` per axis and clamp.
    fn normalized_coords<R: Real>(&self, g: &mut Graph<'_, R>, points: NodeId) -> NodeId {
        let center = self.aabb.center();
        let half = self.aabb.half_extent();
        let scale: Vec<R> = (0..3).map(|i| R::from_f64(1.0 / half[i])).collect();
        let shift: Vec<R> = (0..3).map(|i| R::from_f64(-center[i] / half[i])).collect();
        let norm = g.affine_cols(points, &scale, &shift);
        g.clamp(norm, R::from_f64(-1.0), R::from_f64(1.0))
    }

    /// Fused plane lookup: product over three (spatial, space-time) pairs.
    fn fused_product<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        pixel_coords: NodeId,
        family: &str,
        keyframe: usize,
    ) -> NodeId {
        assert!(keyframe < self.k, "keyframe index {keyframe} out of {}", self.k);
        let mut product: Option<NodeId> = None;
        for idx in 0..3 {
            let (suffix, axes) = SPATIAL_PLANES[idx];
            let plane = g.param(&format!("field.{family}.{suffix}"));
            let coords = g.gather_cols(pixel_coords, &axes);
            let spatial = g.bilinear(plane, coords);

            let (tsuffix, taxis) = TIME_PLANES[idx];
            let tplane = g.param(&format!("field.{family}.{tsuffix}"));
            let column = g.time_column(tplane, keyframe);
            let pos = g.gather_cols(pixel_coords, &[taxis]);
            let temporal = g.lerp1d(column, pos);

            let pair = g.mul(spatial, temporal);
            product = Some(match product {
                Some(p) => g.mul(p, pair),
                None => pair,
            });
        }
        product.unwrap()
    }

    /// Evaluate density and appearance features at world points `[n,3]` for
    /// one keyframe index. Gradients flow into the planes and, when `points`
    /// is itself traced (transported samples), into the coordinates.
    pub fn eval<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        points: NodeId,
        keyframe: usize,
    ) -> FieldEval {
        let resolution = self.resolution(g.store());
        let norm = self.normalized_coords(g, points);
        // [-1,1] -> [0, r-1] grid units.
        let to_pix = R::from_f64((resolution - 1) as f64 / 2.0);
        let pixel_coords = g.affine_cols(norm, &[to_pix; 3], &[to_pix; 3]);

        let den = self.fused_product(g, pixel_coords, "den", keyframe);
        let sigma_raw = g.sum_rows(den);
        let sigma = g.softplus(sigma_raw);

        let app = self.fused_product(g, pixel_coords, "app", keyframe);
        let b = g.param("field.b");
        let features = g.matmul(app, b);
        FieldEval {
            sigma_raw,
            sigma,
            features,
        }
    }

    /// View-dependent color from appearance features and an encoded view
    /// direction (the retrieval-free decoder subnetwork).
    pub fn decode_color<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        features: NodeId,
        dir_enc: NodeId,
    ) -> NodeId {
        let x = g.concat_cols(features, dir_enc);
        let raw = self.color_mlp.forward(g, x);
        g.sigmoid(raw)
    }

    /// Bilinearly resample every plane to a new spatial resolution (time axes
    /// untouched). Returns the entry indices that changed shape so the caller
    /// can reset optimizer moments.
    pub fn upsample_grids<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        new_resolution: usize,
    ) -> Result<Vec<usize>> {
        let old = self.resolution(store);
        if new_resolution < old {
            return Err(Error::Invalid(format!(
                "upsample: new resolution {new_resolution} below current {old}"
            )));
        }
        if new_resolution == old {
            return Ok(Vec::new());
        }
        let mut changed = Vec::new();
        for name in self.plane_names() {
            let idx = store
                .index_of(&name)
                .ok_or_else(|| Error::Invalid(format!("missing plane `{name}`")))?;
            let plane = &store.entry(idx).value;
            let (h, w, ch) = plane.dims3();
            let resampled = if w == h && h == old {
                resample_plane(plane, new_resolution, new_resolution)
            } else {
                // Space-time plane: spatial axis only.
                resample_plane(plane, new_resolution, w)
            };
            debug_assert_eq!(resampled.shape()[2], ch);
            store.replace_resized(idx, resampled);
            changed.push(idx);
        }
        Ok(changed)
    }
}

/// Separable bilinear resampling with endpoints pinned (`align corners`), so
/// old node positions are reproduced and affine ramps resample exactly.
fn resample_plane<R: Real>(plane: &Tensor<R>, new_h: usize, new_w: usize) -> Tensor<R> {
    let (h, w, ch) = plane.dims3();
    let src = plane.data();
    let mut out = vec![R::zero(); new_h * new_w * ch];
    for i in 0..new_h {
        let u = if new_h == 1 {
            0.0
        } else {
            i as f64 * (h - 1) as f64 / (new_h - 1) as f64
        };
        let i0 = (u.floor() as usize).min(h.saturating_sub(2));
        let fu = R::from_f64(u - i0 as f64);
        for j in 0..new_w {
            let v = if new_w == 1 {
                0.0
            } else {
                j as f64 * (w - 1) as f64 / (new_w - 1) as f64
            };
            let j0 = (v.floor() as usize).min(w.saturating_sub(2));
            let fv = R::from_f64(v - j0 as f64);
            let one = R::one();
            for c in 0..ch {
                let g00 = src[(i0 * w + j0) * ch + c];
                let g10 = src[((i0 + 1).min(h - 1) * w + j0) * ch + c];
                let g01 = src[(i0 * w + (j0 + 1).min(w - 1)) * ch + c];
                let g11 = src[((i0 + 1).min(h - 1) * w + (j0 + 1).min(w - 1)) * ch + c];
                out[(i * new_w + j) * ch + c] = (one - fu) * (one - fv) * g00
                    + fu * (one - fv) * g10
                    + (one - fu) * fv * g01
                    + fu * fv * g11;
            }
        }
    }
    Tensor::new(vec![new_h, new_w, ch], out)
}

/// Sum of per-plane total-variation terms: both spatial axes for spatial
/// planes, the spatial axis only for space-time planes.
pub fn tv_loss<R: Real>(g: &mut Graph<'_, R>, field: &KeyframeField) -> NodeId {
    let mut total: Option<NodeId> = None;
    for name in field.plane_names() {
        let plane = g.param(&name);
        let shape = g.shape(plane);
        let both = shape[0] == shape[1];
        let term = g.tv_plane(plane, both);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("field has planes")
}
