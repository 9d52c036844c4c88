//! The interframe velocity field `v = w(x,y,z,t) * M_v(x,y,z)` — a weight MLP
//! over a fixed six-row twist basis — plus the learned acceleration field.
//!
//! The basis rows are the three unit translations and the three rotation
//! generators `(-z,0,x)`, `(-y,x,0)`, `(0,-z,y)`; each row is divergence-free,
//! so spatially constant weights always produce a rigid, incompressible
//! twist. The weight head is zero-initialized: transport starts as the
//! identity, which keeps early joint training stable.

use crate::diffcore::{Graph, LrGroup, NodeId, ParamStore, Real, Tensor};
use crate::nn::{posenc_node, posenc_width, Mlp};
use crate::scene_io::Aabb;
use crate::Result;
use rand::Rng;

pub const POSENC_BANDS: usize = 3;
pub const HIDDEN: usize = 128;
pub const HIDDEN_LAYERS: usize = 4;

/// Anything that can emit velocity values into a graph: the learned field in
/// training, analytic fields in tests and oracles.
pub trait VelocityGraph<R: Real> {
    /// `points` is `[n,3]` (world units, possibly traced), `times` is `[n,1]`.
    /// Returns velocities `[n,3]`.
    fn velocity_node(&self, g: &mut Graph<'_, R>, points: NodeId, times: NodeId) -> NodeId;
}

/// The learned velocity field. Positional encoding sees AABB-normalized
/// coordinates; the twist basis acts on raw world coordinates so the rigid
/// interpretation holds in world units.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub aabb: Aabb,
    mlp: Mlp,
}

impl VelocityField {
    pub fn new(aabb: Aabb) -> Self {
        let input = posenc_width(4, POSENC_BANDS);
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(HIDDEN).take(HIDDEN_LAYERS));
        widths.push(6);
        VelocityField {
            aabb,
            mlp: Mlp::new("velocity", &widths, true),
        }
    }

    pub fn init_params<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init_params(store, rng, LrGroup::VelocityMlp)
    }

    /// Twist weights `[n,6]` at the given space-time points.
    pub fn weights_node<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        points: NodeId,
        times: NodeId,
    ) -> NodeId {
        let norm = normalize_coords(g, points, &self.aabb);
        let x = g.concat_cols(norm, times);
        let enc = posenc_node(g, x, POSENC_BANDS);
        self.mlp.forward(g, enc)
    }
}

/// AABB normalization without clamping: the field is defined on all of space.
fn normalize_coords<R: Real>(g: &mut Graph<'_, R>, points: NodeId, aabb: &Aabb) -> NodeId {
    let center = aabb.center();
    let half = aabb.half_extent();
    let scale: Vec<R> = (0..3).map(|i| R::from_f64(1.0 / half[i])).collect();
    let shift: Vec<R> = (0..3).map(|i| R::from_f64(-center[i] / half[i])).collect();
    g.affine_cols(points, &scale, &shift)
}

/// Combine twist weights with the basis at world points:
/// `v = (w1 - w4 z - w5 y, w2 + w5 x - w6 z, w3 + w4 x + w6 y)`.
pub fn apply_twist_basis<R: Real>(
    g: &mut Graph<'_, R>,
    weights: NodeId,
    points: NodeId,
) -> NodeId {
    let w1 = g.gather_cols(weights, &[0]);
    let w2 = g.gather_cols(weights, &[1]);
    let w3 = g.gather_cols(weights, &[2]);
    let w4 = g.gather_cols(weights, &[3]);
    let w5 = g.gather_cols(weights, &[4]);
    let w6 = g.gather_cols(weights, &[5]);
    let x = g.gather_cols(points, &[0]);
    let y = g.gather_cols(points, &[1]);
    let z = g.gather_cols(points, &[2]);

    let w4z = g.mul(w4, z);
    let w5y = g.mul(w5, y);
    let vx = g.sub(w1, w4z);
    let vx = g.sub(vx, w5y);

    let w5x = g.mul(w5, x);
    let w6z = g.mul(w6, z);
    let vy = g.add(w2, w5x);
    let vy = g.sub(vy, w6z);

    let w4x = g.mul(w4, x);
    let w6y = g.mul(w6, y);
    let vz = g.add(w3, w4x);
    let vz = g.add(vz, w6y);

    let vxy = g.concat_cols(vx, vy);
    g.concat_cols(vxy, vz)
}

impl<R: Real> VelocityGraph<R> for VelocityField {
    fn velocity_node(&self, g: &mut Graph<'_, R>, points: NodeId, times: NodeId) -> NodeId {
        let w = self.weights_node(g, points, times);
        apply_twist_basis(g, w, points)
    }
}

/// Closed-form field `v = A p + c t + b` for oracles and diagnostics: covers
/// rigid rotations, uniform translations, expansions, and time ramps.
#[derive(Debug, Clone, Copy)]
pub struct AffineVelocity {
    pub matrix: [[f64; 3]; 3],
    pub time_coeff: [f64; 3],
    pub constant: [f64; 3],
}

impl AffineVelocity {
    pub fn eval(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        let mut v = [0.0; 3];
        for i in 0..3 {
            v[i] = self.constant[i] + self.time_coeff[i] * t;
            for j in 0..3 {
                v[i] += self.matrix[i][j] * p[j];
            }
        }
        v
    }
}

impl<R: Real> VelocityGraph<R> for AffineVelocity {
    fn velocity_node(&self, g: &mut Graph<'_, R>, points: NodeId, times: NodeId) -> NodeId {
        // Row-vector convention: v = p A^T + t c^T + b.
        let mut a_t = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                a_t.push(R::from_f64(self.matrix[c][r]));
            }
        }
        let a_t = g.constant(Tensor::new(vec![3, 3], a_t));
        let mut v = g.matmul(points, a_t);
        let c_row: Vec<R> = self.time_coeff.iter().map(|&x| R::from_f64(x)).collect();
        let c_row = g.constant(Tensor::new(vec![1, 3], c_row));
        let tc = g.matmul(times, c_row);
        v = g.add(v, tc);
        let b_row: Vec<R> = self.constant.iter().map(|&x| R::from_f64(x)).collect();
        let b_row = g.constant(Tensor::new(vec![1, 3], b_row));
        g.add_row(v, b_row)
    }
}

/// The acceleration field `a(x,y,z,t)`: the same MLP shape with a 3-vector
/// head, also zero-initialized.
#[derive(Debug, Clone)]
pub struct AccelerationField {
    pub aabb: Aabb,
    mlp: Mlp,
}

impl AccelerationField {
    pub fn new(aabb: Aabb) -> Self {
        let input = posenc_width(4, POSENC_BANDS);
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(HIDDEN).take(HIDDEN_LAYERS));
        widths.push(3);
        AccelerationField {
            aabb,
            mlp: Mlp::new("accel", &widths, true),
        }
    }

    pub fn init_params<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init_params(store, rng, LrGroup::AccelMlp)
    }

    pub fn acceleration_node<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        points: NodeId,
        times: NodeId,
    ) -> NodeId {
        let norm = normalize_coords(g, points, &self.aabb);
        let x = g.concat_cols(norm, times);
        let enc = posenc_node(g, x, POSENC_BANDS);
        self.mlp.forward(g, enc)
    }
}

/// Plain-value velocity evaluation through a forward-only graph (single code
/// path with training).
pub fn eval_velocity<R: Real>(
    field: &VelocityField,
    store: &ParamStore<R>,
    points: &[[f64; 3]],
    t: f64,
) -> Vec<[f64; 3]> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut g = Graph::new(store);
    let n = points.len();
    let mut flat = Vec::with_capacity(n * 3);
    for p in points {
        flat.extend(p.iter().map(|&x| R::from_f64(x)));
    }
    let pts = g.constant(Tensor::new(vec![n, 3], flat));
    let times = g.constant(Tensor::full(&[n, 1], R::from_f64(t)));
    let v = field.velocity_node(&mut g, pts, times);
    g.value(v)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
        .collect()
}
