//! Recorded computation graphs with exact reverse rules per primitive.
//!
//! A [`Graph`] is built eagerly: each method runs the forward computation and
//! records the operation. [`gradient_of`] replays the tape in reverse and
//! returns one gradient array per parameter entry (zeros for entries the loss
//! never touched). Reduction order is fixed, so repeated evaluation of the
//! same graph is bit-identical.

use super::tensor::{gemm_acc, MatSide, Real, Tensor};
use super::ParamStore;
use crate::{Error, Result};
use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug)]
#[allow(dead_code)] // op records keep their operands even when a reverse rule ignores them
enum Op<R> {
    Const,
    Param { entry: usize },
    StopGrad { a: NodeId },
    MatMul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulCol { a: NodeId, col: NodeId },
    Scale { a: NodeId, c: R },
    Shift { a: NodeId, c: R },
    AffineCols { a: NodeId, scale: Vec<R>, shift: Vec<R> },
    Exp { a: NodeId },
    Log { a: NodeId },
    Softplus { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    Abs { a: NodeId },
    Clamp { a: NodeId, lo: R, hi: R },
    Softmax { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumRows { a: NodeId },
    RowNormL2 { a: NodeId },
    GatherCols { a: NodeId, idx: Vec<usize> },
    GatherRows { a: NodeId, idx: Vec<usize> },
    ConcatCols { a: NodeId, b: NodeId },
    Bilinear { grid: NodeId, coords: NodeId },
    Lerp1d { grid: NodeId, x: NodeId },
    TimeColumn { grid: NodeId, k: usize },
    Composite { sigma: NodeId, color: NodeId, delta: Vec<R>, n_rays: usize, s: usize },
    TvPlane { grid: NodeId, both_axes: bool },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::StopGrad { .. } => "stop_grad",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::AffineCols { .. } => "affine_cols",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softplus { .. } => "softplus",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Sin { .. } => "sin",
            Op::Cos { .. } => "cos",
            Op::Abs { .. } => "abs",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::SumRows { .. } => "sum_rows",
            Op::RowNormL2 { .. } => "row_norm_l2",
            Op::GatherCols { .. } => "gather_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Bilinear { .. } => "bilinear",
            Op::Lerp1d { .. } => "lerp1d",
            Op::TimeColumn { .. } => "time_column",
            Op::Composite { .. } => "composite",
            Op::TvPlane { .. } => "tv_plane",
        }
    }
}

enum Value<R> {
    Owned(Tensor<R>),
    /// Parameter leaves borrow their tensor from the store.
    Entry(usize),
}

struct Node<R> {
    op: Op<R>,
    value: Value<R>,
    requires: bool,
}

/// Dense per-entry gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore<R> {
    grads: Vec<Tensor<R>>,
}

impl<R: Real> GradStore<R> {
    pub fn grads(&self) -> &[Tensor<R>] {
        &self.grads
    }

    pub fn grad(&self, idx: usize) -> &Tensor<R> {
        &self.grads[idx]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore<R>, name: &str) -> Option<&'a Tensor<R>> {
        store.index_of(name).map(|i| &self.grads[i])
    }

    pub fn max_abs(&self, indices: &[usize]) -> f64 {
        let mut m = 0.0f64;
        for &i in indices {
            for &g in self.grads[i].data() {
                m = m.max(g.to_f64().abs());
            }
        }
        m
    }
}

/// A recorded computation over parameter entries and constants.
pub struct Graph<'s, R: Real> {
    store: &'s ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'s, R: Real> Graph<'s, R> {
    pub fn new(store: &'s ParamStore<R>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<R> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        match &self.nodes[id].value {
            Value::Owned(t) => t,
            Value::Entry(e) => &self.store.entry(*e).value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op<R>, value: Tensor<R>, requires: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<R>) -> NodeId {
        self.push(Op::Const, t, false)
    }

    pub fn scalar(&mut self, x: R) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf referencing a named parameter entry. Panics on unknown names:
    /// graph builders own their naming schema.
    pub fn param(&mut self, name: &str) -> NodeId {
        let entry = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&id) = self.param_nodes.get(&entry) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param { entry },
            value: Value::Entry(entry),
            requires: true,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(entry, id);
        id
    }

    // ── structure ───────────────────────────────────────────────────────

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad { a }, v, false)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let (_, k1) = va.dims2();
        let (k2, _) = vb.dims2();
        assert_eq!(k1, k2, "matmul inner dims");
        let out = super::tensor::matmul(va, MatSide::Plain, vb, MatSide::Plain);
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MatMul { a, b }, out, req)
    }

    /// `[m,n] + [1,n]` broadcast (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let vr = self.value(row);
        let (m, n) = va.dims2();
        assert_eq!(vr.dims2(), (1, n), "add_row bias shape");
        let mut data = Vec::with_capacity(m * n);
        let ad = va.data();
        let rd = vr.data();
        for r in 0..m {
            for c in 0..n {
                data.push(ad[r * n + c] + rd[c]);
            }
        }
        let req = self.requires(a) || self.requires(row);
        self.push(Op::AddRow { a, row }, Tensor::new(vec![m, n], data), req)
    }

    fn zip_ew(&mut self, a: NodeId, b: NodeId, f: impl Fn(R, R) -> R, op: Op<R>) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape ({})", op.name());
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        self.push(op, Tensor::new(shape, data), req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `[m,n] * [m,1]` broadcast.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let va = self.value(a);
        let vc = self.value(col);
        let (m, n) = va.dims2();
        assert_eq!(vc.dims2(), (m, 1), "mul_col column shape");
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let s = vc.data()[r];
            for c in 0..n {
                data.push(va.data()[r * n + c] * s);
            }
        }
        let req = self.requires(a) || self.requires(col);
        self.push(Op::MulCol { a, col }, Tensor::new(vec![m, n], data), req)
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let req = self.requires(a);
        self.push(Op::Scale { a, c }, v, req)
    }

    pub fn shift(&mut self, a: NodeId, c: R) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let req = self.requires(a);
        self.push(Op::Shift { a, c }, v, req)
    }

    /// Per-column `x*scale + shift` with constant coefficients (coordinate
    /// normalization).
    pub fn affine_cols(&mut self, a: NodeId, scale: &[R], shift: &[R]) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        assert_eq!(scale.len(), n);
        assert_eq!(shift.len(), n);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(va.data()[r * n + c] * scale[c] + shift[c]);
            }
        }
        let req = self.requires(a);
        self.push(
            Op::AffineCols {
                a,
                scale: scale.to_vec(),
                shift: shift.to_vec(),
            },
            Tensor::new(vec![m, n], data),
            req,
        )
    }

    // ── elementwise nonlinearities ──────────────────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(R) -> R, op: Op<R>) -> NodeId {
        let v = self.value(a).map(f);
        let req = self.requires(a);
        self.push(op, v, req)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus_fn, Op::Softplus { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid_fn, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > R::zero() { x } else { R::zero() }, Op::Relu { a })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sin(), Op::Sin { a })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.cos(), Op::Cos { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.abs(), Op::Abs { a })
    }

    pub fn clamp(&mut self, a: NodeId, lo: R, hi: R) -> NodeId {
        self.unary(
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp { a, lo, hi },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &va.data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let exps: Vec<R> = row.iter().map(|&x| (x - mx).exp()).collect();
            let sum = exps.iter().cloned().fold(R::zero(), |s, e| s + e);
            data.extend(exps.iter().map(|&e| e / sum));
        }
        let req = self.requires(a);
        self.push(Op::Softmax { a }, Tensor::new(vec![m, n], data), req)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self
            .value(a)
            .data()
            .iter()
            .cloned()
            .fold(R::zero(), |acc, x| acc + x);
        let req = self.requires(a);
        self.push(Op::SumAll { a }, Tensor::scalar(s), req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.numel();
        assert!(n > 0, "mean of empty tensor");
        let s = v.data().iter().cloned().fold(R::zero(), |acc, x| acc + x);
        let req = self.requires(a);
        self.push(
            Op::MeanAll { a },
            Tensor::scalar(s / R::from_usize(n)),
            req,
        )
    }

    /// `[m,n] -> [m,1]` row sums.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            data.push(
                va.data()[r * n..(r + 1) * n]
                    .iter()
                    .cloned()
                    .fold(R::zero(), |s, x| s + x),
            );
        }
        let req = self.requires(a);
        self.push(Op::SumRows { a }, Tensor::new(vec![m, 1], data), req)
    }

    /// `[m,n] -> [m,1]` Euclidean norm per row (zero rows get zero gradient).
    pub fn row_norm_l2(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            let s = va.data()[r * n..(r + 1) * n]
                .iter()
                .fold(R::zero(), |s, &x| s + x * x);
            data.push(s.sqrt());
        }
        let req = self.requires(a);
        self.push(Op::RowNormL2 { a }, Tensor::new(vec![m, 1], data), req)
    }

    // ── gathers / layout ────────────────────────────────────────────────

    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        assert!(idx.iter().all(|&c| c < n), "gather_cols out of range");
        let mut data = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            for &c in idx {
                data.push(va.data()[r * n + c]);
            }
        }
        let req = self.requires(a);
        self.push(
            Op::GatherCols { a, idx: idx.to_vec() },
            Tensor::new(vec![m, idx.len()], data),
            req,
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.dims2();
        assert!(idx.iter().all(|&r| r < m), "gather_rows out of range");
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            data.extend_from_slice(&va.data()[r * n..(r + 1) * n]);
        }
        let req = self.requires(a);
        self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            Tensor::new(vec![idx.len(), n], data),
            req,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, n1) = va.dims2();
        let (m2, n2) = vb.dims2();
        assert_eq!(m, m2, "concat_cols row count");
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&vb.data()[r * n2..(r + 1) * n2]);
        }
        let req = self.requires(a) || self.requires(b);
        self.push(
            Op::ConcatCols { a, b },
            Tensor::new(vec![m, n1 + n2], data),
            req,
        )
    }

    // ── interpolation ───────────────────────────────────────────────────

    /// Bilinear lookup on a `[h,w,c]` grid at `[b,2]` coordinates given in
    /// grid units (`0..h-1` x `0..w-1`, column 0 indexing the first axis).
    /// Coordinates are clamped to the grid; clamped coordinates receive zero
    /// gradient. Gradients flow to both the grid and the coordinates.
    pub fn bilinear(&mut self, grid: NodeId, coords: NodeId) -> NodeId {
        let vg = self.value(grid);
        let vc = self.value(coords);
        let (h, w, ch) = vg.dims3();
        let (b, two) = vc.dims2();
        assert_eq!(two, 2, "bilinear coords must be [b,2]");
        assert!(h >= 2 && w >= 2, "bilinear grid must be at least 2x2");
        let mut data = vec![R::zero(); b * ch];
        let gd = vg.data();
        let cd = vc.data();
        for i in 0..b {
            let (i0, fu) = cell_coord(cd[i * 2], h);
            let (j0, fv) = cell_coord(cd[i * 2 + 1], w);
            let one = R::one();
            let w00 = (one - fu) * (one - fv);
            let w10 = fu * (one - fv);
            let w01 = (one - fu) * fv;
            let w11 = fu * fv;
            let g00 = &gd[(i0 * w + j0) * ch..];
            let g10 = &gd[((i0 + 1) * w + j0) * ch..];
            let g01 = &gd[(i0 * w + j0 + 1) * ch..];
            let g11 = &gd[((i0 + 1) * w + j0 + 1) * ch..];
            let out = &mut data[i * ch..(i + 1) * ch];
            for c in 0..ch {
                out[c] = w00 * g00[c] + w10 * g10[c] + w01 * g01[c] + w11 * g11[c];
            }
        }
        let req = self.requires(grid) || self.requires(coords);
        self.push(
            Op::Bilinear { grid, coords },
            Tensor::new(vec![b, ch], data),
            req,
        )
    }

    /// Linear lookup on a `[g,c]` grid at `[b,1]` positions in grid units.
    pub fn lerp1d(&mut self, grid: NodeId, x: NodeId) -> NodeId {
        let vg = self.value(grid);
        let vx = self.value(x);
        let (g, ch) = vg.dims2();
        let (b, one) = vx.dims2();
        assert_eq!(one, 1, "lerp1d positions must be [b,1]");
        assert!(g >= 2, "lerp1d grid must have at least 2 nodes");
        let mut data = vec![R::zero(); b * ch];
        for i in 0..b {
            let (i0, f) = cell_coord(vx.data()[i], g);
            let lo = &vg.data()[i0 * ch..(i0 + 1) * ch];
            let hi = &vg.data()[(i0 + 1) * ch..(i0 + 2) * ch];
            let out = &mut data[i * ch..(i + 1) * ch];
            for c in 0..ch {
                out[c] = (R::one() - f) * lo[c] + f * hi[c];
            }
        }
        let req = self.requires(grid) || self.requires(x);
        self.push(Op::Lerp1d { grid, x }, Tensor::new(vec![b, ch], data), req)
    }

    /// Extract time column `k` (0-based) from a `[g,k_total,c]` space-time
    /// plane, yielding a `[g,c]` spatial grid.
    pub fn time_column(&mut self, grid: NodeId, k: usize) -> NodeId {
        let vg = self.value(grid);
        let (g, kt, ch) = vg.dims3();
        assert!(k < kt, "time column {k} out of {kt}");
        let mut data = Vec::with_capacity(g * ch);
        for r in 0..g {
            let base = (r * kt + k) * ch;
            data.extend_from_slice(&vg.data()[base..base + ch]);
        }
        let req = self.requires(grid);
        self.push(
            Op::TimeColumn { grid, k },
            Tensor::new(vec![g, ch], data),
            req,
        )
    }

    // ── rendering ───────────────────────────────────────────────────────

    /// Volume compositing of `n_rays` rays with `s` samples each:
    /// `sigma [n*s,1]`, `color [n*s,3]`, constant segment lengths `delta`.
    /// Output is `[n_rays, 4]`: composited RGB and accumulated alpha, over a
    /// black background.
    pub fn composite(
        &mut self,
        sigma: NodeId,
        color: NodeId,
        delta: Vec<R>,
        n_rays: usize,
        s: usize,
    ) -> NodeId {
        let vs = self.value(sigma);
        let vc = self.value(color);
        assert_eq!(vs.dims2(), (n_rays * s, 1), "composite sigma shape");
        assert_eq!(vc.dims2(), (n_rays * s, 3), "composite color shape");
        assert_eq!(delta.len(), n_rays * s, "composite delta length");
        let mut data = vec![R::zero(); n_rays * 4];
        for r in 0..n_rays {
            let base = r * s;
            let (rgb, alpha) = crate::renderer::composite_ray(
                &vs.data()[base..base + s],
                &vc.data()[base * 3..(base + s) * 3],
                &delta[base..base + s],
                &mut |_, _| {},
            );
            data[r * 4] = rgb[0];
            data[r * 4 + 1] = rgb[1];
            data[r * 4 + 2] = rgb[2];
            data[r * 4 + 3] = alpha;
        }
        let req = self.requires(sigma) || self.requires(color);
        self.push(
            Op::Composite {
                sigma,
                color,
                delta,
                n_rays,
                s,
            },
            Tensor::new(vec![n_rays, 4], data),
            req,
        )
    }

    /// Total-variation term of one feature plane: mean over adjacent texel
    /// pairs of the squared difference, along both spatial axes of a
    /// `[h,w,c]` plane or along axis 0 only (space-time planes keep their
    /// time axis unpenalized).
    pub fn tv_plane(&mut self, grid: NodeId, both_axes: bool) -> NodeId {
        let vg = self.value(grid);
        let (h, w, ch) = vg.dims3();
        let gd = vg.data();
        let mut acc = R::zero();
        let mut pairs = 0usize;
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                for c in 0..ch {
                    let d = gd[((i + 1) * w + j) * ch + c] - gd[(i * w + j) * ch + c];
                    acc = acc + d * d;
                }
            }
            pairs += w * ch;
        }
        if both_axes {
            for i in 0..h {
                for j in 0..w.saturating_sub(1) {
                    for c in 0..ch {
                        let d = gd[(i * w + j + 1) * ch + c] - gd[(i * w + j) * ch + c];
                        acc = acc + d * d;
                    }
                }
            }
            pairs += h * w.saturating_sub(1) * ch;
        }
        let value = if pairs == 0 {
            R::zero()
        } else {
            acc / R::from_usize(pairs)
        };
        let req = self.requires(grid);
        self.push(
            Op::TvPlane { grid, both_axes },
            Tensor::scalar(value),
            req,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar node. Returns dense per-entry gradients
    /// (zeros for entries the loss never touched).
    pub fn backward(&self, loss: NodeId) -> Result<GradStore<R>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            // Identify the first primitive that went non-finite.
            for node in &self.nodes {
                let v = match &node.value {
                    Value::Owned(t) => t,
                    Value::Entry(e) => &self.store.entry(*e).value,
                };
                if !v.is_finite() {
                    return Err(Error::NonFinite(node.op.name()));
                }
            }
            return Err(Error::NonFinite("loss"));
        }

        let mut adj: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::full(self.value(loss).shape(), R::one()));

        for id in (0..self.nodes.len()).rev() {
            let Some(up) = adj[id].take() else { continue };
            self.backprop_node(id, &up, &mut adj);
            // Re-store param adjoints for collection below.
            if matches!(self.nodes[id].op, Op::Param { .. }) {
                adj[id] = Some(up);
            }
        }

        let mut grads: Vec<Tensor<R>> = self
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        for (entry, &node) in &self.param_nodes {
            if let Some(g) = adj[node].take() {
                grads[*entry] = g;
            }
        }
        Ok(GradStore { grads })
    }

    fn backprop_node(&self, id: NodeId, up: &Tensor<R>, adj: &mut [Option<Tensor<R>>]) {
        let acc = |adj: &mut [Option<Tensor<R>>], target: NodeId, grad: Tensor<R>| {
            match &mut adj[target] {
                Some(existing) => {
                    for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                        *e = *e + *g;
                    }
                }
                slot @ None => *slot = Some(grad),
            }
        };
        // Accumulate into an adjoint via gemm without a temporary.
        let acc_gemm = |adj: &mut [Option<Tensor<R>>],
                        target: NodeId,
                        shape: &[usize],
                        a: &Tensor<R>,
                        ta: MatSide,
                        b: &Tensor<R>,
                        tb: MatSide| {
            let slot = &mut adj[target];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(shape));
            }
            gemm_acc(slot.as_mut().unwrap(), R::one(), a, ta, b, tb);
        };

        match &self.nodes[id].op {
            Op::Const | Op::Param { .. } | Op::StopGrad { .. } => {}
            Op::MatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.requires(*a) {
                    acc_gemm(adj, *a, va.shape(), up, MatSide::Plain, vb, MatSide::Transposed);
                }
                if self.requires(*b) {
                    acc_gemm(adj, *b, vb.shape(), va, MatSide::Transposed, up, MatSide::Plain);
                }
            }
            Op::AddRow { a, row } => {
                if self.requires(*a) {
                    acc(adj, *a, up.clone());
                }
                if self.requires(*row) {
                    let (m, n) = up.dims2();
                    let mut g = vec![R::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            g[c] = g[c] + up.data()[r * n + c];
                        }
                    }
                    acc(adj, *row, Tensor::new(vec![1, n], g));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    acc(adj, *a, up.clone());
                }
                if self.requires(*b) {
                    acc(adj, *b, up.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    acc(adj, *a, up.clone());
                }
                if self.requires(*b) {
                    acc(adj, *b, up.map(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let vb = self.value(*b);
                    let g = zip_map(up, vb, |u, y| u * y);
                    acc(adj, *a, g);
                }
                if self.requires(*b) {
                    let va = self.value(*a);
                    let g = zip_map(up, va, |u, x| u * x);
                    acc(adj, *b, g);
                }
            }
            Op::MulCol { a, col } => {
                let (m, n) = up.dims2();
                if self.requires(*a) {
                    let vc = self.value(*col);
                    let mut g = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let s = vc.data()[r];
                        for c in 0..n {
                            g.push(up.data()[r * n + c] * s);
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
                if self.requires(*col) {
                    let va = self.value(*a);
                    let mut g = Vec::with_capacity(m);
                    for r in 0..m {
                        let mut s = R::zero();
                        for c in 0..n {
                            s = s + up.data()[r * n + c] * va.data()[r * n + c];
                        }
                        g.push(s);
                    }
                    acc(adj, *col, Tensor::new(vec![m, 1], g));
                }
            }
            Op::Scale { a, c } => {
                if self.requires(*a) {
                    let c = *c;
                    acc(adj, *a, up.map(|u| u * c));
                }
            }
            Op::Shift { a, .. } => {
                if self.requires(*a) {
                    acc(adj, *a, up.clone());
                }
            }
            Op::AffineCols { a, scale, .. } => {
                if self.requires(*a) {
                    let (m, n) = up.dims2();
                    let mut g = Vec::with_capacity(m * n);
                    for r in 0..m {
                        for c in 0..n {
                            g.push(up.data()[r * n + c] * scale[c]);
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::Exp { a } => {
                if self.requires(*a) {
                    let y = self.value(id);
                    acc(adj, *a, zip_map(up, y, |u, y| u * y));
                }
            }
            Op::Log { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(adj, *a, zip_map(up, x, |u, x| u / x));
                }
            }
            Op::Softplus { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(adj, *a, zip_map(up, x, |u, x| u * sigmoid_fn(x)));
                }
            }
            Op::Sigmoid { a } => {
                if self.requires(*a) {
                    let y = self.value(id);
                    acc(adj, *a, zip_map(up, y, |u, y| u * y * (R::one() - y)));
                }
            }
            Op::Relu { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(
                        adj,
                        *a,
                        zip_map(up, x, |u, x| if x > R::zero() { u } else { R::zero() }),
                    );
                }
            }
            Op::Sin { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(adj, *a, zip_map(up, x, |u, x| u * x.cos()));
                }
            }
            Op::Cos { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(adj, *a, zip_map(up, x, |u, x| -u * x.sin()));
                }
            }
            Op::Abs { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    acc(
                        adj,
                        *a,
                        zip_map(up, x, |u, x| {
                            if x > R::zero() {
                                u
                            } else if x < R::zero() {
                                -u
                            } else {
                                R::zero()
                            }
                        }),
                    );
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        adj,
                        *a,
                        zip_map(up, x, |u, x| if x >= lo && x <= hi { u } else { R::zero() }),
                    );
                }
            }
            Op::Softmax { a } => {
                if self.requires(*a) {
                    let p = self.value(id);
                    let (m, n) = p.dims2();
                    let mut g = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let pr = &p.data()[r * n..(r + 1) * n];
                        let ur = &up.data()[r * n..(r + 1) * n];
                        let dot = pr
                            .iter()
                            .zip(ur)
                            .fold(R::zero(), |s, (&p, &u)| s + p * u);
                        for c in 0..n {
                            g.push(pr[c] * (ur[c] - dot));
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::SumAll { a } => {
                if self.requires(*a) {
                    let u = up.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    acc(adj, *a, Tensor::full(&shape, u));
                }
            }
            Op::MeanAll { a } => {
                if self.requires(*a) {
                    let v = self.value(*a);
                    let u = up.data()[0] / R::from_usize(v.numel());
                    let shape = v.shape().to_vec();
                    acc(adj, *a, Tensor::full(&shape, u));
                }
            }
            Op::SumRows { a } => {
                if self.requires(*a) {
                    let (m, n) = self.value(*a).dims2();
                    let mut g = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let u = up.data()[r];
                        for _ in 0..n {
                            g.push(u);
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::RowNormL2 { a } => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let y = self.value(id);
                    let (m, n) = x.dims2();
                    let tiny = R::from_f64(1e-300).max(R::min_positive_value());
                    let mut g = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let u = up.data()[r];
                        let norm = y.data()[r].max(tiny);
                        for c in 0..n {
                            g.push(u * x.data()[r * n + c] / norm);
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::GatherCols { a, idx } => {
                if self.requires(*a) {
                    let (m, n) = self.value(*a).dims2();
                    let mut g = vec![R::zero(); m * n];
                    for r in 0..m {
                        for (j, &c) in idx.iter().enumerate() {
                            g[r * n + c] = g[r * n + c] + up.data()[r * idx.len() + j];
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::GatherRows { a, idx } => {
                if self.requires(*a) {
                    let (m, n) = self.value(*a).dims2();
                    let mut g = vec![R::zero(); m * n];
                    for (j, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[r * n + c] = g[r * n + c] + up.data()[j * n + c];
                        }
                    }
                    acc(adj, *a, Tensor::new(vec![m, n], g));
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, n1) = self.value(*a).dims2();
                let (_, n2) = self.value(*b).dims2();
                let n = n1 + n2;
                if self.requires(*a) {
                    let mut g = Vec::with_capacity(m * n1);
                    for r in 0..m {
                        g.extend_from_slice(&up.data()[r * n..r * n + n1]);
                    }
                    acc(adj, *a, Tensor::new(vec![m, n1], g));
                }
                if self.requires(*b) {
                    let mut g = Vec::with_capacity(m * n2);
                    for r in 0..m {
                        g.extend_from_slice(&up.data()[r * n + n1..(r + 1) * n]);
                    }
                    acc(adj, *b, Tensor::new(vec![m, n2], g));
                }
            }
            Op::Bilinear { grid, coords } => {
                let vg = self.value(*grid);
                let vc = self.value(*coords);
                let (h, w, ch) = vg.dims3();
                let (b, _) = vc.dims2();
                let gd = vg.data();
                let cd = vc.data();
                let need_grid = self.requires(*grid);
                let need_coords = self.requires(*coords);
                let mut g_grid = if need_grid {
                    Some(vec![R::zero(); h * w * ch])
                } else {
                    None
                };
                let mut g_coords = if need_coords {
                    Some(vec![R::zero(); b * 2])
                } else {
                    None
                };
                let one = R::one();
                for i in 0..b {
                    let u = cd[i * 2];
                    let v = cd[i * 2 + 1];
                    let (i0, fu) = cell_coord(u, h);
                    let (j0, fv) = cell_coord(v, w);
                    let idx00 = (i0 * w + j0) * ch;
                    let idx10 = ((i0 + 1) * w + j0) * ch;
                    let idx01 = (i0 * w + j0 + 1) * ch;
                    let idx11 = ((i0 + 1) * w + j0 + 1) * ch;
                    let ur = &up.data()[i * ch..(i + 1) * ch];
                    if let Some(gg) = g_grid.as_mut() {
                        let w00 = (one - fu) * (one - fv);
                        let w10 = fu * (one - fv);
                        let w01 = (one - fu) * fv;
                        let w11 = fu * fv;
                        for c in 0..ch {
                            gg[idx00 + c] = gg[idx00 + c] + ur[c] * w00;
                            gg[idx10 + c] = gg[idx10 + c] + ur[c] * w10;
                            gg[idx01 + c] = gg[idx01 + c] + ur[c] * w01;
                            gg[idx11 + c] = gg[idx11 + c] + ur[c] * w11;
                        }
                    }
                    if let Some(gc) = g_coords.as_mut() {
                        // Zero gradient where the coordinate was clamped.
                        let u_in = u >= R::zero() && u <= R::from_usize(h - 1);
                        let v_in = v >= R::zero() && v <= R::from_usize(w - 1);
                        let mut du = R::zero();
                        let mut dv = R::zero();
                        for c in 0..ch {
                            let g00 = gd[idx00 + c];
                            let g10 = gd[idx10 + c];
                            let g01 = gd[idx01 + c];
                            let g11 = gd[idx11 + c];
                            du = du + ur[c] * ((one - fv) * (g10 - g00) + fv * (g11 - g01));
                            dv = dv + ur[c] * ((one - fu) * (g01 - g00) + fu * (g11 - g10));
                        }
                        if u_in {
                            gc[i * 2] = du;
                        }
                        if v_in {
                            gc[i * 2 + 1] = dv;
                        }
                    }
                }
                if let Some(gg) = g_grid {
                    acc(adj, *grid, Tensor::new(vec![h, w, ch], gg));
                }
                if let Some(gc) = g_coords {
                    acc(adj, *coords, Tensor::new(vec![b, 2], gc));
                }
            }
            Op::Lerp1d { grid, x } => {
                let vg = self.value(*grid);
                let vx = self.value(*x);
                let (g, ch) = vg.dims2();
                let (b, _) = vx.dims2();
                let need_grid = self.requires(*grid);
                let need_x = self.requires(*x);
                let mut g_grid = if need_grid {
                    Some(vec![R::zero(); g * ch])
                } else {
                    None
                };
                let mut g_x = if need_x {
                    Some(vec![R::zero(); b])
                } else {
                    None
                };
                for i in 0..b {
                    let u = vx.data()[i];
                    let (i0, f) = cell_coord(u, g);
                    let ur = &up.data()[i * ch..(i + 1) * ch];
                    if let Some(gg) = g_grid.as_mut() {
                        for c in 0..ch {
                            gg[i0 * ch + c] = gg[i0 * ch + c] + ur[c] * (R::one() - f);
                            gg[(i0 + 1) * ch + c] = gg[(i0 + 1) * ch + c] + ur[c] * f;
                        }
                    }
                    if let Some(gx) = g_x.as_mut() {
                        if u >= R::zero() && u <= R::from_usize(g - 1) {
                            let mut d = R::zero();
                            for c in 0..ch {
                                d = d + ur[c] * (vg.data()[(i0 + 1) * ch + c] - vg.data()[i0 * ch + c]);
                            }
                            gx[i] = d;
                        }
                    }
                }
                if let Some(gg) = g_grid {
                    acc(adj, *grid, Tensor::new(vec![g, ch], gg));
                }
                if let Some(gx) = g_x {
                    acc(adj, *x, Tensor::new(vec![b, 1], gx));
                }
            }
            Op::TimeColumn { grid, k } => {
                if self.requires(*grid) {
                    let (g, kt, ch) = self.value(*grid).dims3();
                    let mut gg = vec![R::zero(); g * kt * ch];
                    for r in 0..g {
                        let base = (r * kt + k) * ch;
                        for c in 0..ch {
                            gg[base + c] = up.data()[r * ch + c];
                        }
                    }
                    acc(adj, *grid, Tensor::new(vec![g, kt, ch], gg));
                }
            }
            Op::Composite {
                sigma,
                color,
                delta,
                n_rays,
                s,
            } => {
                let vs = self.value(*sigma);
                let vc = self.value(*color);
                let need_sigma = self.requires(*sigma);
                let need_color = self.requires(*color);
                let mut g_sigma = if need_sigma {
                    Some(vec![R::zero(); n_rays * s])
                } else {
                    None
                };
                let mut g_color = if need_color {
                    Some(vec![R::zero(); n_rays * s * 3])
                } else {
                    None
                };
                let sd = vs.data();
                let cd = vc.data();
                for r in 0..*n_rays {
                    let base = r * s;
                    let up_rgb = &up.data()[r * 4..r * 4 + 3];
                    let up_alpha = up.data()[r * 4 + 3];
                    // Forward re-walk: transmittance before each sample.
                    let mut trans = vec![R::zero(); *s + 1];
                    trans[0] = R::one();
                    let mut weights = vec![R::zero(); *s];
                    for i in 0..*s {
                        let att = (-(sd[base + i] * delta[base + i])).exp();
                        weights[i] = trans[i] * (R::one() - att);
                        trans[i + 1] = trans[i] * att;
                    }
                    // q_i = up_rgb . c_i + up_alpha; suffix sums drive dsigma.
                    let mut q = vec![R::zero(); *s];
                    for i in 0..*s {
                        let c = &cd[(base + i) * 3..(base + i) * 3 + 3];
                        q[i] = up_rgb[0] * c[0] + up_rgb[1] * c[1] + up_rgb[2] * c[2] + up_alpha;
                    }
                    if let Some(gc) = g_color.as_mut() {
                        for i in 0..*s {
                            for ch in 0..3 {
                                gc[(base + i) * 3 + ch] = weights[i] * up_rgb[ch];
                            }
                        }
                    }
                    if let Some(gs) = g_sigma.as_mut() {
                        let mut suffix = R::zero();
                        for i in (0..*s).rev() {
                            gs[base + i] = delta[base + i] * (trans[i + 1] * q[i] - suffix);
                            suffix = suffix + weights[i] * q[i];
                        }
                    }
                }
                if let Some(gs) = g_sigma {
                    acc(adj, *sigma, Tensor::new(vec![n_rays * s, 1], gs));
                }
                if let Some(gc) = g_color {
                    acc(adj, *color, Tensor::new(vec![n_rays * s, 3], gc));
                }
            }
            Op::TvPlane { grid, both_axes } => {
                if self.requires(*grid) {
                    let vg = self.value(*grid);
                    let (h, w, ch) = vg.dims3();
                    let gd = vg.data();
                    let mut pairs = (h.saturating_sub(1)) * w * ch;
                    if *both_axes {
                        pairs += h * w.saturating_sub(1) * ch;
                    }
                    if pairs == 0 {
                        return;
                    }
                    let scale = up.data()[0]
                        * (R::one() + R::one())
                        / R::from_usize(pairs);
                    let mut gg = vec![R::zero(); h * w * ch];
                    for i in 0..h.saturating_sub(1) {
                        for j in 0..w {
                            for c in 0..ch {
                                let lo = (i * w + j) * ch + c;
                                let hi = ((i + 1) * w + j) * ch + c;
                                let d = (gd[hi] - gd[lo]) * scale;
                                gg[hi] = gg[hi] + d;
                                gg[lo] = gg[lo] - d;
                            }
                        }
                    }
                    if *both_axes {
                        for i in 0..h {
                            for j in 0..w.saturating_sub(1) {
                                for c in 0..ch {
                                    let lo = (i * w + j) * ch + c;
                                    let hi = (i * w + j + 1) * ch + c;
                                    let d = (gd[hi] - gd[lo]) * scale;
                                    gg[hi] = gg[hi] + d;
                                    gg[lo] = gg[lo] - d;
                                }
                            }
                        }
                    }
                    acc(adj, *grid, Tensor::new(vec![h, w, ch], gg));
                }
            }
        }
    }
}

/// Gradients of a scalar loss node for every parameter entry of the store.
pub fn gradient_of<R: Real>(graph: &Graph<'_, R>, loss: NodeId) -> Result<GradStore<R>> {
    graph.backward(loss)
}

fn zip_map<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Clamp a continuous grid coordinate into `[0, n-1]` and split into a base
/// cell index (at most `n-2`) and the fractional offset within the cell.
fn cell_coord<R: Real>(u: R, n: usize) -> (usize, R) {
    let max = R::from_usize(n - 1);
    let u = u.max(R::zero()).min(max);
    let mut i0 = u.floor().to_f64() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    let f = u - R::from_usize(i0);
    (i0, f)
}

fn sigmoid_fn<R: Real>(x: R) -> R {
    let one = R::one();
    if x >= R::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn softplus_fn<R: Real>(x: R) -> R {
    let cap = R::from_f64(30.0);
    if x > cap {
        x
    } else if x < -cap {
        x.exp()
    } else {
        (R::one() + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{finite_diff_check, seeded_tensor};
    use crate::diffcore::LrGroup;

    fn store_of(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, t) in entries {
            s.insert(name, t.clone(), LrGroup::FieldMlp).unwrap();
        }
        s
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let store = store_of(&[("p", seeded_tensor(&[3, 5], 1, -2.0, 2.0))]);
        let mut g = Graph::new(&store);
        let p = g.param("p");
        let loss = g.sum_all(p);
        let grads = gradient_of(&g, loss).unwrap();
        assert!(grads.grad(0).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let store = store_of(&[("p", Tensor::new(vec![1, 2], vec![3.0, -4.0]))]);
        let mut g = Graph::new(&store);
        let p = g.param("p");
        let sq = g.mul(p, p);
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = gradient_of(&g, loss).unwrap();
        assert_eq!(grads.grad(0).data(), &[3.0, -4.0]);
    }

    #[test]
    fn bilinear_center_of_unit_cell_weights_corners_equally() {
        let store = store_of(&[("grid", Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]))]);
        let mut g = Graph::new(&store);
        let grid = g.param("grid");
        let coords = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]));
        let v = g.bilinear(grid, coords);
        let loss = g.sum_all(v);
        assert!((g.value(v).data()[0] - 2.5).abs() < 1e-12);
        let grads = gradient_of(&g, loss).unwrap();
        assert!(grads.grad(0).data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn bilinear_exact_at_grid_nodes() {
        let grid = seeded_tensor(&[4, 5, 3], 9, -1.0, 1.0);
        let store = store_of(&[("grid", grid.clone())]);
        let mut g = Graph::new(&store);
        let gn = g.param("grid");
        let coords = g.constant(Tensor::new(vec![2, 2], vec![2.0, 3.0, 0.0, 4.0]));
        let v = g.bilinear(gn, coords);
        let out = g.value(v);
        for c in 0..3 {
            assert!((out.data()[c] - grid.data()[(2 * 5 + 3) * 3 + c]).abs() < 1e-12);
            assert!((out.data()[3 + c] - grid.data()[4 * 3 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let store = store_of(&[("p", seeded_tensor(&[2, 2], 2, 0.5, 1.5))]);
        let mut g = Graph::new(&store);
        let p = g.param("p");
        let frozen = g.stop_grad(p);
        let prod = g.mul(frozen, frozen);
        let loss = g.sum_all(prod);
        let grads = gradient_of(&g, loss).unwrap();
        assert!(grads.grad(0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unreachable_params_get_zero_arrays() {
        let store = store_of(&[
            ("used", seeded_tensor(&[2, 2], 3, -1.0, 1.0)),
            ("unused", seeded_tensor(&[3, 3], 4, -1.0, 1.0)),
        ]);
        let mut g = Graph::new(&store);
        let p = g.param("used");
        let loss = g.sum_all(p);
        let grads = gradient_of(&g, loss).unwrap();
        assert_eq!(grads.grad(1).shape(), &[3, 3]);
        assert!(grads.grad(1).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_forward_identifies_primitive() {
        let store = store_of(&[("p", Tensor::new(vec![1, 1], vec![-1.0]))]);
        let mut g = Graph::new(&store);
        let p = g.param("p");
        let l = g.log(p); // log of a negative value
        let loss = g.sum_all(l);
        let err = gradient_of(&g, loss).unwrap_err();
        match err {
            crate::Error::NonFinite(op) => assert_eq!(op, "log"),
            other => panic!("unexpected error {other}"),
        }
    }

    /// Every elementwise / reduction / layout primitive in one graph,
    /// validated against central differences.
    #[test]
    fn elementwise_and_reduction_primitives_pass_fd() {
        let mut store = store_of(&[
            ("a", seeded_tensor(&[4, 6], 10, 0.3, 1.2)),
            ("b", seeded_tensor(&[4, 6], 11, 0.3, 1.2)),
            ("bias", seeded_tensor(&[1, 6], 12, -0.5, 0.5)),
            ("col", seeded_tensor(&[4, 1], 13, 0.4, 1.0)),
        ]);
        let err = finite_diff_check(&mut store, 1e-6, 2048, 0, |g| {
            let a = g.param("a");
            let b = g.param("b");
            let bias = g.param("bias");
            let col = g.param("col");
            let s = g.add(a, b);
            let d = g.sub(s, b);
            let m = g.mul(d, b);
            let m = g.add_row(m, bias);
            let m = g.mul_col(m, col);
            let m = g.scale(m, 0.7);
            let m = g.shift(m, 0.31);
            let m = g.affine_cols(
                m,
                &[1.0, 0.5, 2.0, 1.0, 0.25, 1.5],
                &[0.1, 0.0, -0.2, 0.3, 0.0, 0.05],
            );
            let e = g.exp(m);
            let l = g.log(e);
            let sp = g.softplus(l);
            let sg = g.sigmoid(sp);
            let sn = g.sin(sg);
            let cs = g.cos(sn);
            let ab = g.abs(cs);
            let cl = g.clamp(ab, 0.05, 0.95);
            let sm = g.softmax(cl);
            let picked = g.gather_cols(sm, &[0, 2, 4]);
            let rows = g.gather_rows(picked, &[3, 1, 0, 2, 1]);
            let cat = g.concat_cols(rows, rows);
            let rs = g.sum_rows(cat);
            let rn = g.row_norm_l2(cat);
            let joined = g.concat_cols(rs, rn);
            g.mean_all(joined)
        })
        .unwrap();
        assert!(err < 1e-5, "elementwise family FD error {err}");
    }

    #[test]
    fn relu_passes_fd_away_from_kinks() {
        let mut store = store_of(&[("a", seeded_tensor(&[5, 4], 20, 0.2, 1.0))]);
        let err = finite_diff_check(&mut store, 1e-6, 2048, 0, |g| {
            let a = g.param("a");
            let shifted = g.shift(a, -0.6); // mix of clearly-positive/negative
            let r = g.relu(shifted);
            let sq = g.mul(r, r);
            g.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-5, "relu FD error {err}");
    }

    #[test]
    fn interpolation_primitives_pass_fd() {
        let mut store = store_of(&[
            ("grid", seeded_tensor(&[5, 6, 4], 30, -1.0, 1.0)),
            ("tgrid", seeded_tensor(&[5, 3, 4], 31, -1.0, 1.0)),
            ("coords", seeded_tensor(&[7, 2], 32, 0.2, 3.7)),
            ("zs", seeded_tensor(&[7, 1], 33, 0.2, 3.7)),
        ]);
        let err = finite_diff_check(&mut store, 1e-6, 2048, 0, |g| {
            let grid = g.param("grid");
            let tgrid = g.param("tgrid");
            let coords = g.param("coords");
            let zs = g.param("zs");
            let a = g.bilinear(grid, coords);
            let t1 = g.time_column(tgrid, 1);
            let b = g.lerp1d(t1, zs);
            let m = g.mul(a, b);
            g.mean_all(m)
        })
        .unwrap();
        assert!(err < 1e-5, "interpolation FD error {err}");
    }

    #[test]
    fn matmul_chain_passes_fd() {
        let mut store = store_of(&[
            ("w0", seeded_tensor(&[6, 8], 40, -0.6, 0.6)),
            ("w1", seeded_tensor(&[8, 3], 41, -0.6, 0.6)),
        ]);
        let x = seeded_tensor(&[5, 6], 42, -1.0, 1.0);
        let err = finite_diff_check(&mut store, 1e-6, 2048, 0, |g| {
            let xc = g.constant(x.clone());
            let w0 = g.param("w0");
            let w1 = g.param("w1");
            let h = g.matmul(xc, w0);
            let h = g.sigmoid(h);
            let y = g.matmul(h, w1);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        })
        .unwrap();
        assert!(err < 1e-5, "matmul chain FD error {err}");
    }

    #[test]
    fn composite_passes_fd_and_matches_hand_case() {
        let ln2 = std::f64::consts::LN_2;
        let mut store = store_of(&[
            ("sigma", seeded_tensor(&[6, 1], 50, 0.3, 2.0)),
            ("color", seeded_tensor(&[6, 3], 51, 0.1, 0.9)),
        ]);
        let delta: Vec<f64> = vec![0.4, 0.3, 0.5, 0.2, 0.6, 0.35];
        let d2 = delta.clone();
        let err = finite_diff_check(&mut store, 1e-6, 2048, 0, move |g| {
            let sigma = g.param("sigma");
            let color = g.param("color");
            let out = g.composite(sigma, color, d2.clone(), 2, 3);
            let sq = g.mul(out, out);
            g.mean_all(sq)
        })
        .unwrap();
        assert!(err < 1e-5, "composite FD error {err}");

        // Hand case through the graph op: two equal ln2 segments.
        let store2 = store_of(&[("unused", Tensor::scalar(0.0))]);
        let mut g = Graph::new(&store2);
        let sigma = g.constant(Tensor::new(vec![2, 1], vec![ln2, ln2]));
        let color = g.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let out = g.composite(sigma, color, vec![1.0, 1.0], 1, 2);
        let v = g.value(out).data();
        assert!((v[0] - 0.5).abs() < 1e-6);
        assert!((v[1] - 0.25).abs() < 1e-6);
        assert!((v[3] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn tv_plane_matches_definition_and_passes_fd() {
        // Single [[0,1]] plane: one horizontal pair, loss = 1.
        let store = store_of(&[("p", Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]))]);
        let mut g = Graph::new(&store);
        let p = g.param("p");
        let tv = g.tv_plane(p, true);
        assert_eq!(g.value(tv).data()[0], 1.0);
        drop(g);

        // Doubling values quadruples the loss.
        let store2 = store_of(&[("p", Tensor::new(vec![1, 2, 1], vec![0.0, 2.0]))]);
        let mut g2 = Graph::new(&store2);
        let p2 = g2.param("p");
        let tv2 = g2.tv_plane(p2, true);
        assert_eq!(g2.value(tv2).data()[0], 4.0);
        drop(g2);

        let mut store3 = store_of(&[("p", seeded_tensor(&[4, 5, 2], 60, -1.0, 1.0))]);
        let err = finite_diff_check(&mut store3, 1e-6, 2048, 0, |g| {
            let p = g.param("p");
            let both = g.tv_plane(p, true);
            let only0 = g.tv_plane(p, false);
            g.add(both, only0)
        })
        .unwrap();
        assert!(err < 1e-5, "tv FD error {err}");

        // Constant planes have zero variation.
        let store4 = store_of(&[("p", Tensor::full(&[6, 6, 3], 0.37f64))]);
        let mut g4 = Graph::new(&store4);
        let p4 = g4.param("p");
        let tv4 = g4.tv_plane(p4, true);
        assert_eq!(g4.value(tv4).data()[0], 0.0);
    }

    #[test]
    fn softmax_rows_form_simplex() {
        let store = store_of(&[("a", seeded_tensor(&[9, 4], 70, -3.0, 3.0))]);
        let mut g = Graph::new(&store);
        let a = g.param("a");
        let p = g.softmax(a);
        let v = g.value(p);
        for r in 0..9 {
            let row = &v.data()[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x > 0.0));
        }
    }
}
