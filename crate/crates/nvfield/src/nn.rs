//! Shared MLP plumbing: parameter initialization, graph-side forward passes,
//! and sinusoidal positional encoding.

use crate::diffcore::{Graph, LrGroup, NodeId, ParamStore, Real, Tensor};
use crate::Result;
use rand::Rng;

/// A plain fully connected ReLU network with a linear head. Parameters are
/// registered as `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    /// Layer widths including input and output, e.g. `[28,128,128,6]`.
    pub widths: Vec<usize>,
    /// Zero-init the final layer so the network starts as the zero function.
    pub zero_init_head: bool,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize], zero_init_head: bool) -> Self {
        assert!(widths.len() >= 2);
        Mlp {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
            zero_init_head,
        }
    }

    pub fn layer_names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.w{layer}", self.prefix),
            format!("{}.b{layer}", self.prefix),
        )
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Kaiming-uniform weights, zero biases; the head optionally all-zero.
    pub fn init_params<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        group: LrGroup,
    ) -> Result<()> {
        for layer in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let (wname, bname) = self.layer_names(layer);
            let last = layer == self.n_layers() - 1;
            let w = if last && self.zero_init_head {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::fill_uniform(&[fan_in, fan_out], rng, -bound, bound)
            };
            store.insert(&wname, w, group)?;
            store.insert(&bname, Tensor::zeros(&[1, fan_out]), group)?;
        }
        Ok(())
    }

    /// Forward pass with ReLU between layers and a linear head.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: NodeId) -> NodeId {
        let mut h = x;
        for layer in 0..self.n_layers() {
            let (wname, bname) = self.layer_names(layer);
            let w = g.param(&wname);
            let b = g.param(&bname);
            h = g.matmul(h, w);
            h = g.add_row(h, b);
            if layer + 1 < self.n_layers() {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Width of `posenc` output for `n` input components and `bands` frequencies.
pub const fn posenc_width(n: usize, bands: usize) -> usize {
    n * (1 + 2 * bands)
}

/// Sinusoidal encoding as graph nodes:
/// `(u, sin(2^0 pi u), cos(2^0 pi u), ..., sin(2^{L-1} pi u), cos(2^{L-1} pi u))`
/// laid out block-wise over the whole input vector, frequencies ascending.
/// `bands = 0` is the identity.
pub fn posenc_node<R: Real>(g: &mut Graph<'_, R>, u: NodeId, bands: usize) -> NodeId {
    let mut out = u;
    for l in 0..bands {
        let freq = R::from_f64(std::f64::consts::PI * (1u64 << l) as f64);
        let scaled = g.scale(u, freq);
        let s = g.sin(scaled);
        let c = g.cos(scaled);
        out = g.concat_cols(out, s);
        out = g.concat_cols(out, c);
    }
    out
}

/// Plain-value counterpart of [`posenc_node`], identical layout.
pub fn posenc_vec(u: &[f64], bands: usize) -> Vec<f64> {
    let mut out = u.to_vec();
    for l in 0..bands {
        let freq = std::f64::consts::PI * (1u64 << l) as f64;
        for &x in u {
            out.push((freq * x).sin());
        }
        for &x in u {
            out.push((freq * x).cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn posenc_of_zero_per_component() {
        // Each component contributes (0, 0,1, 0,1, 0,1) across the blocks.
        let enc = posenc_vec(&[0.0], 3);
        assert_eq!(enc, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn posenc_zero_bands_is_identity() {
        let enc = posenc_vec(&[0.3, -0.7], 0);
        assert_eq!(enc, vec![0.3, -0.7]);
    }

    #[test]
    fn posenc_width_for_4_inputs_3_bands_is_28() {
        assert_eq!(posenc_width(4, 3), 28);
        let enc = posenc_vec(&[0.1, 0.2, 0.3, 0.4], 3);
        assert_eq!(enc.len(), 28);
    }

    #[test]
    fn graph_and_plain_posenc_agree() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let u = vec![0.13, -0.52, 0.98, 0.07];
        let node = g.constant(Tensor::new(vec![1, 4], u.clone()));
        let enc = posenc_node(&mut g, node, 3);
        let got = g.value(enc).data().to_vec();
        let expected = posenc_vec(&u, 3);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_init_head_makes_zero_function() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new("test", &[4, 16, 3], true);
        mlp.init_params(&mut store, &mut rng, LrGroup::VelocityMlp).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.3, -0.2, 1.0]));
        let y = mlp.forward(&mut g, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
