//! Central-difference validation of tape gradients (64-bit mode).

use super::tape::{gradient_of, Graph, NodeId};
#[cfg(test)]
use super::tensor::Tensor;
use super::ParamStore;
use crate::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compare tape gradients against central finite differences.
///
/// `build` must reconstruct the same scalar loss graph from the current store
/// contents on every call; the checker re-evaluates it at perturbed
/// parameters. At most `max_coords` coordinates are sampled (all of them when
/// the store is small enough). Returns the maximum over sampled coordinates of
/// `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> NodeId,
{
    let dense = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        gradient_of(&g, loss)?
    };

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (idx, entry) in store.entries().iter().enumerate() {
        for i in 0..entry.value.numel() {
            coords.push((idx, i));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.value(loss).scalar_value()
    };

    let mut max_rel = 0.0f64;
    for (entry, i) in coords {
        let orig = store.entry(entry).value.data()[i];
        store.value_mut(entry).data_mut()[i] = orig + h;
        let f_plus = eval(store);
        store.value_mut(entry).data_mut()[i] = orig - h;
        let f_minus = eval(store);
        store.value_mut(entry).data_mut()[i] = orig;

        let g_fd = (f_plus - f_minus) / (2.0 * h);
        let g_ad = dense.grad(entry).data()[i];
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Convenience for tests: fill a store entry with seeded uniform values.
#[cfg(test)]
pub(crate) fn seeded_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::fill_uniform(shape, &mut rng, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::LrGroup;

    #[test]
    fn linear_graph_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("w", seeded_tensor(&[4, 1], 1, -1.0, 1.0), LrGroup::FieldMlp)
            .unwrap();
        let x = seeded_tensor(&[8, 4], 2, -1.0, 1.0);
        let err = finite_diff_check(&mut store, 1e-5, 2048, 0, |g| {
            let w = g.param("w");
            let xc = g.constant(x.clone());
            let y = g.matmul(xc, w);
            g.sum_all(y)
        })
        .unwrap();
        assert!(err < 1e-10, "linear graph FD error {err}");
    }

    #[test]
    fn exp_of_linear_toy_graph() {
        let mut store = ParamStore::new();
        store
            .insert("w", seeded_tensor(&[3, 2], 3, -0.5, 0.5), LrGroup::FieldMlp)
            .unwrap();
        let x = seeded_tensor(&[5, 3], 4, -1.0, 1.0);
        let err = finite_diff_check(&mut store, 1e-5, 2048, 0, |g| {
            let w = g.param("w");
            let xc = g.constant(x.clone());
            let y = g.matmul(xc, w);
            let e = g.exp(y);
            g.mean_all(e)
        })
        .unwrap();
        assert!(err < 1e-6, "exp-of-linear FD error {err}");
    }

    #[test]
    fn two_layer_relu_mlp_away_from_kinks() {
        let mut store = ParamStore::new();
        store
            .insert("w0", seeded_tensor(&[4, 16], 5, -0.7, 0.7), LrGroup::FieldMlp)
            .unwrap();
        store
            .insert("b0", seeded_tensor(&[1, 16], 6, 0.05, 0.4), LrGroup::FieldMlp)
            .unwrap();
        store
            .insert("w1", seeded_tensor(&[16, 1], 7, -0.7, 0.7), LrGroup::FieldMlp)
            .unwrap();
        let x = seeded_tensor(&[6, 4], 8, -1.0, 1.0);
        let err = finite_diff_check(&mut store, 1e-5, 2048, 0, |g| {
            let xc = g.constant(x.clone());
            let w0 = g.param("w0");
            let b0 = g.param("b0");
            let w1 = g.param("w1");
            let h0 = g.matmul(xc, w0);
            let h0 = g.add_row(h0, b0);
            let h0 = g.relu(h0);
            let y = g.matmul(h0, w1);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        })
        .unwrap();
        assert!(err < 1e-5, "relu mlp FD error {err}");
    }
}
