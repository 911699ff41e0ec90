//! Learnable embedding table, light graph convolution with optional
//! fixed-norm noise injection, layer pooling and the reverse pass that maps
//! per-layer gradients back onto the layer-0 parameters.

use rand::{Rng, SeedableRng};

use crate::error::{HgclError, Result};
use crate::graph::NormalizedAdjacency;
use crate::matrix::{dot, norm, Matrix};

/// Xavier/Glorot uniform initialization of a `rows x d` table.
pub fn xavier_init<R: Rng>(rows: usize, d: usize, rng: &mut R) -> Matrix {
    let bound = xavier_bound(rows, d);
    let data = (0..rows * d).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, d, data)
}

pub fn xavier_bound(rows: usize, d: usize) -> f64 {
    (6.0 / (rows + d) as f64).sqrt()
}

/// Magnitude of the per-node perturbation added before each propagation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub enabled: bool,
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            epsilon: 0.0,
            enabled: false,
        }
    }

    pub fn with_epsilon(epsilon: f64) -> Self {
        NoiseSpec {
            epsilon,
            enabled: epsilon > 0.0,
        }
    }

    #[inline]
    pub fn active(&self) -> bool {
        self.enabled && self.epsilon > 0.0
    }
}

/// Noise vector of Euclidean length exactly `epsilon` lying in the orthant of
/// `row`: `epsilon * normalize(sign(row) ⊙ u)`, `u ~ U[0,1)^d`.
///
/// When `sign(row) ⊙ u` vanishes (an all-zero row), `u` itself is used.
pub fn perturbation<R: Rng>(row: &[f64], epsilon: f64, rng: &mut R) -> Vec<f64> {
    let u: Vec<f64> = (0..row.len()).map(|_| rng.random::<f64>()).collect();
    let signed: Vec<f64> = row
        .iter()
        .zip(&u)
        .map(|(&e, &r)| {
            if e > 0.0 {
                r
            } else if e < 0.0 {
                -r
            } else {
                0.0
            }
        })
        .collect();
    let mut v = if norm(&signed) > 0.0 { signed } else { u };
    let mut len = norm(&v);
    if len == 0.0 {
        v[0] = 1.0;
        len = 1.0;
    }
    let scale = epsilon / len;
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// All intermediate representations of one forward pass.
#[derive(Clone, Debug)]
pub struct EmbeddingState {
    /// `layers[k]` is `E^(k)` as fed into propagation, i.e. including the
    /// injected noise for `k < K` on perturbed forwards.
    pub layers: Vec<Matrix>,
    /// Injected noise per layer `0..K` (empty on noise-free forwards).
    pub perturbations: Vec<Matrix>,
    pub pooled: Matrix,
}

impl EmbeddingState {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.pooled.cols()
    }
}

impl NormalizedAdjacency {
    /// One application of the normalized adjacency. Zero-degree nodes carry
    /// their row forward unchanged.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        for u in 0..self.m {
            let lo = self.user_rows.indptr[u];
            let items = self.user_rows.row(u);
            let dst = out.row_mut(u);
            if items.is_empty() {
                dst.copy_from_slice(x.row(u));
                continue;
            }
            for (k, &i) in items.iter().enumerate() {
                let w = self.user_weights[lo + k];
                for (o, s) in dst.iter_mut().zip(x.row(self.m + i)) {
                    *o += w * s;
                }
            }
        }
        for i in 0..self.n {
            let lo = self.item_rows.indptr[i];
            let users = self.item_rows.row(i);
            let dst = out.row_mut(self.m + i);
            if users.is_empty() {
                dst.copy_from_slice(x.row(self.m + i));
                continue;
            }
            for (k, &u) in users.iter().enumerate() {
                let w = self.item_weights[lo + k];
                for (o, s) in dst.iter_mut().zip(x.row(u)) {
                    *o += w * s;
                }
            }
        }
        out
    }
}

/// Runs `k` propagation layers from `e0`, perturbing each layer `0..k`
/// before it is propagated when `noise` is active.
pub fn propagate<R: Rng>(
    adj: &NormalizedAdjacency,
    e0: &Matrix,
    k: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<EmbeddingState> {
    if e0.rows() != adj.num_nodes() {
        return Err(HgclError::Dimension(format!(
            "embedding has {} rows, graph has {} nodes",
            e0.rows(),
            adj.num_nodes()
        )));
    }
    if k == 0 {
        return Err(HgclError::InvalidArgument("propagation needs K >= 1".into()));
    }
    let mut layers = Vec::with_capacity(k + 1);
    let mut perturbations = Vec::new();
    let mut current = e0.clone();
    for _ in 0..k {
        if noise.active() {
            let mut delta = Matrix::zeros(current.rows(), current.cols());
            for v in 0..current.rows() {
                let p = perturbation(current.row(v), noise.epsilon, rng);
                delta.row_mut(v).copy_from_slice(&p);
            }
            current.add_scaled(&delta, 1.0);
            perturbations.push(delta);
        }
        let next = adj.apply(&current);
        layers.push(current);
        current = next;
    }
    layers.push(current);
    let pooled = pool_layers(&layers);
    Ok(EmbeddingState {
        layers,
        perturbations,
        pooled,
    })
}

/// Noise-free forward used for inference and evaluation.
pub fn propagate_clean(adj: &NormalizedAdjacency, e0: &Matrix, k: usize) -> Result<EmbeddingState> {
    // No randomness is consumed when noise is off.
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    propagate(adj, e0, k, &NoiseSpec::off(), &mut unused)
}

/// Arithmetic mean over all layers `0..=K`.
pub fn pool_layers(layers: &[Matrix]) -> Matrix {
    let first = &layers[0];
    let mut pooled = Matrix::zeros(first.rows(), first.cols());
    for layer in layers {
        pooled.add_scaled(layer, 1.0);
    }
    pooled.scale(1.0 / layers.len() as f64);
    pooled
}

/// Maps gradients w.r.t. each stored layer onto `E^(0)`.
///
/// With `E^(k+1) = Ā (E^(k) + Δ_k)` and `Ā` symmetric, the accumulated
/// gradient obeys `T_K = G_K`, `T_k = G_k + Ā T_{k+1}`, and `∂L/∂E^(0) = T_0`.
pub fn backpropagate(adj: &NormalizedAdjacency, layer_grads: &[Matrix]) -> Matrix {
    let mut acc = layer_grads.last().expect("at least one layer").clone();
    for g in layer_grads.iter().rev().skip(1) {
        let mut next = adj.apply(&acc);
        next.add_scaled(g, 1.0);
        acc = next;
    }
    acc
}

/// Spreads a gradient on the pooled matrix evenly over `num_layers + 1` layers.
pub fn pooled_grad_to_layers(pooled_grad: &Matrix, num_layers: usize) -> Vec<Matrix> {
    let mut g = pooled_grad.clone();
    g.scale(1.0 / (num_layers + 1) as f64);
    vec![g; num_layers + 1]
}

/// `ŷ = e_user · e_item` on a pooled `(m+n) x d` table.
pub fn base_score(pooled: &Matrix, m: usize, user: usize, item: usize) -> Result<f64> {
    if user >= m {
        return Err(HgclError::OutOfRange {
            what: "user",
            index: user,
            limit: m,
        });
    }
    let n = pooled.rows() - m;
    if item >= n {
        return Err(HgclError::OutOfRange {
            what: "item",
            index: item,
            limit: n,
        });
    }
    Ok(dot(pooled.row(user), pooled.row(m + item)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, BipartiteGraph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bound_and_determinism() {
        let a = xavier_init(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(a.as_slice().iter().all(|v| v.abs() <= 1.5f64.sqrt()));
        let b = xavier_init(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_mean_near_zero() {
        let rows = 100;
        let d = 100;
        let a = xavier_init(rows, d, &mut ChaCha8Rng::seed_from_u64(5));
        let b = xavier_bound(rows, d);
        let mean: f64 = a.as_slice().iter().sum::<f64>() / 1e4;
        // U(-b, b) has variance b^2/3.
        let sigma = (b * b / 3.0 / 1e4).sqrt();
        assert!(mean.abs() < 3.0 * sigma);
    }

    #[test]
    fn single_edge_swaps() {
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0)]);
        let adj = normalize_adjacency(&g);
        let e0 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = propagate_clean(&adj, &e0, 1).unwrap();
        assert_eq!(s.layers[1].row(0), &[0.0, 1.0]);
        assert_eq!(s.layers[1].row(1), &[1.0, 0.0]);
        assert_eq!(s.pooled.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn noise_has_exact_norm() {
        let g = BipartiteGraph::from_pairs(3, 4, &[(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)]);
        let adj = normalize_adjacency(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e0 = xavier_init(7, 5, &mut rng);
        let s = propagate(&adj, &e0, 3, &NoiseSpec::with_epsilon(0.2), &mut rng).unwrap();
        assert_eq!(s.perturbations.len(), 3);
        for p in &s.perturbations {
            for v in 0..p.rows() {
                assert!((norm(p.row(v)) - 0.2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturbation_follows_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = perturbation(&[1.0, -2.0, 3.0], 0.1, &mut rng);
        assert!(p[0] >= 0.0 && p[1] <= 0.0 && p[2] >= 0.0);
        let z = perturbation(&[0.0, 0.0], 0.3, &mut rng);
        assert!((norm(&z) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_fixed() {
        let g = BipartiteGraph::from_pairs(2, 2, &[(0, 0)]);
        let adj = normalize_adjacency(&g);
        let e0 = xavier_init(4, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let s = propagate_clean(&adj, &e0, 3).unwrap();
        for layer in &s.layers {
            assert_eq!(layer.row(1), e0.row(1));
            assert_eq!(layer.row(3), e0.row(3));
        }
    }

    #[test]
    fn pooling_identical_layers_is_identity() {
        let l = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(pool_layers(&[l.clone(), l.clone(), l.clone()]), l);
    }

    #[test]
    fn base_score_examples() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(base_score(&p, 1, 0, 0).unwrap(), 11.0);
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 5.0]]);
        assert_eq!(base_score(&q, 1, 0, 0).unwrap(), 0.0);
        assert!(base_score(&p, 1, 1, 0).is_err());
        assert!(base_score(&p, 1, 0, 1).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0)]);
        let adj = normalize_adjacency(&g);
        assert!(propagate_clean(&adj, &Matrix::zeros(3, 2), 1).is_err());
    }
}
