//! BPR ranking loss, cross-layer InfoNCE and L2 regularization, each with an
//! analytic gradient.

use std::collections::BTreeMap;

use crate::embedding::{backpropagate, pooled_grad_to_layers, EmbeddingState};
use crate::error::{HgclError, Result};
use crate::graph::{NormalizedAdjacency, Triple};
use crate::matrix::{dot, norm, Matrix};

/// Gradient rows keyed by node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowGrads {
    rows: BTreeMap<usize, Vec<f64>>,
    dim: usize,
}

impl RowGrads {
    pub fn new(dim: usize) -> Self {
        RowGrads {
            rows: BTreeMap::new(),
            dim,
        }
    }

    /// `grad[row] += alpha * v`
    pub fn add(&mut self, row: usize, v: &[f64], alpha: f64) {
        let dim = self.dim;
        let dst = self.rows.entry(row).or_insert_with(|| vec![0.0; dim]);
        for (d, s) in dst.iter_mut().zip(v) {
            *d += alpha * s;
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    /// Adds `alpha * self` into a dense matrix.
    pub fn scatter_into(&self, dense: &mut Matrix, alpha: f64) {
        for (&r, v) in &self.rows {
            for (d, s) in dense.row_mut(r).iter_mut().zip(v) {
                *d += alpha * s;
            }
        }
    }

    /// Nonzero rows of a dense gradient.
    pub fn from_dense(dense: &Matrix) -> Self {
        let mut out = RowGrads::new(dense.cols());
        for r in 0..dense.rows() {
            let row = dense.row(r);
            if row.iter().any(|&v| v != 0.0) {
                out.rows.insert(r, row.to_vec());
            }
        }
        out
    }
}

/// A loss value with its gradient rows.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: RowGrads,
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `Σ -ln σ(pos - neg)`.
pub fn bpr_loss(score_pos: &[f64], score_neg: &[f64]) -> f64 {
    assert_eq!(score_pos.len(), score_neg.len(), "score lists differ in length");
    score_pos
        .iter()
        .zip(score_neg)
        .map(|(p, n)| softplus(-(p - n)))
        .sum()
}

/// BPR on a pooled `(m + n_side) x d` table; gradient rows are keyed by
/// node id (`user`, `m + item`).
pub fn bpr_pooled(triples: &[Triple], pooled: &Matrix, m: usize) -> LossValue {
    let mut grads = RowGrads::new(pooled.cols());
    let mut value = 0.0;
    for t in triples {
        let eu = pooled.row(t.user);
        let ep = pooled.row(m + t.pos);
        let en = pooled.row(m + t.neg);
        let diff = dot(eu, ep) - dot(eu, en);
        value += softplus(-diff);
        // d/d diff of softplus(-diff) = -σ(-diff)
        let coef = -sigmoid(-diff);
        let delta: Vec<f64> = ep.iter().zip(en).map(|(p, n)| p - n).collect();
        grads.add(t.user, &delta, coef);
        grads.add(m + t.pos, eu, coef);
        grads.add(m + t.neg, eu, -coef);
    }
    LossValue { value, grads }
}

/// BPR with its gradient carried back through propagation onto `E^(0)`.
pub fn bpr_grad(
    triples: &[Triple],
    state: Option<&EmbeddingState>,
    adj: &NormalizedAdjacency,
) -> Result<LossValue> {
    let state = state.ok_or_else(|| {
        HgclError::InvalidArgument("bpr_grad needs a retained forward state".into())
    })?;
    let pooled_loss = bpr_pooled(triples, &state.pooled, adj.m);
    let mut dense = Matrix::zeros(state.pooled.rows(), state.pooled.cols());
    pooled_loss.grads.scatter_into(&mut dense, 1.0);
    let layer_grads = pooled_grad_to_layers(&dense, state.num_layers());
    let e0_grad = backpropagate(adj, &layer_grads);
    Ok(LossValue {
        value: pooled_loss.value,
        grads: RowGrads::from_dense(&e0_grad),
    })
}

/// Cross-layer InfoNCE value with gradients w.r.t. both views.
#[derive(Clone, Debug)]
pub struct ContrastValue {
    pub value: f64,
    pub grad_k: RowGrads,
    pub grad_kstar: RowGrads,
}

/// `Σ_i -ln( exp(s_ii/τ) / Σ_j exp(s_ij/τ) )` with `s_ij` the cosine between
/// row `batch[i]` of `e_k` and row `batch[j]` of `e_kstar`.
pub fn cross_layer_infonce(
    e_k: &Matrix,
    e_kstar: &Matrix,
    batch: &[usize],
    tau: f64,
) -> Result<ContrastValue> {
    if (e_k.rows(), e_k.cols()) != (e_kstar.rows(), e_kstar.cols()) {
        return Err(HgclError::Dimension("contrastive views differ in shape".into()));
    }
    if !(tau > 0.0) {
        return Err(HgclError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if batch.is_empty() {
        return Err(HgclError::InvalidArgument("empty contrastive batch".into()));
    }
    let d = e_k.cols();
    let unit = |m: &Matrix, v: usize| -> Result<(Vec<f64>, f64)> {
        let row = m.row(v);
        let len = norm(row);
        if !(len > 0.0) {
            return Err(HgclError::Degenerate(format!(
                "zero-norm row {v} in contrastive batch"
            )));
        }
        Ok((row.iter().map(|x| x / len).collect(), len))
    };
    let a: Vec<(Vec<f64>, f64)> = batch.iter().map(|&v| unit(e_k, v)).collect::<Result<_>>()?;
    let c: Vec<(Vec<f64>, f64)> = batch
        .iter()
        .map(|&v| unit(e_kstar, v))
        .collect::<Result<_>>()?;

    let b = batch.len();
    let inv_tau = 1.0 / tau;
    let mut value = 0.0;
    let mut da = vec![vec![0.0; d]; b];
    let mut dc = vec![vec![0.0; d]; b];
    let mut logits = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            logits[j] = dot(&a[i].0, &c[j].0) * inv_tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - logits[i];
        for j in 0..b {
            let mut g = (logits[j] - lse).exp();
            if i == j {
                g -= 1.0;
            }
            let g = g * inv_tau;
            for t in 0..d {
                da[i][t] += g * c[j].0[t];
                dc[j][t] += g * a[i].0[t];
            }
        }
    }

    let mut grad_k = RowGrads::new(d);
    let mut grad_kstar = RowGrads::new(d);
    for i in 0..b {
        grad_k.add(batch[i], &unnormalize_grad(&a[i].0, a[i].1, &da[i]), 1.0);
        grad_kstar.add(batch[i], &unnormalize_grad(&c[i].0, c[i].1, &dc[i]), 1.0);
    }
    Ok(ContrastValue {
        value,
        grad_k,
        grad_kstar,
    })
}

/// Chain rule through `x ↦ x/|x|`: `(g - x̂ (x̂·g)) / |x|`.
fn unnormalize_grad(unit: &[f64], len: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(unit, g);
    unit.iter()
        .zip(g)
        .map(|(u, gi)| (gi - u * proj) / len)
        .collect()
}

/// `coeff/2 · Σ |row|²` over the distinct `rows` of `params`.
pub fn l2_reg(params: &Matrix, rows: &[usize], coeff: f64) -> LossValue {
    let mut grads = RowGrads::new(params.cols());
    let mut value = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    for &r in rows {
        if !seen.insert(r) {
            continue;
        }
        let row = params.row(r);
        value += 0.5 * coeff * dot(row, row);
        if coeff != 0.0 {
            grads.add(r, row, coeff);
        }
    }
    LossValue { value, grads }
}
