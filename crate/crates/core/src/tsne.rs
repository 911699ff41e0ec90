//! Exact t-SNE: per-point Gaussian bandwidth calibration to a target
//! perplexity, symmetrized joint probabilities, and gradient descent on
//! `KL(P || Q)` with a Student-t low-dimensional kernel.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HgclError, Result};
use crate::matrix::Matrix;

/// Max bisection steps of the bandwidth search.
pub const MAX_CALIBRATION_STEPS: usize = 64;
/// Required accuracy of the achieved perplexity.
pub const PERPLEXITY_TOL: f64 = 1e-3;

/// How input-space affinities are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HighDimKernel {
    /// Conditional Gaussians calibrated to the perplexity, then symmetrized.
    Gaussian,
    /// Heavy-tailed `1 / (1 + dist²)` on squared Euclidean distances,
    /// normalized over all pairs. Perplexity is ignored.
    StudentT,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub kernel: HighDimKernel,
    /// Fit on at most this many points and place the rest by kernel
    /// regression onto the fitted ones. `0` fits all points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            kernel: HighDimKernel::Gaussian,
            max_points: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Projection2D {
    pub coords: Matrix,
    /// `KL(P||Q)` at the initial layout.
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Pairwise squared Euclidean distances.
pub fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

/// Conditional distribution of one point over its neighbours.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub probs: Vec<f64>,
    /// Gaussian bandwidth `σ`, with `β = 1 / (2σ²)`; infinite when `β = 0`.
    pub sigma: f64,
    pub perplexity: f64,
}

/// `(perplexity, probs)` of `p_j ∝ exp(-β (d_j - d_min))`.
fn gaussian_row(dists: &[f64], d_min: f64, beta: f64) -> (f64, Vec<f64>) {
    let w: Vec<f64> = dists.iter().map(|d| (-beta * (d - d_min)).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean_shift: f64 = w.iter().zip(dists).map(|(wi, d)| wi * (d - d_min)).sum::<f64>() / z;
    let entropy = z.ln() + beta * mean_shift;
    (entropy.exp(), w.into_iter().map(|wi| wi / z).collect())
}

/// Binary search on the bandwidth so that `2^{H(P_i)}` equals `perplexity`.
/// `dists` are squared distances to the other points (self excluded).
pub fn calibrate_sigmas(dists: &[f64], perplexity: f64) -> Result<Calibration> {
    calibrate_row(0, dists, perplexity)
}

fn calibrate_row(point: usize, dists: &[f64], perplexity: f64) -> Result<Calibration> {
    let finite = dists.iter().filter(|d| d.is_finite()).count();
    if finite < 2 || finite != dists.len() {
        return Err(HgclError::InvalidArgument(format!(
            "point {point}: need at least 2 finite distances"
        )));
    }
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = dists.iter().filter(|&&d| d == d_min).count() as f64;
    let hi = dists.len() as f64;
    let unreachable = || HgclError::Perplexity {
        point,
        target: perplexity,
        lo: ties,
        hi,
    };
    if d_max == 0.0 || perplexity < ties - PERPLEXITY_TOL || perplexity > hi + PERPLEXITY_TOL {
        return Err(unreachable());
    }
    if d_max == d_min {
        let (perp, probs) = gaussian_row(dists, d_min, 0.0);
        return Ok(Calibration {
            probs,
            sigma: f64::INFINITY,
            perplexity: perp,
        });
    }

    let spread = dists.iter().map(|d| d - d_min).sum::<f64>() / dists.len() as f64;
    let mut beta = 1.0 / spread;
    let (mut lo, mut hi_beta) = (0.0f64, f64::INFINITY);
    let mut best = gaussian_row(dists, d_min, beta);
    for _ in 0..MAX_CALIBRATION_STEPS {
        let (perp, _) = best;
        if (perp - perplexity).abs() < 1e-6 {
            break;
        }
        if perp > perplexity {
            lo = beta;
            beta = if hi_beta.is_finite() { 0.5 * (lo + hi_beta) } else { beta * 2.0 };
        } else {
            hi_beta = beta;
            beta = 0.5 * (lo + hi_beta);
        }
        best = gaussian_row(dists, d_min, beta);
    }
    let (perp, probs) = best;
    if (perp - perplexity).abs() >= PERPLEXITY_TOL {
        return Err(unreachable());
    }
    Ok(Calibration {
        probs,
        sigma: if beta > 0.0 { (0.5 / beta).sqrt() } else { f64::INFINITY },
        perplexity: perp,
    })
}

/// `P_{j|i}` for every row, diagonal zero.
pub fn conditional_probabilities(dists: &Matrix, perplexity: f64) -> Result<(Matrix, Vec<f64>)> {
    let n = dists.rows();
    let mut p = Matrix::zeros(n, n);
    let mut achieved = Vec::with_capacity(n);
    let mut others = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i).map(|j| dists[(i, j)]));
        let cal = calibrate_row(i, &others, perplexity)?;
        let mut k = 0;
        for j in 0..n {
            if j != i {
                p[(i, j)] = cal.probs[k];
                k += 1;
            }
        }
        achieved.push(cal.perplexity);
    }
    Ok((p, achieved))
}

/// Joint input-space affinities (symmetric, summing to one).
pub fn joint_probabilities(x: &Matrix, cfg: &TsneConfig) -> Result<Matrix> {
    let n = x.rows();
    let dists = squared_distances(x);
    match cfg.kernel {
        HighDimKernel::Gaussian => {
            let (cond, _) = conditional_probabilities(&dists, cfg.perplexity)?;
            let mut p = Matrix::zeros(n, n);
            let denom = 2.0 * n as f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        p[(i, j)] = (cond[(i, j)] + cond[(j, i)]) / denom;
                    }
                }
            }
            Ok(p)
        }
        HighDimKernel::StudentT => {
            let mut p = Matrix::zeros(n, n);
            let mut z = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let w = 1.0 / (1.0 + dists[(i, j)] * dists[(i, j)]);
                        p[(i, j)] = w;
                        z += w;
                    }
                }
            }
            p.scale(1.0 / z);
            Ok(p)
        }
    }
}

/// Student-t joint distribution `q_ij ∝ (1 + |y_i - y_j|²)^{-1}`.
pub fn student_t_q(y: &Matrix) -> Matrix {
    let n = y.rows();
    let mut q = Matrix::zeros(n, n);
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let w = 1.0 / (1.0 + sq_dist(y.row(i), y.row(j)));
                q[(i, j)] = w;
                z += w;
            }
        }
    }
    q.scale(1.0 / z);
    q
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(HgclError::Dimension("KL supports differ".into()));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(HgclError::InvalidArgument(
                    "q vanishes where p is positive".into(),
                ));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `KL(P || Q(y))`.
pub fn tsne_objective(p: &Matrix, y: &Matrix) -> Result<f64> {
    kl_divergence(p.as_slice(), student_t_q(y).as_slice())
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|²)`.
pub fn tsne_gradient(p: &Matrix, y: &Matrix) -> Matrix {
    let n = y.rows();
    let dim = y.cols();
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                z += 1.0 / (1.0 + sq_dist(y.row(i), y.row(j)));
            }
        }
    }
    let mut grad = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let num = 1.0 / (1.0 + sq_dist(y.row(i), y.row(j)));
            let coef = 4.0 * (p[(i, j)] - num / z) * num;
            for k in 0..dim {
                grad[(i, k)] += coef * (y[(i, k)] - y[(j, k)]);
            }
        }
    }
    grad
}

/// Projects the rows of `x` to two dimensions.
pub fn tsne_embed(x: &Matrix, cfg: &TsneConfig) -> Result<Projection2D> {
    let n = x.rows();
    if n < 4 {
        return Err(HgclError::InvalidArgument(format!("t-SNE needs n >= 4, got {n}")));
    }
    if cfg.iters == 0 {
        return Err(HgclError::InvalidArgument("t-SNE needs iters >= 1".into()));
    }
    if (1..n).all(|i| x.row(i) == x.row(0)) {
        return Err(HgclError::Degenerate("all input rows are identical".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.max_points > 0 && n > cfg.max_points.max(4) {
        return embed_subsampled(x, cfg, &mut rng);
    }
    if cfg.kernel == HighDimKernel::Gaussian && !(cfg.perplexity > 1.0 && cfg.perplexity < n as f64) {
        return Err(HgclError::InvalidArgument(format!(
            "perplexity must lie in (1, {n}), got {}",
            cfg.perplexity
        )));
    }

    let p = joint_probabilities(x, cfg)?;
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let data = (0..n * 2).map(|_| init.sample(&mut rng)).collect();
    let mut y = Matrix::from_vec(n, 2, data);
    center(&mut y);
    let initial_kl = tsne_objective(&p, &y)?;

    let mut exaggerated = p.clone();
    exaggerated.scale(cfg.early_exaggeration);
    let mut update = Matrix::zeros(n, 2);
    let mut gains = Matrix::from_vec(n, 2, vec![1.0; n * 2]);
    for it in 0..cfg.iters {
        let target = if it < cfg.exaggeration_iters { &exaggerated } else { &p };
        let grad = tsne_gradient(target, &y);
        let momentum = if it < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        for ((g, u), gain) in grad
            .as_slice()
            .iter()
            .zip(update.as_mut_slice().iter_mut())
            .zip(gains.as_mut_slice().iter_mut())
        {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
            *u = momentum * *u - cfg.learning_rate * *gain * g;
        }
        y.add_scaled(&update, 1.0);
        center(&mut y);
    }
    if !y.is_finite() {
        return Err(HgclError::Degenerate("t-SNE diverged".into()));
    }
    let final_kl = tsne_objective(&p, &y)?;
    Ok(Projection2D {
        coords: y,
        initial_kl,
        final_kl,
    })
}

fn center(y: &mut Matrix) {
    let n = y.rows() as f64;
    for k in 0..y.cols() {
        let mean = (0..y.rows()).map(|i| y[(i, k)]).sum::<f64>() / n;
        for i in 0..y.rows() {
            y[(i, k)] -= mean;
        }
    }
}

/// Fits a seeded subsample exactly and places every other point at the
/// calibrated-Gaussian weighted mean of the fitted coordinates.
fn embed_subsampled(x: &Matrix, cfg: &TsneConfig, rng: &mut ChaCha8Rng) -> Result<Projection2D> {
    let n = x.rows();
    let mut picked = sample(rng, n, cfg.max_points).into_vec();
    picked.sort_unstable();
    let sub_rows: Vec<Vec<f64>> = picked.iter().map(|&i| x.row(i).to_vec()).collect();
    let sub = Matrix::from_rows(&sub_rows);
    let sub_cfg = TsneConfig {
        max_points: 0,
        ..cfg.clone()
    };
    let fitted = tsne_embed(&sub, &sub_cfg)?;

    let mut coords = Matrix::zeros(n, 2);
    let mut slot = vec![usize::MAX; n];
    for (k, &i) in picked.iter().enumerate() {
        slot[i] = k;
    }
    let perp = cfg.perplexity.min(picked.len() as f64 - 1.0);
    let mut dists = vec![0.0; picked.len()];
    for i in 0..n {
        if slot[i] != usize::MAX {
            coords.row_mut(i).copy_from_slice(fitted.coords.row(slot[i]));
            continue;
        }
        for (k, &j) in picked.iter().enumerate() {
            dists[k] = sq_dist(x.row(i), x.row(j));
        }
        let weights = match calibrate_row(i, &dists, perp) {
            Ok(c) => c.probs,
            // coincident with the sample or otherwise unreachable: nearest point
            Err(_) => {
                let best = (0..dists.len())
                    .min_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("non-empty sample");
                let mut w = vec![0.0; dists.len()];
                w[best] = 1.0;
                w
            }
        };
        for (k, w) in weights.iter().enumerate() {
            coords[(i, 0)] += w * fitted.coords[(k, 0)];
            coords[(i, 1)] += w * fitted.coords[(k, 1)];
        }
    }
    center(&mut coords);
    Ok(Projection2D {
        coords,
        initial_kl: fitted.initial_kl,
        final_kl: fitted.final_kl,
    })
}
