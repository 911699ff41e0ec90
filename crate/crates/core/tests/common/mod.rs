#![allow(dead_code)]

use std::path::Path;

use hgcl::config::{parse_config_str, Config};
use hgcl::graph::{BipartiteGraph, Triple};
use hgcl::synthetic::{generate, SyntheticSpec};
use hgcl::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random bipartite graph in which every user and every item has at least
/// one edge.
pub fn covered_graph<R: Rng>(m: usize, n: usize, density: f64, rng: &mut R) -> BipartiteGraph {
    let mut pairs = Vec::new();
    for u in 0..m {
        for i in 0..n {
            if rng.random::<f64>() < density {
                pairs.push((u, i));
            }
        }
    }
    for u in 0..m {
        pairs.push((u, rng.random_range(0..n)));
    }
    for i in 0..n {
        pairs.push((rng.random_range(0..m), i));
    }
    pairs.sort_unstable();
    pairs.dedup();
    BipartiteGraph::from_pairs(m, n, &pairs)
}

/// Random graph that may leave nodes isolated; at least one edge.
pub fn sparse_graph<R: Rng>(m: usize, n: usize, density: f64, rng: &mut R) -> BipartiteGraph {
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|u| (0..n).map(move |i| (u, i)))
        .filter(|_| rng.random::<f64>() < density)
        .collect();
    if pairs.is_empty() {
        pairs.push((rng.random_range(0..m), rng.random_range(0..n)));
    }
    BipartiteGraph::from_pairs(m, n, &pairs)
}

pub fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Dense `D^{-1/2} A D^{-1/2}` over users then items.
pub fn dense_norm_adj(g: &BipartiteGraph) -> Vec<Vec<f64>> {
    let size = g.m + g.n;
    let mut a = vec![vec![0.0; size]; size];
    for (u, i) in g.edges() {
        a[u][g.m + i] = 1.0;
        a[g.m + i][u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for r in 0..size {
        for c in 0..size {
            if a[r][c] != 0.0 {
                a[r][c] /= (deg[r] * deg[c]).sqrt();
            }
        }
    }
    a
}

pub fn dense_mul(a: &[Vec<f64>], x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..a.len() {
        for c in 0..a.len() {
            if a[r][c] != 0.0 {
                for t in 0..x.cols() {
                    out[(r, t)] += a[r][c] * x[(c, t)];
                }
            }
        }
    }
    out
}

/// Mean of `Â^k E` over `k = 0..=layers`.
pub fn dense_pooled(g: &BipartiteGraph, e0: &Matrix, layers: usize) -> Matrix {
    let a = dense_norm_adj(g);
    let mut cur = e0.clone();
    let mut sum = e0.clone();
    for _ in 0..layers {
        cur = dense_mul(&a, &cur);
        sum.add_scaled(&cur, 1.0);
    }
    sum.scale(1.0 / (layers + 1) as f64);
    sum
}

/// Triples over arbitrary (user, item, item) draws; positives need not be
/// edges.
pub fn random_triples<R: Rng>(m: usize, n: usize, count: usize, rng: &mut R) -> Vec<Triple> {
    (0..count)
        .map(|_| {
            let pos = rng.random_range(0..n);
            let mut neg = rng.random_range(0..n);
            if n > 1 {
                while neg == pos {
                    neg = rng.random_range(0..n);
                }
            }
            Triple {
                user: rng.random_range(0..m),
                pos,
                neg,
            }
        })
        .collect()
}

/// Central differences of `f` at every entry of `x`.
pub fn numeric_grad(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(coords: &Matrix, labels: &[usize]) -> f64 {
    let n = coords.rows();
    let dist = |i: usize, j: usize| -> f64 {
        coords
            .row(i)
            .iter()
            .zip(coords.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// The toy preset with its paths pointed at freshly generated data in `dir`.
pub fn toy_config(dir: &Path, seed: u64) -> Config {
    let data = generate(&SyntheticSpec::toy(seed)).expect("toy data");
    let data_dir = dir.join("data");
    data.write(&data_dir).expect("write toy data");
    let text: String = include_str!("../../../../configs/toy.conf")
        .lines()
        .filter(|l| !l.starts_with("train") && !l.starts_with("test") && !l.starts_with("out"))
        .collect::<Vec<_>>()
        .join("\n");
    let mut cfg = parse_config_str(&text, dir).expect("toy preset parses");
    cfg.train_path = Some(data_dir.join("train.txt"));
    cfg.test_path = Some(data_dir.join("test.txt"));
    cfg.out_dir = dir.join("run");
    cfg.train.seed = seed;
    cfg
}

/// Toy preset shrunk so a full run takes well under a second.
pub fn quick_config(dir: &Path, seed: u64) -> Config {
    let mut cfg = toy_config(dir, seed);
    cfg.train.epochs = 2;
    cfg.finetune_epochs = 2;
    cfg.train.d = 8;
    cfg.tsne.iters = 100;
    cfg.tsne.exaggeration_iters = 50;
    cfg
}
