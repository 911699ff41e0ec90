//! Deterministic polar partition of 2-D item coordinates into
//! `rho` radial x `theta` angular sectors.

use std::f64::consts::PI;

use crate::error::{HgclError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RadialMode {
    /// Annuli hold (nearly) equal item counts.
    #[default]
    Quantile,
    /// Annuli have equal width up to the largest radius.
    EqualRadius,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub rho: usize,
    pub theta: usize,
    pub center: [f64; 2],
    /// `rho - 1` strictly increasing radii; radius `r` lies in annulus
    /// `#{b : b < r}`.
    pub radial_boundaries: Vec<f64>,
    /// Cluster id per item, `radial_bin * theta + angular_bin`.
    pub assign: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.rho * self.theta
    }

    pub fn num_items(&self) -> usize {
        self.assign.len()
    }

    /// Builds an assignment from explicit cluster ids (no geometry).
    pub fn from_assign(rho: usize, theta: usize, assign: Vec<usize>) -> Result<Self> {
        let c = rho * theta;
        let mut sizes = vec![0; c];
        for &k in &assign {
            if k >= c {
                return Err(HgclError::OutOfRange {
                    what: "cluster id",
                    index: k,
                    limit: c,
                });
            }
            sizes[k] += 1;
        }
        Ok(ClusterAssignment {
            rho,
            theta,
            center: [0.0, 0.0],
            radial_boundaries: Vec::new(),
            assign,
            sizes,
        })
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assign
            .iter()
            .enumerate()
            .filter(move |(_, &k)| k == cluster)
            .map(|(j, _)| j)
    }
}

/// Angular sector of `angle ∈ (-π, π]`; a point exactly on a sector edge goes
/// to the lower sector.
pub fn angular_bin(angle: f64, theta: usize) -> usize {
    let x = theta as f64 * (angle + PI) / (2.0 * PI);
    let bin = x.ceil() as isize - 1;
    bin.clamp(0, theta as isize - 1) as usize
}

fn radial_bin(r: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b < r)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

pub fn polar_partition(coords: &Matrix, rho: usize, theta: usize) -> Result<ClusterAssignment> {
    polar_partition_with(coords, rho, theta, RadialMode::Quantile)
}

pub fn polar_partition_with(
    coords: &Matrix,
    rho: usize,
    theta: usize,
    mode: RadialMode,
) -> Result<ClusterAssignment> {
    let n = coords.rows();
    if rho == 0 || theta == 0 {
        return Err(HgclError::InvalidArgument("rho and theta must be >= 1".into()));
    }
    if n == 0 {
        return Err(HgclError::InvalidArgument("no items to cluster".into()));
    }
    if coords.cols() != 2 {
        return Err(HgclError::Dimension(format!(
            "expected 2-D coordinates, got {} columns",
            coords.cols()
        )));
    }
    let cx = (0..n).map(|i| coords[(i, 0)]).sum::<f64>() / n as f64;
    let cy = (0..n).map(|i| coords[(i, 1)]).sum::<f64>() / n as f64;
    let polar: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let dx = coords[(i, 0)] - cx;
            let dy = coords[(i, 1)] - cy;
            (dx.hypot(dy), dy.atan2(dx))
        })
        .collect();

    let mut radii: Vec<f64> = polar.iter().map(|p| p.0).collect();
    radii.sort_by(f64::total_cmp);
    let mut boundaries = Vec::with_capacity(rho - 1);
    for b in 1..rho {
        let candidate = match mode {
            RadialMode::Quantile => {
                // split between sorted positions idx-1 and idx
                if n == 1 {
                    radii[0]
                } else {
                    let idx = (((b * n) as f64 / rho as f64).round() as usize).clamp(1, n - 1);
                    0.5 * (radii[idx - 1] + radii[idx])
                }
            }
            RadialMode::EqualRadius => radii[n - 1] * b as f64 / rho as f64,
        };
        let value = match boundaries.last() {
            Some(&prev) if candidate <= prev => next_up(prev),
            _ => candidate,
        };
        boundaries.push(value);
    }

    let mut sizes = vec![0usize; rho * theta];
    let assign: Vec<usize> = polar
        .iter()
        .map(|&(r, a)| {
            let k = radial_bin(r, &boundaries) * theta + angular_bin(a, theta);
            sizes[k] += 1;
            k
        })
        .collect();
    Ok(ClusterAssignment {
        rho,
        theta,
        center: [cx, cy],
        radial_boundaries: boundaries,
        assign,
        sizes,
    })
}

/// Sparse one-hot `w_jk`: one entry per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub num_clusters: usize,
    /// `(item, cluster)` with weight 1, in item order.
    pub entries: Vec<(usize, usize)>,
}

impl Membership {
    pub fn row_sums(&self, num_items: usize) -> Vec<usize> {
        let mut s = vec![0; num_items];
        for &(j, _) in &self.entries {
            s[j] += 1;
        }
        s
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &(_, k) in &self.entries {
            s[k] += 1;
        }
        s
    }

    /// `w_jk` as 0/1.
    pub fn weight(&self, item: usize, cluster: usize) -> f64 {
        match self.entries.get(item) {
            Some(&(j, k)) if j == item && k == cluster => 1.0,
            _ => 0.0,
        }
    }
}

pub fn membership_matrix(a: &ClusterAssignment) -> Membership {
    Membership {
        num_clusters: a.num_clusters(),
        entries: a.assign.iter().copied().enumerate().collect(),
    }
}
