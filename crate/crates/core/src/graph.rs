//! Interaction loading, the user-item bipartite graph in CSR form, its
//! symmetric normalization and BPR triple sampling.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{HgclError, Result};

/// Which side of a train/test pair a file is loaded as. Test files reuse the
/// id maps of an already loaded training set.
#[derive(Clone, Copy, Debug)]
pub enum Split<'a> {
    Train,
    Test(&'a InteractionDataset),
}

/// Deduplicated interactions with dense integer ids.
#[derive(Clone, Debug, Default)]
pub struct InteractionDataset {
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub user_index: HashMap<String, usize>,
    pub item_index: HashMap<String, usize>,
    /// `(user, item)` id pairs in file order, duplicates removed.
    pub pairs: Vec<(usize, usize)>,
    /// Records dropped because a key was unknown to the training split.
    pub dropped: usize,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Records as `(user_key, item_key)`.
    pub fn records(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.pairs
            .iter()
            .map(|&(u, i)| (self.user_keys[u].as_str(), self.item_keys[i].as_str()))
    }

    /// Builds a dataset from already-dense ids. Keys are the decimal ids.
    pub fn from_pairs(m: usize, n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let user_keys: Vec<String> = (0..m).map(|u| u.to_string()).collect();
        let item_keys: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let mut seen = HashSet::new();
        let pairs = pairs
            .into_iter()
            .filter(|p| {
                assert!(p.0 < m && p.1 < n, "pair out of range");
                seen.insert(*p)
            })
            .collect();
        InteractionDataset {
            user_index: user_keys.iter().cloned().zip(0..).collect(),
            item_index: item_keys.iter().cloned().zip(0..).collect(),
            user_keys,
            item_keys,
            pairs,
            dropped: 0,
        }
    }
}

pub fn load_interactions(path: &Path, split: Split<'_>) -> Result<InteractionDataset> {
    let file = File::open(path).map_err(|e| HgclError::io(path, e))?;
    parse_interactions(BufReader::new(file), path, split)
}

/// Parses `user item [weight]` lines. Blank lines and `#` comments are skipped.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    path: &Path,
    split: Split<'_>,
) -> Result<InteractionDataset> {
    let mut ds = match split {
        Split::Train => InteractionDataset::default(),
        Split::Test(train) => InteractionDataset {
            user_keys: train.user_keys.clone(),
            item_keys: train.item_keys.clone(),
            user_index: train.user_index.clone(),
            item_index: train.item_index.clone(),
            ..Default::default()
        },
    };
    let mut seen = HashSet::new();
    let mut saw_record = false;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HgclError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let (user, item) = match (tokens.next(), tokens.next()) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(HgclError::Parse {
                    path: PathBuf::from(path),
                    line: lineno + 1,
                    msg: format!("expected `user item [weight]`, got {trimmed:?}"),
                })
            }
        };
        saw_record = true;

        let ids = match split {
            Split::Train => Some((
                intern(&mut ds.user_index, &mut ds.user_keys, user),
                intern(&mut ds.item_index, &mut ds.item_keys, item),
            )),
            Split::Test(_) => match (ds.user_index.get(user), ds.item_index.get(item)) {
                (Some(&u), Some(&i)) => Some((u, i)),
                _ => None,
            },
        };
        match ids {
            Some(pair) => {
                if seen.insert(pair) {
                    ds.pairs.push(pair);
                }
            }
            None => ds.dropped += 1,
        }
    }

    if !saw_record {
        return Err(HgclError::EmptyDataset(PathBuf::from(path)));
    }
    if ds.dropped > 0 {
        info!(
            "{}: dropped {} records with users/items unseen in training",
            path.display(),
            ds.dropped
        );
    }
    Ok(ds)
}

fn intern(index: &mut HashMap<String, usize>, keys: &mut Vec<String>, key: &str) -> usize {
    if let Some(&id) = index.get(key) {
        return id;
    }
    let id = keys.len();
    keys.push(key.to_string());
    index.insert(key.to_string(), id);
    id
}

/// Compressed sparse rows with sorted column ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Csr {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Csr {
    /// Builds a CSR from `(row, col)` pairs; duplicates are collapsed.
    pub fn from_pairs(rows: usize, pairs: &[(usize, usize)]) -> Csr {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _) in pairs {
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0usize; pairs.len()];
        for &(r, c) in pairs {
            indices[fill[r]] = c;
            fill[r] += 1;
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut out = Vec::with_capacity(indices.len());
        indptr.push(0);
        for r in 0..rows {
            let row = &mut indices[counts[r]..counts[r + 1]];
            row.sort_unstable();
            let start = out.len();
            for &c in row.iter() {
                if out.len() == start || *out.last().unwrap() != c {
                    out.push(c);
                }
            }
            indptr.push(out.len());
        }
        Csr {
            indptr,
            indices: out,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[self.indptr[r]..self.indptr[r + 1]]
    }

    #[inline]
    pub fn degree(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    pub fn transpose(&self, cols: usize) -> Csr {
        let mut counts = vec![0usize; cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..cols {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0usize; self.indices.len()];
        // Rows are visited in increasing order, so each output row comes out sorted.
        for r in 0..self.num_rows() {
            for &c in self.row(r) {
                indices[fill[c]] = r;
                fill[c] += 1;
            }
        }
        Csr {
            indptr: counts,
            indices,
        }
    }
}

/// User-item bipartite graph `G = (U ∪ I, E)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BipartiteGraph {
    pub m: usize,
    pub n: usize,
    pub user_to_items: Csr,
    pub item_to_users: Csr,
    /// Owning user of each stored entry of `user_to_items`.
    edge_users: Vec<usize>,
}

impl BipartiteGraph {
    pub fn from_pairs(m: usize, n: usize, pairs: &[(usize, usize)]) -> BipartiteGraph {
        let user_to_items = Csr::from_pairs(m, pairs);
        let item_to_users = user_to_items.transpose(n);
        let mut edge_users = Vec::with_capacity(user_to_items.nnz());
        for u in 0..m {
            edge_users.extend(std::iter::repeat_n(u, user_to_items.degree(u)));
        }
        BipartiteGraph {
            m,
            n,
            user_to_items,
            item_to_users,
            edge_users,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.user_to_items.nnz()
    }

    /// Edge `e` in user-major CSR order as `(user, item)`.
    #[inline]
    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.edge_users[e], self.user_to_items.indices[e])
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.edge_count()).map(move |e| self.edge(e))
    }

    #[inline]
    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_to_items.contains(user, item)
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        self.user_to_items.row(user)
    }

    pub fn users_of(&self, item: usize) -> &[usize] {
        self.item_to_users.row(item)
    }

    /// Moves a seeded random `fraction` of edges into a held-out list and
    /// returns the graph over the remaining edges (same `m`, `n`).
    pub fn split_holdout<R: Rng>(
        &self,
        fraction: f64,
        rng: &mut R,
    ) -> (BipartiteGraph, Vec<(usize, usize)>) {
        let mut order: Vec<usize> = (0..self.edge_count()).collect();
        order.shuffle(rng);
        let held = ((self.edge_count() as f64) * fraction).round() as usize;
        let mut held_mask = vec![false; self.edge_count()];
        for &e in &order[..held] {
            held_mask[e] = true;
        }
        let mut keep = Vec::with_capacity(self.edge_count() - held);
        let mut out = Vec::with_capacity(held);
        for (e, &h) in held_mask.iter().enumerate() {
            if h {
                out.push(self.edge(e));
            } else {
                keep.push(self.edge(e));
            }
        }
        (BipartiteGraph::from_pairs(self.m, self.n, &keep), out)
    }
}

pub fn build_graph(ds: &InteractionDataset) -> Result<BipartiteGraph> {
    if ds.is_empty() {
        return Err(HgclError::InvalidArgument(
            "cannot build a graph from an empty dataset".into(),
        ));
    }
    Ok(BipartiteGraph::from_pairs(
        ds.num_users(),
        ds.num_items(),
        &ds.pairs,
    ))
}

/// `D^{-1/2} A D^{-1/2}` over the node order users-then-items, stored as the
/// two off-diagonal blocks. Weights are aligned with the CSR entries they
/// belong to.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub m: usize,
    pub n: usize,
    pub user_rows: Csr,
    pub user_weights: Vec<f64>,
    pub item_rows: Csr,
    pub item_weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.m + self.n
    }

    /// Weight of the edge between `user` and `item`, if present.
    pub fn weight(&self, user: usize, item: usize) -> Option<f64> {
        let row = self.user_rows.row(user);
        row.binary_search(&item)
            .ok()
            .map(|k| self.user_weights[self.user_rows.indptr[user] + k])
    }

    pub fn weight_item_side(&self, item: usize, user: usize) -> Option<f64> {
        let row = self.item_rows.row(item);
        row.binary_search(&user)
            .ok()
            .map(|k| self.item_weights[self.item_rows.indptr[item] + k])
    }

    /// Degree of node `v` in the combined ordering.
    pub fn degree(&self, v: usize) -> usize {
        if v < self.m {
            self.user_rows.degree(v)
        } else {
            self.item_rows.degree(v - self.m)
        }
    }
}

pub fn normalize_adjacency(g: &BipartiteGraph) -> NormalizedAdjacency {
    let inv_sqrt = |deg: usize| if deg == 0 { 0.0 } else { 1.0 / (deg as f64).sqrt() };
    let user_scale: Vec<f64> = (0..g.m).map(|u| inv_sqrt(g.user_to_items.degree(u))).collect();
    let item_scale: Vec<f64> = (0..g.n).map(|i| inv_sqrt(g.item_to_users.degree(i))).collect();

    let mut user_weights = Vec::with_capacity(g.edge_count());
    for u in 0..g.m {
        for &i in g.items_of(u) {
            user_weights.push(user_scale[u] * item_scale[i]);
        }
    }
    let mut item_weights = Vec::with_capacity(g.edge_count());
    for i in 0..g.n {
        for &u in g.users_of(i) {
            item_weights.push(user_scale[u] * item_scale[i]);
        }
    }
    NormalizedAdjacency {
        m: g.m,
        n: g.n,
        user_rows: g.user_to_items.clone(),
        user_weights,
        item_rows: g.item_to_users.clone(),
        item_weights,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Rejection attempts before a negative draw gives up.
pub const MAX_NEGATIVE_TRIES: usize = 1000;

/// Draws an item uniformly from those `user` has not interacted with.
pub fn sample_negative<R: Rng>(g: &BipartiteGraph, user: usize, rng: &mut R) -> Result<usize> {
    let deg = g.user_to_items.degree(user);
    if deg >= g.n {
        return Err(HgclError::Sampling(format!(
            "user {user} is connected to all {} candidates",
            g.n
        )));
    }
    for _ in 0..MAX_NEGATIVE_TRIES {
        let j = rng.random_range(0..g.n);
        if !g.has_edge(user, j) {
            return Ok(j);
        }
    }
    Err(HgclError::Sampling(format!(
        "no negative for user {user} after {MAX_NEGATIVE_TRIES} draws"
    )))
}

/// Triples for the given edges (in order), one negative per edge.
pub fn triples_for_edges<R: Rng>(
    g: &BipartiteGraph,
    edges: &[usize],
    rng: &mut R,
) -> Result<Vec<Triple>> {
    edges
        .iter()
        .map(|&e| {
            let (user, pos) = g.edge(e);
            let neg = sample_negative(g, user, rng)?;
            Ok(Triple { user, pos, neg })
        })
        .collect()
}

/// `batch_size` triples with `(user, pos)` uniform over training edges.
pub fn sample_bpr_triples<R: Rng>(
    g: &BipartiteGraph,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if batch_size == 0 {
        return Err(HgclError::InvalidArgument("batch_size must be >= 1".into()));
    }
    if g.edge_count() == 0 {
        return Err(HgclError::Sampling("graph has no edges".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (user, pos) = g.edge(rng.random_range(0..g.edge_count()));
        let neg = sample_negative(g, user, rng)?;
        out.push(Triple { user, pos, neg });
    }
    Ok(out)
}
