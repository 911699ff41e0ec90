//! Seeded interaction generator with planted two-level item clusters: items
//! fall into `groups` top-level groups of `subgroups` leaves each, and every
//! user prefers one leaf.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HgclError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    pub subgroups: usize,
    pub interactions_per_user: usize,
    /// Probability a draw comes from the user's own leaf.
    pub p_leaf: f64,
    /// Probability a draw comes from a sibling leaf of the same group.
    pub p_group: f64,
    /// Per-user share of interactions moved to the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 200 users, 300 items, 4 groups of 2 leaves.
    pub fn toy(seed: u64) -> Self {
        SyntheticSpec {
            users: 200,
            items: 300,
            groups: 4,
            subgroups: 2,
            interactions_per_user: 20,
            p_leaf: 0.6,
            p_group: 0.3,
            test_fraction: 0.2,
            seed,
        }
    }

    /// 30 users, 30 items, two planted groups.
    pub fn small(seed: u64) -> Self {
        SyntheticSpec {
            users: 30,
            items: 30,
            groups: 2,
            subgroups: 1,
            interactions_per_user: 6,
            p_leaf: 0.85,
            p_group: 0.0,
            test_fraction: 0.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub users: usize,
    pub items: usize,
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Leaf id per item, `group * subgroups + sub`.
    pub item_leaf: Vec<usize>,
    pub user_leaf: Vec<usize>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let leaves = spec.groups * spec.subgroups;
    if leaves == 0 || spec.items < leaves || spec.users == 0 {
        return Err(HgclError::InvalidArgument(
            "need users >= 1 and items >= groups * subgroups >= 1".into(),
        ));
    }
    if spec.interactions_per_user == 0 || spec.interactions_per_user >= spec.items {
        return Err(HgclError::InvalidArgument(
            "interactions_per_user must lie in [1, items)".into(),
        ));
    }
    if !(spec.p_leaf >= 0.0 && spec.p_group >= 0.0 && spec.p_leaf + spec.p_group <= 1.0) {
        return Err(HgclError::InvalidArgument("p_leaf + p_group must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let item_leaf: Vec<usize> = (0..spec.items).map(|j| j * leaves / spec.items).collect();
    let mut members = vec![Vec::new(); leaves];
    for (j, &l) in item_leaf.iter().enumerate() {
        members[l].push(j);
    }
    let user_leaf: Vec<usize> = (0..spec.users).map(|u| u % leaves).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (u, &leaf) in user_leaf.iter().enumerate() {
        let group = leaf / spec.subgroups;
        let mut chosen = BTreeSet::new();
        while chosen.len() < spec.interactions_per_user {
            let r: f64 = rng.random();
            let pool_leaf = if r < spec.p_leaf {
                leaf
            } else if r < spec.p_leaf + spec.p_group && spec.subgroups > 1 {
                group * spec.subgroups + rng.random_range(0..spec.subgroups)
            } else {
                rng.random_range(0..leaves)
            };
            let pool = &members[pool_leaf];
            chosen.insert(pool[rng.random_range(0..pool.len())]);
        }
        let mut items: Vec<usize> = chosen.into_iter().collect();
        items.shuffle(&mut rng);
        let held = ((items.len() as f64) * spec.test_fraction).round() as usize;
        let held = held.min(items.len() - 1);
        test.extend(items[..held].iter().map(|&i| (u, i)));
        train.extend(items[held..].iter().map(|&i| (u, i)));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SyntheticData {
        users: spec.users,
        items: spec.items,
        train,
        test,
        item_leaf,
        user_leaf,
    })
}

impl SyntheticData {
    /// Writes `u<id> i<id>` lines to `train.txt` and `test.txt` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HgclError::io(dir, e))?;
        for (name, pairs) in [("train.txt", &self.train), ("test.txt", &self.test)] {
            let mut s = String::new();
            for &(u, i) in pairs {
                writeln!(s, "u{u} i{i}").expect("write to string");
            }
            let p = dir.join(name);
            fs::write(&p, s).map_err(|e| HgclError::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shape() {
        let d = generate(&SyntheticSpec::toy(1)).unwrap();
        assert_eq!(d.train.len() + d.test.len(), 200 * 20);
        assert_eq!(d.test.len(), 200 * 4);
        assert_eq!(d, generate(&SyntheticSpec::toy(1)).unwrap());
        let users: BTreeSet<usize> = d.train.iter().map(|p| p.0).collect();
        assert_eq!(users.len(), 200);
    }

    #[test]
    fn planted_structure_dominates() {
        let d = generate(&SyntheticSpec::small(3)).unwrap();
        let same = d
            .train
            .iter()
            .filter(|&&(u, i)| d.user_leaf[u] == d.item_leaf[i])
            .count();
        assert!(same * 2 > d.train.len());
        assert!(d.test.is_empty());
    }
}
