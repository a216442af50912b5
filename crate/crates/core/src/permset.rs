//! Tile permutations and the maximal-Hamming permutation sets used as
//! jigsaw pseudo-labels.
//!
//! Label 0 always denotes the identity ordering; labels `1..=P` index the
//! scrambled permutations in the order they were selected.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default candidate pool size when the full permutation space is too large
/// to enumerate.
pub const DEFAULT_POOL_SIZE: usize = 10_000;

/// An ordering of `G²` tiles. Output position `i` receives tile `order[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &v in &order {
            if v >= order.len() || seen[v] {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation of 0..{}",
                    order.len()
                )));
            }
            seen[v] = true;
        }
        Ok(Self(order))
    }

    pub fn identity(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Self(inv)
    }

    /// `(self ∘ other)[i] = self[other[i]]`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot compose permutations of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self(other.0.iter().map(|&i| self.0[i]).collect()))
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for v in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{v}")?;
            first = false;
        }
        Ok(())
    }
}

/// Number of positions at which `a` and `b` place different tiles.
pub fn hamming_distance(a: &Permutation, b: &Permutation) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "hamming distance needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count())
}

fn distance_unchecked(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// The scrambled permutations of a jigsaw task, plus the provenance needed to
/// regenerate them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    grid_size: usize,
    scrambled: Vec<Permutation>,
    generation_seed: u64,
    min_pairwise_hamming: usize,
}

impl PermutationSet {
    /// Builds a set from explicit permutations, validating distinctness and
    /// the absence of the identity.
    pub fn from_permutations(
        grid_size: usize,
        scrambled: Vec<Permutation>,
        generation_seed: u64,
    ) -> Result<Self> {
        let tiles = grid_size * grid_size;
        if grid_size == 0 || scrambled.is_empty() {
            return Err(Error::InvalidArgument(
                "a permutation set needs a positive grid and at least one permutation".into(),
            ));
        }
        let mut seen = HashSet::new();
        for p in &scrambled {
            if p.len() != tiles {
                return Err(Error::InvalidArgument(format!(
                    "permutation of length {} does not fit a {grid_size}x{grid_size} grid",
                    p.len()
                )));
            }
            if p.is_identity() {
                return Err(Error::InvalidArgument(
                    "the identity is reserved for label 0".into(),
                ));
            }
            if !seen.insert(p.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate permutation {p}")));
            }
        }
        let min_pairwise_hamming = min_pairwise(&scrambled, tiles);
        Ok(Self {
            grid_size,
            scrambled,
            generation_seed,
            min_pairwise_hamming,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn tiles(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Number of scrambled permutations `P`.
    pub fn len(&self) -> usize {
        self.scrambled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scrambled.is_empty()
    }

    /// Size of the pseudo-label space, `P + 1`.
    pub fn num_labels(&self) -> usize {
        self.scrambled.len() + 1
    }

    pub fn generation_seed(&self) -> u64 {
        self.generation_seed
    }

    /// Smallest Hamming distance between any two scrambled permutations.
    /// With a single permutation there are no pairs and this is `G²`.
    pub fn min_pairwise_hamming(&self) -> usize {
        self.min_pairwise_hamming
    }

    pub fn scrambled(&self) -> &[Permutation] {
        &self.scrambled
    }

    /// Permutation for a pseudo-label; label 0 is the identity.
    pub fn get(&self, label: usize) -> Result<Permutation> {
        match label {
            0 => Ok(Permutation::identity(self.tiles())),
            l if l <= self.scrambled.len() => Ok(self.scrambled[l - 1].clone()),
            l => Err(Error::LabelOutOfRange {
                label: l,
                classes: self.num_labels(),
            }),
        }
    }

    /// Plain-text form: a `grid=G P=P seed=S` header, then one permutation per
    /// line in label order.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "grid={} P={} seed={}\n",
            self.grid_size,
            self.scrambled.len(),
            self.generation_seed
        );
        for p in &self.scrambled {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: u64, message: String| Error::Parse {
            path: "<permutation set>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?;
        let (mut grid, mut count, mut seed) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed header field `{field}`")))?;
            let parsed: u64 = value
                .parse()
                .map_err(|_| bad(1, format!("`{value}` is not an integer")))?;
            match key {
                "grid" => grid = Some(parsed as usize),
                "P" => count = Some(parsed as usize),
                "seed" => seed = Some(parsed),
                other => return Err(bad(1, format!("unknown header key `{other}`"))),
            }
        }
        let (grid, count, seed) = match (grid, count, seed) {
            (Some(g), Some(c), Some(s)) => (g, c, s),
            _ => return Err(bad(1, "header needs grid, P and seed".into())),
        };
        let mut perms = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i as u64 + 2;
            let order = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, e.to_string()))?;
            perms.push(Permutation::new(order).map_err(|e| bad(lineno, e.to_string()))?);
        }
        if perms.len() != count {
            return Err(bad(
                1,
                format!("header declares {count} permutations, found {}", perms.len()),
            ));
        }
        Self::from_permutations(grid, perms, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

fn min_pairwise(perms: &[Permutation], tiles: usize) -> usize {
    let mut best = tiles;
    for (i, a) in perms.iter().enumerate() {
        for b in &perms[i + 1..] {
            best = best.min(distance_unchecked(&a.0, &b.0));
        }
    }
    best
}

fn factorial(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![Permutation(current.clone())];
    // Standard next-permutation walk.
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let pivot = i - 1;
        let j = (i..n).rev().find(|&j| current[j] > current[pivot]).unwrap();
        current.swap(pivot, j);
        current[i..].reverse();
        out.push(Permutation(current.clone()));
    }
}

/// Candidate pool for greedy selection: every non-identity ordering when the
/// space fits in `pool_size`, otherwise `pool_size` distinct orderings drawn
/// uniformly. The returned pool is sorted lexicographically.
fn candidate_pool(tiles: usize, pool_size: usize, rng: &mut ChaCha8Rng) -> Vec<Permutation> {
    let available = factorial(tiles).map(|f| f - 1);
    if available.is_some_and(|a| a <= pool_size) {
        return all_permutations(tiles)
            .into_iter()
            .filter(|p| !p.is_identity())
            .collect();
    }
    let mut seen = HashSet::with_capacity(pool_size);
    let mut base: Vec<usize> = (0..tiles).collect();
    while seen.len() < pool_size {
        base.shuffle(rng);
        let p = Permutation(base.clone());
        if !p.is_identity() {
            seen.insert(p);
        }
    }
    let mut pool: Vec<_> = seen.into_iter().collect();
    pool.sort();
    pool
}

/// One greedy selection step: position in the pool and the minimum distance
/// that candidate had to everything already chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GreedyPick {
    pub pool_index: usize,
    pub min_distance: usize,
}

fn greedy_select(
    pool: &[Permutation],
    count: usize,
    tiles: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GreedyPick> {
    let first = rng.gen_range(0..pool.len());
    let mut picks = vec![GreedyPick {
        pool_index: first,
        min_distance: tiles,
    }];
    let mut taken = vec![false; pool.len()];
    taken[first] = true;
    let mut nearest: Vec<usize> = pool
        .iter()
        .map(|p| distance_unchecked(&p.0, &pool[first].0))
        .collect();
    while picks.len() < count {
        // Pool is sorted, so the first maximizer is the lexicographically lowest.
        let mut best: Option<usize> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| d > nearest[b]) {
                best = Some(i);
            }
        }
        let chosen = best.expect("pool holds at least `count` candidates");
        taken[chosen] = true;
        picks.push(GreedyPick {
            pool_index: chosen,
            min_distance: nearest[chosen],
        });
        for (i, p) in pool.iter().enumerate() {
            nearest[i] = nearest[i].min(distance_unchecked(&p.0, &pool[chosen].0));
        }
    }
    picks
}

fn validate_request(grid_size: usize, count: usize, pool_size: usize) -> Result<usize> {
    if grid_size == 0 || count == 0 {
        return Err(Error::InvalidArgument(
            "grid size and permutation count must be positive".into(),
        ));
    }
    let tiles = grid_size * grid_size;
    if let Some(available) = factorial(tiles).map(|f| f - 1) {
        if count > available {
            return Err(Error::Capacity {
                requested: count,
                available,
            });
        }
    }
    if pool_size < count {
        return Err(Error::InvalidArgument(format!(
            "pool of {pool_size} cannot supply {count} permutations"
        )));
    }
    Ok(tiles)
}

/// Greedy max–min Hamming selection of `count` scrambled permutations.
///
/// The first permutation is drawn uniformly from the candidate pool; each
/// later one maximizes its minimum distance to everything already chosen,
/// breaking ties toward the lexicographically lowest candidate.
pub fn generate_permutation_set(
    grid_size: usize,
    count: usize,
    pool_size: usize,
    seed: u64,
) -> Result<PermutationSet> {
    let tiles = validate_request(grid_size, count, pool_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = candidate_pool(tiles, pool_size, &mut rng);
    let picks = greedy_select(&pool, count, tiles, &mut rng);
    let scrambled = picks
        .iter()
        .map(|p| pool[p.pool_index].clone())
        .collect::<Vec<_>>();
    PermutationSet::from_permutations(grid_size, scrambled, seed)
}

/// Replays the candidate pool for `set` and checks that each permutation
/// after the first had the largest minimum distance to its predecessors among
/// all candidates still available at that step. Returns the per-step minimum
/// distances on success.
pub fn audit_greedy_selection(set: &PermutationSet, pool_size: usize) -> Result<Vec<usize>> {
    let tiles = validate_request(set.grid_size, set.len(), pool_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(set.generation_seed);
    let pool = candidate_pool(tiles, pool_size, &mut rng);
    let mut remaining: Vec<&Permutation> = pool.iter().collect();
    let mut chosen: Vec<&Permutation> = Vec::new();
    let mut step_minima = Vec::new();
    for (step, p) in set.scrambled.iter().enumerate() {
        let pos = remaining.iter().position(|c| *c == p).ok_or_else(|| {
            Error::InvalidArgument(format!("step {step}: {p} is not in the replayed pool"))
        })?;
        if !chosen.is_empty() {
            let min_to_chosen = |c: &Permutation| {
                chosen
                    .iter()
                    .map(|s| distance_unchecked(&c.0, &s.0))
                    .min()
                    .unwrap()
            };
            let own = min_to_chosen(p);
            if let Some(better) = remaining.iter().find(|c| min_to_chosen(c) > own) {
                return Err(Error::InvalidArgument(format!(
                    "step {step}: candidate {better} beats {p} ({} > {own})",
                    min_to_chosen(better)
                )));
            }
            step_minima.push(own);
        }
        chosen.push(remaining.remove(pos));
    }
    Ok(step_minima)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let id = Permutation::identity(9);
        assert_eq!(hamming_distance(&id, &id).unwrap(), 0);
        let rev = perm(&[8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(hamming_distance(&id, &rev).unwrap(), 8);
        assert!(hamming_distance(&id, &Permutation::identity(4)).is_err());
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Permutation::identity(5).inverse(), Permutation::identity(5));
        assert_eq!(perm(&[1, 2, 0]).inverse(), perm(&[2, 0, 1]));
    }

    #[test]
    fn rejects_non_bijections() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn all_permutations_counts() {
        let all = all_permutations(4);
        assert_eq!(all.len(), 24);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn full_scale_set_is_sane() {
        let set = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0).unwrap();
        assert_eq!(set.len(), 30);
        assert_eq!(set.num_labels(), 31);
        assert!(set.scrambled().iter().all(|p| !p.is_identity()));
        assert!(set.min_pairwise_hamming() >= 2);
        assert_eq!(set, generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0).unwrap());
    }

    #[test]
    fn capacity_and_pool_errors() {
        assert!(matches!(
            generate_permutation_set(2, 24, 100, 0),
            Err(Error::Capacity { requested: 24, available: 23 })
        ));
        assert!(generate_permutation_set(3, 30, 10, 0).is_err());
        assert!(generate_permutation_set(3, 0, 10, 0).is_err());
    }

    #[test]
    fn label_zero_is_identity() {
        let set = generate_permutation_set(2, 3, 100, 4).unwrap();
        assert!(set.get(0).unwrap().is_identity());
        assert_eq!(&set.get(2).unwrap(), &set.scrambled()[1]);
        assert!(set.get(4).is_err());
    }

    #[test]
    fn text_round_trip() {
        let set = generate_permutation_set(3, 10, 500, 7).unwrap();
        let text = set.to_text();
        assert!(text.starts_with("grid=3 P=10 seed=7\n"));
        assert_eq!(PermutationSet::from_text(&text).unwrap(), set);
        assert!(PermutationSet::from_text("grid=3 P=2 seed=1\n0 1 2 3 4 5 6 8 7\n").is_err());
    }

    #[test]
    fn audit_detects_tampering() {
        let set = generate_permutation_set(3, 12, 2_000, 3).unwrap();
        audit_greedy_selection(&set, 2_000).unwrap();
        let mut perms = set.scrambled().to_vec();
        perms.swap(1, 11);
        let tampered = PermutationSet::from_permutations(3, perms, 3).unwrap();
        assert!(audit_greedy_selection(&tampered, 2_000).is_err());
    }

    fn arb_perm(n: usize) -> impl Strategy<Value = Permutation> {
        Just((0..n).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(Permutation)
    }

    proptest! {
        #[test]
        fn hamming_matches_elementwise_loop(a in arb_perm(4), b in arb_perm(4)) {
            let mut expected = 0;
            for i in 0..4 {
                if a.order()[i] != b.order()[i] {
                    expected += 1;
                }
            }
            prop_assert_eq!(hamming_distance(&a, &b).unwrap(), expected);
        }

        #[test]
        fn hamming_is_symmetric_and_never_one(a in arb_perm(9), b in arb_perm(9)) {
            let d = hamming_distance(&a, &b).unwrap();
            prop_assert_eq!(d, hamming_distance(&b, &a).unwrap());
            prop_assert_ne!(d, 1);
            prop_assert_eq!(d == 0, a == b);
        }

        #[test]
        fn inverse_composes_to_identity(p in arb_perm(9)) {
            prop_assert!(p.inverse().compose(&p).unwrap().is_identity());
            prop_assert!(p.compose(&p.inverse()).unwrap().is_identity());
        }

        #[test]
        fn generated_sets_respect_recorded_minimum(seed in 0u64..40, count in 2usize..12) {
            let set = generate_permutation_set(3, count, 300, seed).unwrap();
            let mut attained = false;
            for (i, a) in set.scrambled().iter().enumerate() {
                for b in &set.scrambled()[i + 1..] {
                    let d = hamming_distance(a, b).unwrap();
                    prop_assert!(d >= set.min_pairwise_hamming());
                    attained |= d == set.min_pairwise_hamming();
                }
            }
            prop_assert!(attained);
        }
    }
}
