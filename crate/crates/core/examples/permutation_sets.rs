//! Builds the permutation sets used as jigsaw pseudo-labels and checks how
//! spread out they are.
//!
//! ```bash
//! cargo run --release --example permutation_sets
//! ```

use jigsaw_ssl::permset::{
    all_permutations, audit_greedy_selection, generate_permutation_set, hamming_distance, PermutationSet,
    DEFAULT_POOL_SIZE,
};

fn best_triple_distance(grid: usize) -> usize {
    let perms: Vec<_> = all_permutations(grid * grid).into_iter().filter(|p| !p.is_identity()).collect();
    let mut best = 0;
    for a in 0..perms.len() {
        for b in a + 1..perms.len() {
            for c in b + 1..perms.len() {
                let d = [(a, b), (a, c), (b, c)]
                    .iter()
                    .map(|&(i, j)| hamming_distance(&perms[i], &perms[j]).unwrap())
                    .min()
                    .unwrap();
                best = best.max(d);
            }
        }
    }
    best
}

fn main() -> jigsaw_ssl::Result<()> {
    // A 2x2 grid is small enough to compare against exhaustive search.
    let small = generate_permutation_set(2, 3, DEFAULT_POOL_SIZE, 0)?;
    println!(
        "2x2 grid, P=3: greedy min distance {} / exhaustive optimum {}",
        small.min_pairwise_hamming(),
        best_triple_distance(2)
    );

    let set = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0)?;
    println!("3x3 grid, P=30: min pairwise distance {}", set.min_pairwise_hamming());
    let steps = audit_greedy_selection(&set, DEFAULT_POOL_SIZE)?;
    println!("greedy audit, min distance after each pick: {steps:?}");
    for label in 0..4 {
        println!("  label {label}: {:?}", set.get(label)?.order());
    }

    let text = set.to_text();
    println!("\nfile header: {}", text.lines().next().unwrap_or_default());
    assert_eq!(PermutationSet::from_text(&text)?, set);
    Ok(())
}
