//! Exhaustive path-candidate enumeration and the ground-truth oracle.
//!
//! The candidate space for N facets and K interactions, after removing the
//! physically unsound immediate repeats, has exactly `N * (N-1)^(K-1)`
//! elements. Enumeration is streamed so counting never materializes the
//! space; only oracle runs (which must trace every candidate) are capped.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Scene;
use crate::tracer::{trace_path, validate_path, PathCandidate, RayPath};

/// Default cap on oracle candidate counts.
pub const DEFAULT_ORACLE_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum CandGenError {
    #[error("candidate count overflows u64 (N={n}, K={k})")]
    Overflow { n: usize, k: usize },
    #[error("candidate count {count} exceeds oracle cap {cap}")]
    CapExceeded { count: u64, cap: u64 },
}

/// Number of masked candidates: `N * (N-1)^(K-1)`.
pub fn count_candidates(n: usize, k: usize) -> Result<u64, CandGenError> {
    assert!(n >= 1 && k >= 1, "count_candidates requires N >= 1, K >= 1");
    let overflow = || CandGenError::Overflow { n, k };
    let mut total = n as u64;
    for _ in 1..k {
        total = total.checked_mul(n as u64 - 1).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Lexicographically ordered stream of all candidates of length `k` over `n`
/// facets with no immediate repeats.
pub fn enumerate_candidates(n: usize, k: usize) -> CandidateStream {
    assert!(n >= 1 && k >= 1, "enumerate requires N >= 1, K >= 1");
    let first = if n == 1 && k > 1 {
        None // a single facet cannot be revisited
    } else {
        let mut ids = Vec::with_capacity(k);
        for i in 0..k {
            let prev = if i == 0 { usize::MAX } else { ids[i - 1] };
            ids.push(if prev == 0 { 1 } else { 0 });
        }
        Some(ids)
    };
    CandidateStream { n, next: first }
}

pub struct CandidateStream {
    n: usize,
    next: Option<Vec<usize>>,
}

impl CandidateStream {
    /// Advances `ids` to the lexicographic successor, or returns false.
    fn advance(&self, ids: &mut [usize]) -> bool {
        let k = ids.len();
        for pos in (0..k).rev() {
            let prev = if pos == 0 { usize::MAX } else { ids[pos - 1] };
            // Smallest value above the current one that avoids the repeat.
            let mut v = ids[pos] + 1;
            if v == prev {
                v += 1;
            }
            if v < self.n {
                ids[pos] = v;
                // Reset the suffix to its minimum.
                for i in pos + 1..k {
                    ids[i] = if ids[i - 1] == 0 { 1 } else { 0 };
                }
                return true;
            }
        }
        false
    }
}

impl Iterator for CandidateStream {
    type Item = PathCandidate;

    fn next(&mut self) -> Option<PathCandidate> {
        let current = self.next.take()?;
        let mut successor = current.clone();
        if self.advance(&mut successor) {
            self.next = Some(successor);
        }
        Some(PathCandidate::from_unchecked(current))
    }
}

/// Every candidate that traces to a valid ray path, with its path, in
/// enumeration order.
pub fn oracle_valid_set(
    scene: &Scene,
    k: usize,
    cap: u64,
) -> Result<Vec<(PathCandidate, RayPath)>, CandGenError> {
    let count = count_candidates(scene.num_facets(), k)?;
    if count > cap {
        return Err(CandGenError::CapExceeded { count, cap });
    }
    let mut valid = Vec::new();
    let mut stream = enumerate_candidates(scene.num_facets(), k);
    // Chunked so validation parallelizes while output order stays the
    // enumeration order.
    const CHUNK: usize = 8192;
    loop {
        let chunk: Vec<PathCandidate> = stream.by_ref().take(CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        let hits: Vec<Option<(PathCandidate, RayPath)>> = chunk
            .into_par_iter()
            .map(|cand| match trace_path(scene, &cand) {
                Ok(path) if validate_path(scene, &path).valid => Some((cand, path)),
                _ => None,
            })
            .collect();
        valid.extend(hits.into_iter().flatten());
    }
    Ok(valid)
}

/// `m` i.i.d. uniform draws over the masked candidate space: uniform first
/// index, then uniform over the N-1 non-repeating continuations.
pub fn random_baseline(n: usize, k: usize, m: usize, seed: u64) -> Vec<PathCandidate> {
    use rand::{Rng, SeedableRng};
    assert!(n >= 2 || k == 1, "masked space is empty for N=1, K>1");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let mut ids = Vec::with_capacity(k);
            ids.push(rng.gen_range(0..n));
            for i in 1..k {
                let mut v = rng.gen_range(0..n - 1);
                if v >= ids[i - 1] {
                    v += 1;
                }
                ids.push(v);
            }
            PathCandidate::from_unchecked(ids)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use std::collections::BTreeSet;

    #[test]
    fn count_matches_fig_examples() {
        assert_eq!(count_candidates(3, 2).unwrap(), 6);
        assert_eq!(count_candidates(73, 1).unwrap(), 73);
        assert_eq!(count_candidates(1, 2).unwrap(), 0);
        assert_eq!(count_candidates(1, 1).unwrap(), 1);
    }

    #[test]
    fn count_overflows_cleanly() {
        assert!(matches!(
            count_candidates(usize::MAX, 4),
            Err(CandGenError::Overflow { .. })
        ));
    }

    #[test]
    fn enumerate_3_2_in_lexicographic_order() {
        let got: Vec<Vec<usize>> = enumerate_candidates(3, 2)
            .map(|c| c.ids().to_vec())
            .collect();
        assert_eq!(
            got,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![1, 0],
                vec![1, 2],
                vec![2, 0],
                vec![2, 1]
            ]
        );
    }

    #[test]
    fn enumerate_2_1() {
        let got: Vec<Vec<usize>> = enumerate_candidates(2, 1)
            .map(|c| c.ids().to_vec())
            .collect();
        assert_eq!(got, vec![vec![0], vec![1]]);
    }

    #[test]
    fn enumerate_single_facet() {
        assert_eq!(enumerate_candidates(1, 1).count(), 1);
        assert_eq!(enumerate_candidates(1, 2).count(), 0);
    }

    /// Independent oracle: filter the full product space.
    fn brute_force(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut all: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..k {
            all = all
                .into_iter()
                .flat_map(|prefix| {
                    (0..n).filter_map(move |v| {
                        if prefix.last() == Some(&v) {
                            None
                        } else {
                            let mut next = prefix.clone();
                            next.push(v);
                            Some(next)
                        }
                    }).collect::<Vec<_>>()
                })
                .collect();
        }
        all.sort();
        all
    }

    #[test]
    fn enumerate_matches_brute_force_and_closed_form() {
        for n in 1..=6 {
            for k in 1..=4 {
                let got: Vec<Vec<usize>> = enumerate_candidates(n, k)
                    .map(|c| c.ids().to_vec())
                    .collect();
                assert_eq!(got, brute_force(n, k), "N={n} K={k}");
                assert_eq!(got.len() as u64, count_candidates(n, k).unwrap());
                // No duplicates, already lexicographically sorted.
                let set: BTreeSet<_> = got.iter().collect();
                assert_eq!(set.len(), got.len());
                let mut sorted = got.clone();
                sorted.sort();
                assert_eq!(sorted, got);
            }
        }
    }

    fn floor() -> [Vec3; 3] {
        [
            Vec3::new(-100.0, -100.0, 0.0),
            Vec3::new(300.0, -100.0, 0.0),
            Vec3::new(-100.0, 300.0, 0.0),
        ]
    }

    #[test]
    fn oracle_single_mirror() {
        // Floor reflects TX to RX; a faraway facet does not.
        let far = [
            Vec3::new(50.0, 50.0, 3.0),
            Vec3::new(51.0, 50.0, 3.0),
            Vec3::new(50.0, 51.0, 3.0),
        ];
        let scene = Scene::new(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(2.0, 0.0, 1.0),
            vec![floor(), far],
        )
        .unwrap();
        let valid = oracle_valid_set(&scene, 1, DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(valid.len(), 1);
        assert_eq!(valid[0].0.ids(), &[0]);
    }

    #[test]
    fn oracle_empty_when_endpoints_straddle_every_plane() {
        let scene = Scene::new(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.0, -1.0),
            vec![floor()],
        )
        .unwrap();
        let valid = oracle_valid_set(&scene, 1, DEFAULT_ORACLE_CAP).unwrap();
        assert!(valid.is_empty());
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let scene = Scene::new(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(2.0, 0.0, 1.0),
            vec![floor(), floor(), floor()],
        )
        .unwrap();
        assert!(matches!(
            oracle_valid_set(&scene, 2, 5),
            Err(CandGenError::CapExceeded { count: 6, cap: 5 })
        ));
    }

    #[test]
    fn baseline_is_deterministic_and_masked() {
        let a = random_baseline(5, 3, 200, 42);
        let b = random_baseline(5, 3, 200, 42);
        assert_eq!(a, b);
        let c = random_baseline(5, 3, 200, 43);
        assert_ne!(a, c);
        for cand in &a {
            assert!(cand.ids().windows(2).all(|w| w[0] != w[1]));
            assert!(cand.ids().iter().all(|&id| id < 5));
        }
    }

    #[test]
    fn baseline_uniform_over_masked_space_chi_squared() {
        // N=3, K=2: six candidates; chi^2 critical value at p=0.01, df=5.
        let m = 60_000;
        let draws = random_baseline(3, 2, m, 7);
        let space: Vec<PathCandidate> = enumerate_candidates(3, 2).collect();
        let mut counts = vec![0usize; space.len()];
        for d in &draws {
            let idx = space.iter().position(|c| c == d).unwrap();
            counts[idx] += 1;
        }
        let expected = m as f64 / space.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 15.086, "chi^2 stat {stat} exceeds the p=0.01 cutoff");
    }
}
