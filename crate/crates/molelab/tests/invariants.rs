//! Property tests for the numeric and routing invariants the rest of the
//! crate leans on.

use proptest::prelude::*;

use molelab::entropy::{
    normalized_tsallis, shannon_entropy, tsallis_entropy, tsallis_max, EntropicIndex, ProbDist,
};
use molelab::numerics::{softmax, Matrix, RngState};
use molelab::routing::{hybrid_route, top_p_select, RoutingConfig, Strategy as RouteStrategy};

fn q(v: f64) -> EntropicIndex {
    EntropicIndex::new(v).unwrap()
}

fn logits_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 1..=max_len)
}

fn dist_strategy(max_len: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(-4.0..4.0f64, 2..=max_len)
        .prop_map(|logits| ProbDist::from_logits(&logits).unwrap())
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in logits_strategy(16)) {
        let s = softmax(&logits).unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in logits_strategy(16), shift in -30.0..30.0f64) {
        let base = softmax(&logits).unwrap();
        let shifted_logits: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let shifted = softmax(&shifted_logits).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-2.0..2.0f64, 12),
        b in prop::collection::vec(-2.0..2.0f64, 20),
        c in prop::collection::vec(-2.0..2.0f64, 10),
    ) {
        let a = Matrix::new(3, 4, a).unwrap();
        let b = Matrix::new(4, 5, b).unwrap();
        let c = Matrix::new(5, 2, c).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_is_reproducible(seed in any::<u64>()) {
        let mut a = RngState::new(seed);
        let mut b = RngState::new(seed);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
            prop_assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
        }
    }

    #[test]
    fn tsallis_near_one_matches_shannon(dist in dist_strategy(16), sign in any::<bool>()) {
        let h = shannon_entropy(&dist);
        prop_assume!(h > 1e-3);
        let qv = if sign { 1.0 + 1e-6 } else { 1.0 - 1e-6 };
        let s = tsallis_entropy(&dist, q(qv));
        prop_assert!((s - h).abs() / h < 1e-4, "S = {s}, H = {h}");
    }

    #[test]
    fn tsallis_is_bounded_by_uniform_maximum(dist in dist_strategy(16), qv in 0.2..3.0f64) {
        let s = tsallis_entropy(&dist, q(qv));
        let max = tsallis_max(dist.len(), q(qv)).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert!(s <= max + 1e-12, "S = {s} > max = {max}");
    }

    #[test]
    fn normalized_tsallis_is_permutation_invariant(
        dist in dist_strategy(12),
        seed in any::<u64>(),
    ) {
        let base = normalized_tsallis(&dist, q(1.1)).unwrap();
        let mut p = dist.p().to_vec();
        let mut rng = RngState::new(seed);
        rng.shuffle(&mut p);
        let shuffled = ProbDist::new(p).unwrap();
        let permuted = normalized_tsallis(&shuffled, q(1.1)).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn selections_are_permutation_equivariant(
        dist in dist_strategy(10),
        seed in any::<u64>(),
        k in 1usize..4,
        pp in 0.6..0.96f64,
    ) {
        // Permuting the distribution permutes the selected indices the same
        // way. Distinct probabilities only, so the tie rule stays out of play;
        // softmax of continuous draws collides with probability zero.
        let n = dist.len();
        let k = k.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = RngState::new(seed);
        rng.shuffle(&mut perm);
        let mut permuted = vec![0.0; n];
        for (src, &dst) in perm.iter().enumerate() {
            permuted[dst] = dist.p()[src];
        }
        let permuted = ProbDist::new(permuted).unwrap();

        let map = |sel: &[usize]| {
            let mut mapped: Vec<usize> = sel.iter().map(|&i| perm[i]).collect();
            mapped.sort_unstable();
            mapped
        };
        let base_k = molelab::routing::top_k_select(&dist, k).unwrap();
        let perm_k = molelab::routing::top_k_select(&permuted, k).unwrap();
        prop_assert_eq!(perm_k, map(&base_k));

        let base_p = top_p_select(&dist, pp).unwrap();
        let perm_p = top_p_select(&permuted, pp).unwrap();
        prop_assert_eq!(perm_p, map(&base_p));
    }

    #[test]
    fn top_p_prefixes_are_monotone(dist in dist_strategy(12), lo in 0.05..0.95f64, delta in 0.0..0.5f64) {
        let hi = (lo + delta).min(1.0);
        let small = top_p_select(&dist, lo).unwrap();
        let large = top_p_select(&dist, hi).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)), "{small:?} not within {large:?}");
    }

    #[test]
    fn hybrid_weights_sum_to_one_and_follow_raw_dist(
        dist in dist_strategy(10),
        pp in 0.6..0.96f64,
        k in 1usize..4,
        thr in 0.0..1.0f64,
    ) {
        let cfg = RoutingConfig {
            n_experts: dist.len(),
            top_p: pp,
            keep_top_k: k.min(dist.len()),
            entropy_threshold: thr,
            entropic_index: q(1.1),
        };
        let d = hybrid_route(&dist, &cfg).unwrap();
        let sum: f64 = d.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        // Weights are proportional to the raw distribution on the selection
        // and zero off it.
        let mass: f64 = d.selected.iter().map(|&i| dist.p()[i]).sum();
        for i in 0..dist.len() {
            if d.selected.contains(&i) {
                prop_assert!((d.weights[i] * mass - dist.p()[i]).abs() < 1e-12);
            } else {
                prop_assert_eq!(d.weights[i], 0.0);
            }
        }
        match d.strategy {
            RouteStrategy::Soft => prop_assert_eq!(d.selected.len(), dist.len()),
            _ => prop_assert!(d.selected.len() >= cfg.keep_top_k),
        }
    }

    #[test]
    fn threshold_zero_top_p_one_is_soft_up_to_renormalization(dist in dist_strategy(10)) {
        let cfg = RoutingConfig {
            n_experts: dist.len(),
            top_p: 1.0,
            keep_top_k: 1,
            entropy_threshold: 0.0,
            entropic_index: q(1.1),
        };
        let d = hybrid_route(&dist, &cfg).unwrap();
        for i in 0..dist.len() {
            prop_assert!((d.weights[i] - dist.p()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dispatch_is_monotone_in_entropy(
        dist in dist_strategy(8),
        thr in 0.05..0.95f64,
        t in 0.01..1.0f64,
    ) {
        // Mixing toward uniform never decreases normalized entropy, so a
        // distribution that routes Soft keeps routing Soft as it gets mixed.
        let cfg = RoutingConfig {
            n_experts: dist.len(),
            top_p: 0.75,
            keep_top_k: 1,
            entropy_threshold: thr,
            entropic_index: q(1.1),
        };
        let d = hybrid_route(&dist, &cfg).unwrap();
        let n = dist.len() as f64;
        let mixed: Vec<f64> = dist.p().iter().map(|&v| (1.0 - t) * v + t / n).collect();
        let mixed = ProbDist::new(mixed).unwrap();
        let dm = hybrid_route(&mixed, &cfg).unwrap();
        prop_assert!(dm.entropy_norm >= d.entropy_norm - 1e-12);
        if d.strategy == RouteStrategy::Soft {
            prop_assert_eq!(dm.strategy, RouteStrategy::Soft);
        }
    }
}
