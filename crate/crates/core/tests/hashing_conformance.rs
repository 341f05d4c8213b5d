//! Golden vectors for the window hash and derived generators. The expected
//! values come from an independent reference evaluation of the recurrence,
//! splitmix64, xoshiro256** and forward Fisher-Yates.

use proptest::prelude::*;
use radioscope::hashing::{
    derive_greenlist, derive_partition, derive_rvector, window_hash, SecretKey, TokenId,
    WindowSeed,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn window_hash_golden_file() {
    let text = include_str!("data/window_hash_golden.txt");
    let mut checked = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let fields: Vec<u64> = line.split(',').map(|f| f.trim().parse().unwrap()).collect();
        let (s, k) = (fields[0], fields[1] as usize);
        let window: Vec<TokenId> = fields[2..2 + k].iter().map(|&x| x as TokenId).collect();
        let expected = fields[2 + k];
        assert_eq!(fields.len(), k + 3, "malformed line {line}");
        let got = window_hash(&window, SecretKey::new(s).unwrap());
        assert_eq!(got, WindowSeed(expected), "line {line}");
        checked += 1;
    }
    assert!(checked >= 8);
}

#[test]
fn greenlist_golden() {
    assert_eq!(derive_greenlist(WindowSeed(42), 0.25, 8), vec![0, 3]);
    let seed = window_hash(&[17, 255], SecretKey::new(0x9E37_79B9_7F4A_7C15).unwrap());
    assert_eq!(seed, WindowSeed(9_344_711_191_398_858_350));
    let green = derive_greenlist(seed, 0.25, 256);
    assert_eq!(green.len(), 64);
    assert_eq!(&green[..8], &[161, 54, 46, 122, 118, 30, 110, 47]);
}

#[test]
fn rvector_golden() {
    let r = derive_rvector(WindowSeed(42), 4);
    let want: [f64; 4] = [
        0.083_862_971_059_882_16,
        0.378_980_250_662_668_6,
        0.680_043_411_028_139_4,
        0.924_692_945_325_387_6,
    ];
    for (a, b) in r.iter().zip(want) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn partition_golden() {
    let p = derive_partition(WindowSeed(42), 4, 4, 8);
    assert_eq!(p.position, 2);
    let blocks: Vec<Vec<TokenId>> = (0..4).map(|b| p.members(b)).collect();
    assert_eq!(blocks, vec![vec![3, 5], vec![2, 7], vec![0, 4], vec![1, 6]]);
}

#[test]
fn full_greenlist_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let v = rng.random_range(1..600);
        let mut g = derive_greenlist(WindowSeed(rng.random()), 1.0, v);
        g.sort_unstable();
        assert_eq!(g, (0..v as TokenId).collect::<Vec<_>>());
    }
}

#[test]
fn one_token_change_moves_the_greenlist() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 1000;
    let mut changed = 0;
    for _ in 0..trials {
        let key = SecretKey::new(rng.random_range(1..u64::MAX)).unwrap();
        let w: [TokenId; 2] = [rng.random_range(0..256), rng.random_range(0..256)];
        let mut w2 = w;
        let pos = rng.random_range(0..2);
        w2[pos] = (w2[pos] + rng.random_range(1..256)) % 256;
        let mut a = derive_greenlist(window_hash(&w, key), 0.25, 256);
        let mut b = derive_greenlist(window_hash(&w2, key), 0.25, 256);
        a.sort_unstable();
        b.sort_unstable();
        changed += usize::from(a != b);
    }
    assert!(changed as f64 >= 0.9 * trials as f64, "{changed}/{trials}");
}

#[test]
fn rvector_coordinates_are_uniform_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = 32;
    let n = 10_000;
    let mut sums = vec![0.0; v];
    for _ in 0..n {
        for (s, r) in sums.iter_mut().zip(derive_rvector(WindowSeed(rng.random()), v)) {
            *s += r;
        }
    }
    for s in sums {
        let mean = s / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }
}

proptest! {
    #[test]
    fn derivations_are_deterministic_and_in_range(seed: u64, v in 1usize..300) {
        let a = derive_rvector(WindowSeed(seed), v);
        let b = derive_rvector(WindowSeed(seed), v);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
        prop_assert_eq!(derive_greenlist(WindowSeed(seed), 0.3, v), derive_greenlist(WindowSeed(seed), 0.3, v));
    }

    #[test]
    fn greenlist_is_monotone_prefix_in_gamma(seed: u64, v in 4usize..300) {
        let small = derive_greenlist(WindowSeed(seed), 0.2, v);
        let large = derive_greenlist(WindowSeed(seed), 0.6, v);
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn partition_is_disjoint_and_covering(seed: u64, v in 4usize..200, b in 1usize..9) {
        let p = derive_partition(WindowSeed(seed), b, 4, v);
        prop_assert!(p.position < b);
        let mut all: Vec<TokenId> = (0..4).flat_map(|blk| p.members(blk)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..v as TokenId).collect::<Vec<_>>());
    }
}
