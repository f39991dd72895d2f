mod common;

use dca_core::attention::{attention_weights, chunked_attention, oracle_attention, AttentionMode, DcaKvCache};
use dca_core::rope::{RotaryTable, DEFAULT_BASE};
use dca_core::schedules::{relative_position_matrix, ChunkConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_config() -> impl Strategy<Value = ChunkConfig> {
    (2usize..64)
        .prop_flat_map(|c| (Just(c), 1..c))
        .prop_flat_map(|(c, s)| (Just(c), Just(s), 0..=s.min(c - s)))
        .prop_map(|(c, s, w)| ChunkConfig::new(s, c, w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matrix_matches_piecewise_definition(cfg in arb_config(), len in 1usize..200) {
        let m = relative_position_matrix(len, &cfg).unwrap();
        for i in 0..len {
            for j in 0..=i {
                prop_assert_eq!(m.get(i, j), Some(common::m_entry(i, j, &cfg)));
            }
        }
    }

    #[test]
    fn every_mode_matches_brute_force(cfg in arb_config(), len in 1usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, len, 8);
        let table = RotaryTable::new(8, DEFAULT_BASE, 64).unwrap();
        for mode in AttentionMode::ALL {
            let want = common::brute_attention(&inputs, mode, &cfg, DEFAULT_BASE);
            let got = chunked_attention(&inputs, mode, Some(&cfg), &table).unwrap();
            prop_assert!(got.max_abs_diff(&want) < 1e-9, "{mode} chunked");
            let oracle = oracle_attention(&inputs, mode, Some(&cfg), &table).unwrap();
            prop_assert!(oracle.max_abs_diff(&want) < 1e-9, "{mode} oracle");
        }
    }

    #[test]
    fn kv_cache_matches_full_pass(cfg in arb_config(), len in 1usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, len, 8);
        let table = RotaryTable::new(8, DEFAULT_BASE, 64).unwrap();
        for mode in AttentionMode::ALL {
            let full = chunked_attention(&inputs, mode, Some(&cfg), &table).unwrap();
            let mut cache = DcaKvCache::new(mode, Some(&cfg), 8, len).unwrap();
            for i in 0..len {
                let row = cache.step(inputs.q.row(i), inputs.k.row(i), inputs.v.row(i), &table).unwrap();
                for (a, b) in row.iter().zip(full.row(i)) {
                    prop_assert!((a - b).abs() < 1e-9, "{mode} row {i}");
                }
            }
        }
    }

    #[test]
    fn intra_only_never_leaves_the_chunk(cfg in arb_config(), len in 1usize..100, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, len, 4);
        let table = RotaryTable::new(4, DEFAULT_BASE, 0).unwrap();
        let w = attention_weights(&inputs, AttentionMode::IntraOnly, Some(&cfg), &table).unwrap();
        for i in 0..len {
            let mut total = 0.0;
            for j in 0..len {
                let x = w.get(i, j);
                if j > i || j / cfg.chunk != i / cfg.chunk {
                    prop_assert_eq!(x, 0.0);
                }
                total += x;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn modes_coincide_within_one_chunk() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let table = RotaryTable::new(8, DEFAULT_BASE, 128).unwrap();
    for _ in 0..50 {
        let cfg = common::random_config(&mut rng, 100);
        let len = rng.gen_range(1..=cfg.chunk);
        let inputs = common::random_inputs(&mut rng, len, 8);
        let base = chunked_attention(&inputs, AttentionMode::Vanilla, None, &table).unwrap();
        for mode in AttentionMode::ABLATION {
            let out = chunked_attention(&inputs, mode, Some(&cfg), &table).unwrap();
            assert!(out.max_abs_diff(&base) < 1e-12, "{mode} {cfg} l={len}");
        }
    }
}

#[test]
fn full_dca_is_vanilla_up_to_chunk_plus_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..200 {
        let cfg = common::random_config(&mut rng, 120);
        let len = cfg.chunk + cfg.window;
        let m = relative_position_matrix(len, &cfg).unwrap();
        for i in 0..len {
            for j in 0..=i {
                assert_eq!(m.get(i, j), Some(i - j), "{cfg} ({i}, {j})");
            }
        }
    }
}
