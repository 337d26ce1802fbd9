//! Property and oracle-backed tests for block classification.

mod common;

use common::{d3, grid, random_sta_config};
use sta_core::grid::{zigzag_unflatten, SeqIndex, VideoGrid};
use sta_core::masks::{
    classify_blocks, classify_blocks_reference, natten_block_counts_analytic, natten_mask,
    sta_block_counts_analytic, swin_mask, BlockType, MaskSpec,
};
use sta_core::prng::CounterRng;

#[test]
fn sta_never_produces_mixed_blocks() {
    let mut rng = CounterRng::new(0xB10C, 0);
    for _ in 0..20 {
        let (g, window) = random_sta_config(&mut rng, 4096);
        let map = classify_blocks(&MaskSpec::Sta { window }, &g).unwrap();
        assert_eq!(
            map.counts().mixed,
            0,
            "mixed blocks for grid {:?} window {window}",
            g.dims()
        );
    }
}

#[test]
fn sta_enumerated_matches_analytic_exactly() {
    // Clamping keeps the per-tile attended-tile count constant, so the
    // analytic count is exact even on boundary tiles.
    let mut rng = CounterRng::new(0xC0DE, 0);
    for _ in 0..20 {
        let (g, window) = random_sta_config(&mut rng, 4096);
        let map = classify_blocks(&MaskSpec::Sta { window }, &g).unwrap();
        let analytic = sta_block_counts_analytic(&g, window).unwrap();
        assert_eq!(map.counts().dense, analytic);
        let nb = map.num_blocks() as u64;
        assert_eq!(map.counts().empty, nb * nb - analytic);
    }
    // The non-cubic configuration with tile (6,8,8).
    let g = grid([30, 48, 80], [6, 8, 8]);
    let w = d3([18, 24, 24]);
    let map = classify_blocks(&MaskSpec::Sta { window: w }, &g).unwrap();
    assert_eq!(map.counts().dense, 8100);
    assert_eq!(map.counts().mixed, 0);
}

/// Per-tile dense/mixed row counts match the analytic per-axis factors on
/// query tiles whose window center is unclamped for every member token.
#[test]
fn natten_analytic_matches_interior_tiles() {
    for (g, window) in [
        (grid([12, 12, 12], [2, 2, 2]), d3([5, 5, 5])),
        (grid([16, 12, 8], [2, 2, 2]), d3([7, 5, 3])),
        (grid([12, 12, 12], [3, 3, 3]), d3([7, 7, 7])),
    ] {
        let spec = MaskSpec::TiledNatten { window };
        let map = classify_blocks(&spec, &g).unwrap();
        let tiles = g.tile_grid();
        let tile = g.tile();
        let dims = g.dims();

        let mut dense_factor = 1u64;
        let mut nonempty_factor = 1u64;
        for a in 0..3 {
            let w = window.as_array()[a] as u64;
            let t = tile.as_array()[a] as u64;
            dense_factor *= (2 * ((w + 1) / (2 * t))).saturating_sub(1);
            nonempty_factor *= 2 * (w - 1).div_ceil(2 * t) + 1;
        }
        let mixed_factor = nonempty_factor - dense_factor;

        let half = |a: usize| (window.as_array()[a] - 1) / 2;
        let nb = map.num_blocks();
        let mut interior_tiles = 0;
        for qb in 0..nb {
            let tc = zigzag_unflatten(SeqIndex(qb), tiles).unwrap().as_array();
            // Interior: every token of the tile has an unclamped center.
            let interior = (0..3).all(|a| {
                let lo = tc[a] * tile.as_array()[a];
                let hi = lo + tile.as_array()[a] - 1;
                lo >= half(a) && hi <= dims.as_array()[a] - 1 - half(a)
            });
            if !interior {
                continue;
            }
            interior_tiles += 1;
            let mut dense = 0u64;
            let mut mixed = 0u64;
            for kb in 0..nb {
                match map.block_type(qb, kb) {
                    BlockType::Dense => dense += 1,
                    BlockType::Mixed => mixed += 1,
                    BlockType::Empty => {}
                }
            }
            assert_eq!(dense, dense_factor, "dense row count, tile {tc:?}");
            assert_eq!(mixed, mixed_factor, "mixed row count, tile {tc:?}");
        }
        assert!(interior_tiles > 0, "test grid has no interior tiles");
    }
}

#[test]
fn analytic_and_enumerated_totals_delta_is_boundary_only() {
    // The theorem ignores boundary effects; totals agree in the interior
    // (previous test) and the toolkit reports both, so here we only pin
    // that the analytic dense count never exceeds the enumerated one
    // (clamping merges windows at the boundary, creating extra dense rows).
    let g = grid([12, 12, 12], [2, 2, 2]);
    let w = d3([5, 5, 5]);
    let map = classify_blocks(&MaskSpec::TiledNatten { window: w }, &g).unwrap();
    let analytic = natten_block_counts_analytic(&g, w);
    assert!(analytic.dense <= map.counts().dense);
}

#[test]
fn clear_and_swin_predicates_are_symmetric() {
    let dims = d3([4, 5, 6]);
    let coords: Vec<_> = dims.iter_coords().collect();
    for (i, &q) in coords.iter().enumerate() {
        for &k in &coords[i..] {
            assert_eq!(
                sta_core::masks::clear_mask(q, k, 2.5),
                sta_core::masks::clear_mask(k, q, 2.5)
            );
        }
    }
    let dims = d3([4, 4, 6]);
    let w = d3([2, 4, 3]);
    for shifted in [false, true] {
        for q in dims.iter_coords() {
            for k in dims.iter_coords() {
                assert_eq!(
                    swin_mask(q, k, dims, w, shifted).unwrap(),
                    swin_mask(k, q, dims, w, shifted).unwrap()
                );
            }
        }
    }
}

#[test]
fn natten_and_sta_symmetric_for_interior_queries() {
    let dims = d3([8, 8, 8]);
    let w = d3([3, 3, 3]);
    let interior =
        |c: sta_core::grid::TokenCoord| c.as_array().iter().all(|&x| (1..7).contains(&x));
    for q in dims.iter_coords().filter(|&c| interior(c)) {
        for k in dims.iter_coords().filter(|&c| interior(c)) {
            assert_eq!(
                natten_mask(q, k, dims, w).unwrap(),
                natten_mask(k, q, dims, w).unwrap()
            );
        }
    }

    let g = grid([8, 8, 8], [2, 2, 2]);
    let w = d3([6, 6, 6]);
    // Interior in tile space: tile coordinate 1..3 of 4.
    let tile_interior = |c: sta_core::grid::TokenCoord| {
        c.as_array().iter().all(|&x| (2..6).contains(&x))
    };
    for q in g.dims().iter_coords().filter(|&c| tile_interior(c)) {
        for k in g.dims().iter_coords().filter(|&c| tile_interior(c)) {
            assert_eq!(
                sta_core::masks::sta_mask(q, k, &g, w).unwrap(),
                sta_core::masks::sta_mask(k, q, &g, w).unwrap()
            );
        }
    }
}

/// Recomputing the attended-pair total from block types (dense -> B^2,
/// empty -> 0, mixed -> per-pair count) matches the map's direct total.
#[test]
fn block_type_consistency() {
    let cases: Vec<(VideoGrid, MaskSpec)> = vec![
        (grid([8, 8, 8], [2, 2, 2]), MaskSpec::TiledNatten { window: d3([5, 5, 5]) }),
        (grid([8, 8, 8], [2, 2, 2]), MaskSpec::Natten { window: d3([3, 5, 7]) }),
        (grid([6, 6, 6], [2, 2, 2]), MaskSpec::Clear { radius: 2.7 }),
        (
            grid([4, 8, 8], [2, 2, 2]),
            MaskSpec::Swin { window: d3([2, 4, 4]), shifted: true },
        ),
        (grid([8, 8, 8], [2, 2, 2]), MaskSpec::Sta { window: d3([6, 6, 6]) }),
    ];
    for (g, spec) in cases {
        let map = classify_blocks(&spec, &g).unwrap();
        let b = g.block_size();
        let full = (b * b) as u64;
        let coords = g.coord_table(map.ordering());
        let mut total = 0u64;
        for qb in 0..map.num_blocks() {
            for kb in 0..map.num_blocks() {
                total += match map.block_type(qb, kb) {
                    BlockType::Dense => full,
                    BlockType::Empty => 0,
                    BlockType::Mixed => {
                        let mut c = 0u64;
                        for qi in qb * b..(qb + 1) * b {
                            for ki in kb * b..(kb + 1) * b {
                                if spec.evaluate_at(&g, coords[qi], coords[ki]) {
                                    c += 1;
                                }
                            }
                        }
                        c
                    }
                };
            }
        }
        assert_eq!(total, map.attended_pairs(), "{spec:?}");
    }
}

/// Enlarging the sliding-tile window per axis never decreases the attended
/// pair count.
#[test]
fn sta_window_monotonicity() {
    let mut rng = CounterRng::new(0x510E, 0);
    let mut checked = 0;
    while checked < 12 {
        let (g, window) = random_sta_config(&mut rng, 2048);
        let tiles = g.tile_grid().as_array();
        let tile = g.tile().as_array();
        let w = window.as_array();
        // Grow one axis by two tiles if validity allows.
        let axis = rng.below(3);
        let grown_quot = w[axis] / tile[axis] + 2;
        if grown_quot > tiles[axis] {
            continue;
        }
        let mut grown = w;
        grown[axis] = grown_quot * tile[axis];
        let base = classify_blocks(&MaskSpec::Sta { window }, &g).unwrap();
        let bigger = classify_blocks(&MaskSpec::Sta { window: d3(grown) }, &g).unwrap();
        assert!(
            bigger.attended_pairs() >= base.attended_pairs(),
            "grid {:?} window {w:?} -> {grown:?}",
            g.dims()
        );
        checked += 1;
    }
}

#[test]
fn fast_classification_matches_reference_on_random_configs() {
    let mut rng = CounterRng::new(0xFA57, 0);
    for trial in 0..8 {
        let (g, window) = random_sta_config(&mut rng, 1000);
        let specs = [
            MaskSpec::Sta { window },
            MaskSpec::Clear {
                radius: 1.0 + (trial as f64) * 0.7,
            },
        ];
        for spec in specs {
            let fast = classify_blocks(&spec, &g).unwrap();
            let slow = classify_blocks_reference(&spec, &g).unwrap();
            assert_eq!(fast.counts(), slow.counts(), "{spec:?} on {:?}", g.dims());
            assert_eq!(fast.attended_pairs(), slow.attended_pairs());
        }
    }
}

#[test]
fn table_block_ratios() {
    // Analytic ratios over 1728^2 block pairs for the reference cubic
    // configuration, and the matching enumerated sliding-tile counts.
    let g = grid([48, 48, 48], [4, 4, 4]);
    let nb = g.num_blocks() as u64;
    assert_eq!(nb, 1728);

    let natten = natten_block_counts_analytic(&g, d3([11, 11, 11]));
    assert_eq!((natten.dense, natten.mixed), (1728, 214272));

    let sta12 = sta_block_counts_analytic(&g, d3([12, 12, 12])).unwrap();
    let sta20 = sta_block_counts_analytic(&g, d3([20, 20, 20])).unwrap();
    assert_eq!(sta12, 46656);
    assert_eq!(sta20, 216000);

    let map12 = classify_blocks(&MaskSpec::Sta { window: d3([12, 12, 12]) }, &g).unwrap();
    assert_eq!(map12.counts().dense, sta12);
    assert_eq!(map12.counts().mixed, 0);
}

#[test]
fn classification_is_thread_count_independent() {
    let g = grid([8, 8, 8], [2, 2, 2]);
    let spec = MaskSpec::TiledNatten {
        window: d3([5, 5, 5]),
    };
    let baseline = classify_blocks(&spec, &g).unwrap();
    for threads in [1, 2, 7] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let map = pool.install(|| classify_blocks(&spec, &g).unwrap());
        assert_eq!(map.counts(), baseline.counts());
        assert_eq!(map.attended_pairs(), baseline.attended_pairs());
        for qb in 0..map.num_blocks() {
            assert_eq!(
                map.kv_block_schedule(qb).unwrap(),
                baseline.kv_block_schedule(qb).unwrap()
            );
        }
    }
}
