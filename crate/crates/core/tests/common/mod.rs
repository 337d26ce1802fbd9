//! Shared helpers for the integration and acceptance suites.
#![allow(dead_code)]

use sta_core::attn::{
    block_sparse_attention, dense_attention_oracle_spec, HeadTensor, Scalar,
};
use sta_core::grid::{Dims3, TokenOrder, VideoGrid};
use sta_core::masks::{classify_blocks, MaskSpec, SeqMask};
use sta_core::prng::{standard_normals, CounterRng};

pub fn grid(dims: [usize; 3], tile: [usize; 3]) -> VideoGrid {
    VideoGrid::new(
        Dims3::new(dims[0], dims[1], dims[2]).unwrap(),
        Dims3::new(tile[0], tile[1], tile[2]).unwrap(),
    )
    .unwrap()
}

pub fn d3(v: [usize; 3]) -> Dims3 {
    Dims3::new(v[0], v[1], v[2]).unwrap()
}

pub fn random_tensor<T: Scalar>(seed: u64, stream: u64, rows: usize, cols: usize) -> HeadTensor<T> {
    let vals = standard_normals(seed, stream, rows * cols);
    HeadTensor::from_fn(rows, cols, |r, c| T::of_f64(vals[r * cols + c]))
}

/// A seeded random sliding-tile configuration with `N <= max_tokens`:
/// tile dims in 1..=4, odd window/tile quotient per axis.
pub fn random_sta_config(rng: &mut CounterRng, max_tokens: usize) -> (VideoGrid, Dims3) {
    loop {
        let tile = [rng.below(4) + 1, rng.below(4) + 1, rng.below(4) + 1];
        let tiles = [rng.below(8) + 1, rng.below(8) + 1, rng.below(8) + 1];
        let dims = [tile[0] * tiles[0], tile[1] * tiles[1], tile[2] * tiles[2]];
        if dims[0] * dims[1] * dims[2] > max_tokens {
            continue;
        }
        let mut window = [0usize; 3];
        let mut ok = true;
        for a in 0..3 {
            let max_odd = if tiles[a] % 2 == 1 {
                tiles[a]
            } else {
                tiles[a] - 1
            };
            let quotient = 2 * rng.below(max_odd.div_ceil(2)) + 1;
            if quotient > tiles[a] {
                ok = false;
                break;
            }
            window[a] = quotient * tile[a];
        }
        if !ok {
            continue;
        }
        let g = grid(dims, tile);
        let spec = MaskSpec::Sta { window: d3(window) };
        if spec.validate(&g).is_ok() {
            return (g, d3(window));
        }
    }
}

/// One executor-vs-oracle comparison: seeded zigzag Q/K/V, executor run in
/// the map's ordering (permuting in and out as a caller would), oracle run
/// in zigzag order. Returns the max-abs difference.
pub fn executor_oracle_gap<T: Scalar>(
    g: &VideoGrid,
    spec: &MaskSpec,
    d: usize,
    seed: u64,
) -> f64 {
    let n = g.num_tokens();
    let q: HeadTensor<T> = random_tensor(seed, 0, n, d);
    let k: HeadTensor<T> = random_tensor(seed, 1, n, d);
    let v: HeadTensor<T> = random_tensor(seed, 2, n, d);

    let map = classify_blocks(spec, g).unwrap();
    let executor_out = match map.ordering() {
        TokenOrder::Tiled => {
            let perm = g.tile_permutation();
            let out = block_sparse_attention(
                &q.scatter_rows(&perm),
                &k.scatter_rows(&perm),
                &v.scatter_rows(&perm),
                &map,
            )
            .unwrap();
            out.gather_rows(&perm)
        }
        TokenOrder::Zigzag => block_sparse_attention(&q, &k, &v, &map).unwrap(),
    };

    let mask = SeqMask::new(spec, g, TokenOrder::Zigzag).unwrap();
    let oracle_out = dense_attention_oracle_spec(&q, &k, &v, &mask).unwrap();
    executor_out.max_abs_diff(&oracle_out).unwrap()
}

/// The cross-family trial set used by both the property and acceptance
/// suites: `count` trials cycling over the five families at varied grid
/// sizes up to 4096 tokens and head dims up to 64.
pub fn equivalence_trials(count: usize) -> Vec<(VideoGrid, MaskSpec, usize, u64)> {
    let shapes: [(VideoGrid, [usize; 3]); 5] = [
        (grid([4, 4, 4], [2, 2, 2]), [2, 2, 2]),     // N = 64
        (grid([1, 12, 12], [1, 2, 2]), [1, 6, 6]),   // N = 144, 2D
        (grid([2, 6, 10], [2, 2, 2]), [2, 6, 2]),    // N = 120
        (grid([8, 8, 8], [2, 2, 2]), [6, 6, 6]),     // N = 512
        (grid([16, 16, 16], [4, 4, 4]), [12, 12, 12]), // N = 4096
    ];
    let mut trials = Vec::with_capacity(count);
    for i in 0..count {
        let (g, sta_window) = &shapes[i % shapes.len()];
        let d = [8, 16, 32, 64][(i / 5) % 4];
        let spec = match i % 5 {
            0 => MaskSpec::Full,
            1 => MaskSpec::Sta {
                window: d3(*sta_window),
            },
            2 => {
                let dims = g.dims().as_array();
                let odd = |x: usize| if x % 2 == 1 { x } else { x - 1 };
                MaskSpec::Natten {
                    window: d3([
                        odd(dims[0].min(5)),
                        odd(dims[1].min(7)),
                        odd(dims[2].min(7)),
                    ]),
                }
            }
            3 => {
                let dims = g.dims().as_array();
                MaskSpec::Swin {
                    window: d3([dims[0].min(2), dims[1] / 2, dims[2] / 2]),
                    shifted: i % 2 == 0,
                }
            }
            _ => MaskSpec::Clear {
                radius: 1.5 + (i % 7) as f64,
            },
        };
        trials.push((g.clone(), spec, d, 1000 + i as u64));
    }
    trials
}
