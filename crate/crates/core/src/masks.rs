//! Mask families, block-level classification, analytic block counts, and
//! sparsity accounting.
//!
//! A *block* is the `B x B` sub-matrix of the attention map formed by one
//! query block and one key block, where `B` is the tile volume. Blocks are
//! classified as dense (every token pair attended), empty (none), or mixed.
//! Sliding-tile masks produce only dense and empty blocks; token-wise
//! sliding windows produce mixed blocks as well.
//!
//! Block partitions depend on the token ordering: the token-wise
//! neighborhood family uses plain zigzag chunks of `B`, everything else
//! uses the tile-major ordering from [`crate::grid`].

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::grid::{zigzag_unflatten, Dims3, SeqIndex, TokenCoord, TokenOrder, VideoGrid};

/// Selects a mask family and its parameters. Window components are in
/// token units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Every query attends every key.
    Full,
    /// Sliding-tile window: the window slides tile-by-tile, so every block
    /// is either dense or empty.
    Sta { window: Dims3 },
    /// Token-wise neighborhood window with boundary clamping, evaluated
    /// over zigzag-ordered blocks.
    Natten { window: Dims3 },
    /// Same predicate as [`MaskSpec::Natten`] but evaluated over tile-order
    /// blocks, which increases the number of dense blocks.
    TiledNatten { window: Dims3 },
    /// Non-overlapping window partition; `shifted` offsets the cell
    /// boundaries by half a window per axis, cyclically.
    Swin {
        window: Dims3,
        #[serde(default)]
        shifted: bool,
    },
    /// Euclidean ball of the given radius around each query, over raw
    /// integer coordinates with unit spacing on all three axes.
    Clear { radius: f64 },
}

impl MaskSpec {
    /// Short family tag used in JSON and reports.
    pub fn family(&self) -> &'static str {
        match self {
            MaskSpec::Full => "full",
            MaskSpec::Sta { .. } => "sta",
            MaskSpec::Natten { .. } => "natten",
            MaskSpec::TiledNatten { .. } => "tiled_natten",
            MaskSpec::Swin { .. } => "swin",
            MaskSpec::Clear { .. } => "clear",
        }
    }

    /// Token ordering over which this family's blocks are formed.
    pub fn block_ordering(&self) -> TokenOrder {
        match self {
            MaskSpec::Natten { .. } => TokenOrder::Zigzag,
            _ => TokenOrder::Tiled,
        }
    }

    /// Checks the family's parameter invariants against a grid.
    pub fn validate(&self, grid: &VideoGrid) -> Result<()> {
        let dims = grid.dims();
        match self {
            MaskSpec::Full => Ok(()),
            MaskSpec::Sta { window } => validate_sta(grid, *window),
            MaskSpec::Natten { window } | MaskSpec::TiledNatten { window } => {
                validate_natten(dims, *window)
            }
            MaskSpec::Swin { window, .. } => validate_swin(dims, *window),
            MaskSpec::Clear { radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "clear radius must be a positive finite number, got {radius}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Evaluates the per-token predicate at a coordinate pair.
    /// Assumes the spec is valid for the grid; see [`MaskSpec::validate`].
    pub fn evaluate_at(&self, grid: &VideoGrid, q: TokenCoord, k: TokenCoord) -> bool {
        match self {
            MaskSpec::Full => true,
            MaskSpec::Sta { window } => sta_mask_unchecked(q, k, grid, *window),
            MaskSpec::Natten { window } | MaskSpec::TiledNatten { window } => {
                natten_mask_unchecked(q, k, grid.dims(), *window)
            }
            MaskSpec::Swin { window, shifted } => {
                swin_mask_unchecked(q, k, grid.dims(), *window, *shifted)
            }
            MaskSpec::Clear { radius } => clear_mask(q, k, *radius),
        }
    }
}

fn validate_swin(dims: Dims3, window: Dims3) -> Result<()> {
    for axis in Axis::ALL {
        if !dims.axis(axis).is_multiple_of(window.axis(axis)) {
            return Err(Error::NonDivisible {
                what: "swin window",
                axis,
                num: dims.axis(axis),
                den: window.axis(axis),
            });
        }
    }
    Ok(())
}

fn validate_natten(dims: Dims3, window: Dims3) -> Result<()> {
    for axis in Axis::ALL {
        let w = window.axis(axis);
        if w.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "neighborhood window must be odd per axis, got {w} on axis {axis}"
            )));
        }
        if w > dims.axis(axis) {
            return Err(Error::InvalidSpec(format!(
                "window {w} exceeds grid extent {} on axis {axis}",
                dims.axis(axis)
            )));
        }
    }
    Ok(())
}

fn validate_sta(grid: &VideoGrid, window: Dims3) -> Result<()> {
    let dims = grid.dims();
    let tile = grid.tile();
    for axis in Axis::ALL {
        let w = window.axis(axis);
        let t = tile.axis(axis);
        if !w.is_multiple_of(t) {
            return Err(Error::NonDivisible {
                what: "sta window",
                axis,
                num: w,
                den: t,
            });
        }
        if (w / t).is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "sta window/tile must be odd per axis, got {} on axis {axis}",
                w / t
            )));
        }
        if w > dims.axis(axis) {
            return Err(Error::InvalidSpec(format!(
                "window {w} exceeds grid extent {} on axis {axis}",
                dims.axis(axis)
            )));
        }
    }
    Ok(())
}

#[inline]
fn clamp(v: usize, lo: usize, hi: usize) -> usize {
    v.max(lo).min(hi)
}

#[inline]
fn natten_axis(q: usize, k: usize, extent: usize, window: usize) -> bool {
    let half = (window - 1) / 2;
    let center = clamp(q, half, extent - 1 - half);
    center.abs_diff(k) <= half
}

fn natten_mask_unchecked(q: TokenCoord, k: TokenCoord, dims: Dims3, window: Dims3) -> bool {
    Axis::ALL
        .into_iter()
        .all(|a| natten_axis(q.axis(a), k.axis(a), dims.axis(a), window.axis(a)))
}

fn sta_mask_unchecked(q: TokenCoord, k: TokenCoord, grid: &VideoGrid, window: Dims3) -> bool {
    let tile = grid.tile();
    let tiles = grid.tile_grid();
    Axis::ALL.into_iter().all(|a| {
        let t = tile.axis(a);
        natten_axis(
            q.axis(a) / t,
            k.axis(a) / t,
            tiles.axis(a),
            window.axis(a) / t,
        )
    })
}

#[inline]
fn swin_cell(c: usize, extent: usize, window: usize, shifted: bool) -> usize {
    let shift = if shifted { window / 2 } else { 0 };
    ((c + shift) % extent) / window
}

fn swin_mask_unchecked(
    q: TokenCoord,
    k: TokenCoord,
    dims: Dims3,
    window: Dims3,
    shifted: bool,
) -> bool {
    Axis::ALL.into_iter().all(|a| {
        swin_cell(q.axis(a), dims.axis(a), window.axis(a), shifted)
            == swin_cell(k.axis(a), dims.axis(a), window.axis(a), shifted)
    })
}

/// Token-wise neighborhood predicate with boundary clamping: the window
/// center is the query coordinate pulled inward so the window stays in
/// bounds, and a key is attended when it lies within half a window of the
/// center on every axis.
pub fn natten_mask(q: TokenCoord, k: TokenCoord, dims: Dims3, window: Dims3) -> Result<bool> {
    validate_natten(dims, window)?;
    dims.check_contains(q)?;
    dims.check_contains(k)?;
    Ok(natten_mask_unchecked(q, k, dims, window))
}

/// Sliding-tile predicate: the neighborhood rule applied in tile
/// coordinates, with the window measured in whole tiles.
pub fn sta_mask(q: TokenCoord, k: TokenCoord, grid: &VideoGrid, window: Dims3) -> Result<bool> {
    validate_sta(grid, window)?;
    grid.dims().check_contains(q)?;
    grid.dims().check_contains(k)?;
    Ok(sta_mask_unchecked(q, k, grid, window))
}

/// Window-partition predicate: true when both tokens fall in the same
/// cell; shifted partitions offset cell boundaries by `window/2` per axis,
/// cyclically.
pub fn swin_mask(
    q: TokenCoord,
    k: TokenCoord,
    dims: Dims3,
    window: Dims3,
    shifted: bool,
) -> Result<bool> {
    validate_swin(dims, window)?;
    dims.check_contains(q)?;
    dims.check_contains(k)?;
    Ok(swin_mask_unchecked(q, k, dims, window, shifted))
}

/// Euclidean-ball predicate over raw integer coordinates.
pub fn clear_mask(q: TokenCoord, k: TokenCoord, radius: f64) -> bool {
    let dt = q.t.abs_diff(k.t) as f64;
    let dh = q.h.abs_diff(k.h) as f64;
    let dw = q.w.abs_diff(k.w) as f64;
    dt * dt + dh * dh + dw * dw <= radius * radius
}

/// A validated mask with per-axis lookup tables where the family is
/// separable, for evaluation in hot loops.
#[derive(Debug, Clone)]
pub struct CompiledMask {
    kind: CompiledKind,
}

#[derive(Debug, Clone)]
enum CompiledKind {
    All,
    /// `tables[a][q * extent_a + k]` per axis; the predicate is the
    /// conjunction across axes.
    Separable {
        extents: [usize; 3],
        tables: [Vec<bool>; 3],
    },
    Ball {
        radius_sq: f64,
    },
}

impl CompiledMask {
    pub fn build(spec: &MaskSpec, grid: &VideoGrid) -> Result<Self> {
        spec.validate(grid)?;
        let dims = grid.dims();
        let kind = match spec {
            MaskSpec::Full => CompiledKind::All,
            MaskSpec::Clear { radius } => CompiledKind::Ball {
                radius_sq: radius * radius,
            },
            _ => {
                let mut tables: [Vec<bool>; 3] = [vec![], vec![], vec![]];
                let mut extents = [0usize; 3];
                for (slot, axis) in Axis::ALL.into_iter().enumerate() {
                    let extent = dims.axis(axis);
                    let mut table = vec![false; extent * extent];
                    for q in 0..extent {
                        for k in 0..extent {
                            let qc = coord_on_axis(axis, q);
                            let kc = coord_on_axis(axis, k);
                            table[q * extent + k] = match spec {
                                MaskSpec::Sta { .. }
                                | MaskSpec::Natten { .. }
                                | MaskSpec::TiledNatten { .. }
                                | MaskSpec::Swin { .. } => {
                                    axis_predicate(spec, grid, axis, qc.axis(axis), kc.axis(axis))
                                }
                                _ => unreachable!(),
                            };
                        }
                    }
                    extents[slot] = extent;
                    tables[slot] = table;
                }
                CompiledKind::Separable { extents, tables }
            }
        };
        Ok(CompiledMask { kind })
    }

    #[inline]
    pub fn eval(&self, q: TokenCoord, k: TokenCoord) -> bool {
        match &self.kind {
            CompiledKind::All => true,
            CompiledKind::Separable { extents, tables } => {
                tables[0][q.t * extents[0] + k.t]
                    && tables[1][q.h * extents[1] + k.h]
                    && tables[2][q.w * extents[2] + k.w]
            }
            CompiledKind::Ball { radius_sq } => {
                let dt = q.t.abs_diff(k.t) as f64;
                let dh = q.h.abs_diff(k.h) as f64;
                let dw = q.w.abs_diff(k.w) as f64;
                dt * dt + dh * dh + dw * dw <= *radius_sq
            }
        }
    }

    fn separable_tables(&self) -> Option<(&[usize; 3], &[Vec<bool>; 3])> {
        match &self.kind {
            CompiledKind::Separable { extents, tables } => Some((extents, tables)),
            _ => None,
        }
    }
}

fn coord_on_axis(axis: Axis, v: usize) -> TokenCoord {
    match axis {
        Axis::T => TokenCoord::new(v, 0, 0),
        Axis::H => TokenCoord::new(0, v, 0),
        Axis::W => TokenCoord::new(0, 0, v),
    }
}

fn axis_predicate(spec: &MaskSpec, grid: &VideoGrid, axis: Axis, q: usize, k: usize) -> bool {
    let dims = grid.dims();
    match spec {
        MaskSpec::Natten { window } | MaskSpec::TiledNatten { window } => {
            natten_axis(q, k, dims.axis(axis), window.axis(axis))
        }
        MaskSpec::Sta { window } => {
            let t = grid.tile().axis(axis);
            natten_axis(
                q / t,
                k / t,
                grid.tile_grid().axis(axis),
                window.axis(axis) / t,
            )
        }
        MaskSpec::Swin { window, shifted } => {
            swin_cell(q, dims.axis(axis), window.axis(axis), *shifted)
                == swin_cell(k, dims.axis(axis), window.axis(axis), *shifted)
        }
        _ => unreachable!("axis_predicate is only called for separable families"),
    }
}

/// A mask evaluated over sequence indices of a fixed token ordering.
pub struct SeqMask {
    compiled: CompiledMask,
    coords: Vec<TokenCoord>,
}

impl SeqMask {
    pub fn new(spec: &MaskSpec, grid: &VideoGrid, order: TokenOrder) -> Result<Self> {
        Ok(SeqMask {
            compiled: CompiledMask::build(spec, grid)?,
            coords: grid.coord_table(order),
        })
    }

    #[inline]
    pub fn eval(&self, q: SeqIndex, k: SeqIndex) -> bool {
        self.compiled.eval(self.coords[q.0], self.coords[k.0])
    }
}

/// Classification of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockType {
    /// All `B*B` token pairs attended.
    Dense,
    /// Some attended, some not.
    Mixed,
    /// No pair attended; skipped entirely by the executor.
    Empty,
}

/// Block totals over the full `num_blocks x num_blocks` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub dense: u64,
    pub mixed: u64,
    pub empty: u64,
}

/// Classification of every (query-block, key-block) pair for one mask on
/// one grid, plus counts and the exact attended token-pair total.
#[derive(Debug, Clone)]
pub struct BlockMap {
    grid: VideoGrid,
    spec: MaskSpec,
    ordering: TokenOrder,
    /// Row-major `num_blocks x num_blocks`.
    types: Vec<BlockType>,
    counts: BlockCounts,
    attended_pair_count: u64,
}

impl BlockMap {
    pub fn grid(&self) -> &VideoGrid {
        &self.grid
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn ordering(&self) -> TokenOrder {
        self.ordering
    }

    pub fn num_blocks(&self) -> usize {
        self.grid.num_blocks()
    }

    pub fn block_type(&self, q_block: usize, k_block: usize) -> BlockType {
        self.types[q_block * self.num_blocks() + k_block]
    }

    pub fn counts(&self) -> BlockCounts {
        self.counts
    }

    /// Exact number of attended (query, key) token pairs.
    pub fn attended_pairs(&self) -> u64 {
        self.attended_pair_count
    }

    /// Fraction of token pairs excluded by the mask, `1 - attended / N^2`.
    pub fn sparsity(&self) -> f64 {
        let n = self.grid.num_tokens() as f64;
        1.0 - self.attended_pair_count as f64 / (n * n)
    }

    /// Ascending list of non-empty key blocks for one query block: the
    /// blocks a data worker must load for that query block.
    pub fn kv_block_schedule(&self, q_block: usize) -> Result<Vec<usize>> {
        let nb = self.num_blocks();
        if q_block >= nb {
            return Err(Error::BlockOutOfRange {
                block: q_block,
                count: nb,
            });
        }
        Ok((0..nb)
            .filter(|&k| self.block_type(q_block, k) != BlockType::Empty)
            .collect())
    }

    /// Writes the map as a binary PGM (P5) image: one pixel per block,
    /// dense = 0, mixed = 128, empty = 255; query blocks are rows.
    pub fn write_pgm<W: Write>(&self, out: &mut W) -> Result<()> {
        let nb = self.num_blocks();
        write!(out, "P5\n{nb} {nb}\n255\n")?;
        let pixels: Vec<u8> = self
            .types
            .iter()
            .map(|t| match t {
                BlockType::Dense => 0u8,
                BlockType::Mixed => 128,
                BlockType::Empty => 255,
            })
            .collect();
        out.write_all(&pixels)?;
        Ok(())
    }
}

fn tally(types: &[BlockType]) -> BlockCounts {
    let mut counts = BlockCounts {
        dense: 0,
        mixed: 0,
        empty: 0,
    };
    for t in types {
        match t {
            BlockType::Dense => counts.dense += 1,
            BlockType::Mixed => counts.mixed += 1,
            BlockType::Empty => counts.empty += 1,
        }
    }
    counts
}

#[inline]
fn type_of_count(count: u64, full: u64) -> BlockType {
    if count == 0 {
        BlockType::Empty
    } else if count == full {
        BlockType::Dense
    } else {
        BlockType::Mixed
    }
}

/// Classifies every block by counting attended token pairs.
///
/// Separable families over tile-order blocks factorize the per-block count
/// into per-axis pair counts; the ball family prunes blocks whose bounding
/// boxes are decisively inside or outside the radius. Both shortcuts are
/// exact and are cross-checked against [`classify_blocks_reference`] in the
/// test suite.
pub fn classify_blocks(spec: &MaskSpec, grid: &VideoGrid) -> Result<BlockMap> {
    spec.validate(grid)?;
    let ordering = spec.block_ordering();
    let nb = grid.num_blocks();

    let (types, attended) = match (spec, ordering) {
        (MaskSpec::Full, _) => {
            let n = grid.num_tokens() as u64;
            (vec![BlockType::Dense; nb * nb], n * n)
        }
        (MaskSpec::Clear { radius }, TokenOrder::Tiled) => {
            classify_tiled_ball(grid, *radius * *radius)
        }
        (_, TokenOrder::Tiled) => {
            let compiled = CompiledMask::build(spec, grid)?;
            let (extents, tables) = compiled
                .separable_tables()
                .expect("non-ball tiled families are separable");
            classify_tiled_separable(grid, extents, tables)
        }
        (_, TokenOrder::Zigzag) => {
            let compiled = CompiledMask::build(spec, grid)?;
            classify_chunked(grid, &compiled, ordering)
        }
    };

    let counts = tally(&types);
    Ok(BlockMap {
        grid: grid.clone(),
        spec: spec.clone(),
        ordering,
        types,
        counts,
        attended_pair_count: attended,
    })
}

/// Reference classifier: evaluates the raw predicate at every one of the
/// `B x B` token pairs of every block. Quadratic in `N`; intended for
/// cross-checking the shortcuts at small grid sizes.
pub fn classify_blocks_reference(spec: &MaskSpec, grid: &VideoGrid) -> Result<BlockMap> {
    spec.validate(grid)?;
    let ordering = spec.block_ordering();
    let nb = grid.num_blocks();
    let b = grid.block_size();
    let full = (b as u64) * (b as u64);
    let coords = grid.coord_table(ordering);

    let rows: Vec<(Vec<BlockType>, u64)> = (0..nb)
        .into_par_iter()
        .map(|qb| {
            let mut row = Vec::with_capacity(nb);
            let mut attended = 0u64;
            for kb in 0..nb {
                let mut count = 0u64;
                for qi in qb * b..(qb + 1) * b {
                    for ki in kb * b..(kb + 1) * b {
                        if spec.evaluate_at(grid, coords[qi], coords[ki]) {
                            count += 1;
                        }
                    }
                }
                attended += count;
                row.push(type_of_count(count, full));
            }
            (row, attended)
        })
        .collect();

    let mut types = Vec::with_capacity(nb * nb);
    let mut attended = 0u64;
    for (row, a) in rows {
        types.extend(row);
        attended += a;
    }
    let counts = tally(&types);
    Ok(BlockMap {
        grid: grid.clone(),
        spec: spec.clone(),
        ordering,
        types,
        counts,
        attended_pair_count: attended,
    })
}

/// Tile-order blocks with a separable predicate: the attended-pair count of
/// a block factorizes as the product over axes of per-axis pair counts
/// between the two tiles.
fn classify_tiled_separable(
    grid: &VideoGrid,
    extents: &[usize; 3],
    tables: &[Vec<bool>; 3],
) -> (Vec<BlockType>, u64) {
    let tile = grid.tile();
    let tiles = grid.tile_grid();
    let nb = grid.num_blocks();
    let b = grid.block_size() as u64;
    let full = b * b;

    // cnt[a][qt * tiles_a + kt] = attended coordinate pairs on axis a.
    let mut cnt: [Vec<u64>; 3] = [vec![], vec![], vec![]];
    for (slot, axis) in Axis::ALL.into_iter().enumerate() {
        let t = tile.axis(axis);
        let g = tiles.axis(axis);
        let extent = extents[slot];
        let table = &tables[slot];
        let mut axis_cnt = vec![0u64; g * g];
        for qt in 0..g {
            for kt in 0..g {
                let mut c = 0u64;
                for q in qt * t..(qt + 1) * t {
                    for k in kt * t..(kt + 1) * t {
                        if table[q * extent + k] {
                            c += 1;
                        }
                    }
                }
                axis_cnt[qt * g + kt] = c;
            }
        }
        cnt[slot] = axis_cnt;
    }

    let tile_coords: Vec<TokenCoord> = (0..nb)
        .map(|i| zigzag_unflatten(SeqIndex(i), tiles).expect("block index in range"))
        .collect();

    let rows: Vec<(Vec<BlockType>, u64)> = (0..nb)
        .into_par_iter()
        .map(|qb| {
            let qc = tile_coords[qb];
            let mut row = Vec::with_capacity(nb);
            let mut attended = 0u64;
            for kc in &tile_coords {
                let c = cnt[0][qc.t * tiles.t + kc.t]
                    * cnt[1][qc.h * tiles.h + kc.h]
                    * cnt[2][qc.w * tiles.w + kc.w];
                attended += c;
                row.push(type_of_count(c, full));
            }
            (row, attended)
        })
        .collect();

    merge_rows(rows, nb)
}

/// Tile-order blocks with the Euclidean-ball predicate: bounding-box
/// distances settle most blocks; only boundary blocks are enumerated.
fn classify_tiled_ball(grid: &VideoGrid, radius_sq: f64) -> (Vec<BlockType>, u64) {
    let tile = grid.tile();
    let tiles = grid.tile_grid();
    let nb = grid.num_blocks();
    let b = grid.block_size() as u64;
    let full = b * b;

    let tile_coords: Vec<TokenCoord> = (0..nb)
        .map(|i| zigzag_unflatten(SeqIndex(i), tiles).expect("block index in range"))
        .collect();

    let axis_gap = |qt: usize, kt: usize, t: usize| -> (u64, u64) {
        // Min and max |q - k| between the token ranges of two tiles.
        let (qlo, qhi) = (qt * t, qt * t + t - 1);
        let (klo, khi) = (kt * t, kt * t + t - 1);
        let min = if khi < qlo {
            (qlo - khi) as u64
        } else if qhi < klo {
            (klo - qhi) as u64
        } else {
            0
        };
        let max = (qhi.abs_diff(klo)).max(khi.abs_diff(qlo)) as u64;
        (min, max)
    };

    let rows: Vec<(Vec<BlockType>, u64)> = (0..nb)
        .into_par_iter()
        .map(|qb| {
            let qc = tile_coords[qb];
            let mut row = Vec::with_capacity(nb);
            let mut attended = 0u64;
            for kc in &tile_coords {
                let (mnt, mxt) = axis_gap(qc.t, kc.t, tile.t);
                let (mnh, mxh) = axis_gap(qc.h, kc.h, tile.h);
                let (mnw, mxw) = axis_gap(qc.w, kc.w, tile.w);
                let min_sq = (mnt * mnt + mnh * mnh + mnw * mnw) as f64;
                let max_sq = (mxt * mxt + mxh * mxh + mxw * mxw) as f64;
                let count = if min_sq > radius_sq {
                    0
                } else if max_sq <= radius_sq {
                    full
                } else {
                    let mut c = 0u64;
                    for qt in qc.t * tile.t..(qc.t + 1) * tile.t {
                        for qh in qc.h * tile.h..(qc.h + 1) * tile.h {
                            for qw in qc.w * tile.w..(qc.w + 1) * tile.w {
                                for kt in kc.t * tile.t..(kc.t + 1) * tile.t {
                                    for kh in kc.h * tile.h..(kc.h + 1) * tile.h {
                                        for kw in kc.w * tile.w..(kc.w + 1) * tile.w {
                                            let dt = qt.abs_diff(kt) as f64;
                                            let dh = qh.abs_diff(kh) as f64;
                                            let dw = qw.abs_diff(kw) as f64;
                                            if dt * dt + dh * dh + dw * dw <= radius_sq {
                                                c += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    c
                };
                attended += count;
                row.push(type_of_count(count, full));
            }
            (row, attended)
        })
        .collect();

    merge_rows(rows, nb)
}

/// Zigzag-chunk blocks: no factorization is available, so every pair of the
/// chunk is evaluated through the compiled per-axis tables.
fn classify_chunked(
    grid: &VideoGrid,
    compiled: &CompiledMask,
    ordering: TokenOrder,
) -> (Vec<BlockType>, u64) {
    let nb = grid.num_blocks();
    let b = grid.block_size();
    let full = (b as u64) * (b as u64);
    let coords = grid.coord_table(ordering);

    let rows: Vec<(Vec<BlockType>, u64)> = (0..nb)
        .into_par_iter()
        .map(|qb| {
            let mut row = Vec::with_capacity(nb);
            let mut attended = 0u64;
            for kb in 0..nb {
                let mut count = 0u64;
                for qi in qb * b..(qb + 1) * b {
                    let qc = coords[qi];
                    for kc in &coords[kb * b..(kb + 1) * b] {
                        if compiled.eval(qc, *kc) {
                            count += 1;
                        }
                    }
                }
                attended += count;
                row.push(type_of_count(count, full));
            }
            (row, attended)
        })
        .collect();

    merge_rows(rows, nb)
}

fn merge_rows(rows: Vec<(Vec<BlockType>, u64)>, nb: usize) -> (Vec<BlockType>, u64) {
    let mut types = Vec::with_capacity(nb * nb);
    let mut attended = 0u64;
    for (row, a) in rows {
        types.extend(row);
        attended += a;
    }
    (types, attended)
}

/// Analytic dense and mixed block counts for the token-wise neighborhood
/// family over tile-order blocks, ignoring boundary effects:
///
/// `dense = prod_a max(2*floor((W_a+1)/(2*T_a)) - 1, 0) * prod_a (L_a/T_a)`
/// `mixed = prod_a (2*ceil((W_a-1)/(2*T_a)) + 1) * prod_a (L_a/T_a) - dense`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NattenAnalyticCounts {
    pub dense: u64,
    pub mixed: u64,
}

pub fn natten_block_counts_analytic(grid: &VideoGrid, window: Dims3) -> NattenAnalyticCounts {
    let tile = grid.tile();
    let mut dense_factor = 1u64;
    let mut nonempty_factor = 1u64;
    for axis in Axis::ALL {
        let w = window.axis(axis) as u64;
        let t = tile.axis(axis) as u64;
        let dense = (2 * ((w + 1) / (2 * t))).saturating_sub(1);
        let nonempty = 2 * (w.saturating_sub(1)).div_ceil(2 * t) + 1;
        dense_factor *= dense;
        nonempty_factor *= nonempty;
    }
    let tiles = grid.num_blocks() as u64;
    let dense = dense_factor * tiles;
    let mixed = (nonempty_factor * tiles).saturating_sub(dense);
    NattenAnalyticCounts { dense, mixed }
}

/// Analytic dense block count for the sliding-tile family:
/// `dense = prod_a (W_a/T_a) * prod_a (L_a/T_a)`; all remaining blocks are
/// empty and there are no mixed blocks.
pub fn sta_block_counts_analytic(grid: &VideoGrid, window: Dims3) -> Result<u64> {
    validate_sta(grid, window)?;
    let tile = grid.tile();
    let mut window_tiles = 1u64;
    for axis in Axis::ALL {
        window_tiles *= (window.axis(axis) / tile.axis(axis)) as u64;
    }
    Ok(window_tiles * grid.num_blocks() as u64)
}

/// Enumerated sparsity of a mask: `1 - attended / N^2`.
pub fn sparsity(spec: &MaskSpec, grid: &VideoGrid) -> Result<f64> {
    Ok(classify_blocks(spec, grid)?.sparsity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims3;

    fn grid(dims: [usize; 3], tile: [usize; 3]) -> VideoGrid {
        VideoGrid::new(
            Dims3::new(dims[0], dims[1], dims[2]).unwrap(),
            Dims3::new(tile[0], tile[1], tile[2]).unwrap(),
        )
        .unwrap()
    }

    fn d3(v: [usize; 3]) -> Dims3 {
        Dims3::new(v[0], v[1], v[2]).unwrap()
    }

    #[test]
    fn natten_mask_examples() {
        let dims = d3([4, 4, 4]);
        let w = d3([3, 3, 3]);
        // Center clamps from (0,0,0) to (1,1,1).
        assert!(natten_mask(TokenCoord::new(0, 0, 0), TokenCoord::new(2, 2, 2), dims, w).unwrap());
        assert!(!natten_mask(TokenCoord::new(0, 0, 0), TokenCoord::new(3, 0, 0), dims, w).unwrap());
        // Window covering the grid attends everything.
        let dims5 = d3([5, 5, 5]);
        for q in dims5.iter_coords() {
            for k in dims5.iter_coords() {
                assert!(natten_mask(q, k, dims5, dims5).unwrap());
            }
        }
    }

    #[test]
    fn natten_rejects_even_window() {
        let dims = d3([4, 4, 4]);
        let err = natten_mask(
            TokenCoord::new(0, 0, 0),
            TokenCoord::new(0, 0, 0),
            dims,
            d3([2, 3, 3]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    #[test]
    fn sta_mask_examples() {
        let g = grid([8, 8, 8], [2, 2, 2]);
        let w = d3([6, 6, 6]);
        assert!(sta_mask(TokenCoord::new(0, 0, 0), TokenCoord::new(5, 5, 5), &g, w).unwrap());
        assert!(!sta_mask(TokenCoord::new(0, 0, 0), TokenCoord::new(6, 5, 5), &g, w).unwrap());
        // Same tile always attends, even at the smallest window.
        assert!(sta_mask(
            TokenCoord::new(0, 0, 1),
            TokenCoord::new(1, 1, 0),
            &g,
            d3([2, 2, 2])
        )
        .unwrap());
        // Window = dims attends everything (odd tile count per axis).
        let g6 = grid([6, 6, 6], [2, 2, 2]);
        let all = d3([6, 6, 6]);
        for q in [TokenCoord::new(0, 0, 0), TokenCoord::new(5, 3, 4)] {
            for k in [TokenCoord::new(5, 5, 5), TokenCoord::new(0, 4, 2)] {
                assert!(sta_mask(q, k, &g6, all).unwrap());
            }
        }
    }

    #[test]
    fn sta_rejects_bad_configs() {
        let g = grid([8, 8, 8], [2, 2, 2]);
        // Window not a multiple of the tile.
        assert!(sta_mask(
            TokenCoord::new(0, 0, 0),
            TokenCoord::new(0, 0, 0),
            &g,
            d3([3, 2, 2])
        )
        .is_err());
        // Even tile quotient.
        assert!(sta_mask(
            TokenCoord::new(0, 0, 0),
            TokenCoord::new(0, 0, 0),
            &g,
            d3([4, 4, 4])
        )
        .is_err());
    }

    #[test]
    fn swin_mask_examples() {
        let dims = d3([4, 4, 4]);
        let w = d3([2, 2, 2]);
        assert!(
            swin_mask(TokenCoord::new(0, 0, 0), TokenCoord::new(1, 1, 1), dims, w, false).unwrap()
        );
        assert!(
            !swin_mask(TokenCoord::new(1, 1, 1), TokenCoord::new(2, 1, 1), dims, w, false)
                .unwrap()
        );
        for shifted in [false, true] {
            assert!(swin_mask(
                TokenCoord::new(0, 3, 2),
                TokenCoord::new(3, 0, 1),
                dims,
                dims,
                shifted
            )
            .unwrap());
        }
    }

    #[test]
    fn swin_shift_moves_boundaries() {
        let dims = d3([4, 4, 4]);
        let w = d3([2, 2, 2]);
        // (1,1,1) and (2,1,1)... shifted cells on axis t: ((1+1)%4)/2 = 1 and
        // ((2+1)%4)/2 = 1, same cell once shifted.
        assert!(
            swin_mask(TokenCoord::new(1, 1, 1), TokenCoord::new(2, 1, 1), dims, w, true).unwrap()
        );
        // While (0,*,*) and (1,*,*) split apart under the shift.
        assert!(
            !swin_mask(TokenCoord::new(0, 1, 1), TokenCoord::new(1, 1, 1), dims, w, true).unwrap()
        );
    }

    #[test]
    fn clear_mask_examples() {
        let q = TokenCoord::new(0, 0, 0);
        assert!(clear_mask(q, q, 0.5));
        assert!(clear_mask(q, TokenCoord::new(0, 3, 4), 5.0));
        assert!(!clear_mask(q, TokenCoord::new(0, 3, 4), 4.9));
    }

    #[test]
    fn mask_spec_json_round_trip() {
        let spec = MaskSpec::Sta {
            window: d3([18, 24, 24]),
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"family":"sta","window":[18,24,24]}"#);
        assert_eq!(serde_json::from_str::<MaskSpec>(&json).unwrap(), spec);

        let swin: MaskSpec =
            serde_json::from_str(r#"{"family":"swin","window":[2,4,4]}"#).unwrap();
        assert_eq!(
            swin,
            MaskSpec::Swin {
                window: d3([2, 4, 4]),
                shifted: false
            }
        );
        let clear: MaskSpec = serde_json::from_str(r#"{"family":"clear","radius":16.0}"#).unwrap();
        assert_eq!(clear, MaskSpec::Clear { radius: 16.0 });
        let full: MaskSpec = serde_json::from_str(r#"{"family":"full"}"#).unwrap();
        assert_eq!(full, MaskSpec::Full);
    }

    #[test]
    fn classify_full_is_all_dense() {
        let g = grid([4, 4, 4], [2, 2, 2]);
        let map = classify_blocks(&MaskSpec::Full, &g).unwrap();
        let nb = map.num_blocks() as u64;
        assert_eq!(map.counts().dense, nb * nb);
        assert_eq!(map.counts().mixed, 0);
        assert_eq!(map.counts().empty, 0);
        assert_eq!(map.attended_pairs(), 64 * 64);
        assert_eq!(map.sparsity(), 0.0);
    }

    #[test]
    fn classify_counts_are_consistent() {
        let g = grid([8, 8, 8], [2, 2, 2]);
        for spec in [
            MaskSpec::Sta {
                window: d3([6, 6, 6]),
            },
            MaskSpec::TiledNatten {
                window: d3([5, 5, 5]),
            },
            MaskSpec::Natten {
                window: d3([3, 3, 3]),
            },
            MaskSpec::Swin {
                window: d3([4, 4, 4]),
                shifted: true,
            },
            MaskSpec::Clear { radius: 2.5 },
        ] {
            let map = classify_blocks(&spec, &g).unwrap();
            let c = map.counts();
            let nb = map.num_blocks() as u64;
            assert_eq!(c.dense + c.mixed + c.empty, nb * nb, "{spec:?}");
        }
    }

    #[test]
    fn sta_analytic_examples() {
        let g = grid([48, 48, 48], [4, 4, 4]);
        assert_eq!(
            sta_block_counts_analytic(&g, d3([12, 12, 12])).unwrap(),
            46656
        );
        let hunyuan = grid([30, 48, 80], [6, 8, 8]);
        assert_eq!(
            sta_block_counts_analytic(&hunyuan, d3([18, 24, 24])).unwrap(),
            8100
        );
        // Window = dims: every block pair is dense.
        let small = grid([4, 4, 4], [4, 4, 4]);
        assert_eq!(sta_block_counts_analytic(&small, d3([4, 4, 4])).unwrap(), 1);
    }

    #[test]
    fn natten_analytic_examples() {
        let g = grid([8, 8, 8], [2, 2, 2]);
        let c = natten_block_counts_analytic(&g, d3([3, 3, 3]));
        assert_eq!(c.dense, 64);
        assert_eq!(c.mixed, 1664);

        // W < 2T-1 per axis gives zero dense blocks.
        let g2 = grid([16, 16, 16], [4, 4, 4]);
        let c2 = natten_block_counts_analytic(&g2, d3([5, 5, 5]));
        assert_eq!(c2.dense, 0);

        let table1 = grid([48, 48, 48], [4, 4, 4]);
        let c3 = natten_block_counts_analytic(&table1, d3([11, 11, 11]));
        assert_eq!(c3.dense, 1728);
        assert_eq!(c3.mixed, 214272);
    }

    #[test]
    fn sparsity_reproduces_reported_values() {
        let g = grid([30, 48, 80], [6, 8, 8]);
        let s1 = sparsity(
            &MaskSpec::Sta {
                window: d3([18, 24, 24]),
            },
            &g,
        )
        .unwrap();
        assert_eq!((s1 * 1e4).round() as i64, 9100);
        let s2 = sparsity(
            &MaskSpec::Sta {
                window: d3([30, 40, 40]),
            },
            &g,
        )
        .unwrap();
        assert_eq!((s2 * 1e4).round() as i64, 5833);
        assert_eq!(sparsity(&MaskSpec::Full, &g).unwrap(), 0.0);
    }

    #[test]
    fn kv_schedule_examples() {
        let g = grid([8, 8, 8], [2, 2, 2]);
        let map = classify_blocks(
            &MaskSpec::Sta {
                window: d3([6, 6, 6]),
            },
            &g,
        )
        .unwrap();
        let schedule = map.kv_block_schedule(0).unwrap();
        let expected: Vec<usize> = (0..3usize)
            .flat_map(|t| (0..3usize).flat_map(move |h| (0..3usize).map(move |w| t * 16 + h * 4 + w)))
            .collect();
        assert_eq!(schedule, expected);

        let full = classify_blocks(&MaskSpec::Full, &g).unwrap();
        assert_eq!(
            full.kv_block_schedule(5).unwrap(),
            (0..64).collect::<Vec<_>>()
        );

        // Window equal to the tile: each block attends only itself.
        let self_only = classify_blocks(
            &MaskSpec::Sta {
                window: d3([2, 2, 2]),
            },
            &g,
        )
        .unwrap();
        for qb in 0..self_only.num_blocks() {
            assert_eq!(self_only.kv_block_schedule(qb).unwrap(), vec![qb]);
        }

        assert!(map.kv_block_schedule(64).is_err());
    }

    #[test]
    fn pgm_render_layout() {
        let g = grid([4, 4, 4], [2, 2, 2]);
        let map = classify_blocks(
            &MaskSpec::Sta {
                window: d3([2, 2, 2]),
            },
            &g,
        )
        .unwrap();
        let mut buf = Vec::new();
        map.write_pgm(&mut buf).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&buf[..header.len()], header);
        let pixels = &buf[header.len()..];
        assert_eq!(pixels.len(), 64);
        // Self-only mask renders as the diagonal.
        for qb in 0..8 {
            for kb in 0..8 {
                let expected = if qb == kb { 0 } else { 255 };
                assert_eq!(pixels[qb * 8 + kb], expected);
            }
        }
    }

    #[test]
    fn fast_paths_match_reference() {
        let cases: Vec<(VideoGrid, MaskSpec)> = vec![
            (
                grid([8, 8, 8], [2, 2, 2]),
                MaskSpec::Sta {
                    window: d3([6, 6, 6]),
                },
            ),
            (
                grid([8, 8, 8], [2, 2, 2]),
                MaskSpec::TiledNatten {
                    window: d3([5, 5, 5]),
                },
            ),
            (
                grid([8, 8, 8], [2, 2, 2]),
                MaskSpec::Natten {
                    window: d3([3, 3, 3]),
                },
            ),
            (
                grid([4, 8, 8], [2, 2, 2]),
                MaskSpec::Swin {
                    window: d3([2, 4, 4]),
                    shifted: true,
                },
            ),
            (grid([6, 6, 6], [2, 2, 2]), MaskSpec::Clear { radius: 2.2 }),
            (grid([1, 8, 8], [1, 2, 2]), MaskSpec::Clear { radius: 3.0 }),
        ];
        for (g, spec) in cases {
            let fast = classify_blocks(&spec, &g).unwrap();
            let slow = classify_blocks_reference(&spec, &g).unwrap();
            assert_eq!(fast.types, slow.types, "{spec:?}");
            assert_eq!(fast.attended_pairs(), slow.attended_pairs(), "{spec:?}");
        }
    }
}
