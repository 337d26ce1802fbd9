//! Coordinate systems for the 3D token grid, tile partitioning, and the
//! tile-major sequence flattening that makes sliding-tile blocks contiguous.
//!
//! Two flattening orders are used throughout the crate:
//!
//! * **zigzag**: conventional row-major scan, `i = t*(Lh*Lw) + h*Lw + w`;
//! * **tiled**: the grid is partitioned into tiles and tokens of one tile
//!   occupy consecutive sequence indices; tiles themselves are visited in
//!   zigzag order over the tile grid, and tokens within a tile in zigzag
//!   order over the tile extent.
//!
//! A 2D image grid is represented with `t = 1` and `tile.t = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

/// Extents along the (temporal, height, width) axes. All components are >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        let d = Dims3 { t, h, w };
        for axis in Axis::ALL {
            if d.axis(axis) == 0 {
                return Err(Error::ZeroExtent { axis });
            }
        }
        Ok(d)
    }

    pub fn axis(&self, axis: Axis) -> usize {
        match axis {
            Axis::T => self.t,
            Axis::H => self.h,
            Axis::W => self.w,
        }
    }

    /// Total number of lattice points, `t*h*w`.
    pub fn product(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// True when `self` divides `other` componentwise.
    pub fn divides(&self, other: &Dims3) -> bool {
        other.t.is_multiple_of(self.t) && other.h.is_multiple_of(self.h) && other.w.is_multiple_of(self.w)
    }

    /// Componentwise quotient. Caller must have checked divisibility.
    fn quotient(&self, tile: &Dims3) -> Dims3 {
        Dims3 {
            t: self.t / tile.t,
            h: self.h / tile.h,
            w: self.w / tile.w,
        }
    }

    /// Bounds-check a coordinate against these extents.
    pub fn check_contains(&self, c: TokenCoord) -> Result<()> {
        for axis in Axis::ALL {
            let value = c.axis(axis);
            let extent = self.axis(axis);
            if value >= extent {
                return Err(Error::OutOfBounds {
                    axis,
                    value,
                    extent,
                });
            }
        }
        Ok(())
    }

    /// All coordinates in zigzag order.
    pub fn iter_coords(&self) -> impl Iterator<Item = TokenCoord> + '_ {
        let (h, w) = (self.h, self.w);
        (0..self.t).flat_map(move |t| {
            (0..h).flat_map(move |hh| (0..w).map(move |ww| TokenCoord::new(t, hh, ww)))
        })
    }
}

impl TryFrom<[usize; 3]> for Dims3 {
    type Error = Error;
    fn try_from(v: [usize; 3]) -> Result<Self> {
        Dims3::new(v[0], v[1], v[2])
    }
}

impl From<Dims3> for [usize; 3] {
    fn from(d: Dims3) -> Self {
        d.as_array()
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.t, self.h, self.w)
    }
}

/// Parses the CLI form `t,h,w`.
impl std::str::FromStr for Dims3 {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidSpec(format!(
                "expected three comma-separated values `t,h,w`, got `{s}`"
            )));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| {
                Error::InvalidSpec(format!("`{p}` is not a non-negative integer in `{s}`"))
            })?;
        }
        Dims3::new(v[0], v[1], v[2])
    }
}

/// A token's position in the 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenCoord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenCoord {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        TokenCoord { t, h, w }
    }

    pub fn axis(&self, axis: Axis) -> usize {
        match axis {
            Axis::T => self.t,
            Axis::H => self.h,
            Axis::W => self.w,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

/// Position of a token in a flattened sequence, in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqIndex(pub usize);

impl std::fmt::Display for SeqIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Flattening order of token rows in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrder {
    /// Conventional row-major scan of the token grid.
    Zigzag,
    /// Tile-major order: tokens of each tile are consecutive.
    Tiled,
}

/// Row-major flattening: `i = t*(Lh*Lw) + h*Lw + w`.
pub fn zigzag_flatten(coord: TokenCoord, dims: Dims3) -> Result<SeqIndex> {
    dims.check_contains(coord)?;
    Ok(SeqIndex(
        coord.t * dims.h * dims.w + coord.h * dims.w + coord.w,
    ))
}

/// Inverse of [`zigzag_flatten`].
pub fn zigzag_unflatten(index: SeqIndex, dims: Dims3) -> Result<TokenCoord> {
    let n = dims.product();
    if index.0 >= n {
        return Err(Error::IndexOutOfRange {
            index: index.0,
            count: n,
        });
    }
    let plane = dims.h * dims.w;
    let t = index.0 / plane;
    let rem = index.0 % plane;
    Ok(TokenCoord::new(t, rem / dims.w, rem % dims.w))
}

/// A token grid together with its tile partition.
///
/// `tile` must divide `dims` componentwise; the block size `B` is the tile
/// volume, and the sequence splits into `N / B` blocks of `B` tokens each
/// under the tiled flattening.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridConfig", into = "GridConfig")]
pub struct VideoGrid {
    dims: Dims3,
    tile: Dims3,
    tile_grid: Dims3,
    block_size: usize,
}

/// JSON form of a grid: `{"dims":[t,h,w],"tile":[t,h,w]}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: Dims3,
    pub tile: Dims3,
}

impl TryFrom<GridConfig> for VideoGrid {
    type Error = Error;
    fn try_from(c: GridConfig) -> Result<Self> {
        VideoGrid::new(c.dims, c.tile)
    }
}

impl From<VideoGrid> for GridConfig {
    fn from(g: VideoGrid) -> Self {
        GridConfig {
            dims: g.dims,
            tile: g.tile,
        }
    }
}

impl VideoGrid {
    /// Builds a grid, rejecting tile shapes that do not divide the dims.
    pub fn new(dims: Dims3, tile: Dims3) -> Result<Self> {
        for axis in Axis::ALL {
            if !dims.axis(axis).is_multiple_of(tile.axis(axis)) {
                return Err(Error::NonDivisible {
                    what: "grid dims",
                    axis,
                    num: dims.axis(axis),
                    den: tile.axis(axis),
                });
            }
        }
        let tile_grid = dims.quotient(&tile);
        Ok(VideoGrid {
            dims,
            tile,
            tile_grid,
            block_size: tile.product(),
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn tile(&self) -> Dims3 {
        self.tile
    }

    /// Tile counts per axis, `dims / tile`.
    pub fn tile_grid(&self) -> Dims3 {
        self.tile_grid
    }

    /// Tokens per tile, `B = Tt*Th*Tw`.
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Total token count `N`.
    pub fn num_tokens(&self) -> usize {
        self.dims.product()
    }

    /// Number of query (equivalently key) blocks, `N / B`.
    pub fn num_blocks(&self) -> usize {
        self.tile_grid.product()
    }

    /// Tile coordinate containing a token coordinate.
    pub fn tile_of(&self, c: TokenCoord) -> TokenCoord {
        TokenCoord::new(c.t / self.tile.t, c.h / self.tile.h, c.w / self.tile.w)
    }

    /// Tile-major flattening: `i = tile_id * B + intra_id`, both ids zigzag.
    pub fn tile_flatten(&self, coord: TokenCoord) -> Result<SeqIndex> {
        self.dims.check_contains(coord)?;
        let tile_coord = self.tile_of(coord);
        let intra = TokenCoord::new(
            coord.t % self.tile.t,
            coord.h % self.tile.h,
            coord.w % self.tile.w,
        );
        let tile_id = zigzag_flatten(tile_coord, self.tile_grid)?.0;
        let intra_id = zigzag_flatten(intra, self.tile)?.0;
        Ok(SeqIndex(tile_id * self.block_size + intra_id))
    }

    /// Inverse of [`VideoGrid::tile_flatten`].
    pub fn tile_unflatten(&self, index: SeqIndex) -> Result<TokenCoord> {
        let n = self.num_tokens();
        if index.0 >= n {
            return Err(Error::IndexOutOfRange {
                index: index.0,
                count: n,
            });
        }
        let tile_id = index.0 / self.block_size;
        let intra_id = index.0 % self.block_size;
        let tile_coord = zigzag_unflatten(SeqIndex(tile_id), self.tile_grid)?;
        let intra = zigzag_unflatten(SeqIndex(intra_id), self.tile)?;
        Ok(TokenCoord::new(
            tile_coord.t * self.tile.t + intra.t,
            tile_coord.h * self.tile.h + intra.h,
            tile_coord.w * self.tile.w + intra.w,
        ))
    }

    /// Precomputed map from zigzag index to tile-order index:
    /// `perm[zigzag_flatten(c)] = tile_flatten(c)` for every coordinate.
    ///
    /// To reorder a zigzag-ordered tensor into tile order, scatter rows with
    /// `out[perm[i]] = in[i]`; gathering with the same permutation
    /// (`out[i] = in[perm[i]]`) restores zigzag order.
    pub fn tile_permutation(&self) -> Vec<usize> {
        let n = self.num_tokens();
        let mut perm = vec![0usize; n];
        for c in self.dims.iter_coords() {
            let zz = zigzag_flatten(c, self.dims).expect("in-bounds by construction");
            let tl = self.tile_flatten(c).expect("in-bounds by construction");
            perm[zz.0] = tl.0;
        }
        perm
    }

    /// Coordinate of sequence index `i` under the given flattening order.
    pub fn coord_of_index(&self, order: TokenOrder, index: SeqIndex) -> Result<TokenCoord> {
        match order {
            TokenOrder::Zigzag => zigzag_unflatten(index, self.dims),
            TokenOrder::Tiled => self.tile_unflatten(index),
        }
    }

    /// Sequence index of a coordinate under the given flattening order.
    pub fn index_of_coord(&self, order: TokenOrder, coord: TokenCoord) -> Result<SeqIndex> {
        match order {
            TokenOrder::Zigzag => zigzag_flatten(coord, self.dims),
            TokenOrder::Tiled => self.tile_flatten(coord),
        }
    }

    /// Coordinates of every sequence index under `order`, as a lookup table.
    pub fn coord_table(&self, order: TokenOrder) -> Vec<TokenCoord> {
        (0..self.num_tokens())
            .map(|i| {
                self.coord_of_index(order, SeqIndex(i))
                    .expect("index in range by construction")
            })
            .collect()
    }
}

/// Inverse of a permutation: `inv[perm[i]] = i`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], tile: [usize; 3]) -> VideoGrid {
        VideoGrid::new(
            Dims3::new(dims[0], dims[1], dims[2]).unwrap(),
            Dims3::new(tile[0], tile[1], tile[2]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zigzag_examples() {
        let d = Dims3::new(1, 4, 4).unwrap();
        assert_eq!(zigzag_flatten(TokenCoord::new(0, 1, 1), d).unwrap().0, 5);
        let big = Dims3::new(30, 48, 80).unwrap();
        assert_eq!(zigzag_flatten(TokenCoord::new(0, 0, 0), big).unwrap().0, 0);
        let d234 = Dims3::new(2, 3, 4).unwrap();
        assert_eq!(
            zigzag_flatten(TokenCoord::new(1, 2, 3), d234).unwrap().0,
            23
        );
    }

    #[test]
    fn zigzag_out_of_bounds_names_axis() {
        let d = Dims3::new(2, 3, 4).unwrap();
        let err = zigzag_flatten(TokenCoord::new(0, 3, 0), d).unwrap_err();
        match err {
            Error::OutOfBounds { axis, value, extent } => {
                assert_eq!(axis, Axis::H);
                assert_eq!(value, 3);
                assert_eq!(extent, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tile_flatten_examples() {
        let g = grid([1, 4, 4], [1, 2, 2]);
        // Tile (0,0,1) is tile_id 1, intra_id 0.
        assert_eq!(g.tile_flatten(TokenCoord::new(0, 0, 2)).unwrap().0, 4);
        assert_eq!(g.tile_flatten(TokenCoord::new(0, 0, 0)).unwrap().0, 0);

        let unit = grid([1, 4, 4], [1, 1, 1]);
        assert_eq!(unit.tile_flatten(TokenCoord::new(0, 2, 3)).unwrap().0, 11);
    }

    #[test]
    fn tile_unflatten_examples() {
        let g = grid([1, 4, 4], [1, 2, 2]);
        assert_eq!(
            g.tile_unflatten(SeqIndex(4)).unwrap(),
            TokenCoord::new(0, 0, 2)
        );
        assert_eq!(
            g.tile_unflatten(SeqIndex(0)).unwrap(),
            TokenCoord::new(0, 0, 0)
        );
        let single = grid([2, 2, 2], [2, 2, 2]);
        assert_eq!(
            single.tile_unflatten(SeqIndex(7)).unwrap(),
            TokenCoord::new(1, 1, 1)
        );
    }

    #[test]
    fn tile_unflatten_rejects_out_of_range() {
        let g = grid([2, 2, 2], [2, 2, 2]);
        assert!(matches!(
            g.tile_unflatten(SeqIndex(8)),
            Err(Error::IndexOutOfRange { index: 8, count: 8 })
        ));
    }

    #[test]
    fn permutation_examples() {
        let g = grid([1, 4, 4], [1, 2, 2]);
        let perm = g.tile_permutation();
        assert_eq!(perm[2], 4);

        // A single tile preserves zigzag order.
        let single = grid([2, 3, 4], [2, 3, 4]);
        let n = single.num_tokens();
        assert_eq!(single.tile_permutation(), (0..n).collect::<Vec<_>>());

        // Unit tiles reduce to plain zigzag.
        let unit = grid([2, 3, 4], [1, 1, 1]);
        assert_eq!(unit.tile_permutation(), (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn non_divisible_tile_rejected() {
        let dims = Dims3::new(4, 4, 4).unwrap();
        let tile = Dims3::new(3, 2, 2).unwrap();
        let err = VideoGrid::new(dims, tile).unwrap_err();
        assert!(matches!(
            err,
            Error::NonDivisible { axis: Axis::T, num: 4, den: 3, .. }
        ));
    }

    #[test]
    fn tile_contiguity() {
        // Every tile occupies B consecutive sequence indices.
        let g = grid([4, 6, 4], [2, 3, 2]);
        let b = g.block_size();
        let mut per_tile: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for c in g.dims().iter_coords() {
            let i = g.tile_flatten(c).unwrap().0;
            let tile_id = zigzag_flatten(g.tile_of(c), g.tile_grid()).unwrap().0;
            per_tile.entry(tile_id).or_default().push(i);
        }
        for (tile_id, mut ids) in per_tile {
            ids.sort_unstable();
            assert_eq!(ids.len(), b);
            assert_eq!(ids[0], tile_id * b);
            assert_eq!(ids[b - 1], tile_id * b + b - 1);
        }
    }

    #[test]
    fn grid_config_json_round_trip() {
        let g = grid([30, 48, 80], [6, 8, 8]);
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"dims":[30,48,80],"tile":[6,8,8]}"#);
        let back: VideoGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn dims_from_str() {
        let d: Dims3 = "30,48,80".parse().unwrap();
        assert_eq!(d.as_array(), [30, 48, 80]);
        assert!("30,48".parse::<Dims3>().is_err());
        assert!("a,b,c".parse::<Dims3>().is_err());
        assert!("0,1,1".parse::<Dims3>().is_err());
    }
}
