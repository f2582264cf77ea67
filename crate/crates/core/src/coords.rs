//! Normalized coordinates, cell decoding, nearest-latent lookup, local
//! ensemble weights and the hierarchical positional encoding.
//!
//! Coordinates live in `[-1, 1]`; pixel `i` of an axis with `n` pixels sits at
//! `-1 + (2i + 1) / n`. Points `(x, y)` use `x` for columns and `y` for rows.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordError {
    #[error("scale factors must be positive and finite, got r_y={r_y}, r_x={r_x}")]
    Scale { r_y: f64, r_x: f64 },
    #[error("target extent below one pixel: r_y·H={th}, r_x·W={tw}")]
    Extent { th: f64, tw: f64 },
    #[error("hierarchical base must be at least 2, got {0}")]
    Base(u32),
}

/// Distance (in pixels) under which a position snaps onto a pixel center.
const SNAP_PX: f64 = 1e-9;

/// Upper clamp for local coordinates, keeping `floor(x·S^k) mod S` away from
/// the wrap-around at exactly 1.
pub const LOCAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
}

impl Coord {
    pub fn new(x: f64, y: f64) -> Self {
        Coord { x, y }
    }
}

/// Target pixel size in normalized units, `[2/(r_y·H), 2/(r_x·W)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub h: f64,
    pub w: f64,
}

impl Cell {
    /// Cell of a full target grid of `th × tw` pixels.
    pub fn for_target(th: usize, tw: usize) -> Self {
        Cell {
            h: 2.0 / th as f64,
            w: 2.0 / tw as f64,
        }
    }
}

/// Query coordinates sharing one cell size.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub coords: Vec<Coord>,
    pub cell: Cell,
}

impl QueryBatch {
    /// Every pixel center of a `th × tw` target, row-major.
    pub fn full_grid(th: usize, tw: usize) -> Self {
        let ys = make_coord_grid(th);
        let xs = make_coord_grid(tw);
        let coords = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| Coord { x, y }))
            .collect();
        QueryBatch {
            coords,
            cell: Cell::for_target(th, tw),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Pixel-center coordinates of an axis with `n` pixels.
pub fn make_coord_grid(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / nf).collect()
}

/// Continuous pixel index of normalized coordinate `c` on an `n`-pixel axis,
/// so that pixel centers map to integers. Values within 1e-9 px of an
/// integer snap to it.
pub fn pixel_position(c: f64, n: usize) -> f64 {
    let u = (c + 1.0) * 0.5 * n as f64 - 0.5;
    let r = u.round();
    if (u - r).abs() < SNAP_PX {
        r
    } else {
        u
    }
}

pub fn cell_of(r_y: f64, r_x: f64, h: usize, w: usize) -> Result<Cell, CoordError> {
    if !(r_y > 0.0 && r_x > 0.0 && r_y.is_finite() && r_x.is_finite()) {
        return Err(CoordError::Scale { r_y, r_x });
    }
    let (th, tw) = (r_y * h as f64, r_x * w as f64);
    if th < 1.0 || tw < 1.0 {
        return Err(CoordError::Extent { th, tw });
    }
    Ok(Cell {
        h: 2.0 / th,
        w: 2.0 / tw,
    })
}

/// Corner labels in `(row offset, column offset)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    C00,
    C01,
    C10,
    C11,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::C00, Corner::C01, Corner::C10, Corner::C11];
}

/// One of the four latent cells surrounding a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCorner {
    pub corner: Corner,
    pub row: usize,
    pub col: usize,
    pub center: Coord,
}

fn floor_ceil_clamped(u: f64, n: usize) -> (usize, usize) {
    let lo = u.floor();
    let hi = lo + 1.0;
    let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64) as usize;
    (clamp(lo), clamp(hi))
}

/// The four latent grid positions around `q` on an `h × w` latent map,
/// ordered `00, 01, 10, 11`. Indices are clamped into the grid, so corners
/// may coincide at the borders.
pub fn nearest_latents(q: Coord, h: usize, w: usize) -> [LatentCorner; 4] {
    let (r0, r1) = floor_ceil_clamped(pixel_position(q.y, h), h);
    let (c0, c1) = floor_ceil_clamped(pixel_position(q.x, w), w);
    let center = |r: usize, c: usize| Coord {
        x: -1.0 + (2 * c + 1) as f64 / w as f64,
        y: -1.0 + (2 * r + 1) as f64 / h as f64,
    };
    let mk = |corner, row, col| LatentCorner {
        corner,
        row,
        col,
        center: center(row, col),
    };
    [
        mk(Corner::C00, r0, c0),
        mk(Corner::C01, r0, c1),
        mk(Corner::C10, r1, c0),
        mk(Corner::C11, r1, c1),
    ]
}

/// Relative offset `q - x*` in latent-cell units, returned as `(dy, dx)`.
pub fn local_grid(q: Coord, star: Coord, h: usize, w: usize) -> (f64, f64) {
    ((q.y - star.y) * h as f64 / 2.0, (q.x - star.x) * w as f64 / 2.0)
}

fn axis_weights(q: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (d_lo, d_hi) = ((q - lo).abs(), (hi - q).abs());
    let total = d_lo + d_hi;
    if total == 0.0 {
        (0.5, 0.5)
    } else {
        (d_hi / total, d_lo / total)
    }
}

/// Area weights of the local ensemble for corners `00, 01, 10, 11`.
///
/// Each weight is the area spanned by `q` and the diagonally opposite corner,
/// normalized to sum to one. The area factorizes per axis, so the
/// normalization is done per axis; an axis with zero extent contributes
/// `1/2` to both sides (uniform `1/4` when both axes collapse).
pub fn ensemble_weights(q: Coord, corners: &[Coord; 4]) -> [f64; 4] {
    let (wy0, wy1) = axis_weights(q.y, corners[0].y, corners[2].y);
    let (wx0, wx1) = axis_weights(q.x, corners[0].x, corners[1].x);
    [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1]
}

/// Offset of `q` from corner `00` in latent-cell units, clamped to
/// `[0, 1 - LOCAL_EPS]`. Returned as `(x_local, y_local)`.
pub fn local_normalized_coord(q: Coord, star00: Coord, h: usize, w: usize) -> (f64, f64) {
    let clamp = |v: f64| v.clamp(0.0, 1.0 - LOCAL_EPS);
    (
        clamp((q.x - star00.x) * w as f64 / 2.0),
        clamp((q.y - star00.y) * h as f64 / 2.0),
    )
}

/// Level-`l` base-`s` digit pair `floor(coord · s^(l+1)) mod s`.
pub fn hierarchical_encode(x_local: f64, y_local: f64, level: usize, s: u32) -> (u32, u32) {
    let f = (s as f64).powi(level as i32 + 1);
    let digit = |v: f64| ((v * f).floor() as u64 % s as u64) as u32;
    (digit(x_local), digit(y_local))
}

/// Digit pairs for levels `0..levels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierDigits {
    pub base: u32,
    pub digits: Vec<(u32, u32)>,
}

impl HierDigits {
    pub fn new(x_local: f64, y_local: f64, levels: usize, base: u32) -> Result<Self, CoordError> {
        if base < 2 {
            return Err(CoordError::Base(base));
        }
        let digits = (0..levels)
            .map(|l| hierarchical_encode(x_local, y_local, l, base))
            .collect();
        Ok(HierDigits { base, digits })
    }

    /// `Σ_l digit_l · S^-(l+1)` per axis, as `(x, y)`.
    pub fn reconstruct(&self) -> (f64, f64) {
        let s = self.base as f64;
        self.digits
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(ax, ay), (l, &(dx, dy))| {
                let f = s.powi(-(l as i32 + 1));
                (ax + dx as f64 * f, ay + dy as f64 * f)
            })
    }
}

/// Centered value of digit `d` in base `s`: `2(d + 0.5)/s - 1`, in `(-1, 1)`.
pub fn embed_digit(d: u32, s: u32) -> f64 {
    2.0 * (d as f64 + 0.5) / s as f64 - 1.0
}
