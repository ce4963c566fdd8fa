//! Shared grid types, normalization, tiling, L1 metrics and grid file I/O.
//!
//! Grids are row-major: row `i` runs along-track, column `j` runs in range
//! away from the sensor.

use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued 2-D grid with pixel spacing in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be > 0, got {spacing}")));
        }
        if values.len() != width * height {
            return Err(Error::dims(
                format!("{} values", width * height),
                format!("{} values", values.len()),
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at index {k}")));
        }
        Ok(Self {
            width,
            height,
            spacing,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, spacing: f64) -> Result<Self> {
        Self::new(width, height, spacing, vec![0.0; width * height])
    }

    /// Builds a grid from `f(row, col)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        spacing: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self::new(width, height, spacing, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }

    /// Applies `f` elementwise. Errors if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid> {
        Grid::new(
            self.width,
            self.height,
            self.spacing,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    /// Root mean square about zero.
    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// Copies the `size`x`size` block whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Grid> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::invalid(format!(
                "crop {width}x{height} at ({row},{col}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(width * height);
        for i in row..row + height {
            values.extend_from_slice(&self.values[i * self.width + col..i * self.width + col + width]);
        }
        Grid::new(width, height, self.spacing, values)
    }

    pub fn crop_center(&self, width: usize, height: usize) -> Result<Grid> {
        if width > self.width || height > self.height {
            return Err(Error::invalid("center crop larger than grid"));
        }
        self.crop((self.height - height) / 2, (self.width - width) / 2, width, height)
    }

    /// Rotates the grid content by `degrees` (counter-clockwise in row-up
    /// display) about the grid center using bilinear resampling. Samples
    /// falling outside the source are clamped to the nearest edge pixel.
    pub fn rotate(&self, degrees: f64) -> Grid {
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.height {
            for j in 0..self.width {
                let x = j as f64 - cx;
                let y = i as f64 - cy;
                // inverse map: source = R(-angle) * dest
                let sx = c * x + s * y + cx;
                let sy = -s * x + c * y + cy;
                values.push(self.sample_bilinear(sy, sx));
            }
        }
        Grid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            values,
        }
    }

    fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Seabed relief in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap(Grid);

impl HeightMap {
    pub fn new(grid: Grid) -> Self {
        HeightMap(grid)
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl Deref for HeightMap {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Non-negative sonar backscatter intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage(Grid);

impl IntensityImage {
    pub fn new(grid: Grid) -> Result<Self> {
        if let Some(k) = grid.values().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "intensity must be non-negative, found {} at index {k}",
                grid.values()[k]
            )));
        }
        Ok(IntensityImage(grid))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl Deref for IntensityImage {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Binary shadow map, `true` where the pixel is shadowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShadowMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

impl ShadowMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(
                format!("{} values", width * height),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.values.len() as f64
    }

    /// Grid view with 1.0 for shadowed pixels.
    pub fn to_grid(&self, spacing: f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            spacing,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Intensity,
    Relief,
}

/// Simulator fidelity: `A` is the pseudo-image emulation, `B` the
/// higher-fidelity stand-in used to exercise fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fidelity {
    #[default]
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub minimum: f64,
    pub maximum: f64,
    pub domain: Domain,
    pub fidelity: Fidelity,
}

impl NormalizationStats {
    pub fn new(minimum: f64, maximum: f64, domain: Domain, fidelity: Fidelity) -> Result<Self> {
        if !(minimum.is_finite() && maximum.is_finite()) || maximum < minimum {
            return Err(Error::invalid(format!(
                "normalization stats need finite min <= max, got [{minimum}, {maximum}]"
            )));
        }
        Ok(Self {
            minimum,
            maximum,
            domain,
            fidelity,
        })
    }

    /// Min/max over every value of every grid.
    pub fn from_grids<'a>(
        grids: impl IntoIterator<Item = &'a Grid>,
        domain: Domain,
        fidelity: Fidelity,
    ) -> Result<Self> {
        let (lo, hi) = grids
            .into_iter()
            .map(Grid::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
                (a.min(c), b.max(d))
            });
        Self::new(lo, hi, domain, fidelity)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `(x - min) / (max - min)`
    #[default]
    Range,
    /// `(x - min) / max`
    LiteralMax,
}

impl NormMode {
    fn denominator(self, stats: &NormalizationStats) -> f64 {
        match self {
            NormMode::Range => stats.maximum - stats.minimum,
            NormMode::LiteralMax => stats.maximum,
        }
    }
}

/// Affine, unclamped normalization. Degenerate stats (zero denominator)
/// produce an all-zero grid.
pub fn normalize(grid: &Grid, stats: &NormalizationStats, mode: NormMode) -> Grid {
    let denom = mode.denominator(stats);
    let values = if denom == 0.0 || stats.maximum == stats.minimum {
        vec![0.0; grid.len()]
    } else {
        grid.values
            .iter()
            .map(|&v| (v - stats.minimum) / denom)
            .collect()
    };
    Grid {
        values,
        ..grid.clone_shape()
    }
}

/// Inverse of [`normalize`]. With degenerate stats every value maps to the
/// minimum.
pub fn denormalize(grid: &Grid, stats: &NormalizationStats, mode: NormMode) -> Grid {
    let denom = mode.denominator(stats);
    let scale = if denom == 0.0 || stats.maximum == stats.minimum {
        0.0
    } else {
        denom
    };
    Grid {
        values: grid
            .values
            .iter()
            .map(|&v| v * scale + stats.minimum)
            .collect(),
        ..grid.clone_shape()
    }
}

impl Grid {
    fn clone_shape(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            values: Vec::new(),
        }
    }
}

/// Non-overlapping `tile_size` tiles in row-major order; partial edge tiles
/// are dropped.
pub fn tile(grid: &Grid, tile_size: usize) -> Result<Vec<Grid>> {
    if tile_size == 0 {
        return Err(Error::invalid("tile size must be >= 1"));
    }
    let rows = grid.height / tile_size;
    let cols = grid.width / tile_size;
    let mut tiles = Vec::with_capacity(rows * cols);
    for ti in 0..rows {
        for tj in 0..cols {
            tiles.push(grid.crop(ti * tile_size, tj * tile_size, tile_size, tile_size)?);
        }
    }
    Ok(tiles)
}

/// Reassembles tiles produced by [`tile`] into a `cols` x `rows` mosaic.
pub fn untile(tiles: &[Grid], cols: usize, rows: usize) -> Result<Grid> {
    if tiles.len() != cols * rows || tiles.is_empty() {
        return Err(Error::invalid(format!(
            "expected {} tiles, got {}",
            cols * rows,
            tiles.len()
        )));
    }
    let tw = tiles[0].width;
    let th = tiles[0].height;
    for t in tiles {
        tiles[0].check_same_shape(t)?;
    }
    let width = tw * cols;
    let mut values = vec![0.0; width * th * rows];
    for (k, t) in tiles.iter().enumerate() {
        let (ti, tj) = (k / cols, k % cols);
        for i in 0..th {
            let dst = (ti * th + i) * width + tj * tw;
            values[dst..dst + tw].copy_from_slice(t.row(i));
        }
    }
    Grid::new(width, th * rows, tiles[0].spacing, values)
}

/// Per-pixel mean absolute difference.
pub fn l1_error(a: &Grid, b: &Grid) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Batch loss: mean over the batch of per-image [`l1_error`].
pub fn batch_l1(predicted: &[Grid], desired: &[Grid]) -> Result<f64> {
    if predicted.len() != desired.len() || predicted.is_empty() {
        return Err(Error::dims(
            format!("{} images", desired.len()),
            format!("{} images", predicted.len()),
        ));
    }
    let mut total = 0.0;
    for (p, d) in predicted.iter().zip(desired) {
        total += l1_error(p, d)?;
    }
    Ok(total / predicted.len() as f64)
}

// ---------------------------------------------------------------------------
// Grid files
// ---------------------------------------------------------------------------

pub const GRID_MAGIC: &[u8; 8] = b"SRFGRID1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Height,
    Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub width: usize,
    pub height: usize,
    pub spacing_m: f64,
    pub kind: GridKind,
    pub min: f64,
    pub max: f64,
}

/// Layout: magic, u32 LE header length, JSON header, `width*height` f32 LE.
pub fn encode_grid(grid: &Grid, kind: GridKind) -> Result<Vec<u8>> {
    let (min, max) = grid.min_max();
    let header = GridHeader {
        width: grid.width,
        height: grid.height,
        spacing_m: grid.spacing,
        kind,
        min,
        max,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * grid.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in &grid.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], origin: &Path) -> Result<(GridKind, Grid)> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 12 {
        return Err(bad("file shorter than grid preamble"));
    }
    if &bytes[..8] != GRID_MAGIC {
        return Err(bad("bad magic, expected SRFGRID1"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: GridHeader = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| Error::format(origin, format!("header: {e}")))?;
    let n = header
        .width
        .checked_mul(header.height)
        .ok_or_else(|| bad("header dimensions overflow"))?;
    let payload = &bytes[body..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            origin,
            format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let grid = Grid::new(header.width, header.height, header.spacing_m, values)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    Ok((header.kind, grid))
}

pub fn write_grid(path: &Path, grid: &Grid, kind: GridKind) -> Result<()> {
    let bytes = encode_grid(grid, kind)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<(GridKind, Grid)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// Binary 16-bit PGM, min-max scaled to the full 0..=65535 range.
pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    let (lo, hi) = grid.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n65535\n", grid.width, grid.height).into_bytes();
    for &v in &grid.values {
        let q = (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(lo: f64, hi: f64) -> NormalizationStats {
        NormalizationStats::new(lo, hi, Domain::Relief, Fidelity::A).unwrap()
    }

    #[test]
    fn normalize_midpoint() {
        let g = Grid::new(3, 1, 1.0, vec![2.0, 4.0, 6.0]).unwrap();
        let n = normalize(&g, &stats(2.0, 6.0), NormMode::Range);
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_literal_max() {
        let g = Grid::new(1, 1, 1.0, vec![4.0]).unwrap();
        let n = normalize(&g, &stats(2.0, 6.0), NormMode::LiteralMax);
        assert_eq!(n.values(), &[2.0 / 6.0]);
    }

    #[test]
    fn normalize_degenerate_is_zero() {
        let g = Grid::new(2, 2, 1.0, vec![3.0; 4]).unwrap();
        for mode in [NormMode::Range, NormMode::LiteralMax] {
            assert!(normalize(&g, &stats(3.0, 3.0), mode).values().iter().all(|&v| v == 0.0));
        }
        assert!(normalize(&g, &stats(0.0, 0.0), NormMode::LiteralMax)
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_unclamped() {
        let g = Grid::new(1, 1, 1.0, vec![10.0]).unwrap();
        let n = normalize(&g, &stats(2.0, 6.0), NormMode::Range);
        assert!(n.values()[0] > 1.0);
    }

    #[test]
    fn denormalize_inverts() {
        let g = Grid::new(3, 1, 1.0, vec![-1.0, 0.25, 3.0]).unwrap();
        let s = stats(-1.0, 3.0);
        let back = denormalize(&normalize(&g, &s, NormMode::Range), &s, NormMode::Range);
        for (a, b) in back.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tile_counts() {
        let g512 = Grid::zeros(512, 512, 1.0).unwrap();
        assert_eq!(tile(&g512, 256).unwrap().len(), 4);
        let g300 = Grid::zeros(300, 300, 1.0).unwrap();
        assert_eq!(tile(&g300, 256).unwrap().len(), 1);
        let g = Grid::from_fn(256, 256, 1.0, |i, j| (i * 256 + j) as f64).unwrap();
        let t = tile(&g, 256).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0], g);
        let small = Grid::zeros(10, 10, 1.0).unwrap();
        assert!(tile(&small, 16).unwrap().is_empty());
        assert!(tile(&small, 0).is_err());
    }

    #[test]
    fn l1_basics() {
        let a = Grid::from_fn(4, 3, 1.0, |i, j| (i + j) as f64).unwrap();
        let b = a.map(|v| v + 0.5).unwrap();
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_error(&a, &b).unwrap(), 0.5);
        let c = Grid::zeros(3, 4, 1.0).unwrap();
        assert!(matches!(l1_error(&a, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn batch_l1_is_mean_of_image_means() {
        let z = Grid::zeros(2, 2, 1.0).unwrap();
        let one = z.map(|_| 1.0).unwrap();
        let three = z.map(|_| 3.0).unwrap();
        let l = batch_l1(&[one, three], &[z.clone(), z]).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn zero_grid_payload() {
        let g = Grid::zeros(2, 2, 0.5).unwrap();
        let bytes = encode_grid(&g, GridKind::Height).unwrap();
        assert_eq!(&bytes[..8], GRID_MAGIC);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12 + hlen..];
        assert_eq!(payload, &[0u8; 16]);
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["kind"], "height");
        assert_eq!(header["spacing_m"], 0.5);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let g = Grid::zeros(2, 2, 1.0).unwrap();
        let mut bytes = encode_grid(&g, GridKind::Intensity).unwrap();
        let p = Path::new("mem");
        assert!(decode_grid(&bytes, p).is_ok());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_grid(truncated, p), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_grid(&bytes, p), Err(Error::Format { .. })));
        assert!(decode_grid(b"SRFGRID1\xff\xff\x00\x00{}", p).is_err());
    }

    #[test]
    fn file_round_trip_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_fn(5, 3, 0.05, |i, j| (i as f32 * 0.3 - j as f32 * 1.7) as f64).unwrap();
        let p = dir.path().join("a.grid");
        write_grid(&p, &g, GridKind::Height).unwrap();
        let (kind, back) = read_grid(&p).unwrap();
        assert_eq!(kind, GridKind::Height);
        assert_eq!(back, g);
        let pgm = dir.path().join("a.pgm");
        write_pgm(&pgm, &g).unwrap();
        let bytes = fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n65535\n"));
        assert_eq!(bytes.len(), b"P5\n5 3\n65535\n".len() + 2 * 15);
    }

    #[test]
    fn rotate_zero_is_identity_and_constant_stays_constant() {
        let g = Grid::from_fn(8, 8, 1.0, |i, j| (i * 8 + j) as f64).unwrap();
        assert_eq!(g.rotate(0.0), g);
        let c = Grid::new(8, 8, 1.0, vec![2.5; 64]).unwrap();
        assert!(c.rotate(33.0).values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn rotate_quarter_turn_matches_transpose() {
        let g = Grid::from_fn(5, 5, 1.0, |i, j| (i * 5 + j) as f64).unwrap();
        let r = g.rotate(90.0);
        let back = r.rotate(-90.0);
        for (a, b) in back.values().iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_rejects_negative() {
        let g = Grid::new(2, 1, 1.0, vec![0.0, -0.1]).unwrap();
        assert!(IntensityImage::new(g).is_err());
    }

    fn f32_grid() -> impl Strategy<Value = Grid> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            prop::collection::vec(-1.0e6f32..1.0e6, w * h).prop_map(move |v| {
                Grid::new(w, h, 0.25, v.into_iter().map(f64::from).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn prop_file_round_trip_is_bitwise(g in f32_grid()) {
            let bytes = encode_grid(&g, GridKind::Intensity).unwrap();
            let (_, back) = decode_grid(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn prop_tile_untile(rows in 1usize..4, cols in 1usize..4, size in 1usize..6, seed in any::<u64>()) {
            let g = Grid::from_fn(cols * size, rows * size, 1.0,
                |i, j| crate::rng::mix64(seed ^ (i * 1000 + j) as u64) as f64).unwrap();
            let tiles = tile(&g, size).unwrap();
            prop_assert_eq!(untile(&tiles, cols, rows).unwrap(), g);
        }

        #[test]
        fn prop_l1_metric(a in f32_grid(), shift in -5.0f64..5.0) {
            let b = a.map(|v| v * 0.5 + shift).unwrap();
            let ab = l1_error(&a, &b).unwrap();
            prop_assert_eq!(ab, l1_error(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
            if ab == 0.0 { prop_assert_eq!(&a, &b); }
        }

        #[test]
        fn prop_range_maps_min_max_exactly(lo in -1e3f64..1e3, span in 1e-3f64..1e3) {
            let hi = lo + span;
            let g = Grid::new(2, 1, 1.0, vec![lo, hi]).unwrap();
            let n = normalize(&g, &stats(lo, hi), NormMode::Range);
            prop_assert_eq!(n.values(), &[0.0, 1.0]);
        }
    }
}
