//! Dense CHW tensors and the grid primitives shared by images and feature maps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Channel-major raster of `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} samples do not fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, value: f32) {
        self.data[(ch * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[ch * plane..(ch + 1) * plane]
    }
}

/// Rows and columns of a grid tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Grid(format!("{rows}x{cols} has an empty axis")));
        }
        Ok(Self { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn transposed(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
    }

    /// `(row, col)` of cell `k` in row-major order.
    pub fn position(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }
}

impl fmt::Display for GridGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Grid(format!("expected \"RxC\", got {s:?}"));
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let rows = r.parse().map_err(|_| bad())?;
        let cols = c.parse().map_err(|_| bad())?;
        Self::new(rows, cols)
    }
}

impl Serialize for GridGeometry {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GridGeometry {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated list such as `"1x2,2x2,2x3"`.
pub fn parse_grid_list(s: &str) -> Result<Vec<GridGeometry>> {
    let grids = s
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<GridGeometry>>>()?;
    if grids.is_empty() {
        return Err(Error::Grid("empty grid list".into()));
    }
    Ok(grids)
}

/// Source coordinate and the two taps for one output index, align-corners style.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = if output > 1 {
        (input - 1) as f64 / (output - 1) as f64
    } else {
        0.0
    };
    (0..output)
        .map(|i| {
            let src = scale * i as f64;
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = (src - lo as f64).clamp(0.0, 1.0);
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resampling with corner-aligned coordinates.
///
/// Output `(i, j)` samples the input at `(i·(H−1)/(out_h−1), j·(W−1)/(out_w−1))`;
/// a unit output axis samples source coordinate 0. Weights and accumulation are
/// `f64`; the result is rounded once to `f32`.
pub fn bilinear_downsample(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "cannot resample to {out_h}x{out_w}"
        )));
    }
    if out_h > img.height || out_w > img.width {
        return Err(Error::Shape(format!(
            "upsampling {}x{} to {out_h}x{out_w} is not supported",
            img.height, img.width
        )));
    }
    let rows = taps(img.height, out_h);
    let cols = taps(img.width, out_w);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for ch in 0..img.channels {
        for r in &rows {
            for c in &cols {
                let p00 = img.get(ch, r.lo, c.lo) as f64;
                let p01 = img.get(ch, r.lo, c.hi) as f64;
                let p10 = img.get(ch, r.hi, c.lo) as f64;
                let p11 = img.get(ch, r.hi, c.hi) as f64;
                let top = (1.0 - c.frac) * p00 + c.frac * p01;
                let bottom = (1.0 - c.frac) * p10 + c.frac * p11;
                data.push(((1.0 - r.frac) * top + r.frac * bottom) as f32);
            }
        }
    }
    ImageTensor::new(img.channels, out_h, out_w, data)
}

/// Tiles `cells` row-major into a `geom` grid with no padding between cells.
///
/// `None` cells are filled with `fill`. At least one cell must be present so
/// the cell shape is known.
pub fn grid_compose(
    cells: &[Option<&ImageTensor>],
    geom: GridGeometry,
    fill: f32,
) -> Result<ImageTensor> {
    if cells.len() != geom.cells() {
        return Err(Error::Grid(format!(
            "{} cells supplied for a {geom} grid",
            cells.len()
        )));
    }
    let first = cells
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Grid("grid has no non-empty cell".into()))?;
    let (channels, ch_h, ch_w) = first.shape();
    if let Some(bad) = cells.iter().flatten().find(|c| c.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "cell shape {:?} differs from {:?}",
            bad.shape(),
            first.shape()
        )));
    }

    let out_h = geom.rows * ch_h;
    let out_w = geom.cols * ch_w;
    let mut data = vec![fill; channels * out_h * out_w];
    for (k, cell) in cells.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let (gr, gc) = geom.position(k);
        for ch in 0..channels {
            let src = cell.channel(ch);
            for y in 0..ch_h {
                let dst = (ch * out_h + gr * ch_h + y) * out_w + gc * ch_w;
                data[dst..dst + ch_w].copy_from_slice(&src[y * ch_w..(y + 1) * ch_w]);
            }
        }
    }
    ImageTensor::new(channels, out_h, out_w, data)
}

/// Cuts `img` into `geom.cells()` equal blocks, row-major.
pub fn grid_split(img: &ImageTensor, geom: GridGeometry) -> Result<Vec<ImageTensor>> {
    if img.height % geom.rows != 0 || img.width % geom.cols != 0 {
        return Err(Error::Grid(format!(
            "{}x{} is not divisible by a {geom} grid",
            img.height, img.width
        )));
    }
    (0..geom.cells())
        .map(|k| extract_cell(img, geom, k))
        .collect()
}

/// Block `k` of `img` under `geom`; dimensions must already be divisible.
pub(crate) fn extract_cell(img: &ImageTensor, geom: GridGeometry, k: usize) -> Result<ImageTensor> {
    let ch_h = img.height / geom.rows;
    let ch_w = img.width / geom.cols;
    let (gr, gc) = geom.position(k);
    let mut data = Vec::with_capacity(img.channels * ch_h * ch_w);
    for ch in 0..img.channels {
        for y in 0..ch_h {
            let src = (ch * img.height + gr * ch_h + y) * img.width + gc * ch_w;
            data.extend_from_slice(&img.data[src..src + ch_w]);
        }
    }
    ImageTensor::new(img.channels, ch_h, ch_w, data)
}

/// Downsamples each present cell to the block size for `geom` and composes them.
///
/// This is the mixed-image construction: every member is resized to
/// `(H / rows, W / cols)` and placed row-major; missing cells become `fill`.
pub fn downsample_and_compose(
    cells: &[Option<&ImageTensor>],
    geom: GridGeometry,
    height: usize,
    width: usize,
    fill: f32,
) -> Result<ImageTensor> {
    if height % geom.rows != 0 || width % geom.cols != 0 {
        return Err(Error::Grid(format!(
            "resolution {height}x{width} is not divisible by a {geom} grid"
        )));
    }
    let (cell_h, cell_w) = (height / geom.rows, width / geom.cols);
    let resized = cells
        .par_iter()
        .map(|c| {
            c.map(|img| bilinear_downsample(img, cell_h, cell_w))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Option<&ImageTensor>> = resized.iter().map(Option::as_ref).collect();
    grid_compose(&refs, geom, fill)
}
