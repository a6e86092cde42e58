//! Deterministic image output: binary PGM/PPM, heatmap palettes, montages and
//! CSV for similarity matrices.
//!
//! Every float-to-byte conversion goes through [`round_u8`] (nearest, ties
//! away from zero), so outputs are byte-reproducible.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::cka::CkaMatrix;
use crate::registry::Named;
use crate::tensor::{DenseTensor, TensorData};

pub const NA_COLOR: [u8; 3] = [128, 128, 128];
pub const PAD_COLOR: u8 = 255;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ImagingError {
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("image {index} is {actual_h}x{actual_w}, expected {h}x{w}")]
    SizeMismatch {
        index: usize,
        h: usize,
        w: usize,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("nothing to tile")]
    Empty,
    #[error("invalid color stops: {0}")]
    InvalidStops(String),
    #[error("tensor of shape {0:?} is not an image (expected (3, H, W) or (H, W))")]
    NotAnImage(Vec<usize>),
}

/// Rounds to the nearest integer (ties away from zero) and clamps to 0..=255.
pub fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Maps [0, 1] to 0..=255.
pub fn to_u8(unit: f64) -> u8 {
    round_u8(unit * 255.0)
}

/// Interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRGB {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = 3 * height * width;
        if pixels.len() != expected {
            return Err(ImagingError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            pixels: rgb.repeat(height * width),
        }
    }

    /// Replicates a [0, 1] grayscale grid across the three channels.
    pub fn from_gray(gray: ArrayView2<'_, f64>) -> Self {
        let (height, width) = gray.dim();
        let pixels = gray.iter().flat_map(|&v| [to_u8(v); 3]).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Converts an `input_image` tensor, either (3, H, W) planar or (H, W)
    /// gray. u8 tensors are taken as-is; float tensors are read as [0, 1].
    pub fn from_tensor(t: &DenseTensor) -> Result<Self, ImagingError> {
        let bytes: Vec<u8> = match t.data() {
            TensorData::U8(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| to_u8(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| to_u8(x)).collect(),
        };
        match *t.shape() {
            [3, h, w] => {
                let plane = h * w;
                let pixels = (0..plane)
                    .flat_map(|i| [bytes[i], bytes[plane + i], bytes[2 * plane + i]])
                    .collect();
                Ok(Self {
                    height: h,
                    width: w,
                    pixels,
                })
            }
            [h, w] => Ok(Self {
                height: h,
                width: w,
                pixels: bytes.iter().flat_map(|&b| [b; 3]).collect(),
            }),
            _ => Err(ImagingError::NotAnImage(t.shape().to_vec())),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scale_up(&self, factor: usize) -> Self {
        self.resize_nearest(self.height * factor, self.width * factor)
    }

    /// Nearest-neighbour resampling; source row = ⌊y·H/h⌋.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let mut pixels = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            let sy = y * self.height / h.max(1);
            for x in 0..w {
                pixels.extend_from_slice(&self.pixel(sy, x * self.width / w.max(1)));
            }
        }
        Self {
            height: h,
            width: w,
            pixels,
        }
    }
}

/// Binary P5, maxval 255. Values are expected in [0, 1].
pub fn encode_pgm(gray: ArrayView2<'_, f64>) -> Vec<u8> {
    let (h, w) = gray.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray.iter().map(|&v| to_u8(v)));
    out
}

/// Binary P6, maxval 255.
pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Maps a value in [0, 1] to a color.
pub trait Palette: Named + Send + Sync {
    fn color(&self, t: f64) -> [u8; 3];
}

/// Piecewise-linear palette through fixed stops.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorStops {
    name: &'static str,
    stops: Vec<(f64, [u8; 3])>,
}

impl ColorStops {
    /// Stops must start at 0, end at 1 and strictly increase.
    pub fn new(name: &'static str, stops: Vec<(f64, [u8; 3])>) -> Result<Self, ImagingError> {
        if stops.len() < 2 {
            return Err(ImagingError::InvalidStops("need at least two stops".into()));
        }
        if stops[0].0 != 0.0 || stops[stops.len() - 1].0 != 1.0 {
            return Err(ImagingError::InvalidStops(
                "first stop must be 0 and last 1".into(),
            ));
        }
        if stops
            .windows(2)
            .any(|w| w[0].0.partial_cmp(&w[1].0) != Some(std::cmp::Ordering::Less))
        {
            return Err(ImagingError::InvalidStops(
                "positions must strictly increase".into(),
            ));
        }
        Ok(Self { name, stops })
    }

    /// Dark blue → blue → cyan → yellow → red.
    pub fn heat() -> Self {
        Self::new(
            "heat",
            vec![
                (0.0, [0, 0, 64]),
                (0.25, [0, 0, 255]),
                (0.5, [0, 255, 255]),
                (0.75, [255, 255, 0]),
                (1.0, [255, 0, 0]),
            ],
        )
        .expect("valid stops")
    }

    pub fn gray() -> Self {
        Self::new("gray", vec![(0.0, [0, 0, 0]), (1.0, [255, 255, 255])]).expect("valid stops")
    }

    pub fn stops(&self) -> &[(f64, [u8; 3])] {
        &self.stops
    }
}

impl Named for ColorStops {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl Palette for ColorStops {
    fn color(&self, t: f64) -> [u8; 3] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let hi = self
            .stops
            .iter()
            .position(|(s, _)| *s >= t)
            .unwrap_or(self.stops.len() - 1);
        let (t1, c1) = self.stops[hi];
        if hi == 0 || t1 == t {
            return c1;
        }
        let (t0, c0) = self.stops[hi - 1];
        let f = (t - t0) / (t1 - t0);
        std::array::from_fn(|k| {
            let (a, b) = (f64::from(c0[k]), f64::from(c1[k]));
            round_u8(a + (b - a) * f)
        })
    }
}

/// Renders each cell as a `cell_px`² block; undefined cells are mid-gray.
pub fn colormap(matrix: &CkaMatrix, palette: &dyn Palette, cell_px: usize) -> ImageRGB {
    let cell_px = cell_px.max(1);
    let (rows, cols) = matrix.shape();
    let (h, w) = (rows * cell_px, cols * cell_px);
    let mut pixels = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let rgb = match matrix.get(y / cell_px, x / cell_px) {
                Some(v) => palette.color(v),
                None => NA_COLOR,
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    ImageRGB {
        height: h,
        width: w,
        pixels,
    }
}

/// Row-major montage on a white background.
pub fn tile_grid(
    images: &[ImageRGB],
    cols: usize,
    pad_px: usize,
) -> Result<ImageRGB, ImagingError> {
    let first = images.first().ok_or(ImagingError::Empty)?;
    let (th, tw) = (first.height, first.width);
    if let Some((index, img)) = images
        .iter()
        .enumerate()
        .find(|(_, i)| (i.height, i.width) != (th, tw))
    {
        return Err(ImagingError::SizeMismatch {
            index,
            h: th,
            w: tw,
            actual_h: img.height,
            actual_w: img.width,
        });
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let height = rows * th + (rows + 1) * pad_px;
    let width = cols * tw + (cols + 1) * pad_px;
    let mut out = ImageRGB::filled(height, width, [PAD_COLOR; 3]);
    for (k, img) in images.iter().enumerate() {
        let oy = pad_px + (k / cols) * (th + pad_px);
        let ox = pad_px + (k % cols) * (tw + pad_px);
        for y in 0..th {
            let src = &img.pixels[3 * y * tw..3 * (y + 1) * tw];
            let start = 3 * ((oy + y) * width + ox);
            out.pixels[start..start + 3 * tw].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Nine significant digits, no exponent.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return format!("{:.8}", 0.0);
    }
    let exponent = v.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header row of column labels (top-left cell empty), one row per row label.
pub fn write_csv(matrix: &CkaMatrix) -> Vec<u8> {
    let mut out = String::new();
    for label in &matrix.cols {
        out.push(',');
        out.push_str(&csv_field(label));
    }
    out.push('\n');
    for (label, row) in matrix.rows.iter().zip(&matrix.values) {
        out.push_str(&csv_field(label));
        for cell in row {
            match cell {
                Some(v) => write!(out, ",{}", format_sig9(*v)).unwrap(),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}
