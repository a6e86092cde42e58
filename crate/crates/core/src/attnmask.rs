//! Attention weight masks for vision transformers.
//!
//! Per layer: average the (heads, T, T) attention over heads, add the identity
//! for the residual path, row-normalize, then take one row's patch columns and
//! reshape them onto the √(T−1)×√(T−1) patch grid. All layers' masks are then
//! divided by one common factor so the largest entry across the set is 1.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{BundleError, DumpBundle, LayerFilter, LayerKind};
use crate::imaging::{round_u8, ImageRGB};
use crate::registry::Named;

const ROW_SUM_WARN_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("row {0} sums to zero; cannot normalize")]
    ZeroRow(usize),
    #[error("{0} patch tokens do not form a square grid")]
    NonSquarePatchCount(usize),
    #[error("every mask entry is zero; no common scale exists")]
    DegenerateAllZero,
    #[error("no attention layers")]
    EmptyStack,
    #[error("layer {layer}: shape {actual:?} differs from first layer {expected:?}")]
    InconsistentStack {
        layer: usize,
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("layer {layer}: invalid attention tensor: {reason}")]
    InvalidAttention { layer: usize, reason: String },
    #[error("image is {image_h}x{image_w} but mask map is {mask_h}x{mask_w}")]
    SizeMismatch {
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl MaskError {
    pub fn code(&self) -> &'static str {
        match self {
            MaskError::ZeroRow(_) => "ZeroRow",
            MaskError::NonSquarePatchCount(_) => "NonSquarePatchCount",
            MaskError::DegenerateAllZero => "DegenerateAllZero",
            MaskError::EmptyStack => "EmptyStack",
            MaskError::InconsistentStack { .. } => "InconsistentStack",
            MaskError::InvalidAttention { .. } => "InvalidAttention",
            MaskError::SizeMismatch { .. } => "SizeMismatch",
            MaskError::Bundle(e) => e.code(),
        }
    }
}

/// Attention tensors of every recorded layer, all (H, T, T).
#[derive(Debug, Clone)]
pub struct AttentionStack {
    layers: Vec<Array3<f64>>,
    /// Forward position of each layer among the bundle's attention entries.
    positions: Vec<usize>,
}

impl AttentionStack {
    pub fn new(layers: Vec<Array3<f64>>) -> Result<Self, MaskError> {
        let first = layers.first().ok_or(MaskError::EmptyStack)?;
        let expected: [usize; 3] = first.dim().into();
        for (i, layer) in layers.iter().enumerate() {
            let actual: [usize; 3] = layer.dim().into();
            let (h, t, t2) = layer.dim();
            if h == 0 || t < 2 || t != t2 {
                return Err(MaskError::InvalidAttention {
                    layer: i,
                    reason: format!("expected (H>=1, T>=2, T), got {actual:?}"),
                });
            }
            if actual != expected {
                return Err(MaskError::InconsistentStack {
                    layer: i,
                    expected,
                    actual,
                });
            }
            if let Some(v) = layer.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(MaskError::InvalidAttention {
                    layer: i,
                    reason: format!("entries must be finite and >= 0, found {v}"),
                });
            }
            let worst = layer
                .lanes(Axis(2))
                .into_iter()
                .map(|row| (row.sum() - 1.0).abs())
                .fold(0.0, f64::max);
            if worst > ROW_SUM_WARN_TOL {
                log::warn!("attention layer {i}: rows deviate from unit sum by up to {worst:.3e}");
            }
        }
        let positions = (0..layers.len()).collect();
        Ok(Self { layers, positions })
    }

    /// Attention entries of a bundle in forward order.
    pub fn from_bundle(bundle: &DumpBundle) -> Result<Self, MaskError> {
        Self::from_bundle_selected(bundle, &LayerFilter::all())
    }

    pub fn from_bundle_selected(
        bundle: &DumpBundle,
        selection: &LayerFilter,
    ) -> Result<Self, MaskError> {
        let (positions, layers): (Vec<_>, Vec<_>) = bundle
            .entries_of(LayerKind::Attention)
            .enumerate()
            .filter(|(_, e)| selection.matches(&e.name))
            .map(|(i, e)| {
                let t = bundle.load_entry(e)?;
                let dims: [usize; 3] = t.shape().try_into().expect("validated rank 3");
                Ok((
                    i,
                    Array3::from_shape_vec(dims, t.to_f64_vec()).expect("length validated"),
                ))
            })
            .collect::<Result<Vec<_>, BundleError>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            positions,
            ..Self::new(layers)?
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].dim().0
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].dim().1
    }

    pub fn layers(&self) -> &[Array3<f64>] {
        &self.layers
    }
}

pub fn mean_heads(a: ArrayView3<'_, f64>) -> Array2<f64> {
    a.mean_axis(Axis(0)).expect("at least one head")
}

pub fn add_residual(mut m: Array2<f64>) -> Array2<f64> {
    m.diag_mut().mapv_inplace(|v| v + 1.0);
    m
}

pub fn row_normalize(m: ArrayView2<'_, f64>) -> Result<Array2<f64>, MaskError> {
    let mut out = m.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if sum <= 0.0 {
            return Err(MaskError::ZeroRow(i));
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Which row of the normalized (T, T) matrix becomes the mask.
pub trait MaskRow: Named + Send + Sync {
    /// Returns a length-T row; column 0 (class token) is dropped by the caller.
    fn row(&self, normalized: ArrayView2<'_, f64>) -> Vec<f64>;
}

/// Row 0: how the class token attends to each patch.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassTokenRow;

impl Named for ClassTokenRow {
    fn name(&self) -> &'static str {
        "cls"
    }
}

impl MaskRow for ClassTokenRow {
    fn row(&self, normalized: ArrayView2<'_, f64>) -> Vec<f64> {
        normalized.row(0).to_vec()
    }
}

/// Mean over all rows: how much attention each token receives on average.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanRow;

impl Named for MeanRow {
    fn name(&self) -> &'static str {
        "mean"
    }
}

impl MaskRow for MeanRow {
    fn row(&self, normalized: ArrayView2<'_, f64>) -> Vec<f64> {
        normalized.mean_axis(Axis(0)).expect("T >= 2").to_vec()
    }
}

/// A square patch-grid mask for one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMask {
    pub layer_index: usize,
    #[serde(serialize_with = "serialize_grid")]
    pub grid: Array2<f64>,
}

fn serialize_grid<S: serde::Serializer>(grid: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(grid.nrows()))?;
    for row in grid.rows() {
        seq.serialize_element(&row.to_vec())?;
    }
    seq.end()
}

impl WeightMask {
    pub fn side(&self) -> usize {
        self.grid.nrows()
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.grid.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn grid_side(patches: usize) -> Option<usize> {
    let g = (patches as f64).sqrt().round() as usize;
    (g >= 1 && g * g == patches).then_some(g)
}

/// Class-token row of a normalized matrix, reshaped onto the patch grid.
pub fn extract_mask(m: ArrayView2<'_, f64>) -> Result<WeightMask, MaskError> {
    extract_mask_with(&ClassTokenRow, m, 0)
}

pub fn extract_mask_with(
    row: &dyn MaskRow,
    m: ArrayView2<'_, f64>,
    layer_index: usize,
) -> Result<WeightMask, MaskError> {
    let patches = m.nrows() - 1;
    let g = grid_side(patches).ok_or(MaskError::NonSquarePatchCount(patches))?;
    let values = row.row(m);
    let grid = Array2::from_shape_vec((g, g), values[1..].to_vec()).expect("g² = T − 1");
    Ok(WeightMask { layer_index, grid })
}

/// Masks for every layer, scaled so the largest entry over the set is 1.
#[derive(Debug, Clone, Serialize)]
pub struct MaskSet {
    /// Masks before the common scaling.
    pub raw: Vec<WeightMask>,
    pub masks: Vec<WeightMask>,
    /// Factor applied to every raw mask (1 / global max).
    pub scale: f64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn global_max(&self) -> f64 {
        self.masks
            .iter()
            .map(WeightMask::max)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn build_mask_set(stack: &AttentionStack) -> Result<MaskSet, MaskError> {
    build_mask_set_with(&ClassTokenRow, stack)
}

pub fn build_mask_set_with(
    row: &dyn MaskRow,
    stack: &AttentionStack,
) -> Result<MaskSet, MaskError> {
    let t = stack.tokens();
    if grid_side(t - 1).is_none() {
        return Err(MaskError::NonSquarePatchCount(t - 1));
    }
    let raw = stack
        .layers
        .par_iter()
        .zip(&stack.positions)
        .map(|(a, &i)| {
            let normalized = row_normalize(add_residual(mean_heads(a.view())).view())?;
            extract_mask_with(row, normalized.view(), i)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let global_max = raw
        .iter()
        .map(WeightMask::max)
        .fold(f64::NEG_INFINITY, f64::max);
    if global_max <= 0.0 {
        return Err(MaskError::DegenerateAllZero);
    }
    let scale = 1.0 / global_max;
    let masks = raw
        .iter()
        .map(|m| WeightMask {
            layer_index: m.layer_index,
            grid: m.grid.mapv(|v| v / global_max),
        })
        .collect();
    Ok(MaskSet { raw, masks, scale })
}

/// Resamples a patch-grid mask to image resolution. Intended for H, W ≥ grid side.
pub trait Upsampler: Named + Send + Sync {
    fn upsample(&self, mask: &WeightMask, h: usize, w: usize) -> Array2<f64>;
}

/// Each mask cell covers a ⌈H/g⌉×⌈W/g⌉ pixel block.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nearest;

impl Named for Nearest {
    fn name(&self) -> &'static str {
        "nearest"
    }
}

impl Upsampler for Nearest {
    fn upsample(&self, mask: &WeightMask, h: usize, w: usize) -> Array2<f64> {
        let (gh, gw) = mask.grid.dim();
        let bh = h.div_ceil(gh).max(1);
        let bw = w.div_ceil(gw).max(1);
        Array2::from_shape_fn((h, w), |(y, x)| {
            mask.grid[[(y / bh).min(gh - 1), (x / bw).min(gw - 1)]]
        })
    }
}

/// Bilinear interpolation with grid corners aligned to the image corners.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bilinear;

impl Named for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear"
    }
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    if dst_len <= 1 || src_len <= 1 {
        return (0, 0, 0.0);
    }
    let s = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

impl Upsampler for Bilinear {
    fn upsample(&self, mask: &WeightMask, h: usize, w: usize) -> Array2<f64> {
        let (gh, gw) = mask.grid.dim();
        let g = &mask.grid;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (y0, y1, fy) = source_coord(y, h, gh);
            let (x0, x1, fx) = source_coord(x, w, gw);
            let top = g[[y0, x0]] * (1.0 - fx) + g[[y0, x1]] * fx;
            let bottom = g[[y1, x0]] * (1.0 - fx) + g[[y1, x1]] * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

pub fn upsample(mask: &WeightMask, h: usize, w: usize, mode: &dyn Upsampler) -> Array2<f64> {
    mode.upsample(mask, h, w)
}

/// Multiplies every channel by the mask value at that pixel.
pub fn overlay(image: &ImageRGB, mask_map: ArrayView2<'_, f64>) -> Result<ImageRGB, MaskError> {
    let (mh, mw) = mask_map.dim();
    if (mh, mw) != (image.height, image.width) {
        return Err(MaskError::SizeMismatch {
            image_h: image.height,
            image_w: image.width,
            mask_h: mh,
            mask_w: mw,
        });
    }
    let pixels = image
        .pixels
        .chunks_exact(3)
        .zip(mask_map.iter())
        .flat_map(|(px, &m)| px.iter().map(move |&c| round_u8(f64::from(c) * m)))
        .collect();
    Ok(ImageRGB::new(image.height, image.width, pixels).expect("same dimensions"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mean_of_two_permutation_heads() {
        let a = Array3::from_shape_vec((2, 2, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(mean_heads(a.view()), array![[0.5, 0.5], [0.5, 0.5]]);
        let single = Array3::from_shape_vec((1, 2, 2), vec![0.1, 0.9, 0.3, 0.7]).unwrap();
        assert_eq!(mean_heads(single.view()), array![[0.1, 0.9], [0.3, 0.7]]);
    }

    #[test]
    fn residual_then_normalize() {
        let r = add_residual(array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(r, array![[1.5, 0.5], [0.5, 1.5]]);
        assert_eq!(add_residual(Array2::zeros((3, 3))), Array2::<f64>::eye(3));
        assert_eq!(
            row_normalize(r.view()).unwrap(),
            array![[0.75, 0.25], [0.25, 0.75]]
        );
        let stochastic = array![[0.2, 0.8], [1.0, 0.0]];
        assert_eq!(row_normalize(stochastic.view()).unwrap(), stochastic);
        assert!(matches!(
            row_normalize(array![[1.0, 0.0], [0.0, 0.0]].view()),
            Err(MaskError::ZeroRow(1))
        ));
    }

    #[test]
    fn extract_single_patch_and_grid_layout() {
        let m = array![[0.75, 0.25], [0.25, 0.75]];
        assert_eq!(extract_mask(m.view()).unwrap().grid, array![[0.25]]);

        let t = 65;
        let m = Array2::from_shape_fn((t, t), |(r, c)| (r * 1000 + c) as f64);
        let mask = extract_mask(m.view()).unwrap();
        assert_eq!(mask.side(), 8);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(mask.grid[[r, c]], (1 + 8 * r + c) as f64);
            }
        }
        assert!(matches!(
            extract_mask(Array2::<f64>::eye(4).view()),
            Err(MaskError::NonSquarePatchCount(3))
        ));
    }

    #[test]
    fn mean_row_strategy() {
        let m = array![[0.5, 0.5], [0.25, 0.75]];
        let mask = extract_mask_with(&MeanRow, m.view(), 0).unwrap();
        assert_eq!(mask.grid, array![[0.625]]);
    }

    #[test]
    fn uniform_fixture_hand_derived() {
        let stack = AttentionStack::new(vec![Array3::from_elem((1, 2, 2), 0.5)]).unwrap();
        let set = build_mask_set(&stack).unwrap();
        assert_eq!(set.masks[0].grid, array![[1.0]]);
        assert_eq!(set.raw[0].grid, array![[0.25]]);
        assert_eq!(set.scale, 4.0);
    }

    #[test]
    fn stack_validation() {
        assert!(matches!(
            AttentionStack::new(vec![]),
            Err(MaskError::EmptyStack)
        ));
        let a = Array3::from_elem((2, 4, 4), 0.25);
        let b = Array3::from_elem((2, 2, 2), 0.5);
        assert!(matches!(
            AttentionStack::new(vec![a.clone(), b]),
            Err(MaskError::InconsistentStack { layer: 1, .. })
        ));
        let mut neg = a.clone();
        neg[[0, 0, 0]] = -0.1;
        assert!(matches!(
            AttentionStack::new(vec![neg]),
            Err(MaskError::InvalidAttention { .. })
        ));
        let stack = AttentionStack::new(vec![a]).unwrap();
        assert!(matches!(
            build_mask_set(&stack),
            Err(MaskError::NonSquarePatchCount(3))
        ));
    }

    #[test]
    fn nearest_blocks() {
        let one = WeightMask {
            layer_index: 0,
            grid: array![[0.5]],
        };
        assert_eq!(Nearest.upsample(&one, 4, 4), Array2::from_elem((4, 4), 0.5));
        let two = WeightMask {
            layer_index: 0,
            grid: array![[1.0, 2.0], [3.0, 4.0]],
        };
        let up = Nearest.upsample(&two, 4, 4);
        assert_eq!(
            up,
            array![
                [1.0, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
                [3.0, 3.0, 4.0, 4.0],
                [3.0, 3.0, 4.0, 4.0]
            ]
        );
    }

    #[test]
    fn bilinear_midpoint_and_range() {
        let m = WeightMask {
            layer_index: 0,
            grid: array![[0.0, 1.0], [0.0, 1.0]],
        };
        let up = Bilinear.upsample(&m, 3, 3);
        for y in 0..3 {
            assert!((up[[y, 1]] - 0.5).abs() < 1e-9);
            assert_eq!(up[[y, 0]], 0.0);
            assert_eq!(up[[y, 2]], 1.0);
        }
        let one = WeightMask {
            layer_index: 0,
            grid: array![[0.5]],
        };
        assert_eq!(
            Bilinear.upsample(&one, 4, 4),
            Array2::from_elem((4, 4), 0.5)
        );
    }

    #[test]
    fn overlay_arithmetic() {
        let img = ImageRGB::new(1, 2, vec![200, 100, 0, 255, 255, 255]).unwrap();
        let out = overlay(&img, array![[0.25, 1.0]].view()).unwrap();
        assert_eq!(out.pixels, vec![50, 25, 0, 255, 255, 255]);
        let black = overlay(&img, Array2::zeros((1, 2)).view()).unwrap();
        assert!(black.pixels.iter().all(|&p| p == 0));
        assert!(matches!(
            overlay(&img, Array2::zeros((2, 2)).view()),
            Err(MaskError::SizeMismatch { .. })
        ));
    }
}
