//! Grayscale feature maps from convolution outputs: mean over channels, then
//! per-map min-max scaling to [0, 1].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::bundle::{BundleError, DumpBundle, LayerFilter, LayerKind};

#[derive(Debug, thiserror::Error)]
pub enum FmapError {
    #[error("bundle has no feature_map entries matching the selection")]
    NoFeatureMaps,
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl FmapError {
    pub fn code(&self) -> &'static str {
        match self {
            FmapError::NoFeatureMaps => "NoFeatureMaps",
            FmapError::Bundle(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer_index: usize,
    pub name: String,
    /// Values in [0, 1].
    pub grid: Array2<f64>,
}

pub fn channel_mean(t: ArrayView3<'_, f64>) -> Array2<f64> {
    t.mean_axis(Axis(0)).expect("C >= 1")
}

/// (m − min)/(max − min); a constant map becomes all zeros.
pub fn minmax_normalize(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let (lo, hi) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        let range = hi - lo;
        m.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
    } else {
        Array2::zeros(m.dim())
    }
}

pub fn feature_map(
    layer_index: usize,
    name: impl Into<String>,
    t: ArrayView3<'_, f64>,
) -> FeatureMap {
    FeatureMap {
        layer_index,
        name: name.into(),
        grid: minmax_normalize(channel_mean(t).view()),
    }
}

/// One map per selected `feature_map` entry, in forward order. `layer_index`
/// is the entry's position among all feature maps of the bundle.
pub fn featuremaps_for_bundle(
    bundle: &DumpBundle,
    selection: &LayerFilter,
) -> Result<Vec<FeatureMap>, FmapError> {
    let entries: Vec<_> = bundle
        .entries_of(LayerKind::FeatureMap)
        .enumerate()
        .filter(|(_, e)| selection.matches(&e.name))
        .collect();
    if entries.is_empty() {
        return Err(FmapError::NoFeatureMaps);
    }
    entries
        .par_iter()
        .map(|&(i, e)| {
            let t = bundle.load_entry(e)?;
            let dims: [usize; 3] = t.shape().try_into().expect("validated rank 3");
            let arr = Array3::from_shape_vec(dims, t.to_f64_vec()).expect("length validated");
            Ok(feature_map(i, e.name.clone(), arr.view()))
        })
        .collect()
}
