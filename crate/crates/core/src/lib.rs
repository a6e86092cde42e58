//! Representation analysis over activation dump bundles.
//!
//! - [`cka`]: linear CKA between layers and layer×layer similarity matrices
//! - [`attnmask`]: per-layer attention weight masks and image overlays
//! - [`fmap`]: channel-averaged grayscale feature maps
//! - [`imaging`]: PGM/PPM encoders, heatmap palettes, montages, CSV
//! - [`bundle`] and [`npy`]: the on-disk interchange format
//! - [`registry`]: runtime-selectable strategies (CKA route, mask row,
//!   upsampler, palette)

pub mod attnmask;
pub mod bundle;
pub mod cka;
pub mod fmap;
pub mod imaging;
pub mod npy;
pub mod registry;
pub mod tensor;

pub use attnmask::{build_mask_set, AttentionStack, MaskError, MaskSet, WeightMask};
pub use bundle::{load_bundle, BundleError, DumpBundle, LayerEntry, LayerFilter, LayerKind};
pub use cka::{cka, cka_matrix, ActivationMatrix, CkaError, CkaMatrix, GramMatrix};
pub use fmap::{featuremaps_for_bundle, FeatureMap, FmapError};
pub use imaging::{ColorStops, ImageRGB, ImagingError, Palette};
pub use npy::{read_npy, write_npy, NpyError};
pub use registry::{Named, Registry, UnknownStrategy};
pub use tensor::{DenseTensor, Dtype, TensorData, TensorMeta};
