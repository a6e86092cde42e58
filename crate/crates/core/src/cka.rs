//! Linear centered kernel alignment (CKA) between layer representations.
//!
//! For activations X (m×p1) and Y (m×p2) over the same m examples, with
//! Gram matrices K = XXᵀ, L = YYᵀ and centering H = I − 11ᵀ/m:
//!
//! ```text
//! HSIC(K, L) = tr(KHLH) / (m−1)²
//! CKA(K, L)  = HSIC(K, L) / sqrt(HSIC(K, K) · HSIC(L, L))
//! ```
//!
//! Because HKH = XcXcᵀ for the column-centered Xc, tr(KHLH) can be evaluated
//! either as ⟨XcXcᵀ, YcYcᵀ⟩_F (Gram route, O(m²p)) or as ‖YcᵀXc‖²_F
//! (feature route, O(mp1p2)). Both are available as [`CkaRoute`] strategies;
//! [`AutoRoute`] picks by cost. All accumulation is in f64.

use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{BundleError, DumpBundle, LayerFilter, LayerKind};
use crate::registry::Named;
use crate::tensor::DenseTensor;

/// Relative threshold under which a layer is treated as carrying no variance.
pub const ZERO_VARIANCE_REL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CkaError {
    #[error("dimension mismatch: {0} vs {1} examples")]
    DimensionMismatch(usize, usize),
    #[error("layer {0:?} has zero variance; similarity is undefined")]
    ZeroVariance(String),
    #[error("invalid activation matrix {layer:?}: {reason}")]
    InvalidActivation { layer: String, reason: String },
    #[error("invalid Gram matrix: {0}")]
    InvalidGram(String),
    #[error("bundles were recorded on different sample_ids")]
    SampleMismatch,
    #[error("layer selection matched no activation entries in {0}")]
    EmptySelection(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl CkaError {
    pub fn code(&self) -> &'static str {
        match self {
            CkaError::DimensionMismatch(..) => "DimensionMismatch",
            CkaError::ZeroVariance(_) => "ZeroVariance",
            CkaError::InvalidActivation { .. } => "InvalidActivation",
            CkaError::InvalidGram(_) => "InvalidGram",
            CkaError::SampleMismatch => "SampleMismatch",
            CkaError::EmptySelection(_) => "EmptySelection",
            CkaError::Bundle(e) => e.code(),
        }
    }
}

/// One layer's representation: m examples (rows) by p features.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer: String,
    values: Array2<f64>,
}

impl ActivationMatrix {
    pub fn new(layer: impl Into<String>, values: Array2<f64>) -> Result<Self, CkaError> {
        let layer = layer.into();
        let invalid = |reason: String| CkaError::InvalidActivation {
            layer: layer.clone(),
            reason,
        };
        if values.nrows() < 2 {
            return Err(invalid(format!(
                "need m >= 2 examples, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(invalid("need p >= 1 features".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite entry".into()));
        }
        Ok(Self { layer, values })
    }

    /// Builds from a row-major buffer of m·p values.
    pub fn from_rows(
        layer: impl Into<String>,
        m: usize,
        p: usize,
        data: Vec<f64>,
    ) -> Result<Self, CkaError> {
        let layer = layer.into();
        let values =
            Array2::from_shape_vec((m, p), data).map_err(|e| CkaError::InvalidActivation {
                layer: layer.clone(),
                reason: e.to_string(),
            })?;
        Self::new(layer, values)
    }

    /// Flattens every axis after the first: (m, C, H, W) becomes (m, C·H·W).
    pub fn from_tensor(layer: impl Into<String>, t: &DenseTensor) -> Result<Self, CkaError> {
        let layer = layer.into();
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(CkaError::InvalidActivation {
                layer,
                reason: format!("expected rank >= 2, got shape {shape:?}"),
            });
        }
        let m = shape[0];
        let p = shape[1..].iter().product();
        Self::from_rows(layer, m, p, t.to_f64_vec())
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            layer: self.layer.clone(),
            values: &self.values * factor,
        }
    }
}

/// Subtracts each column's mean.
pub fn center_columns(x: &ActivationMatrix) -> ActivationMatrix {
    let mean = x.values.mean_axis(Axis(0)).expect("m >= 2");
    ActivationMatrix {
        layer: x.layer.clone(),
        values: &x.values - &mean,
    }
}

/// A symmetric m×m kernel matrix over examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, CkaError> {
        let (r, c) = values.dim();
        if r != c {
            return Err(CkaError::InvalidGram(format!("not square: {r}x{c}")));
        }
        if r < 2 {
            return Err(CkaError::InvalidGram(format!("need m >= 2, got {r}")));
        }
        for i in 0..r {
            for j in 0..i {
                let (a, b) = (values[[i, j]], values[[j, i]]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(CkaError::InvalidGram("non-finite entry".into()));
                }
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(CkaError::InvalidGram(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { values })
    }

    /// K = XXᵀ.
    pub fn linear(x: &ActivationMatrix) -> Self {
        Self {
            values: symmetric_gram(x.values.view()),
        }
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// HKH: subtract row and column means, add back the grand mean.
    pub fn centered(&self) -> Array2<f64> {
        let m = self.m();
        let row_mean = self.values.mean_axis(Axis(1)).expect("m >= 2");
        let col_mean = self.values.mean_axis(Axis(0)).expect("m >= 2");
        let grand = row_mean.sum() / m as f64;
        Array2::from_shape_fn((m, m), |(i, j)| {
            self.values[[i, j]] - row_mean[i] - col_mean[j] + grand
        })
    }
}

fn symmetric_gram(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g = x.dot(&x.t());
    let m = g.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    g
}

/// Biased HSIC estimator tr(KHLH)/(m−1)².
pub fn hsic_biased(k: &GramMatrix, l: &GramMatrix) -> Result<f64, CkaError> {
    if k.m() != l.m() {
        return Err(CkaError::DimensionMismatch(k.m(), l.m()));
    }
    let m = k.m() as f64;
    let kc = k.centered();
    let lc = l.centered();
    Ok(frobenius_inner(kc.view(), lc.view()) / ((m - 1.0) * (m - 1.0)))
}

fn frobenius_inner(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// A column-centered layer with its centered Gram matrix computed on first use.
#[derive(Debug)]
pub struct CenteredLayer {
    pub layer: String,
    centered: Array2<f64>,
    gram: OnceLock<Array2<f64>>,
    /// ‖X‖⁴_F of the uncentered input; reference magnitude for the zero-variance test.
    scale: f64,
}

impl CenteredLayer {
    pub fn new(x: &ActivationMatrix) -> Self {
        let norm_sq: f64 = x.values.iter().map(|v| v * v).sum();
        Self {
            layer: x.layer.clone(),
            centered: center_columns(x).values,
            gram: OnceLock::new(),
            scale: norm_sq * norm_sq,
        }
    }

    pub fn m(&self) -> usize {
        self.centered.nrows()
    }

    pub fn p(&self) -> usize {
        self.centered.ncols()
    }

    pub fn centered(&self) -> ArrayView2<'_, f64> {
        self.centered.view()
    }

    /// XcXcᵀ, which equals HKH.
    pub fn gram(&self) -> ArrayView2<'_, f64> {
        self.gram
            .get_or_init(|| symmetric_gram(self.centered.view()))
            .view()
    }
}

/// A way of evaluating tr(KHLH) for two centered layers. Implementations
/// return the unnormalized trace; the (m−1)² factor cancels in CKA.
pub trait CkaRoute: Named + Send + Sync {
    fn cross(&self, x: &CenteredLayer, y: &CenteredLayer) -> f64;
}

/// ⟨XcXcᵀ, YcYcᵀ⟩_F using cached Gram matrices.
#[derive(Debug, Clone, Copy, Default)]
pub struct GramRoute;

impl Named for GramRoute {
    fn name(&self) -> &'static str {
        "gram"
    }
}

impl CkaRoute for GramRoute {
    fn cross(&self, x: &CenteredLayer, y: &CenteredLayer) -> f64 {
        frobenius_inner(x.gram(), y.gram())
    }
}

/// ‖YcᵀXc‖²_F, cheaper when features are fewer than examples.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureRoute;

impl Named for FeatureRoute {
    fn name(&self) -> &'static str {
        "feature"
    }
}

impl CkaRoute for FeatureRoute {
    fn cross(&self, x: &CenteredLayer, y: &CenteredLayer) -> f64 {
        let c = y.centered.t().dot(&x.centered);
        c.iter().map(|v| v * v).sum()
    }
}

/// Gram route when m ≤ p for either layer, feature route otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct AutoRoute;

impl Named for AutoRoute {
    fn name(&self) -> &'static str {
        "auto"
    }
}

impl CkaRoute for AutoRoute {
    fn cross(&self, x: &CenteredLayer, y: &CenteredLayer) -> f64 {
        if x.m() <= x.p().max(y.p()) {
            GramRoute.cross(x, y)
        } else {
            FeatureRoute.cross(x, y)
        }
    }
}

/// Linear CKA using the cost-selected route.
pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64, CkaError> {
    cka_with(&AutoRoute, x, y)
}

pub fn cka_with(
    route: &dyn CkaRoute,
    x: &ActivationMatrix,
    y: &ActivationMatrix,
) -> Result<f64, CkaError> {
    if x.m() != y.m() {
        return Err(CkaError::DimensionMismatch(x.m(), y.m()));
    }
    let cx = CenteredLayer::new(x);
    let cy = CenteredLayer::new(y);
    let hx = self_term(route, &cx)?;
    let hy = self_term(route, &cy)?;
    Ok(ratio(route.cross(&cx, &cy), hx, hy))
}

fn self_term(route: &dyn CkaRoute, x: &CenteredLayer) -> Result<f64, CkaError> {
    let h = route.cross(x, x);
    if h <= ZERO_VARIANCE_REL * x.scale {
        return Err(CkaError::ZeroVariance(x.layer.clone()));
    }
    Ok(h)
}

// The cross term is a sum of squares in exact arithmetic, so negatives are rounding.
fn ratio(cross: f64, hx: f64, hy: f64) -> f64 {
    (cross / (hx.sqrt() * hy.sqrt())).max(0.0)
}

/// Layer-by-layer similarity. `None` marks a cell involving a zero-variance layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CkaMatrix {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn defined_cells(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().filter_map(|v| *v)
    }

    pub fn is_all_undefined(&self) -> bool {
        self.defined_cells().next().is_none()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("CkaMatrix serializes")
    }
}

/// CKA of every row layer against every column layer.
pub fn cka_matrix_layers(
    route: &dyn CkaRoute,
    rows: &[ActivationMatrix],
    cols: &[ActivationMatrix],
) -> Result<CkaMatrix, CkaError> {
    let m = rows
        .first()
        .or(cols.first())
        .map(ActivationMatrix::m)
        .unwrap_or(0);
    if let Some(bad) = rows.iter().chain(cols).find(|x| x.m() != m) {
        return Err(CkaError::DimensionMismatch(m, bad.m()));
    }
    let prepare = |layers: &[ActivationMatrix]| -> Vec<(CenteredLayer, Option<f64>)> {
        layers
            .par_iter()
            .map(|x| {
                let c = CenteredLayer::new(x);
                let h = self_term(route, &c).ok();
                (c, h)
            })
            .collect()
    };
    let a = prepare(rows);
    let b = prepare(cols);

    let values = a
        .par_iter()
        .map(|(ca, ha)| {
            b.par_iter()
                .map(|(cb, hb)| match (ha, hb) {
                    (Some(ha), Some(hb)) => Some(ratio(route.cross(ca, cb), *ha, *hb)),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(CkaMatrix {
        rows: rows.iter().map(|x| x.layer.clone()).collect(),
        cols: cols.iter().map(|x| x.layer.clone()).collect(),
        values,
    })
}

/// CKA between the selected activation entries of two bundles.
pub fn cka_matrix(
    a: &DumpBundle,
    b: &DumpBundle,
    selection: &LayerFilter,
    route: &dyn CkaRoute,
) -> Result<CkaMatrix, CkaError> {
    if a.sample_ids != b.sample_ids {
        return Err(CkaError::SampleMismatch);
    }
    let rows = load_activations(a, selection)?;
    let cols = load_activations(b, selection)?;
    cka_matrix_layers(route, &rows, &cols)
}

pub fn load_activations(
    bundle: &DumpBundle,
    selection: &LayerFilter,
) -> Result<Vec<ActivationMatrix>, CkaError> {
    let entries: Vec<_> = bundle
        .entries_of(LayerKind::Activation)
        .filter(|e| selection.matches(&e.name))
        .collect();
    if entries.is_empty() {
        return Err(CkaError::EmptySelection(
            bundle.root().display().to_string(),
        ));
    }
    entries
        .par_iter()
        .map(|e| {
            let t = bundle.load_entry(e)?;
            ActivationMatrix::from_tensor(e.name.clone(), &t)
        })
        .collect()
}
