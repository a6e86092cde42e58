use std::fmt::Write as _;
use std::path::Path;

use reprobe::attnmask::{build_mask_set_with, overlay, upsample};
use reprobe::imaging::{colormap, encode_pgm, encode_ppm, tile_grid, write_csv, ImagingError};
use reprobe::registry::{cka_routes, mask_rows, palettes, upsamplers, UnknownStrategy};
use reprobe::{
    featuremaps_for_bundle, load_bundle, AttentionStack, BundleError, CkaError, DumpBundle,
    FmapError, ImageRGB, LayerFilter, LayerKind, MaskError,
};

pub const EXIT_IO: u8 = 1;
pub const EXIT_LOAD: u8 = 2;
pub const EXIT_SAMPLE_MISMATCH: u8 = 3;
pub const EXIT_DEGENERATE_CKA: u8 = 4;
pub const EXIT_PATCH_GRID: u8 = 5;
pub const EXIT_NO_FEATURE_MAPS: u8 = 6;

const MONTAGE_COLS: usize = 4;
const MONTAGE_PAD: usize = 2;

/// Files to write, relative to the output directory, in write order.
pub type Outputs = Vec<(String, Vec<u8>)>;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub exit: u8,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>, exit: u8) -> Self {
        Self {
            code,
            message: message.into(),
            exit,
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        Self::new(e.code(), e.to_string(), EXIT_LOAD)
    }
}

impl From<CkaError> for CliError {
    fn from(e: CkaError) -> Self {
        let exit = match e {
            CkaError::SampleMismatch => EXIT_SAMPLE_MISMATCH,
            CkaError::ZeroVariance(_) => EXIT_DEGENERATE_CKA,
            _ => EXIT_LOAD,
        };
        Self::new(e.code(), e.to_string(), exit)
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        let exit = match e {
            MaskError::NonSquarePatchCount(_) => EXIT_PATCH_GRID,
            _ => EXIT_LOAD,
        };
        Self::new(e.code(), e.to_string(), exit)
    }
}

impl From<FmapError> for CliError {
    fn from(e: FmapError) -> Self {
        let exit = match e {
            FmapError::NoFeatureMaps => EXIT_NO_FEATURE_MAPS,
            FmapError::Bundle(_) => EXIT_LOAD,
        };
        Self::new(e.code(), e.to_string(), exit)
    }
}

impl From<UnknownStrategy> for CliError {
    fn from(e: UnknownStrategy) -> Self {
        Self::new("UnknownStrategy", e.to_string(), EXIT_LOAD)
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        Self::new("Imaging", e.to_string(), EXIT_LOAD)
    }
}

pub fn parse_layers(text: &str) -> Result<LayerFilter, CliError> {
    LayerFilter::parse(text)
        .map_err(|e| CliError::new("BadPattern", format!("--layers {text:?}: {e}"), EXIT_LOAD))
}

pub fn info(dir: &Path) -> Result<String, CliError> {
    let b = load_bundle(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "bundle:  {}", dir.display());
    let _ = writeln!(s, "model:   {}", b.model);
    let _ = writeln!(s, "dataset: {}", b.dataset);
    let _ = writeln!(s, "samples: {}", b.sample_ids.len());
    let _ = writeln!(s, "entries: {}", b.entries.len());
    let width = b.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    for e in &b.entries {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "  {:<width$}  {:<12}  ({})",
            e.name,
            e.kind.to_string(),
            shape.join(", ")
        );
    }
    for kind in [
        LayerKind::Activation,
        LayerKind::Attention,
        LayerKind::FeatureMap,
        LayerKind::InputImage,
    ] {
        let n = b.entries_of(kind).count();
        if n > 0 {
            let _ = writeln!(s, "{kind}: {n}");
        }
    }
    Ok(s)
}

pub fn cka(
    a: &Path,
    b: &Path,
    layers: &LayerFilter,
    route: &str,
    palette: &str,
    cell_px: usize,
) -> Result<Outputs, CliError> {
    let routes = cka_routes();
    let palettes = palettes();
    let route = routes.get(route)?;
    let palette = palettes.get(palette)?;
    let (a, b) = (load_bundle(a)?, load_bundle(b)?);
    let matrix = reprobe::cka_matrix(&a, &b, layers, route)?;
    if matrix.is_all_undefined() {
        return Err(CliError::new(
            "ZeroVariance",
            "every selected layer pair involves a zero-variance layer",
            EXIT_DEGENERATE_CKA,
        ));
    }
    let mut json = matrix.to_json();
    json.push('\n');
    Ok(vec![
        ("cka.csv".into(), write_csv(&matrix)),
        ("cka.json".into(), json.into_bytes()),
        (
            "cka.ppm".into(),
            encode_ppm(&colormap(&matrix, palette, cell_px)),
        ),
    ])
}

fn input_image(bundle: &DumpBundle) -> Result<Option<ImageRGB>, CliError> {
    let Some(entry) = bundle.entries_of(LayerKind::InputImage).next() else {
        return Ok(None);
    };
    Ok(Some(ImageRGB::from_tensor(&bundle.load_entry(entry)?)?))
}

pub fn attn(
    dir: &Path,
    layers: &LayerFilter,
    mask_row: &str,
    upsample_mode: &str,
) -> Result<Outputs, CliError> {
    let rows = mask_rows();
    let ups = upsamplers();
    let row = rows.get(mask_row)?;
    let up = ups.get(upsample_mode)?;
    let bundle = load_bundle(dir)?;
    let image = input_image(&bundle)?.ok_or_else(|| {
        CliError::new(
            "MissingInputImage",
            "bundle has no input_image entry",
            EXIT_LOAD,
        )
    })?;
    let stack = AttentionStack::from_bundle_selected(&bundle, layers)?;
    let set = build_mask_set_with(row, &stack)?;

    let mut outputs = Outputs::new();
    let mut tiles = vec![image.clone()];
    for mask in &set.masks {
        let map = upsample(mask, image.height, image.width, up);
        let over = overlay(&image, map.view())?;
        outputs.push((
            format!("layer_{}.ppm", mask.layer_index + 1),
            encode_ppm(&over),
        ));
        tiles.push(over);
    }
    outputs.push((
        "montage.ppm".into(),
        encode_ppm(&tile_grid(&tiles, MONTAGE_COLS, MONTAGE_PAD)?),
    ));
    let mut json = serde_json::to_string_pretty(&set).expect("mask set serializes");
    json.push('\n');
    outputs.push(("masks.json".into(), json.into_bytes()));
    Ok(outputs)
}

pub fn fmap(dir: &Path, layers: &LayerFilter) -> Result<Outputs, CliError> {
    let bundle = load_bundle(dir)?;
    let maps = featuremaps_for_bundle(&bundle, layers)?;
    let image = input_image(&bundle)?;

    let (h, w) = match &image {
        Some(img) => (img.height, img.width),
        None => (
            maps.iter().map(|m| m.grid.nrows()).max().unwrap_or(1),
            maps.iter().map(|m| m.grid.ncols()).max().unwrap_or(1),
        ),
    };
    let mut outputs = Outputs::new();
    let mut tiles: Vec<ImageRGB> = image.into_iter().collect();
    for m in &maps {
        outputs.push((
            format!("fmap_{}.pgm", m.layer_index + 1),
            encode_pgm(m.grid.view()),
        ));
        tiles.push(ImageRGB::from_gray(m.grid.view()).resize_nearest(h, w));
    }
    let cols = tiles.len().min(6);
    outputs.push((
        "montage.ppm".into(),
        encode_ppm(&tile_grid(&tiles, cols, MONTAGE_PAD)?),
    ));
    Ok(outputs)
}

/// Creates `out` and writes every file. Nothing is touched before this point.
pub fn write_outputs(out: &Path, outputs: &Outputs) -> Result<(), CliError> {
    let io =
        |p: &Path, e: std::io::Error| CliError::new("Io", format!("{}: {e}", p.display()), EXIT_IO);
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    for (name, bytes) in outputs {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| io(&path, e))?;
    }
    Ok(())
}
