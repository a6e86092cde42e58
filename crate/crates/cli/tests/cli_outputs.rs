use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn reprobe(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reprobe"))
        .args(args)
        .output()
        .unwrap()
}

fn run_ok(args: &[&Path]) {
    let out = reprobe(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// (width, height, payload) of a binary PNM file with maxval 255.
fn parse_pnm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
        i += 1;
    }
    assert!(fields[0] == "P5" || fields[0] == "P6");
    assert_eq!(fields[3], "255");
    (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        bytes[i..].to_vec(),
    )
}

#[test]
fn cka_matches_golden_and_diagonal_is_top_color() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("cka"),
        &fixture("bundles/cka_a"),
        &fixture("bundles/cka_b"),
        Path::new("--out"),
        &out,
    ]);
    let golden: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixture("golden.json")).unwrap()).unwrap();
    let got: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("cka.json")).unwrap()).unwrap();
    let (g, v) = (&golden["cka_a_vs_b"], &got);
    assert_eq!(g["rows"], v["rows"]);
    assert_eq!(g["cols"], v["cols"]);
    for (gr, vr) in g["values"]
        .as_array()
        .unwrap()
        .iter()
        .zip(v["values"].as_array().unwrap())
    {
        for (a, b) in gr.as_array().unwrap().iter().zip(vr.as_array().unwrap()) {
            assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-10);
        }
    }
    let (w, h, _) = parse_pnm(&std::fs::read(out.join("cka.ppm")).unwrap());
    assert_eq!((w, h), (4 * 16, 3 * 16));

    let self_out = tmp.path().join("self");
    run_ok(&[
        Path::new("cka"),
        &fixture("bundles/cka_a"),
        &fixture("bundles/cka_a"),
        Path::new("--cell-px"),
        Path::new("2"),
        Path::new("--out"),
        &self_out,
    ]);
    let (w, _, px) = parse_pnm(&std::fs::read(self_out.join("cka.ppm")).unwrap());
    for k in 0..3 {
        let i = 3 * (2 * k * w + 2 * k);
        assert_eq!(&px[i..i + 3], &[255, 0, 0]);
    }
}

#[test]
fn uniform_attention_overlay_is_white() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("attn"),
        &fixture("bundles/uniform_attn"),
        Path::new("--out"),
        &out,
    ]);
    let (w, h, px) = parse_pnm(&std::fs::read(out.join("layer_1.ppm")).unwrap());
    assert_eq!((w, h), (4, 4));
    assert!(px.iter().all(|&b| b == 255));
    let masks: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("masks.json")).unwrap()).unwrap();
    assert_eq!(masks["scale"], 4.0);
    assert_eq!(masks["masks"][0]["grid"], serde_json::json!([[1.0]]));
}

#[test]
fn vit_montage_has_seven_tiles() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for mode in ["nearest", "bilinear"] {
        run_ok(&[
            Path::new("attn"),
            &fixture("bundles/vit_attn"),
            Path::new("--upsample"),
            Path::new(mode),
            Path::new("--out"),
            &out,
        ]);
        // 4 columns x 2 rows of 32x32 tiles with 2px padding
        let (w, h, _) = parse_pnm(&std::fs::read(out.join("montage.ppm")).unwrap());
        assert_eq!((w, h), (4 * 34 + 2, 2 * 34 + 2));
        assert!((1..=6).all(|k| out.join(format!("layer_{k}.ppm")).exists()));
    }
}

#[test]
fn resnet_maps_have_expected_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("fmap"),
        &fixture("bundles/resnet18_fmap"),
        Path::new("--out"),
        &out,
    ]);
    let sizes = [32, 32, 32, 32, 32, 16, 16, 16, 16, 8, 8, 8, 8, 4, 4, 4, 4];
    for (k, s) in sizes.iter().enumerate() {
        let (w, h, _) = parse_pnm(&std::fs::read(out.join(format!("fmap_{}.pgm", k + 1))).unwrap());
        assert_eq!((w, h), (*s, *s));
    }
    assert!(!out.join("fmap_18.pgm").exists());
    let (w, h, _) = parse_pnm(&std::fs::read(out.join("montage.ppm")).unwrap());
    assert_eq!((w, h), (6 * 34 + 2, 3 * 34 + 2));
}

#[test]
fn constant_feature_map_is_black() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("fmap"),
        &fixture("bundles/const_fmap"),
        Path::new("--out"),
        &out,
    ]);
    let (_, _, px) = parse_pnm(&std::fs::read(out.join("fmap_1.pgm")).unwrap());
    assert!(px.iter().all(|&b| b == 0));
}

#[test]
fn layer_filter_restricts_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("fmap"),
        &fixture("bundles/resnet18_fmap"),
        Path::new("--layers"),
        Path::new("conv1,conv17"),
        Path::new("--out"),
        &out,
    ]);
    let mut names: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names, ["fmap_1.pgm", "fmap_17.pgm", "montage.ppm"]);
}

#[test]
fn attention_layer_filter_keeps_positions() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    run_ok(&[
        Path::new("attn"),
        &fixture("bundles/vit_attn"),
        Path::new("--layers"),
        Path::new("block[24].attn"),
        Path::new("--out"),
        &out,
    ]);
    assert!(out.join("layer_3.ppm").exists() && out.join("layer_5.ppm").exists());
    assert!(!out.join("layer_1.ppm").exists());
}

#[test]
fn info_reports_entries_and_errors_name_the_cause() {
    let out = reprobe(&[Path::new("info"), &fixture("bundles/resnet18_fmap")]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("feature_map: 17"));
    assert!(text.contains("conv17"));

    let tmp = tempfile::tempdir().unwrap();
    let out = reprobe(&[Path::new("info"), tmp.path()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[MissingManifest]"));

    let bad_row = [Path::new("--mask-row"), Path::new("diag")];
    let out = reprobe(&[
        Path::new("attn"),
        &fixture("bundles/vit_attn"),
        bad_row[0],
        bad_row[1],
        Path::new("--out"),
        &tmp.path().join("x"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cls, mean"));
    assert!(!tmp.path().join("x").exists());
}
