mod common;

use std::collections::HashSet;
use std::path::Path;

use reprobe::bundle::{write_bundle, MANIFEST};
use reprobe::{load_bundle, BundleError, DenseTensor, LayerKind};
use serde_json::{json, Value};

fn write_one_activation(dir: &Path) {
    let t = DenseTensor::from_f32(vec![4, 2], (0..8).map(|v| v as f32).collect()).unwrap();
    write_bundle(
        dir,
        "m",
        "d",
        &[0, 1, 2, 3],
        &[("layer0", LayerKind::Activation, &t)],
    )
    .unwrap();
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn single_activation_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    write_one_activation(tmp.path());
    let b = load_bundle(tmp.path()).unwrap();
    assert_eq!(b.entries.len(), 1);
    assert_eq!(b.entries[0].shape, vec![4, 2]);
    let t = b.tensor("layer0").unwrap();
    assert_eq!(t.to_f64_vec(), (0..8).map(f64::from).collect::<Vec<_>>());
    assert!(matches!(
        b.tensor("nope"),
        Err(BundleError::UnknownEntry(_))
    ));
}

#[test]
fn vit_shaped_bundle_is_valid() {
    let b = load_bundle(common::bundle_dir("vit_attn")).unwrap();
    let attn: Vec<_> = b.entries_of(LayerKind::Attention).collect();
    assert_eq!(attn.len(), 6);
    assert!(attn.iter().all(|e| e.shape == [8, 65, 65]));
    assert_eq!(b.entries_of(LayerKind::InputImage).count(), 1);
}

#[test]
fn all_committed_fixture_bundles_load() {
    for entry in std::fs::read_dir(common::fixtures().join("bundles")).unwrap() {
        let dir = entry.unwrap().path();
        load_bundle(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display()));
    }
}

#[test]
fn declared_shape_differs_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let t = DenseTensor::from_f32(vec![8, 64, 64], vec![1.0 / 64.0; 8 * 64 * 64]).unwrap();
    write_bundle(
        tmp.path(),
        "vit",
        "d",
        &[0],
        &[("attn", LayerKind::Attention, &t)],
    )
    .unwrap();
    edit_manifest(tmp.path(), |v| {
        v["entries"][0]["shape"] = json!([8, 65, 65])
    });
    match load_bundle(tmp.path()) {
        Err(BundleError::ShapeMismatch {
            declared, actual, ..
        }) => {
            assert_eq!(declared, [8, 65, 65]);
            assert_eq!(actual, [8, 64, 64]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn unknown_top_level_keys_are_ignored() {
    let tmp = tempfile::tempdir().unwrap();
    write_one_activation(tmp.path());
    edit_manifest(tmp.path(), |v| {
        v["created_by"] = json!({"tool": "harness", "seed": 3})
    });
    assert!(load_bundle(tmp.path()).is_ok());
}

#[test]
fn each_mutation_class_has_its_own_error() {
    type Mutation = Box<dyn Fn(&Path)>;
    let mutations: Vec<(&str, Mutation)> = vec![
        (
            "MissingManifest",
            Box::new(|d| std::fs::remove_file(d.join(MANIFEST)).unwrap()),
        ),
        (
            "SchemaViolation",
            Box::new(|d| {
                edit_manifest(d, |v| {
                    v.as_object_mut().unwrap().remove("sample_ids");
                })
            }),
        ),
        (
            "UnsupportedVersion",
            Box::new(|d| edit_manifest(d, |v| v["format_version"] = json!(7))),
        ),
        (
            "DuplicateEntry",
            Box::new(|d| {
                edit_manifest(d, |v| {
                    let mut e = v["entries"][0].clone();
                    e["index"] = json!(5);
                    v["entries"].as_array_mut().unwrap().push(e);
                })
            }),
        ),
        (
            "IndexOrder",
            Box::new(|d| {
                edit_manifest(d, |v| {
                    let mut e = v["entries"][0].clone();
                    e["name"] = json!("layer1");
                    v["entries"].as_array_mut().unwrap().push(e);
                })
            }),
        ),
        (
            "InvalidEntryShape",
            Box::new(|d| edit_manifest(d, |v| v["entries"][0]["kind"] = json!("attention"))),
        ),
        (
            "MissingFile",
            Box::new(|d| edit_manifest(d, |v| v["entries"][0]["file"] = json!("absent.npy"))),
        ),
        (
            "ShapeMismatch",
            Box::new(|d| {
                edit_manifest(d, |v| {
                    v["entries"][0]["shape"] = json!([4, 3]);
                })
            }),
        ),
        (
            "BadMagic",
            Box::new(|d| {
                let p = d.join("layer0.npy");
                let mut bytes = std::fs::read(&p).unwrap();
                bytes[1] = b'X';
                std::fs::write(p, bytes).unwrap();
            }),
        ),
        (
            "TruncatedPayload",
            Box::new(|d| {
                let p = d.join("layer0.npy");
                let bytes = std::fs::read(&p).unwrap();
                std::fs::write(p, &bytes[..bytes.len() - 3]).unwrap();
            }),
        ),
        (
            "SchemaViolation",
            Box::new(|d| edit_manifest(d, |v| v["entries"][0]["kind"] = json!("weights"))),
        ),
    ];

    let mut seen = HashSet::new();
    for (expected, mutate) in &mutations {
        let tmp = tempfile::tempdir().unwrap();
        write_one_activation(tmp.path());
        mutate(tmp.path());
        let err = load_bundle(tmp.path()).expect_err(expected);
        assert_eq!(err.code(), *expected, "{err}");
        seen.insert(err.code());
    }
    assert_eq!(seen.len(), mutations.len() - 1);
}

#[test]
fn non_finite_values_fail_on_load() {
    let tmp = tempfile::tempdir().unwrap();
    write_one_activation(tmp.path());
    let p = tmp.path().join("layer0.npy");
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(p, bytes).unwrap();
    // header-level validation passes; decoding reports the bad value
    let b = load_bundle(tmp.path()).unwrap();
    let err = b.tensor("layer0").unwrap_err();
    assert_eq!(err.code(), "NonFiniteValue");
}
