#!/usr/bin/env python3
"""Regenerate the committed test fixtures under fixtures/.

numpy is the reference NPY writer here, and the CKA golden values are computed
with a plain double-loop HSIC in float64, independent of the Rust engine.
Output is deterministic (fixed seed).
"""
import json
import math
import os
import shutil

import numpy as np

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "fixtures")
rng = np.random.default_rng(20240601)


def reset(path):
    if os.path.exists(path):
        shutil.rmtree(path)
    os.makedirs(path)


def write_bundle(name, model, dataset, sample_ids, entries):
    """entries: list of (name, kind, array)."""
    d = os.path.join(ROOT, "bundles", name)
    reset(d)
    manifest = {
        "format_version": 1,
        "model": model,
        "dataset": dataset,
        "sample_ids": sample_ids,
        "entries": [],
    }
    for i, (ename, kind, arr) in enumerate(entries):
        fname = ename.replace("/", "_") + ".npy"
        np.save(os.path.join(d, fname), arr)
        manifest["entries"].append(
            {"name": ename, "kind": kind, "file": fname, "shape": list(arr.shape), "index": i}
        )
    with open(os.path.join(d, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_image(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    r = (xx * 255 // max(w - 1, 1)).astype(np.uint8)
    g = (yy * 255 // max(h - 1, 1)).astype(np.uint8)
    b = ((xx + yy) * 255 // max(h + w - 2, 1)).astype(np.uint8)
    return np.stack([r, g, b])


# --- double-loop CKA oracle ---------------------------------------------------

def hsic_oracle(x, y):
    m = x.shape[0]
    k = [[float(np.dot(x[i], x[j])) for j in range(m)] for i in range(m)]
    l = [[float(np.dot(y[i], y[j])) for j in range(m)] for i in range(m)]

    def center(g):
        rows = [sum(g[i]) / m for i in range(m)]
        cols = [sum(g[i][j] for i in range(m)) / m for j in range(m)]
        tot = sum(rows) / m
        return [[g[i][j] - rows[i] - cols[j] + tot for j in range(m)] for i in range(m)]

    kc, lc = center(k), center(l)
    s = 0.0
    for i in range(m):
        for j in range(m):
            s += kc[i][j] * lc[i][j]
    return s / (m - 1) ** 2


def cka_oracle(x, y):
    return hsic_oracle(x, y) / math.sqrt(hsic_oracle(x, x) * hsic_oracle(y, y))


def main():
    os.makedirs(ROOT, exist_ok=True)

    # NPY goldens
    npy = os.path.join(ROOT, "npy")
    reset(npy)
    np.save(os.path.join(npy, "f32_2x3_ones.npy"), np.ones((2, 3), dtype="<f4"))
    np.save(os.path.join(npy, "f64_1_zero.npy"), np.zeros((1,), dtype="<f8"))
    np.save(os.path.join(npy, "u8_2x2.npy"), np.array([[0, 255], [128, 64]], dtype="u1"))
    np.save(os.path.join(npy, "f32_fortran.npy"), np.asfortranarray(np.arange(6, dtype="<f4").reshape(2, 3)))
    np.save(os.path.join(npy, "f64_3x4_arange.npy"), np.arange(12, dtype="<f8").reshape(3, 4) / 7.0)
    np.lib.format.write_array(
        open(os.path.join(npy, "f32_v2_arange.npy"), "wb"),
        np.arange(5, dtype="<f4"),
        version=(2, 0),
    )

    # CKA golden constant from the per-op example
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    y = np.array([[1.0], [0.0], [2.0]])
    golden = {"cka_xy": cka_oracle(x, y), "hsic_xy": hsic_oracle(x, y)}

    # CKA bundles: 3 layers vs 4 layers, m = 16
    m = 16
    ids = list(range(100, 100 + m))
    base = rng.normal(size=(m, 6))
    a_layers = [
        ("block0.conv", "activation", (base @ rng.normal(size=(6, 12))).astype("<f4")),
        ("block0.relu", "activation", np.maximum(base @ rng.normal(size=(6, 10)), 0).astype("<f4")),
        ("block1.conv", "activation", rng.normal(size=(m, 20)).astype("<f4")),
    ]
    b_layers = [
        ("block0.attn", "activation", (base @ rng.normal(size=(6, 32))).astype("<f4")),
        ("block0.mlp", "activation", np.tanh(base @ rng.normal(size=(6, 8))).astype("<f4")),
        ("block0.norm", "activation", rng.normal(size=(m, 4)).astype("<f8")),
        ("block1.attn", "activation", rng.normal(size=(m, 40)).astype("<f4")),
    ]
    write_bundle("cka_a", "resnet_synth", "synthetic", ids, a_layers)
    write_bundle("cka_b", "vit_synth", "synthetic", ids, b_layers)
    golden["cka_a_vs_b"] = {
        "rows": [n for n, _, _ in a_layers],
        "cols": [n for n, _, _ in b_layers],
        "values": [
            [cka_oracle(a.astype(np.float64), b.astype(np.float64)) for _, _, b in b_layers]
            for _, _, a in a_layers
        ],
    }
    write_bundle("cka_shifted", "vit_synth", "synthetic", [i + 1 for i in ids], b_layers)
    write_bundle(
        "cka_const", "const_synth", "synthetic", ids,
        [("c0", "activation", np.full((m, 3), 2.5, dtype="<f4")),
         ("c1", "activation", np.zeros((m, 5), dtype="<f4"))],
    )
    with open(os.path.join(ROOT, "golden.json"), "w") as f:
        json.dump(golden, f, indent=2)
        f.write("\n")

    # ViT-shaped attention bundle: depth 6, 8 heads, 64 patches + class token
    vit = [(f"block{k}.attn", "attention", softmax_rows(rng.normal(size=(8, 65, 65)) * 2.0).astype("<f4"))
           for k in range(6)]
    vit.append(("input", "input_image", test_image(32, 32)))
    write_bundle("vit_attn", "vit", "cifar10", [7], vit)

    write_bundle(
        "uniform_attn", "vit_synth", "synthetic", [0],
        [("block0.attn", "attention", np.full((1, 2, 2), 0.5, dtype="<f4")),
         ("input", "input_image", np.full((3, 4, 4), 255, dtype="u1"))],
    )
    write_bundle(
        "bad_patch", "vit_synth", "synthetic", [0],
        [("block0.attn", "attention", np.full((2, 4, 4), 0.25, dtype="<f4")),
         ("input", "input_image", np.full((3, 4, 4), 100, dtype="u1"))],
    )
    write_bundle(
        "attn_noimage", "vit_synth", "synthetic", [0],
        [("block0.attn", "attention", np.full((1, 2, 2), 0.5, dtype="<f4"))],
    )

    # ResNet-18-shaped feature-map bundle: 17 conv outputs
    sizes = [32] * 5 + [16] * 4 + [8] * 4 + [4] * 4
    channels = {32: 4, 16: 8, 8: 8, 4: 16}
    fm = [(f"conv{k + 1}", "feature_map", rng.normal(size=(channels[s], s, s)).astype("<f4"))
          for k, s in enumerate(sizes)]
    fm.insert(0, ("input", "input_image", test_image(32, 32)))
    write_bundle("resnet18_fmap", "resnet18", "cifar10", [7], fm)
    write_bundle(
        "const_fmap", "resnet_synth", "synthetic", [0],
        [("conv1", "feature_map", np.full((3, 4, 4), 1.5, dtype="<f4"))],
    )
    write_bundle(
        "no_fmap", "resnet_synth", "synthetic", [0],
        [("input", "input_image", test_image(4, 4))],
    )


if __name__ == "__main__":
    main()
