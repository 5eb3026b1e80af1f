#!/usr/bin/env python3
# SPDX-License-Identifier: MIT OR Apache-2.0
"""Reference forward pass for the tiny test encoder.

Writes random weights (HF ViTModel names, with the `vit.` prefix), a
preprocessed input image, and the float64 numpy forward pass rounded to
float32. The Rust encoder must reproduce `tiny_stack.f32` to 1e-4.

    python3 tests/golden/make_golden.py
"""
import json
import math
from pathlib import Path

import numpy as np
from safetensors.numpy import save_file

HERE = Path(__file__).resolve().parent
FIXTURES = HERE.parent / "fixtures"

IMAGE, PATCH, WIDTH, LAYERS, HEADS, MLP = 8, 4, 16, 2, 2, 64
EPS = 1e-6
GRID = IMAGE // PATCH
PATCHES = GRID * GRID


def make_weights(rng):
    w = {}
    n = lambda *s, std=0.2: (rng.standard_normal(s) * std).astype(np.float32)
    w["embeddings.patch_embeddings.projection.weight"] = n(WIDTH, 3, PATCH, PATCH)
    w["embeddings.patch_embeddings.projection.bias"] = n(WIDTH)
    w["embeddings.position_embeddings"] = n(1, PATCHES + 1, WIDTH)
    w["embeddings.cls_token"] = n(1, 1, WIDTH)
    for l in range(LAYERS):
        p = f"encoder.layer.{l}."
        w[p + "layernorm_before.weight"] = 1.0 + n(WIDTH, std=0.1)
        w[p + "layernorm_before.bias"] = n(WIDTH, std=0.1)
        for proj in ("query", "key", "value"):
            w[p + f"attention.attention.{proj}.weight"] = n(WIDTH, WIDTH, std=0.3)
            w[p + f"attention.attention.{proj}.bias"] = n(WIDTH, std=0.1)
        w[p + "attention.output.dense.weight"] = n(WIDTH, WIDTH)
        w[p + "attention.output.dense.bias"] = n(WIDTH, std=0.1)
        w[p + "layernorm_after.weight"] = 1.0 + n(WIDTH, std=0.1)
        w[p + "layernorm_after.bias"] = n(WIDTH, std=0.1)
        w[p + "intermediate.dense.weight"] = n(MLP, WIDTH, std=0.3)
        w[p + "intermediate.dense.bias"] = n(MLP, std=0.1)
        w[p + "output.dense.weight"] = n(WIDTH, MLP)
        w[p + "output.dense.bias"] = n(WIDTH, std=0.1)
    return w


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * g + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def forward(w, image):
    w = {k: v.astype(np.float64) for k, v in w.items()}
    kernel = w["embeddings.patch_embeddings.projection.weight"]
    tokens = []
    for gy in range(GRID):
        for gx in range(GRID):
            patch = image[:, gy * PATCH:(gy + 1) * PATCH, gx * PATCH:(gx + 1) * PATCH]
            tokens.append(np.einsum("ocij,cij->o", kernel, patch))
    x = np.stack(tokens) + w["embeddings.patch_embeddings.projection.bias"]
    x = np.concatenate([w["embeddings.cls_token"][0], x]) + w["embeddings.position_embeddings"][0]
    states = [x[1:]]
    dh = WIDTH // HEADS
    for l in range(LAYERS):
        p = f"encoder.layer.{l}."
        lin = lambda h, name: h @ w[p + name + ".weight"].T + w[p + name + ".bias"]
        h = layer_norm(x, w[p + "layernorm_before.weight"], w[p + "layernorm_before.bias"])
        q, k, v = (lin(h, f"attention.attention.{n}") for n in ("query", "key", "value"))
        heads = []
        for i in range(HEADS):
            s = slice(i * dh, (i + 1) * dh)
            att = softmax(q[:, s] @ k[:, s].T / math.sqrt(dh))
            heads.append(att @ v[:, s])
        x = x + lin(np.concatenate(heads, axis=1), "attention.output.dense")
        h = layer_norm(x, w[p + "layernorm_after.weight"], w[p + "layernorm_after.bias"])
        x = x + lin(gelu(lin(h, "intermediate.dense")), "output.dense")
        states.append(x[1:])
    return np.stack(states)


def main():
    rng = np.random.default_rng(20240607)
    weights = make_weights(rng)
    image = rng.uniform(-1.0, 1.0, size=(3, IMAGE, IMAGE)).astype(np.float32)
    FIXTURES.mkdir(parents=True, exist_ok=True)
    save_file({"vit." + k: v for k, v in weights.items()}, str(FIXTURES / "tiny.safetensors"))
    (FIXTURES / "tiny.json").write_text(json.dumps({
        "hidden_size": WIDTH,
        "num_hidden_layers": LAYERS,
        "num_attention_heads": HEADS,
        "intermediate_size": MLP,
        "image_size": IMAGE,
        "patch_size": PATCH,
        "layer_norm_eps": EPS,
    }, indent=2) + "\n")
    image.astype("<f4").tofile(FIXTURES / "tiny_input.f32")
    stack = forward(weights, image.astype(np.float64)).astype("<f4")
    stack.tofile(HERE / "tiny_stack.f32")
    (HERE / "tiny_stack.json").write_text(json.dumps({
        "shape": list(stack.shape),
        "dtype": "f32-le",
        "input": "tests/fixtures/tiny_input.f32",
        "input_shape": [3, IMAGE, IMAGE],
        "weights": "tests/fixtures/tiny.safetensors",
    }, indent=2) + "\n")


if __name__ == "__main__":
    main()
