#!/usr/bin/env python3
"""Fabricate a WavLM-shaped safetensors state dict with random values.

The tensor names and shapes follow the published Large-family checkpoints
(classic weight_g/weight_v naming for the positional convolution, per-stage
extractor norms, relative-position terms), so the bridge's map and report
can be exercised without downloading a multi-gigabyte model. Values are
seeded random draws; only geometry is faithful.
"""

import argparse

import numpy as np
from safetensors.numpy import save_file

PRESETS = {
    # dim, heads, ffn, layers, conv stages (channels, kernel, stride),
    # pos-conv (kernel, groups), relative-position buckets
    "large": {
        "dim": 1024,
        "heads": 16,
        "ffn": 4096,
        "layers": 24,
        "stages": [(512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
                   (512, 3, 2), (512, 2, 2), (512, 2, 2)],
        "pos_conv": (128, 16),
        "buckets": 320,
    },
    "tiny": {
        "dim": 16,
        "heads": 2,
        "ffn": 32,
        "layers": 3,
        "stages": [(8, 10, 5), (8, 3, 2)],
        "pos_conv": (4, 2),
        "buckets": 20,
    },
}


def build(preset: dict, rng: np.random.Generator, dtype, int_bias: bool) -> dict:
    d = preset["dim"]
    heads = preset["heads"]
    head_dim = d // heads

    def w(*shape, scale=0.05):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    def gain(*shape):
        return (1.0 + 0.01 * rng.standard_normal(shape)).astype(dtype)

    tensors = {"masked_spec_embed": w(d)}
    c_prev = 1
    for i, (c, k, _s) in enumerate(preset["stages"]):
        p = f"feature_extractor.conv_layers.{i}"
        tensors[f"{p}.conv.weight"] = w(c, c_prev, k)
        tensors[f"{p}.conv.bias"] = w(c)
        tensors[f"{p}.layer_norm.weight"] = gain(c)
        tensors[f"{p}.layer_norm.bias"] = w(c)
        c_prev = c

    tensors["feature_projection.layer_norm.weight"] = gain(c_prev)
    tensors["feature_projection.layer_norm.bias"] = w(c_prev)
    tensors["feature_projection.projection.weight"] = w(d, c_prev)
    if int_bias:
        tensors["feature_projection.projection.bias"] = rng.integers(
            -8, 8, size=d, dtype=np.int32
        )
    else:
        tensors["feature_projection.projection.bias"] = w(d)

    k, groups = preset["pos_conv"]
    tensors["encoder.pos_conv_embed.conv.weight_g"] = (
        0.5 + np.abs(rng.standard_normal((1, 1, k)))
    ).astype(dtype)
    tensors["encoder.pos_conv_embed.conv.weight_v"] = w(d, d // groups, k)
    tensors["encoder.pos_conv_embed.conv.bias"] = w(d)
    tensors["encoder.layer_norm.weight"] = gain(d)
    tensors["encoder.layer_norm.bias"] = w(d)

    for i in range(preset["layers"]):
        p = f"encoder.layers.{i}"
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            tensors[f"{p}.attention.{proj}.weight"] = w(d, d)
            tensors[f"{p}.attention.{proj}.bias"] = w(d)
        if i == 0:
            tensors[f"{p}.attention.rel_attn_embed.weight"] = w(preset["buckets"], heads)
        tensors[f"{p}.attention.gru_rel_pos_linear.weight"] = w(8, head_dim)
        tensors[f"{p}.attention.gru_rel_pos_linear.bias"] = w(8)
        tensors[f"{p}.attention.gru_rel_pos_const"] = gain(1, heads, 1, 1)
        tensors[f"{p}.layer_norm.weight"] = gain(d)
        tensors[f"{p}.layer_norm.bias"] = w(d)
        tensors[f"{p}.feed_forward.intermediate_dense.weight"] = w(preset["ffn"], d)
        tensors[f"{p}.feed_forward.intermediate_dense.bias"] = w(preset["ffn"])
        tensors[f"{p}.feed_forward.output_dense.weight"] = w(d, preset["ffn"])
        tensors[f"{p}.feed_forward.output_dense.bias"] = w(d)
        tensors[f"{p}.final_layer_norm.weight"] = gain(d)
        tensors[f"{p}.final_layer_norm.bias"] = w(d)
    return tensors


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    ap.add_argument(
        "--int-bias", action="store_true",
        help="store one mapped bias as int32, to exercise dtype conversion",
    )
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    tensors = build(PRESETS[args.preset], rng, dtype, args.int_bias)
    save_file(tensors, args.out, metadata={"origin": "synthetic", "seed": str(args.seed)})
    total = sum(int(np.prod(t.shape)) for t in tensors.values())
    print(f"{args.out}: {len(tensors)} tensors, {total} parameters")


if __name__ == "__main__":
    main()
