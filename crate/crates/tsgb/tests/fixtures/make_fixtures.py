#!/usr/bin/env python3
"""Writes the golden fixtures used by crates/tsgb/tests/golden.rs.

Independent of the Rust code: builds a conv -> relu -> maxpool -> linear net,
writes it as NNSM v1, and computes scores and the TSGB saliency map in float64
with plain loops.

    python3 make_fixtures.py   # run from this directory
"""

import json
import struct

import numpy as np

ALPHA = 0.8
EPS = 1e-6
C, H, W = 3, 6, 6
OC, K, PAD = 2, 3, 1
CLASSES = 3
MEAN = [0.5, 0.4, 0.3]
STD = [0.25, 0.5, 0.2]

rng = np.random.default_rng(20240611)
f32 = lambda a: np.asarray(a, dtype=np.float32)

conv_w = f32(rng.normal(0.0, 0.4, (OC, C, K, K)))
conv_b = f32(rng.normal(0.0, 0.1, OC))
ph, pw = H // 2, W // 2
fc_in = OC * ph * pw
fc_w = f32(rng.normal(0.0, 0.5, (CLASSES, fc_in)))
fc_b = f32(rng.normal(0.0, 0.1, CLASSES))
image8 = rng.integers(0, 256, (H, W, C), dtype=np.uint8)


def sorted_obj(d):
    return {k: d[k] for k in sorted(d)}


def write_nnsm(path):
    blob = bytearray()

    def push(arr):
        off = len(blob)
        blob.extend(np.asarray(arr, dtype="<f4").tobytes())
        return sorted_obj({"offset": off, "shape": list(arr.shape)})

    layers = [
        sorted_obj({
            "id": 0, "inputs": [], "kind": "conv2d",
            "params": sorted_obj({"in_channels": C, "out_channels": OC, "kernel": [K, K],
                                  "stride": [1, 1], "padding": [PAD, PAD]}),
            "tensors": sorted_obj({"weight": push(conv_w), "bias": push(conv_b)}),
        }),
        sorted_obj({"id": 1, "inputs": [0], "kind": "relu", "params": {}, "tensors": {}}),
        sorted_obj({"id": 2, "inputs": [1], "kind": "max_pool",
                    "params": sorted_obj({"kernel": [2, 2], "stride": [2, 2], "padding": [0, 0]}),
                    "tensors": {}}),
        sorted_obj({"id": 3, "inputs": [2], "kind": "linear", "params": {"final": True},
                    "tensors": sorted_obj({"weight": push(fc_w), "bias": push(fc_b)})}),
    ]
    header = {
        "name": "golden-tiny",
        "family": "other",
        "input_shape": [1, C, H, W],
        "num_classes": CLASSES,
        "preprocess": {"mean": MEAN, "std": STD},
        "layers": layers,
        "blob_len": len(blob),
    }
    text = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(b"NNSM" + struct.pack("<IQ", 1, len(text)) + text + bytes(blob))


def forward_and_saliency():
    raw = image8.astype(np.float64).transpose(2, 0, 1) / 255.0
    x0 = np.empty_like(raw)
    for c in range(C):
        x0[c] = (np.float64(np.float32(raw[c].astype(np.float32))) - MEAN[c]) / STD[c]

    wc = conv_w.astype(np.float64)
    y1 = np.zeros((OC, H, W))
    for o in range(OC):
        for y in range(H):
            for x in range(W):
                acc = float(conv_b[o])
                for m in range(C):
                    for ky in range(K):
                        for kx in range(K):
                            iy, ix = y + ky - PAD, x + kx - PAD
                            if 0 <= iy < H and 0 <= ix < W:
                                acc += wc[o, m, ky, kx] * x0[m, iy, ix]
                y1[o, y, x] = acc
    r = np.maximum(y1, 0.0)

    pooled = np.zeros((OC, ph, pw))
    winner = {}
    for o in range(OC):
        for y in range(ph):
            for x in range(pw):
                best = None
                for dy in range(2):
                    for dx in range(2):
                        v = r[o, 2 * y + dy, 2 * x + dx]
                        if best is None or v > best[0]:
                            best = (v, 2 * y + dy, 2 * x + dx)
                pooled[o, y, x] = best[0]
                winner[(o, y, x)] = best[1:]
    p = pooled.reshape(-1)
    wf = fc_w.astype(np.float64)
    scores = [float(fc_b[j]) + sum(wf[j, i] * p[i] for i in range(fc_in)) for j in range(CLASSES)]
    t = int(np.argmax(scores))

    pos = sum(p[i] * wf[t, i] for i in range(fc_in) if wf[t, i] > 0)
    neg = sum(abs(p[i] * wf[t, i]) for i in range(fc_in) if wf[t, i] < 0)
    e = ALPHA * pos / max(neg, EPS)
    gp = [wf[t, i] if wf[t, i] >= 0 else e * wf[t, i] for i in range(fc_in)]
    gp = np.array(gp).reshape(OC, ph, pw)

    gr = np.zeros((OC, H, W))
    for (o, y, x), (wy, wx) in winner.items():
        gr[o, wy, wx] += gp[o, y, x]
    gy = gr * (y1 > 0)

    acc = np.zeros((C, H, W))
    for o in range(OC):
        for y in range(H):
            for x in range(W):
                cells = [(m, y + ky - PAD, x + kx - PAD)
                         for m in range(C) for ky in range(K) for kx in range(K)
                         if 0 <= y + ky - PAD < H and 0 <= x + kx - PAD < W]
                den = sum(abs(x0[c]) for c in cells)
                share = y1[o, y, x] * gy[o, y, x] / max(den, EPS)
                for c in cells:
                    acc[c] += share
    gx = acc * np.sign(x0)
    sal = (gx * x0).sum(axis=0)
    return scores, t, sal


def pgm(sal):
    lo, hi = sal.min(), sal.max()
    px = np.rint((sal - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (W, H) + px.tobytes()


write_nnsm("tiny.nnsm")
with open("tiny.ppm", "wb") as f:
    f.write(b"P6\n%d %d\n255\n" % (W, H) + image8.tobytes())
scores, t, sal = forward_and_saliency()
with open("tiny_expected.json", "w") as f:
    json.dump({"alpha": ALPHA, "scores": scores, "predicted": t,
               "saliency": [float(v) for v in sal.reshape(-1)]}, f, indent=1)
    f.write("\n")
with open(f"tiny_{t}.pgm", "wb") as f:
    f.write(pgm(sal))
print("predicted", t, "scores", scores)
