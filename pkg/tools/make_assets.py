#!/usr/bin/env python3
"""Regenerate the bundled desk-scale assets.

Trains two tiny classifiers with plain numpy SGD and writes them, plus
their validation splits, into src/evocomp/assets/:

  tiny_mlp.evm / two_spirals.csv   2-32-32-2 MLP on a two-spiral set
  small_cnn.evm / blocks8.csv      conv-conv-pointwise-fc net on 8x8
                                   synthetic texture patches (4 classes)

The validation CSVs are 20% splits of the training data. Samples whose
top-2 logit margin is tiny are dropped from the split so that argmax
decisions are stable across any reasonable forward-pass implementation;
the reference accuracy stored in each manifest is computed here, by this
script's own forward pass, at asset-creation time.

Usage: python3 tools/make_assets.py [--out DIR]
"""

from __future__ import annotations

import argparse
import json
import struct
from pathlib import Path

import numpy as np

ASSET_DIR = Path(__file__).resolve().parent.parent / "src" / "evocomp" / "assets"
MARGIN = 1e-3  # minimum float32 top-2 logit gap for a sample to be bundled


# ---------------------------------------------------------------------------
# Minimal training framework (independent of the package on purpose)


def relu(x):
    return np.maximum(x, 0.0)


class Dense:
    def __init__(self, rng, n_in, n_out, relu_after):
        limit = np.sqrt(2.0 / n_in)
        self.w = rng.normal(0.0, limit, size=(n_out, n_in))
        self.b = np.zeros(n_out)
        self.relu_after = relu_after

    def forward(self, x):
        self.x = x
        self.z = x @ self.w.T + self.b
        return relu(self.z) if self.relu_after else self.z

    def backward(self, grad):
        if self.relu_after:
            grad = grad * (self.z > 0)
        self.dw = grad.T @ self.x
        self.db = grad.sum(axis=0)
        return grad @ self.w


class Conv:
    def __init__(self, rng, n_in, n_out, kernel, stride, padding, relu_after):
        limit = np.sqrt(2.0 / (n_in * kernel * kernel))
        self.w = rng.normal(0.0, limit, size=(n_out, n_in, kernel, kernel))
        self.b = np.zeros(n_out)
        self.stride = stride
        self.padding = padding
        self.relu_after = relu_after

    def forward(self, x):
        self.x = x
        s, p = self.stride, self.padding
        k = self.w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self.xp = xp
        h_out = (xp.shape[2] - k) // s + 1
        w_out = (xp.shape[3] - k) // s + 1
        z = np.zeros((x.shape[0], self.w.shape[0], h_out, w_out))
        for dy in range(k):
            for dx in range(k):
                patch = xp[:, :, dy : dy + s * h_out : s, dx : dx + s * w_out : s]
                z += np.einsum("bnyx,mn->bmyx", patch, self.w[:, :, dy, dx])
        self.z = z + self.b[None, :, None, None]
        return relu(self.z) if self.relu_after else self.z

    def backward(self, grad):
        if self.relu_after:
            grad = grad * (self.z > 0)
        s, p = self.stride, self.padding
        k = self.w.shape[2]
        h_out, w_out = grad.shape[2], grad.shape[3]
        self.dw = np.zeros_like(self.w)
        self.db = grad.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(self.xp)
        for dy in range(k):
            for dx in range(k):
                patch = self.xp[:, :, dy : dy + s * h_out : s, dx : dx + s * w_out : s]
                self.dw[:, :, dy, dx] = np.einsum("bmyx,bnyx->mn", grad, patch)
                dxp[:, :, dy : dy + s * h_out : s, dx : dx + s * w_out : s] += np.einsum(
                    "bmyx,mn->bnyx", grad, self.w[:, :, dy, dx]
                )
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class GlobalPoolDense(Dense):
    """Average over spatial dims, then affine."""

    def forward(self, x):
        self.spatial = x.shape[2:]
        return super().forward(x.mean(axis=(2, 3)))

    def backward(self, grad):
        dpool = super().backward(grad)
        h, w = self.spatial
        return dpool[:, :, None, None] * np.ones((1, 1, h, w)) / (h * w)


def softmax_loss_grad(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = -np.log(probs[np.arange(len(labels)), labels] + 1e-12).mean()
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return loss, grad / len(labels)


def train(layers, x, y, rng, epochs, lr, batch=None, momentum=0.9):
    velocity = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in layers]
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        step = batch or n
        for start in range(0, n, step):
            idx = order[start : start + step]
            out = x[idx]
            for layer in layers:
                out = layer.forward(out)
            _, grad = softmax_loss_grad(out, y[idx])
            for layer in reversed(layers):
                grad = layer.backward(grad)
            for layer, vel in zip(layers, velocity):
                vel[0][:] = momentum * vel[0] - lr * layer.dw
                vel[1][:] = momentum * vel[1] - lr * layer.db
                layer.w += vel[0]
                layer.b += vel[1]
    return layers


def predict_logits(layers, x, dtype=np.float64):
    out = x.astype(dtype)
    for layer in layers:
        w64, b64 = layer.w, layer.b
        layer.w = layer.w.astype(np.float32).astype(dtype)
        layer.b = layer.b.astype(np.float32).astype(dtype)
        out = layer.forward(out)
        layer.w, layer.b = w64, b64
    return out


# ---------------------------------------------------------------------------
# Datasets


def two_spirals(count, rng, noise=0.06):
    per = count // 2
    features, labels = [], []
    for cls in (0, 1):
        t = rng.random(per)
        radius = 0.1 + 0.85 * t
        angle = 3.0 * np.pi * t + cls * np.pi
        x = radius * np.cos(angle) + rng.normal(0, noise, per)
        y = radius * np.sin(angle) + rng.normal(0, noise, per)
        features.append(np.stack([x, y], axis=1))
        labels.append(np.full(per, cls))
    features = np.concatenate(features).astype(np.float32)
    labels = np.concatenate(labels).astype(np.int64)
    order = rng.permutation(len(labels))
    return features[order], labels[order]


def texture_patches(count, rng, noise=1.3):
    """8x8 grayscale patches: h-stripes, v-stripes, checker, center blob."""
    yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    blob = np.exp(-((yy - 3.5) ** 2 + (xx - 3.5) ** 2) / 6.0)
    patterns = [
        np.cos(np.pi * yy / 2.0),
        np.cos(np.pi * xx / 2.0),
        ((xx + yy) % 2) * 2.0 - 1.0,
        blob * 2.0 - 1.0,
    ]
    features, labels = [], []
    per = count // 4
    for cls, pattern in enumerate(patterns):
        amps = rng.uniform(0.7, 1.3, per)
        base = amps[:, None, None] * pattern[None, :, :]
        samples = base + rng.normal(0, noise, (per, 8, 8))
        features.append(samples.reshape(per, 64))
        labels.append(np.full(per, cls))
    features = np.concatenate(features).astype(np.float32)
    labels = np.concatenate(labels).astype(np.int64)
    order = rng.permutation(len(labels))
    return features[order], labels[order]


# ---------------------------------------------------------------------------
# Serialization (mirrors the container format by construction)


def write_container(path, name, layer_entries, layers, reference_accuracy):
    manifest = {
        "name": name,
        "reference_accuracy": reference_accuracy,
        "layers": layer_entries,
    }
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for layer in layers:
            fh.write(layer.w.astype("<f4").tobytes())
            fh.write(layer.b.astype("<f4").tobytes())


def write_csv(path, features, labels):
    with open(path, "w") as fh:
        cols = [f"f{i}" for i in range(features.shape[1])] + ["label"]
        fh.write(",".join(cols) + "\n")
        for row, label in zip(features, labels):
            values = [repr(float(v)) for v in row] + [str(int(label))]
            fh.write(",".join(values) + "\n")


def margin_filter(layers, features, labels, wanted, reshape=None):
    """Keep samples whose float32 logit margin is comfortably positive."""
    x = features if reshape is None else features.reshape(reshape)
    logits = predict_logits(layers, x, dtype=np.float32)
    top2 = np.sort(logits, axis=1)[:, -2:]
    ok = (top2[:, 1] - top2[:, 0]) > MARGIN
    keep = np.nonzero(ok)[0][:wanted]
    if len(keep) < wanted:
        raise RuntimeError(f"only {len(keep)} of {wanted} samples pass the margin filter")
    return features[keep], labels[keep]


def accuracy_of(layers, features, labels, reshape=None):
    x = features if reshape is None else features.reshape(reshape)
    logits = predict_logits(layers, x, dtype=np.float64)
    return float(np.count_nonzero(np.argmax(logits, axis=1) == labels)) / len(labels)


def build_mlp(out_dir: Path):
    rng = np.random.default_rng(20240817)
    train_x, train_y = two_spirals(2000, rng)
    layers = [
        Dense(rng, 2, 32, relu_after=True),
        Dense(rng, 32, 32, relu_after=True),
        Dense(rng, 32, 2, relu_after=False),
    ]
    train(layers, train_x.astype(np.float64), train_y, rng, epochs=1500, lr=0.1)

    candidates_x, candidates_y = two_spirals(800, rng)
    val_x, val_y = margin_filter(layers, candidates_x, candidates_y, 400)
    reference = accuracy_of(layers, val_x, val_y)
    print(f"tiny_mlp: train acc {accuracy_of(layers, train_x, train_y):.4f}, "
          f"validation acc {reference:.4f} (M={len(val_y)})")

    entries = [
        {"kind": "fully_connected", "m": 32, "n": 2, "k": 1, "h_in": 0, "w_in": 0,
         "stride": 1, "padding": 0, "has_relu": True},
        {"kind": "fully_connected", "m": 32, "n": 32, "k": 1, "h_in": 0, "w_in": 0,
         "stride": 1, "padding": 0, "has_relu": True},
        {"kind": "fully_connected", "m": 2, "n": 32, "k": 1, "h_in": 0, "w_in": 0,
         "stride": 1, "padding": 0, "has_relu": False},
    ]
    write_container(out_dir / "tiny_mlp.evm", "tiny-mlp", entries, layers, reference)
    write_csv(out_dir / "two_spirals.csv", val_x, val_y)


def build_cnn(out_dir: Path):
    rng = np.random.default_rng(20240818)
    train_x, train_y = texture_patches(1600, rng)
    layers = [
        Conv(rng, 1, 6, kernel=3, stride=1, padding=1, relu_after=True),
        Conv(rng, 6, 10, kernel=3, stride=2, padding=1, relu_after=True),
        Conv(rng, 10, 16, kernel=1, stride=1, padding=0, relu_after=True),
        GlobalPoolDense(rng, 16, 4, relu_after=False),
    ]
    train(
        layers, train_x.reshape(-1, 1, 8, 8).astype(np.float64), train_y, rng,
        epochs=30, lr=0.05, batch=64,
    )

    candidates_x, candidates_y = texture_patches(640, rng)
    val_x, val_y = margin_filter(
        layers, candidates_x, candidates_y, 320, reshape=(-1, 1, 8, 8)
    )
    reference = accuracy_of(layers, val_x, val_y, reshape=(-1, 1, 8, 8))
    print(f"small_cnn: train acc "
          f"{accuracy_of(layers, train_x, train_y, reshape=(-1, 1, 8, 8)):.4f}, "
          f"validation acc {reference:.4f} (M={len(val_y)})")

    entries = [
        {"kind": "conv", "m": 6, "n": 1, "k": 3, "h_in": 8, "w_in": 8,
         "stride": 1, "padding": 1, "has_relu": True},
        {"kind": "conv", "m": 10, "n": 6, "k": 3, "h_in": 8, "w_in": 8,
         "stride": 2, "padding": 1, "has_relu": True},
        {"kind": "pointwise_conv", "m": 16, "n": 10, "k": 1, "h_in": 4, "w_in": 4,
         "stride": 1, "padding": 0, "has_relu": True},
        {"kind": "fully_connected", "m": 4, "n": 16, "k": 1, "h_in": 0, "w_in": 0,
         "stride": 1, "padding": 0, "has_relu": False},
    ]
    write_container(out_dir / "small_cnn.evm", "small-cnn", entries, layers, reference)
    write_csv(out_dir / "blocks8.csv", val_x, val_y)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=ASSET_DIR)
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    build_mlp(args.out)
    build_cnn(args.out)


if __name__ == "__main__":
    main()
