"""Layer-wise model description, binary container I/O, and MAC counting.

Container layout: bytes 0..3 hold a little-endian uint32 header length H,
bytes 4..4+H hold a UTF-8 JSON manifest ``{name, layers: [...]}``, and the
rest of the file is the weight blob: one little-endian float32 weight tensor
followed by one float32 bias vector per layer, in layer order, row-major
(out-channel major). Layer entries carry the keys
``kind, m, n, k, h_in, w_in, stride, padding, has_relu``.

FLOPs are counted as multiply-accumulate operations (1 MAC = 1 FLOP here).
Bias adds, activations, and pooling are not counted; they are dominated by
MACs and identical on both sides of any compression ratio.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelFormatError

KIND_FULLY_CONNECTED = "fully_connected"
KIND_CONV = "conv"
KIND_POINTWISE = "pointwise_conv"
LAYER_KINDS = (KIND_FULLY_CONNECTED, KIND_CONV, KIND_POINTWISE)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential chain.

    ``out_channels``/``in_channels``/``kernel`` describe the weight tensor:
    (out, in) for fully-connected layers, (out, in, kernel, kernel) for
    convolutions. ``has_relu`` marks a maskable activation site for
    structured pruning.
    """

    id: int
    kind: str
    out_channels: int
    in_channels: int
    kernel: int
    h_in: int
    w_in: int
    stride: int
    padding: int
    has_relu: bool

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"layer {self.id}: unknown kind {self.kind!r}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ModelFormatError(f"layer {self.id}: channel counts must be positive")
        if self.kernel < 1:
            raise ModelFormatError(f"layer {self.id}: kernel must be positive")
        if self.stride < 1:
            raise ModelFormatError(f"layer {self.id}: stride must be positive")
        if self.padding < 0 or self.h_in < 0 or self.w_in < 0:
            raise ModelFormatError(f"layer {self.id}: negative spatial field")
        if self.kind == KIND_FULLY_CONNECTED:
            if self.kernel != 1 or self.h_in != 0 or self.w_in != 0:
                raise ModelFormatError(
                    f"layer {self.id}: fully_connected requires k=1 and no spatial input"
                )
        if self.kind == KIND_POINTWISE and self.kernel != 1:
            raise ModelFormatError(f"layer {self.id}: pointwise_conv requires k=1")
        if self.kind in (KIND_CONV, KIND_POINTWISE) and (self.h_in < 1 or self.w_in < 1):
            raise ModelFormatError(f"layer {self.id}: conv layer requires spatial input")

    @property
    def is_spatial(self) -> bool:
        return self.kind in (KIND_CONV, KIND_POINTWISE)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == KIND_FULLY_CONNECTED:
            return (self.out_channels, self.in_channels)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer chain plus derived layer-class counts.

    ``num_rank1_layers`` counts fully-connected and pointwise layers (the
    SVD candidates); ``num_spatial_conv_layers`` counts k>1 convolutions
    (the Tucker-2 candidates). Both are recomputed from the layer list and
    never trusted from input.
    """

    name: str
    layers: tuple[LayerSpec, ...]
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_rank1_layers(self) -> int:
        return sum(
            1 for l in self.layers if l.kind in (KIND_FULLY_CONNECTED, KIND_POINTWISE)
        )

    @property
    def num_spatial_conv_layers(self) -> int:
        return sum(1 for l in self.layers if l.kind == KIND_CONV and l.kernel > 1)


@dataclass
class TensorStore:
    """Per-layer float32 weight tensors and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "TensorStore":
        return TensorStore([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def output_spatial(layer: LayerSpec) -> tuple[int, int]:
    """Output feature-map size of a conv-kind layer.

    Standard convolution arithmetic: floor((in + 2*padding - k)/stride) + 1.
    """
    if not layer.is_spatial:
        raise ModelFormatError(f"layer {layer.id}: {layer.kind} has no spatial output")
    k, p, s = layer.kernel, layer.padding, layer.stride
    if layer.h_in + 2 * p < k or layer.w_in + 2 * p < k:
        raise ModelFormatError(
            f"layer {layer.id}: kernel {k} larger than padded input "
            f"{layer.h_in + 2 * p}x{layer.w_in + 2 * p}"
        )
    h_out = (layer.h_in + 2 * p - k) // s + 1
    w_out = (layer.w_in + 2 * p - k) // s + 1
    return h_out, w_out


def layer_flops(layer: LayerSpec) -> int:
    """Exact MAC count of one uncompressed layer."""
    if layer.kind == KIND_FULLY_CONNECTED:
        return layer.out_channels * layer.in_channels
    h_out, w_out = output_spatial(layer)
    return layer.out_channels * layer.in_channels * layer.kernel**2 * h_out * w_out


def model_flops(model: ModelSpec) -> int:
    """Exact MAC count of the uncompressed model (sum over layers)."""
    return sum(layer_flops(l) for l in model.layers)


_MANIFEST_LAYER_KEYS = {
    "kind", "m", "n", "k", "h_in", "w_in", "stride", "padding", "has_relu",
}


def _layer_from_manifest(i: int, entry: dict) -> LayerSpec:
    if not isinstance(entry, dict):
        raise ModelFormatError(f"layer {i}: manifest entry is not an object")
    missing = _MANIFEST_LAYER_KEYS - entry.keys()
    if missing:
        raise ModelFormatError(f"layer {i}: manifest entry missing {sorted(missing)}")
    try:
        layer = LayerSpec(
            id=i,
            kind=str(entry["kind"]),
            out_channels=int(entry["m"]),
            in_channels=int(entry["n"]),
            kernel=int(entry["k"]),
            h_in=int(entry["h_in"]),
            w_in=int(entry["w_in"]),
            stride=int(entry["stride"]),
            padding=int(entry["padding"]),
            has_relu=bool(entry["has_relu"]),
        )
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"layer {i}: bad field value ({exc})") from exc
    layer.validate()
    return layer


def parse_model(manifest_bytes: bytes, blob_bytes: bytes) -> tuple[ModelSpec, TensorStore]:
    """Validate a JSON manifest plus raw weight blob into a model.

    Raises ModelFormatError on malformed manifests, blob length mismatch,
    non-finite values, or a broken channel chain.
    """
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "layers" not in manifest:
        raise ModelFormatError("malformed manifest: expected object with 'layers'")
    entries = manifest["layers"]
    if not isinstance(entries, list):
        raise ModelFormatError("malformed manifest: 'layers' must be a list")

    layers = tuple(_layer_from_manifest(i, e) for i, e in enumerate(entries))
    for prev, nxt in zip(layers, layers[1:]):
        if nxt.in_channels != prev.out_channels:
            raise ModelFormatError(
                f"channel chain mismatch: layer {prev.id} emits {prev.out_channels} "
                f"channels but layer {nxt.id} expects {nxt.in_channels}"
            )

    expected = sum(
        (int(np.prod(l.weight_shape)) + l.out_channels) * 4 for l in layers
    )
    if len(blob_bytes) != expected:
        raise ModelFormatError(
            f"blob length mismatch: expected {expected} bytes, got {len(blob_bytes)}"
        )

    weights, biases = [], []
    offset = 0
    for layer in layers:
        count = int(np.prod(layer.weight_shape))
        w = np.frombuffer(blob_bytes, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        b = np.frombuffer(blob_bytes, dtype="<f4", count=layer.out_channels, offset=offset)
        offset += layer.out_channels * 4
        w = w.reshape(layer.weight_shape).copy()
        b = b.copy()
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(b)):
            raise ModelFormatError(f"layer {layer.id}: non-finite values in tensors")
        # parsed tensors are shared read-only by concurrent evaluations
        w.setflags(write=False)
        b.setflags(write=False)
        weights.append(w)
        biases.append(b)

    extra = {k: v for k, v in manifest.items() if k not in ("name", "layers")}
    spec = ModelSpec(name=str(manifest.get("name", "")), layers=layers, extra=extra)
    return spec, TensorStore(weights, biases)


def manifest_dict(model: ModelSpec) -> dict:
    """JSON-ready manifest for a ModelSpec (inverse of parsing)."""
    out = {
        "name": model.name,
        "layers": [
            {
                "kind": l.kind,
                "m": l.out_channels,
                "n": l.in_channels,
                "k": l.kernel,
                "h_in": l.h_in,
                "w_in": l.w_in,
                "stride": l.stride,
                "padding": l.padding,
                "has_relu": l.has_relu,
            }
            for l in model.layers
        ],
    }
    out.update(model.extra)
    return out


def serialize_model(model: ModelSpec, tensors: TensorStore) -> bytes:
    """Pack a model into the binary container format."""
    header = json.dumps(manifest_dict(model)).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header]
    for layer, w, b in zip(model.layers, tensors.weights, tensors.biases):
        if w.shape != layer.weight_shape or b.shape != (layer.out_channels,):
            raise ModelFormatError(
                f"layer {layer.id}: tensor shape does not match the layer description"
            )
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def load_model_bytes(data: bytes) -> tuple[ModelSpec, TensorStore]:
    """Split a container byte string into manifest + blob and parse it."""
    if len(data) < 4:
        raise ModelFormatError("container too short for header")
    (header_len,) = struct.unpack("<I", data[:4])
    if len(data) < 4 + header_len:
        raise ModelFormatError("container truncated inside manifest")
    return parse_model(data[4 : 4 + header_len], data[4 + header_len :])


def load_model(path) -> tuple[ModelSpec, TensorStore]:
    """Read a model container from disk."""
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


def save_model(path, model: ModelSpec, tensors: TensorStore) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model, tensors))
