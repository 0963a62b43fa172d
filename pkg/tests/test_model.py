import json
import struct

import numpy as np
import pytest

import oracles
from conftest import conv_layer, fc_layer
from evocomp.errors import ModelFormatError
from evocomp.model import (
    ModelSpec,
    layer_flops,
    load_model_bytes,
    model_flops,
    output_spatial,
    parse_model,
    serialize_model,
)


def mlp_manifest():
    return {
        "name": "tiny",
        "layers": [
            {"kind": "fully_connected", "m": 16, "n": 4, "k": 1, "h_in": 0,
             "w_in": 0, "stride": 1, "padding": 0, "has_relu": True},
            {"kind": "fully_connected", "m": 16, "n": 16, "k": 1, "h_in": 0,
             "w_in": 0, "stride": 1, "padding": 0, "has_relu": True},
            {"kind": "fully_connected", "m": 3, "n": 16, "k": 1, "h_in": 0,
             "w_in": 0, "stride": 1, "padding": 0, "has_relu": False},
        ],
    }


def blob_for(manifest, rng):
    parts = []
    for entry in manifest["layers"]:
        m, n, k = entry["m"], entry["n"], entry["k"]
        shape = (m, n) if entry["kind"] == "fully_connected" else (m, n, k, k)
        parts.append(rng.normal(size=shape).astype("<f4").tobytes())
        parts.append(rng.normal(size=(m,)).astype("<f4").tobytes())
    return b"".join(parts)


class TestParseModel:
    def test_three_layer_mlp_counts(self, rng):
        manifest = mlp_manifest()
        spec, tensors = parse_model(json.dumps(manifest).encode(), blob_for(manifest, rng))
        assert spec.num_layers == 3
        assert spec.num_rank1_layers == 3
        assert spec.num_spatial_conv_layers == 0
        assert tensors.weights[0].shape == (16, 4)
        assert tensors.biases[2].shape == (3,)

    def test_short_blob_rejected(self, rng):
        manifest = mlp_manifest()
        blob = blob_for(manifest, rng)
        with pytest.raises(ModelFormatError, match="blob length mismatch"):
            parse_model(json.dumps(manifest).encode(), blob[:-4])

    def test_channel_chain_mismatch(self, rng):
        manifest = mlp_manifest()
        manifest["layers"][1]["n"] = 8
        blob = blob_for(manifest, rng)
        with pytest.raises(ModelFormatError, match="channel chain mismatch"):
            parse_model(json.dumps(manifest).encode(), blob)

    def test_non_finite_values_rejected(self, rng):
        manifest = mlp_manifest()
        blob = bytearray(blob_for(manifest, rng))
        blob[0:4] = struct.pack("<f", float("nan"))
        with pytest.raises(ModelFormatError, match="non-finite"):
            parse_model(json.dumps(manifest).encode(), bytes(blob))

    def test_malformed_manifest(self):
        with pytest.raises(ModelFormatError, match="malformed manifest"):
            parse_model(b"not json", b"")

    def test_fc_with_spatial_input_rejected(self, rng):
        manifest = mlp_manifest()
        manifest["layers"][0]["h_in"] = 8
        with pytest.raises(ModelFormatError):
            parse_model(json.dumps(manifest).encode(), blob_for(manifest, rng))

    def test_roundtrip_identity(self, rng):
        manifest = mlp_manifest()
        spec, tensors = parse_model(json.dumps(manifest).encode(), blob_for(manifest, rng))
        spec2, tensors2 = load_model_bytes(serialize_model(spec, tensors))
        assert spec2.layers == spec.layers
        assert spec2.name == spec.name
        for a, b in zip(tensors.weights, tensors2.weights):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(tensors.biases, tensors2.biases):
            assert a.tobytes() == b.tobytes()

    def test_extra_manifest_keys_preserved(self, rng):
        manifest = mlp_manifest()
        manifest["reference_accuracy"] = 0.93
        spec, tensors = parse_model(json.dumps(manifest).encode(), blob_for(manifest, rng))
        assert spec.extra["reference_accuracy"] == 0.93
        spec2, _ = load_model_bytes(serialize_model(spec, tensors))
        assert spec2.extra["reference_accuracy"] == 0.93


class TestOutputSpatial:
    def test_same_padding_identity(self):
        layer = conv_layer(0, 2, 3, kernel=3, h_in=32, stride=1, padding=1)
        assert output_spatial(layer) == (32, 32)

    def test_strided_matches_window_enumeration(self):
        layer = conv_layer(0, 2, 3, kernel=3, h_in=32, stride=2, padding=0)
        expected = len(oracles.window_starts(32, 3, 0, 2))
        assert expected == 15
        assert output_spatial(layer) == (expected, expected)

    def test_kernel_larger_than_input(self):
        layer = conv_layer(0, 2, 3, kernel=3, h_in=2, stride=1, padding=0)
        with pytest.raises(ModelFormatError, match="kernel"):
            output_spatial(layer)

    def test_random_shapes_match_enumeration(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 4))
            h = int(rng.integers(k, 12))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 2))
            layer = conv_layer(0, 1, 1, kernel=k, h_in=h, stride=s, padding=p)
            assert output_spatial(layer)[0] == len(oracles.window_starts(h, k, p, s))


class TestFlops:
    def test_fully_connected(self):
        assert layer_flops(fc_layer(0, 10, 20)) == 200

    def test_conv_against_mac_counting(self):
        layer = conv_layer(0, 2, 3, kernel=3, h_in=4, stride=1, padding=1)
        assert output_spatial(layer) == (4, 4)
        assert layer_flops(layer) == 864  # 2 * 3 * 9 * 16
        assert layer_flops(layer) == oracles.conv_mac_count(2, 3, 3, 4, 4, 1, 1)

    def test_pointwise_against_mac_counting(self):
        layer = conv_layer(0, 4, 8, kernel=1, h_in=7, stride=1, padding=0)
        assert layer_flops(layer) == 1568
        assert layer_flops(layer) == oracles.conv_mac_count(4, 8, 1, 7, 7, 1, 0)

    def test_random_conv_shapes_match_mac_counting(self, rng):
        for _ in range(60):
            m = int(rng.integers(1, 9))
            n = int(rng.integers(1, 9))
            k = int(rng.integers(1, 4))
            h = int(rng.integers(k, 9))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 2))
            layer = conv_layer(0, m, n, kernel=k, h_in=h, stride=s, padding=p)
            assert layer_flops(layer) == oracles.conv_mac_count(m, n, k, h, h, s, p)

    def test_model_flops_empty(self):
        assert model_flops(ModelSpec(name="empty", layers=())) == 0

    def test_model_flops_additive(self):
        spec = ModelSpec(
            name="two",
            layers=(
                fc_layer(0, 10, 20),
                conv_layer(1, 2, 10, kernel=3, h_in=4, stride=1, padding=1),
            ),
        )
        assert model_flops(spec) == 200 + 2 * 10 * 9 * 16

    def test_model_flops_is_sum_of_layers(self, rng):
        for _ in range(20):
            spec, _ = oracles.random_chain(rng)
            assert model_flops(spec) == sum(layer_flops(l) for l in spec.layers)
