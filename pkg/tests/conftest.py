from __future__ import annotations

import numpy as np
import pytest

from evocomp.model import (
    KIND_CONV,
    KIND_FULLY_CONNECTED,
    KIND_POINTWISE,
    LayerSpec,
    ModelSpec,
    TensorStore,
)


def fc_layer(i, out_channels, in_channels, has_relu=True) -> LayerSpec:
    return LayerSpec(
        id=i, kind=KIND_FULLY_CONNECTED, out_channels=out_channels,
        in_channels=in_channels, kernel=1, h_in=0, w_in=0, stride=1,
        padding=0, has_relu=has_relu,
    )


def conv_layer(i, out_channels, in_channels, kernel, h_in, stride=1, padding=0,
               has_relu=True) -> LayerSpec:
    kind = KIND_POINTWISE if kernel == 1 else KIND_CONV
    return LayerSpec(
        id=i, kind=kind, out_channels=out_channels, in_channels=in_channels,
        kernel=kernel, h_in=h_in, w_in=h_in, stride=stride, padding=padding,
        has_relu=has_relu,
    )


def mlp_spec(sizes: list[int], name="mlp") -> ModelSpec:
    layers = tuple(
        fc_layer(i, sizes[i + 1], sizes[i], has_relu=(i < len(sizes) - 2))
        for i in range(len(sizes) - 1)
    )
    return ModelSpec(name=name, layers=layers)


def random_tensors(spec: ModelSpec, rng: np.random.Generator) -> TensorStore:
    return TensorStore(
        [rng.normal(size=l.weight_shape).astype(np.float32) for l in spec.layers],
        [rng.normal(size=(l.out_channels,)).astype(np.float32) for l in spec.layers],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" in nodeid:
                rows.append((nodeid.split("::")[-1], status == "passed"))
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok in sorted(rows):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}")
