"""Weight-level compression: pruning, truncated SVD, Tucker-2, and MAC budgets.

Structured pruning masks whole output channels at ReLU sites; the mask
chains through the sequential model, shrinking the next layer's effective
inputs. The final layer is never channel-masked (its outputs are the class
logits). Channel saliency is the filter L1 norm. Unstructured pruning
zeroes the smallest-magnitude weights in place.

`compressed_flops` reports the idealized MAC count of the compressed
forward pass: masked channels and zeroed weights are treated as removed,
and decomposed layers cost the sum of their factor stages. Decomposition
at high ranks can legitimately exceed the dense cost (the factor stages
add overhead), so the count is truthful rather than clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, PlanError
from .genome import CompressionPlan, Prune, PruneDecompose, Svd, Tucker
from .model import (
    KIND_FULLY_CONNECTED,
    LayerSpec,
    ModelSpec,
    TensorStore,
    model_flops,
    output_spatial,
)

_FLOAT_DUST = 1e-9  # guards integer-valued products against float round-off


def kept_channels(ratio: float, channels: int) -> int:
    """Channels surviving a structured prune: ceil((1 - ratio) * channels)."""
    return channels - math.floor(ratio * channels + _FLOAT_DUST)


def zeroed_weights(ratio: float, numel: int) -> int:
    """Weights removed by an unstructured prune: floor(ratio * numel)."""
    return math.floor(ratio * numel + _FLOAT_DUST)


def maskable(model: ModelSpec, layer_id: int) -> bool:
    """True if structured pruning may mask this layer's outputs."""
    return model.layers[layer_id].has_relu and layer_id != model.num_layers - 1


@dataclass(frozen=True)
class ChannelMask:
    layer_id: int
    keep: np.ndarray  # bool, length out_channels

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.keep))


@dataclass(frozen=True)
class SvdFactors:
    """Rank-r factors with left of shape (m, r) and right of shape (r, n)."""

    left: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right


@dataclass(frozen=True)
class Tucker2Factors:
    """Core (rank_out, rank_in, k, k) with channel-mode factor matrices."""

    core: np.ndarray
    factor_out: np.ndarray  # (m, rank_out)
    factor_in: np.ndarray  # (n, rank_in)

    def reconstruct(self) -> np.ndarray:
        return np.einsum(
            "pqab,ip,jq->ijab", self.core, self.factor_out, self.factor_in
        )


Factorization = SvdFactors | Tucker2Factors


def prune_unstructured(weight: np.ndarray, ratio: float) -> np.ndarray:
    """Zero the floor(ratio * numel) smallest-|w| entries, ties by flat index.

    Every surviving entry is bit-identical to the input.
    """
    if not 0.0 <= ratio <= 1.0:
        raise PlanError(f"prune ratio {ratio} outside [0,1]")
    out = weight.copy()
    n_zero = zeroed_weights(ratio, weight.size)
    if n_zero == 0:
        return out
    order = np.argsort(np.abs(weight.ravel()), kind="stable")
    flat = out.reshape(-1)
    flat[order[:n_zero]] = 0.0
    return out


def prune_structured(
    model: ModelSpec, tensors: TensorStore, layer_id: int, ratio: float
) -> ChannelMask:
    """Mask for the lowest-saliency output channels of one layer.

    Keeps the ceil((1 - ratio) * m) channels with the largest filter L1
    norm, ties broken toward the lower channel index. Requires a ReLU
    site on the layer.
    """
    layer = model.layers[layer_id]
    if not layer.has_relu:
        raise PlanError(f"layer {layer_id} has no maskable activation site")
    if not 0.0 <= ratio <= 1.0:
        raise PlanError(f"prune ratio {ratio} outside [0,1]")
    weight = tensors.weights[layer_id]
    saliency = np.abs(weight.astype(np.float64)).reshape(layer.out_channels, -1).sum(axis=1)
    order = np.argsort(-saliency, kind="stable")
    keep = np.zeros(layer.out_channels, dtype=bool)
    keep[order[: kept_channels(ratio, layer.out_channels)]] = True
    return ChannelMask(layer_id=layer_id, keep=keep)


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # Deterministic orientation: first nonzero entry of each left vector > 0.
    for i in range(u.shape[1]):
        col = u[:, i]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            u[:, i] = -col
            vt[i, :] = -vt[i, :]


def svd_truncate(weight: np.ndarray, rank: int) -> SvdFactors:
    """Frobenius-optimal rank-r factorization of a 2-D weight matrix."""
    if weight.ndim != 2:
        raise PlanError(f"svd_truncate expects a matrix, got shape {weight.shape}")
    m, n = weight.shape
    if not 1 <= rank <= min(m, n):
        raise PlanError(f"rank {rank} outside 1..{min(m, n)}")
    try:
        u, s, vt = np.linalg.svd(weight.astype(np.float64), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD did not converge: {exc}") from exc
    _fix_signs(u, vt)
    left = u[:, :rank] * s[:rank]
    right = vt[:rank, :]
    return SvdFactors(left=left, right=right)


def _leading_left_vectors(unfolding: np.ndarray, rank: int) -> np.ndarray:
    try:
        u, _, vt = np.linalg.svd(unfolding, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD did not converge: {exc}") from exc
    _fix_signs(u, vt)
    return u[:, :rank]


def tucker2(weight: np.ndarray, rank_out: int, rank_in: int) -> Tucker2Factors:
    """HOSVD Tucker-2 factorization along the two channel modes.

    Factors are the leading left singular vectors of the mode unfoldings;
    the core is the weight contracted with both factor transposes.
    """
    if weight.ndim != 4:
        raise PlanError(f"tucker2 expects a 4-way tensor, got shape {weight.shape}")
    m, n = weight.shape[0], weight.shape[1]
    if not 1 <= rank_out <= m:
        raise PlanError(f"rank_out {rank_out} outside 1..{m}")
    if not 1 <= rank_in <= n:
        raise PlanError(f"rank_in {rank_in} outside 1..{n}")
    w64 = weight.astype(np.float64)
    factor_out = _leading_left_vectors(w64.reshape(m, -1), rank_out)
    factor_in = _leading_left_vectors(
        np.moveaxis(w64, 1, 0).reshape(n, -1), rank_in
    )
    core = np.einsum("ijab,ip,jq->pqab", w64, factor_out, factor_in)
    return Tucker2Factors(core=core, factor_out=factor_out, factor_in=factor_in)


# ---------------------------------------------------------------------------
# MAC accounting


def _mask_ratio(action) -> float | None:
    """Structured-prune ratio carried by an action, if any."""
    if isinstance(action, Prune) and action.structured:
        return action.ratio
    if isinstance(action, PruneDecompose):
        return action.ratio
    return None


def kept_output_channels(model: ModelSpec, plan: CompressionPlan) -> list[int]:
    """Surviving output-channel count per layer under the plan's masks."""
    counts = []
    for layer, action in zip(model.layers, plan.actions):
        ratio = _mask_ratio(action)
        if ratio is not None and maskable(model, layer.id):
            counts.append(kept_channels(ratio, layer.out_channels))
        else:
            counts.append(layer.out_channels)
    return counts


def layer_compressed_flops(
    layer: LayerSpec, action, kept_in: int, kept_out: int
) -> int:
    """MACs of one layer under an action, given surviving channel counts."""
    spatial_out = 1
    if layer.is_spatial:
        h_out, w_out = output_spatial(layer)
        spatial_out = h_out * w_out

    decomposition = None
    if isinstance(action, (Svd, Tucker)):
        decomposition = action
    elif isinstance(action, PruneDecompose):
        decomposition = action.decomposition

    if isinstance(decomposition, Svd):
        return decomposition.rank * (kept_out + kept_in) * spatial_out
    if isinstance(decomposition, Tucker):
        return (
            kept_in * decomposition.rank_in * layer.h_in * layer.w_in
            + decomposition.rank_in * decomposition.rank_out * layer.kernel**2 * spatial_out
            + decomposition.rank_out * kept_out * spatial_out
        )
    if isinstance(action, Prune) and not action.structured:
        numel = layer.out_channels * layer.in_channels * layer.kernel**2
        return (numel - zeroed_weights(action.ratio, numel)) * spatial_out
    # Dense layer (None or structured prune): masked channels drop out.
    return kept_out * kept_in * layer.kernel**2 * spatial_out


def compressed_flops(model: ModelSpec, plan: CompressionPlan) -> int:
    """Exact MAC count of the compressed forward pass."""
    plan.validate(model)
    kept_out = kept_output_channels(model, plan)
    total = 0
    for i, (layer, action) in enumerate(zip(model.layers, plan.actions)):
        kept_in = layer.in_channels if i == 0 else kept_out[i - 1]
        total += layer_compressed_flops(layer, action, kept_in, kept_out[i])
    return total


def flops_ratio(model: ModelSpec, plan: CompressionPlan) -> float:
    """Compressed MACs as a fraction of the uncompressed MACs."""
    base = model_flops(model)
    if base == 0:
        return 1.0
    return compressed_flops(model, plan) / base


# ---------------------------------------------------------------------------
# Plan application


@dataclass
class CompressedLayer:
    """Everything the forward pass needs for one layer."""

    weight: np.ndarray | None
    factorization: Factorization | None
    bias: np.ndarray
    mask: np.ndarray | None  # post-activation keep mask, or None


@dataclass
class CompressedModel:
    spec: ModelSpec
    layers: list[CompressedLayer]

    @property
    def masks(self) -> list[ChannelMask | None]:
        return [
            ChannelMask(i, l.mask) if l.mask is not None else None
            for i, l in enumerate(self.layers)
        ]


def _as_matrix(layer: LayerSpec, weight: np.ndarray) -> np.ndarray:
    if layer.kind == KIND_FULLY_CONNECTED:
        return weight
    return weight.reshape(layer.out_channels, layer.in_channels)


def _decompose(layer: LayerSpec, weight: np.ndarray, decomposition) -> Factorization:
    if isinstance(decomposition, Svd):
        return svd_truncate(_as_matrix(layer, weight), decomposition.rank)
    return tucker2(weight, decomposition.rank_out, decomposition.rank_in)


def apply_plan(
    model: ModelSpec, tensors: TensorStore, plan: CompressionPlan
) -> CompressedModel:
    """Apply every layer action; prune-then-decompose within a layer.

    Masks are returned for the evaluator to apply after the activation;
    weight tensors of masked layers are left dense (the decomposition of a
    masked layer acts on the weight with masked rows zeroed).
    """
    plan.validate(model)
    out: list[CompressedLayer] = []
    for layer, action in zip(model.layers, plan.actions):
        weight = tensors.weights[layer.id]
        bias = tensors.biases[layer.id]
        mask = None
        ratio = _mask_ratio(action)
        if ratio is not None and maskable(model, layer.id):
            mask = prune_structured(model, tensors, layer.id, ratio).keep

        if action is None or isinstance(action, Prune):
            if isinstance(action, Prune) and not action.structured:
                weight = prune_unstructured(weight, action.ratio)
            out.append(CompressedLayer(weight, None, bias, mask))
            continue

        decomposition = action.decomposition if isinstance(action, PruneDecompose) else action
        if mask is not None:
            weight = weight.copy()
            weight[~mask] = 0.0
        factors = _decompose(layer, weight, decomposition)
        out.append(CompressedLayer(None, factors, bias, mask))
    return CompressedModel(spec=model, layers=out)
