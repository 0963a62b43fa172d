"""Individual encoding: gene schemas and genome <-> compression-plan translation.

A genome is a flat float vector. Continuous genes are pruning ratios in
[0, 1]; discrete genes are integer rank codes stored as whole floats:
64 bins for SVD ranks, 8 bins per mode for Tucker-2 ranks. A code c for a
gene with ceiling C and maximum rank R decodes to ``max(1, round(c*R/C))``,
so the top code always means "undecomposed" and code 1 the heaviest cut.

Task layouts:
  prune_unstructured / prune_structured  one ratio gene per layer
  decompose        one SVD code per fully-connected/pointwise layer,
                   a (rank_out, rank_in) code pair per k>1 convolution
  decompose_prune  pruning block (all layers) then decomposition block
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PlanError, SchemaError, UnrepresentableRankError
from .model import KIND_CONV, KIND_FULLY_CONNECTED, KIND_POINTWISE, ModelSpec

TASK_PRUNE_UNSTRUCTURED = "prune_unstructured"
TASK_PRUNE_STRUCTURED = "prune_structured"
TASK_DECOMPOSE = "decompose"
TASK_DECOMPOSE_PRUNE = "decompose_prune"
TASKS = (
    TASK_PRUNE_UNSTRUCTURED,
    TASK_PRUNE_STRUCTURED,
    TASK_DECOMPOSE,
    TASK_DECOMPOSE_PRUNE,
)

GENE_PRUNE = "prune_ratio"
GENE_SVD = "svd_rank_code"
GENE_TUCKER_OUT = "tucker_rank_out_code"
GENE_TUCKER_IN = "tucker_rank_in_code"

SVD_CODE_MAX = 64
TUCKER_CODE_MAX = 8


@dataclass(frozen=True)
class GeneDescriptor:
    """Domain of one genome position.

    Continuous genes (``prune_ratio``) live in [0, 1] and carry no code
    ceiling. Discrete genes carry ``code_max`` (64 or 8) and the maximum
    decodable rank ``max_rank`` (min(m, n) for SVD, m or n for Tucker).
    """

    layer_id: int
    kind: str
    code_max: int | None = None
    max_rank: int | None = None

    @property
    def is_continuous(self) -> bool:
        return self.kind == GENE_PRUNE

    def identity_value(self) -> float:
        """Gene value that leaves the layer untouched."""
        return 0.0 if self.is_continuous else float(self.code_max)

    def to_json(self) -> dict:
        return {
            "layer": self.layer_id,
            "kind": self.kind,
            "code_max": self.code_max,
            "max_rank": self.max_rank,
        }


@dataclass(frozen=True)
class GenomeSchema:
    task: str
    descriptors: tuple[GeneDescriptor, ...]

    @property
    def length(self) -> int:
        return len(self.descriptors)

    def identity_genome(self) -> np.ndarray:
        return np.array([d.identity_value() for d in self.descriptors], dtype=np.float64)

    def continuous_mask(self) -> np.ndarray:
        return np.array([d.is_continuous for d in self.descriptors], dtype=bool)

    def code_max_vector(self) -> np.ndarray:
        """Per-gene code ceiling; 1.0 at continuous positions (unused there)."""
        return np.array(
            [1.0 if d.is_continuous else float(d.code_max) for d in self.descriptors],
            dtype=np.float64,
        )

    def to_json(self) -> list[dict]:
        return [d.to_json() for d in self.descriptors]


# ---------------------------------------------------------------------------
# Plan actions


@dataclass(frozen=True)
class Prune:
    ratio: float
    structured: bool = False


@dataclass(frozen=True)
class Svd:
    rank: int


@dataclass(frozen=True)
class Tucker:
    rank_out: int
    rank_in: int


@dataclass(frozen=True)
class PruneDecompose:
    """Structured prune followed by decomposition of the masked weight."""

    ratio: float
    decomposition: Svd | Tucker


LayerAction = Prune | Svd | Tucker | PruneDecompose | None


@dataclass(frozen=True)
class CompressionPlan:
    """One action (or None) per model layer, in layer order."""

    actions: tuple[LayerAction, ...]

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> LayerAction:
        return self.actions[i]

    def validate(self, model: ModelSpec) -> None:
        if len(self.actions) != model.num_layers:
            raise PlanError(
                f"plan has {len(self.actions)} actions for {model.num_layers} layers"
            )
        for layer, action in zip(model.layers, self.actions):
            _validate_action(layer, action)


def _validate_action(layer, action: LayerAction) -> None:
    if action is None:
        return
    if isinstance(action, Prune):
        if not 0.0 <= action.ratio <= 1.0:
            raise PlanError(f"layer {layer.id}: prune ratio {action.ratio} outside [0,1]")
        return
    if isinstance(action, Svd):
        limit = min(layer.out_channels, layer.in_channels)
        if layer.kind == KIND_CONV and layer.kernel > 1:
            raise PlanError(f"layer {layer.id}: SVD only applies to k=1 layers")
        if not 1 <= action.rank <= limit:
            raise PlanError(f"layer {layer.id}: SVD rank {action.rank} outside 1..{limit}")
        return
    if isinstance(action, Tucker):
        if layer.kind != KIND_CONV or layer.kernel <= 1:
            raise PlanError(f"layer {layer.id}: Tucker-2 requires a k>1 convolution")
        if not 1 <= action.rank_out <= layer.out_channels:
            raise PlanError(f"layer {layer.id}: rank_out {action.rank_out} outside range")
        if not 1 <= action.rank_in <= layer.in_channels:
            raise PlanError(f"layer {layer.id}: rank_in {action.rank_in} outside range")
        return
    if isinstance(action, PruneDecompose):
        _validate_action(layer, Prune(action.ratio, structured=True))
        _validate_action(layer, action.decomposition)
        return
    raise PlanError(f"layer {layer.id}: unknown action {action!r}")


# ---------------------------------------------------------------------------
# Schema construction


def _decomposition_descriptors(model: ModelSpec) -> list[GeneDescriptor]:
    out: list[GeneDescriptor] = []
    for layer in model.layers:
        if layer.kind in (KIND_FULLY_CONNECTED, KIND_POINTWISE):
            out.append(
                GeneDescriptor(
                    layer.id,
                    GENE_SVD,
                    code_max=SVD_CODE_MAX,
                    max_rank=min(layer.out_channels, layer.in_channels),
                )
            )
        elif layer.kind == KIND_CONV and layer.kernel > 1:
            out.append(
                GeneDescriptor(
                    layer.id, GENE_TUCKER_OUT,
                    code_max=TUCKER_CODE_MAX, max_rank=layer.out_channels,
                )
            )
            out.append(
                GeneDescriptor(
                    layer.id, GENE_TUCKER_IN,
                    code_max=TUCKER_CODE_MAX, max_rank=layer.in_channels,
                )
            )
    return out


def build_schema(model: ModelSpec, task: str) -> GenomeSchema:
    """Gene layout for a task on a model; descriptor order is layer order."""
    if task not in TASKS:
        raise SchemaError(f"unknown task {task!r}; expected one of {TASKS}")
    prune_genes = [GeneDescriptor(l.id, GENE_PRUNE) for l in model.layers]
    if task in (TASK_PRUNE_UNSTRUCTURED, TASK_PRUNE_STRUCTURED):
        descriptors = prune_genes
    elif task == TASK_DECOMPOSE:
        descriptors = _decomposition_descriptors(model)
        if not descriptors:
            raise SchemaError("model has no decomposable layer")
    else:
        decomp = _decomposition_descriptors(model)
        if not decomp:
            raise SchemaError("model has no decomposable layer")
        descriptors = prune_genes + decomp
    return GenomeSchema(task=task, descriptors=tuple(descriptors))


# ---------------------------------------------------------------------------
# Genome validation and translation


def validate_genome(genome: np.ndarray, schema: GenomeSchema) -> None:
    genome = np.asarray(genome)
    if genome.shape != (schema.length,):
        raise SchemaError(
            f"genome length {genome.shape} does not match schema length {schema.length}"
        )
    for value, desc in zip(genome, schema.descriptors):
        if not np.isfinite(value):
            raise SchemaError(f"gene for layer {desc.layer_id} is not finite")
        if desc.is_continuous:
            if not 0.0 <= value <= 1.0:
                raise SchemaError(
                    f"prune gene for layer {desc.layer_id} = {value} outside [0,1]"
                )
        else:
            if value != math.floor(value) or not 1 <= value <= desc.code_max:
                raise SchemaError(
                    f"rank code for layer {desc.layer_id} = {value} "
                    f"outside integers 1..{desc.code_max}"
                )


def decode_rank(code: int, max_rank: int, code_max: int) -> int:
    """Linear code-to-rank map, rounded to nearest and clamped to >= 1."""
    return max(1, math.floor(code * max_rank / code_max + 0.5))


def decode(genome: np.ndarray, schema: GenomeSchema, model: ModelSpec) -> CompressionPlan:
    """Translate a genome into per-layer compression actions."""
    validate_genome(genome, schema)
    genome = np.asarray(genome, dtype=np.float64)

    prune_ratio: dict[int, float] = {}
    decomp: dict[int, Svd | Tucker] = {}
    tucker_out: dict[int, int] = {}
    for value, desc in zip(genome, schema.descriptors):
        if desc.kind == GENE_PRUNE:
            prune_ratio[desc.layer_id] = float(value)
        elif desc.kind == GENE_SVD:
            decomp[desc.layer_id] = Svd(decode_rank(int(value), desc.max_rank, desc.code_max))
        elif desc.kind == GENE_TUCKER_OUT:
            tucker_out[desc.layer_id] = decode_rank(int(value), desc.max_rank, desc.code_max)
        else:
            decomp[desc.layer_id] = Tucker(
                rank_out=tucker_out[desc.layer_id],
                rank_in=decode_rank(int(value), desc.max_rank, desc.code_max),
            )

    structured = schema.task in (TASK_PRUNE_STRUCTURED, TASK_DECOMPOSE_PRUNE)
    actions: list[LayerAction] = []
    for layer in model.layers:
        if schema.task == TASK_DECOMPOSE:
            actions.append(decomp.get(layer.id))
        elif schema.task == TASK_DECOMPOSE_PRUNE:
            d = decomp.get(layer.id)
            p = prune_ratio[layer.id]
            actions.append(PruneDecompose(p, d) if d is not None else Prune(p, True))
        else:
            actions.append(Prune(prune_ratio[layer.id], structured=structured))
    return CompressionPlan(tuple(actions))


def _encode_rank(rank: int, desc: GeneDescriptor, layer_id: int) -> float:
    matches = [
        c for c in range(1, desc.code_max + 1)
        if decode_rank(c, desc.max_rank, desc.code_max) == rank
    ]
    if matches:
        return float(matches[0])
    nearest = min(
        range(1, desc.code_max + 1),
        key=lambda c: (abs(decode_rank(c, desc.max_rank, desc.code_max) - rank), c),
    )
    raise UnrepresentableRankError(
        f"layer {layer_id}: rank {rank} is not representable with "
        f"{desc.code_max} codes over max rank {desc.max_rank} "
        f"(nearest code {nearest} -> rank "
        f"{decode_rank(nearest, desc.max_rank, desc.code_max)})",
        nearest_code=nearest,
    )


def encode(plan: CompressionPlan, schema: GenomeSchema, model: ModelSpec) -> np.ndarray:
    """Inverse translation; raises UnrepresentableRankError for ranks with no code."""
    plan.validate(model)
    values: list[float] = []
    for desc in schema.descriptors:
        action = plan[desc.layer_id]
        if desc.kind == GENE_PRUNE:
            if isinstance(action, Prune):
                values.append(action.ratio)
            elif isinstance(action, PruneDecompose):
                values.append(action.ratio)
            elif action is None:
                values.append(0.0)
            else:
                raise PlanError(
                    f"layer {desc.layer_id}: plan carries no prune ratio for a prune gene"
                )
            continue
        inner = action.decomposition if isinstance(action, PruneDecompose) else action
        if desc.kind == GENE_SVD:
            if not isinstance(inner, Svd):
                raise PlanError(f"layer {desc.layer_id}: expected an SVD action")
            values.append(_encode_rank(inner.rank, desc, desc.layer_id))
        elif desc.kind == GENE_TUCKER_OUT:
            if not isinstance(inner, Tucker):
                raise PlanError(f"layer {desc.layer_id}: expected a Tucker action")
            values.append(_encode_rank(inner.rank_out, desc, desc.layer_id))
        else:
            values.append(_encode_rank(inner.rank_in, desc, desc.layer_id))
    genome = np.array(values, dtype=np.float64)
    validate_genome(genome, schema)
    return genome


# ---------------------------------------------------------------------------
# JSON wire forms (logs, plan files, evaluation protocol)


def action_to_json(action: LayerAction) -> dict:
    if action is None:
        return {"type": "none"}
    if isinstance(action, Prune):
        return {"type": "prune", "ratio": action.ratio, "structured": action.structured}
    if isinstance(action, Svd):
        return {"type": "svd", "rank": action.rank}
    if isinstance(action, Tucker):
        return {"type": "tucker", "rank_out": action.rank_out, "rank_in": action.rank_in}
    return {
        "type": "prune_decompose",
        "ratio": action.ratio,
        "decomposition": action_to_json(action.decomposition),
    }


def action_from_json(obj: dict) -> LayerAction:
    kind = obj.get("type")
    if kind == "none":
        return None
    if kind == "prune":
        return Prune(float(obj["ratio"]), bool(obj.get("structured", False)))
    if kind == "svd":
        return Svd(int(obj["rank"]))
    if kind == "tucker":
        return Tucker(int(obj["rank_out"]), int(obj["rank_in"]))
    if kind == "prune_decompose":
        return PruneDecompose(float(obj["ratio"]), action_from_json(obj["decomposition"]))
    raise PlanError(f"unknown action type {kind!r}")


def plan_to_json(plan: CompressionPlan) -> list[dict]:
    return [
        {"layer": i, "action": action_to_json(a)} for i, a in enumerate(plan.actions)
    ]


def plan_from_json(entries: list[dict], num_layers: int) -> CompressionPlan:
    actions: list[LayerAction] = [None] * num_layers
    for entry in entries:
        idx = int(entry["layer"])
        if not 0 <= idx < num_layers:
            raise PlanError(f"plan entry for layer {idx} outside 0..{num_layers - 1}")
        actions[idx] = action_from_json(entry["action"])
    return CompressionPlan(tuple(actions))
