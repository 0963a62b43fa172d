"""Accuracy evaluation: built-in forward pass, synthetic landscape, workers.

Three interchangeable evaluators expose ``accuracy(genome, plan) -> float``:

* ``BuiltinEvaluator`` runs a deterministic forward pass of the compressed
  model over a validation set (direct convolution, affine layers, ReLU,
  post-activation channel masks). When a fully-connected layer follows a
  convolution, activations are globally average-pooled over the spatial
  dims first, so the channel chain stays intact; a chain that ends in a
  convolution is pooled the same way and its channels read as logits.
  Arithmetic is float64; predictions are argmax with ties resolved toward
  the lower class index.
* ``SyntheticEvaluator`` scores genomes on an analytic landscape,
  acc(v) = clamp(base - sum_i c_i * g_i^2, 0, 1), where g_i is the raw
  value of a continuous gene and the normalized deficiency
  1 - code/code_max of a discrete one. It exists so searches can be
  checked against brute-force enumeration.
* ``ExternalEvaluatorPool`` drives a pool of worker subprocesses over a
  line-delimited JSON protocol (one object per line, UTF-8):

      engine -> worker  {"type":"hello","version":1,"schema":[...],
                         "model_manifest":{...}}
      worker -> engine  {"type":"ready"}
      engine -> worker  {"type":"eval","id":<u64>,"genome":[...],
                         "plan":[{"layer":i,"action":{...}},...]}
      worker -> engine  {"type":"result","id":<u64>,"accuracy":<0..1>}
      engine -> worker  {"type":"bye"}

  A worker that times out or dies scores the individual as accuracy 0
  (with a logged warning) and is replaced; a malformed response aborts
  the run.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import queue
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .compress import CompressedModel, SvdFactors, Tucker2Factors, apply_plan
from .errors import EvalError, ProtocolError
from .genome import CompressionPlan, GenomeSchema, plan_to_json
from .model import KIND_FULLY_CONNECTED, ModelSpec, TensorStore, output_spatial

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Validation samples: float32 feature rows plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise EvalError("feature and label counts differ")
        if self.features.shape[0] < 1:
            raise EvalError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise EvalError("label outside 0..num_classes-1")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


def load_dataset(path, fraction: float = 1.0) -> Dataset:
    """Read a CSV dataset: header row, feature columns, integer label last.

    ``fraction`` keeps the leading ceil(fraction * M) rows; the bundled
    assets are already validation splits, so the default keeps everything.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EvalError(f"{path}: empty dataset file")
        for row in reader:
            if row:
                rows.append(row)
    if not rows:
        raise EvalError(f"{path}: no samples after header")
    if not 0.0 < fraction <= 1.0:
        raise EvalError(f"dataset fraction {fraction} outside (0,1]")
    keep = max(1, int(np.ceil(fraction * len(rows))))
    rows = rows[:keep]
    features = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float32)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(features, labels, num_classes=int(labels.max()) + 1)


@dataclass(frozen=True)
class EvalOutcome:
    accuracy: float
    correct: int
    evaluated: int


# ---------------------------------------------------------------------------
# Built-in forward pass


def _conv2d(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    # x: (B, n, H, W); weight: (m, n, k, k); direct convolution.
    k = weight.shape[2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (x.shape[2] - k) // stride + 1
    w_out = (x.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], weight.shape[0], h_out, w_out), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            patch = x[:, :, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
            out += np.einsum("bnyx,mn->bmyx", patch, weight[:, :, dy, dx])
    return out


def _subsample(x: np.ndarray, stride: int, padding: int) -> np.ndarray:
    # 1x1 kernel: padding then striding fully describe the spatial map.
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return x[:, :, ::stride, ::stride]


def forward(compressed: CompressedModel, x: np.ndarray) -> np.ndarray:
    """Logits of the compressed model for a batch of inputs (float64)."""
    spec = compressed.spec
    x = x.astype(np.float64)
    for layer, data in zip(spec.layers, compressed.layers):
        if layer.kind == KIND_FULLY_CONNECTED:
            if x.ndim == 4:
                x = x.mean(axis=(2, 3))  # global average pool into channels
            if isinstance(data.factorization, SvdFactors):
                z = (x @ data.factorization.right.T) @ data.factorization.left.T
            else:
                z = x @ data.weight.T.astype(np.float64)
            z = z + data.bias.astype(np.float64)
        else:
            if x.ndim != 4:
                raise EvalError(f"layer {layer.id}: convolution after flattened input")
            if isinstance(data.factorization, SvdFactors):
                xs = _subsample(x, layer.stride, layer.padding)
                z = np.einsum("bnyx,rn->bryx", xs, data.factorization.right)
                z = np.einsum("bryx,mr->bmyx", z, data.factorization.left)
            elif isinstance(data.factorization, Tucker2Factors):
                f = data.factorization
                z = np.einsum("bnyx,nq->bqyx", x, f.factor_in)
                z = _conv2d(z, f.core, layer.stride, layer.padding)
                z = np.einsum("bpyx,mp->bmyx", z, f.factor_out)
            else:
                z = _conv2d(x, data.weight.astype(np.float64), layer.stride, layer.padding)
            z = z + data.bias.astype(np.float64)[None, :, None, None]
        if layer.has_relu:
            z = np.maximum(z, 0.0)
        if data.mask is not None:
            z = z * (data.mask if z.ndim == 2 else data.mask[None, :, None, None])
        x = z
    if x.ndim == 4:
        x = x.mean(axis=(2, 3))  # conv-ending chain: pooled channels are the logits
    return x


class BuiltinEvaluator:
    """Deterministic forward-pass accuracy over a fixed validation set."""

    def __init__(self, model: ModelSpec, tensors: TensorStore, dataset: Dataset):
        self.model = model
        self.tensors = tensors
        self.dataset = dataset
        first = model.layers[0]
        if first.is_spatial:
            expected = first.in_channels * first.h_in * first.w_in
            if dataset.features.shape[1] != expected:
                raise EvalError(
                    f"dataset rows have {dataset.features.shape[1]} features; "
                    f"first layer expects {expected}"
                )
            self._inputs = dataset.features.reshape(
                dataset.size, first.in_channels, first.h_in, first.w_in
            )
        else:
            if dataset.features.shape[1] != first.in_channels:
                raise EvalError(
                    f"dataset rows have {dataset.features.shape[1]} features; "
                    f"first layer expects {first.in_channels}"
                )
            self._inputs = dataset.features
        self._validate_chain(model)
        last = model.layers[-1]
        if last.out_channels < dataset.num_classes:
            raise EvalError(
                f"final layer emits {last.out_channels} logits for "
                f"{dataset.num_classes} classes"
            )

    @staticmethod
    def _validate_chain(model: ModelSpec) -> None:
        seen_fc = False
        prev_spatial: tuple[int, int] | None = None
        for layer in model.layers:
            if layer.kind == KIND_FULLY_CONNECTED:
                seen_fc = True
                prev_spatial = None
                continue
            if seen_fc:
                raise EvalError(
                    f"layer {layer.id}: convolution after a fully-connected layer "
                    "is not supported by the built-in evaluator"
                )
            if prev_spatial is not None and (layer.h_in, layer.w_in) != prev_spatial:
                raise EvalError(
                    f"layer {layer.id}: input {layer.h_in}x{layer.w_in} does not "
                    f"match previous output {prev_spatial[0]}x{prev_spatial[1]}"
                )
            prev_spatial = output_spatial(layer)

    def outcome(self, plan: CompressionPlan) -> EvalOutcome:
        compressed = apply_plan(self.model, self.tensors, plan)
        logits = forward(compressed, self._inputs)
        if not np.all(np.isfinite(logits)):
            raise EvalError("non-finite activations in forward pass")
        predictions = np.argmax(logits, axis=1)
        correct = int(np.count_nonzero(predictions == self.dataset.labels))
        return EvalOutcome(
            accuracy=correct / self.dataset.size,
            correct=correct,
            evaluated=self.dataset.size,
        )

    def accuracy(self, genome: np.ndarray, plan: CompressionPlan) -> float:
        return self.outcome(plan).accuracy

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Synthetic analytic landscape


@dataclass(frozen=True)
class SyntheticLandscape:
    """Analytic accuracy surface with one curvature coefficient per gene."""

    base_accuracy: float
    coefficients: tuple[float, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.coefficients):
            raise EvalError("landscape coefficients must be non-negative")


def synthetic_accuracy(
    genome: np.ndarray, landscape: SyntheticLandscape, schema: GenomeSchema
) -> float:
    genome = np.asarray(genome, dtype=np.float64)
    if genome.shape != (len(landscape.coefficients),):
        raise EvalError(
            f"genome length {genome.shape[0]} does not match "
            f"{len(landscape.coefficients)} coefficients"
        )
    if schema.length != genome.shape[0]:
        raise EvalError("schema length does not match genome length")
    cont = schema.continuous_mask()
    code_max = schema.code_max_vector()
    g = np.where(cont, genome, 1.0 - genome / code_max)
    acc = landscape.base_accuracy - float(np.dot(landscape.coefficients, g * g))
    return min(1.0, max(0.0, acc))


class SyntheticEvaluator:
    def __init__(self, landscape: SyntheticLandscape, schema: GenomeSchema):
        self.landscape = landscape
        self.schema = schema

    def accuracy(self, genome: np.ndarray, plan: CompressionPlan) -> float:
        return synthetic_accuracy(genome, self.landscape, self.schema)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# External worker pool


class _WorkerFailure(Exception):
    """Worker exited, broke its pipe, or timed out (recoverable per spec)."""


class _Worker:
    """One subprocess plus a reader thread feeding parsed stdout lines."""

    def __init__(self, command: list[str], hello: dict, timeout: float):
        self.command = command
        self.hello = hello
        self.timeout = timeout
        self.proc: subprocess.Popen | None = None
        self.lines: queue.Queue = queue.Queue()

    def start(self) -> None:
        self.proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self.lines = queue.Queue()
        thread = threading.Thread(target=self._read_loop, args=(self.proc,), daemon=True)
        thread.start()
        try:
            self._send(self.hello)
            reply = self._next_message()
        except (_WorkerFailure, queue.Empty) as exc:
            raise ProtocolError(f"worker handshake failed: {exc}") from exc
        if reply.get("type") != "ready":
            raise ProtocolError(f"worker handshake failed: {reply!r}")

    def _read_loop(self, proc: subprocess.Popen) -> None:
        for line in proc.stdout:
            self.lines.put(line)
        self.lines.put(None)  # EOF

    def _send(self, obj: dict) -> None:
        if self.proc is None or self.proc.stdin is None or self.proc.stdin.closed:
            raise _WorkerFailure("worker process is not running")
        try:
            self.proc.stdin.write(json.dumps(obj) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise _WorkerFailure(f"worker pipe closed: {exc}") from exc

    def _next_message(self) -> dict:
        """Next stdout object; _WorkerFailure on EOF, queue.Empty on timeout."""
        line = self.lines.get(timeout=self.timeout)
        if line is None:
            raise _WorkerFailure("worker exited")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed worker response {line!r}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ProtocolError(f"worker response is not an object: {line!r}")
        return obj

    def evaluate(self, request_id: int, genome: np.ndarray, plan_json: list) -> float:
        self._send(
            {
                "type": "eval",
                "id": request_id,
                "genome": [float(v) for v in genome],
                "plan": plan_json,
            }
        )
        reply = self._next_message()
        if reply.get("type") != "result":
            raise ProtocolError(f"expected a result object, got {reply!r}")
        if reply.get("id") != request_id:
            raise ProtocolError(
                f"result id {reply.get('id')!r} does not match request {request_id}"
            )
        accuracy = reply.get("accuracy")
        if not isinstance(accuracy, (int, float)) or not 0.0 <= accuracy <= 1.0:
            raise ProtocolError(f"result accuracy {accuracy!r} outside [0,1]")
        return float(accuracy)

    def stop(self) -> None:
        if self.proc is None:
            return
        try:
            if self.proc.stdin and not self.proc.stdin.closed:
                self.proc.stdin.write(json.dumps({"type": "bye"}) + "\n")
                self.proc.stdin.flush()
                self.proc.stdin.close()
            self.proc.wait(timeout=5.0)
        except (OSError, ValueError, subprocess.TimeoutExpired):
            self.proc.kill()
            self.proc.wait()
        self.proc = None

    def kill(self) -> None:
        if self.proc is not None:
            self.proc.kill()
            self.proc.wait()
            self.proc = None


class ExternalEvaluatorPool:
    """Thread-safe accuracy evaluation over a pool of protocol workers."""

    def __init__(
        self,
        command: list[str],
        schema: GenomeSchema,
        model_manifest: dict,
        workers: int = 1,
        timeout: float = 300.0,
    ):
        if workers < 1:
            raise ProtocolError("worker pool needs at least one worker")
        hello = {
            "type": "hello",
            "version": 1,
            "schema": schema.to_json(),
            "model_manifest": model_manifest,
        }
        self._ids = itertools.count()
        self._id_lock = threading.Lock()
        self._free: queue.Queue[_Worker] = queue.Queue()
        self._workers: list[_Worker] = []
        for _ in range(workers):
            worker = _Worker(command, hello, timeout)
            worker.start()
            self._workers.append(worker)
            self._free.put(worker)
        self.failures = 0

    def accuracy(self, genome: np.ndarray, plan: CompressionPlan) -> float:
        with self._id_lock:
            request_id = next(self._ids)
        plan_json = plan_to_json(plan)
        worker = self._free.get()
        try:
            return worker.evaluate(request_id, genome, plan_json)
        except (queue.Empty, _WorkerFailure) as exc:
            self.failures += 1
            reason = "timed out" if isinstance(exc, queue.Empty) else str(exc)
            log.warning(
                "external evaluation of request %d failed (%s); "
                "scoring accuracy 0 and restarting the worker",
                request_id,
                reason,
            )
            worker.kill()
            worker.start()
            return 0.0
        finally:
            self._free.put(worker)

    def close(self) -> None:
        for worker in self._workers:
            worker.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
