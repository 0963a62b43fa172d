"""Adaptive-sampling search core: scoring, warm init, genetic operators, loop.

The fitness of an individual is the MAC reduction divided by an accuracy
penalty. The penalty is the accuracy drop relative to the uncompressed
model, plus an exponential surcharge exp(floor - acc) whenever the
accuracy falls below the configured floor; a small positive floor on the
penalty itself keeps the division defined when compression is lossless.
Decomposition at high ranks can increase MACs, so the reduction (and the
score) may be negative; min-normalized selection then eliminates such
individuals naturally.

Warm initialization first finds, per gene, the strongest single-layer
compression that keeps accuracy above the floor (bisection for ratios,
binary search for rank codes), then rejection-samples individuals inside
that box until the population is full.

A fixed seed gives bit-reproducible runs; concurrent evaluation changes
timing only, never results (the RNG is consumed solely on the loop
thread, and every evaluation is a pure function of the genome).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .compress import compressed_flops
from .errors import ConfigError, InfeasibleThresholdError
from .genome import GenomeSchema, decode
from .model import ModelSpec, model_flops

log = logging.getLogger(__name__)

BISECTION_TOL = 1.0 / 64.0


@dataclass(frozen=True)
class ScoreReport:
    """Fitness of one evaluated individual."""

    delta_flops: int
    accuracy: float
    penalty: float
    score: float
    below_floor: bool


@dataclass(frozen=True)
class EngineConfig:
    accuracy_floor: float
    population_size: int = 100
    iterations: int = 50
    crossover_prob: float = 0.7
    swap_prob: float = 0.5
    mutation_prob: float = 0.3
    tweak_prob: float = 0.1
    mutation_sigma: float = 0.2
    penalty_floor: float = 1e-3
    elitism: bool = True
    seed: int = 0
    init_max_attempts: int = 1000
    init_policy: str = "warm"

    def validate(self) -> None:
        if self.population_size < 2 or self.population_size % 2 != 0:
            raise ConfigError(
                f"population_size must be an even number >= 2, got {self.population_size}"
            )
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("accuracy_floor", "crossover_prob", "swap_prob",
                     "mutation_prob", "tweak_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {value}")
        if self.mutation_sigma < 0:
            raise ConfigError(f"mutation_sigma must be >= 0, got {self.mutation_sigma}")
        if self.penalty_floor <= 0:
            raise ConfigError(f"penalty_floor must be > 0, got {self.penalty_floor}")
        if self.init_max_attempts < 1:
            raise ConfigError(
                f"init_max_attempts must be >= 1, got {self.init_max_attempts}"
            )
        if self.init_policy not in ("warm", "uniform"):
            raise ConfigError(f"init_policy must be 'warm' or 'uniform', got {self.init_policy!r}")


def score(
    delta_flops: int,
    accuracy: float,
    base_accuracy: float,
    accuracy_floor: float,
    penalty_floor: float = 1e-3,
) -> ScoreReport:
    """Fitness = MACs saved / accuracy penalty."""
    below = accuracy < accuracy_floor
    penalty_raw = base_accuracy - accuracy
    if below:
        penalty_raw += math.exp(accuracy_floor - accuracy)
    penalty = max(penalty_raw, penalty_floor)
    return ScoreReport(
        delta_flops=delta_flops,
        accuracy=accuracy,
        penalty=penalty,
        score=delta_flops / penalty,
        below_floor=below,
    )


# ---------------------------------------------------------------------------
# Per-gene threshold search (warm-init preparation)


def find_threshold_continuous(evaluate, accuracy_floor: float,
                              tol: float = BISECTION_TOL) -> float:
    """Largest single-gene prune ratio whose accuracy stays above the floor.

    Bisection on [0, 1] assuming accuracy is non-increasing in the ratio;
    returns 0.0 when even the identity violates the floor and 1.0 when
    nothing does.
    """
    if evaluate(1.0) > accuracy_floor:
        return 1.0
    if not evaluate(0.0) > accuracy_floor:
        return 0.0
    lo, hi = 0.0, 1.0  # acc(lo) > floor >= acc(hi)
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if evaluate(mid) > accuracy_floor:
            lo = mid
        else:
            hi = mid
    return lo


def find_threshold_discrete(evaluate, code_max: int, accuracy_floor: float) -> int:
    """Smallest rank code whose accuracy stays above the floor.

    Binary search assuming accuracy is non-decreasing in the code. Falls
    back to the top code (undecomposed) with a warning when even that
    violates the floor.
    """
    if not evaluate(code_max) > accuracy_floor:
        log.warning(
            "even the undecomposed code %d violates the accuracy floor %.4f; "
            "threshold degenerates to %d",
            code_max, accuracy_floor, code_max,
        )
        return code_max
    if evaluate(1) > accuracy_floor:
        return 1
    lo, hi = 1, code_max  # acc(lo) <= floor < acc(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if evaluate(mid) > accuracy_floor:
            hi = mid
        else:
            lo = mid
    return hi


def compute_thresholds(
    model: ModelSpec, schema: GenomeSchema, evaluator, accuracy_floor: float
) -> np.ndarray:
    """Per-gene compression limits with all other genes at identity."""
    identity = schema.identity_genome()
    base = evaluator.accuracy(identity, decode(identity, schema, model))
    if not base > accuracy_floor:
        raise InfeasibleThresholdError(
            f"accuracy floor {accuracy_floor} is unattainable: the uncompressed "
            f"model scores {base}; lower the floor"
        )

    def gene_accuracy(index: int, value: float) -> float:
        genome = identity.copy()
        genome[index] = value
        return evaluator.accuracy(genome, decode(genome, schema, model))

    thresholds = np.empty(schema.length, dtype=np.float64)
    for i, desc in enumerate(schema.descriptors):
        if desc.is_continuous:
            thresholds[i] = find_threshold_continuous(
                lambda p, i=i: gene_accuracy(i, p), accuracy_floor
            )
        else:
            thresholds[i] = find_threshold_discrete(
                lambda c, i=i: gene_accuracy(i, float(c)), desc.code_max, accuracy_floor
            )
    return thresholds


# ---------------------------------------------------------------------------
# Population initialization


@dataclass
class InitResult:
    genomes: np.ndarray  # (N, L)
    attempts: int


def _draw_batch(
    schema: GenomeSchema, thresholds: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    cont = schema.continuous_mask()
    code_max = schema.code_max_vector()
    loc = np.where(cont, thresholds / 2.0, 0.0)
    scale = np.where(cont, thresholds / 2.0, 1.0)
    normals = rng.normal(loc=loc, scale=scale, size=(count, schema.length))
    continuous = np.clip(normals, 0.0, thresholds)
    low = np.where(cont, 1, thresholds.astype(np.int64))
    high = np.where(cont, 2, code_max.astype(np.int64) + 1)
    codes = rng.integers(low, high, size=(count, schema.length)).astype(np.float64)
    return np.where(cont, continuous, codes)


def warm_init(
    schema: GenomeSchema,
    thresholds: np.ndarray,
    accuracy_of,
    config: EngineConfig,
    rng: np.random.Generator,
    executor: ThreadPoolExecutor | None = None,
) -> InitResult:
    """Rejection-sample individuals until N satisfy the accuracy floor.

    Continuous genes draw from Normal(theta/2, theta/2) clamped to
    [0, theta]; discrete genes draw uniformly from {theta, ..., code_max}.
    """
    n = config.population_size
    budget = config.init_max_attempts * n
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < n:
        batch_size = min(n - len(accepted), budget - attempts)
        if batch_size <= 0:
            raise InfeasibleThresholdError(
                f"warm initialization exhausted {budget} draws with only "
                f"{len(accepted)}/{n} individuals above the accuracy floor "
                f"{config.accuracy_floor}; lower the floor"
            )
        batch = _draw_batch(schema, thresholds, batch_size, rng)
        attempts += batch_size
        if executor is not None:
            accuracies = list(executor.map(accuracy_of, batch))
        else:
            accuracies = [accuracy_of(g) for g in batch]
        for genome, acc in zip(batch, accuracies):
            if acc > config.accuracy_floor and len(accepted) < n:
                accepted.append(genome)
    return InitResult(genomes=np.stack(accepted), attempts=attempts)


def uniform_init(
    schema: GenomeSchema, config: EngineConfig, rng: np.random.Generator
) -> InitResult:
    """Naive initialization: every gene uniform over its whole domain."""
    n = config.population_size
    cont = schema.continuous_mask()
    code_max = schema.code_max_vector()
    continuous = rng.random((n, schema.length))
    codes = rng.integers(
        np.ones(schema.length, dtype=np.int64),
        code_max.astype(np.int64) + 1,
        size=(n, schema.length),
    ).astype(np.float64)
    return InitResult(genomes=np.where(cont, continuous, codes), attempts=n)


# ---------------------------------------------------------------------------
# Genetic operators


def select(genomes: np.ndarray, scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Resample N individuals with probability proportional to s - s_min.

    Min-normalization gives the weakest individual probability exactly
    zero; when every score is equal the sampling degenerates to uniform.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = genomes.shape[0]
    diffs = scores - scores.min()
    total = diffs.sum()
    if total == 0.0:
        indices = rng.choice(n, size=n, replace=True)
    else:
        indices = rng.choice(n, size=n, replace=True, p=diffs / total)
    return genomes[indices].copy()


def crossover(
    genomes: np.ndarray, crossover_prob: float, swap_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """Per adjacent pair: maybe cross; if crossing, swap each gene independently."""
    if genomes.shape[0] % 2 != 0:
        raise ConfigError("crossover requires an even population")
    out = genomes.copy()
    for k in range(0, out.shape[0], 2):
        if rng.random() < crossover_prob:
            swap = rng.random(out.shape[1]) < swap_prob
            first = out[k, swap].copy()
            out[k, swap] = out[k + 1, swap]
            out[k + 1, swap] = first
    return out


def mutate(
    genomes: np.ndarray,
    schema: GenomeSchema,
    mutation_prob: float,
    tweak_prob: float,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian tweaks for ratios, +-1 steps for codes, clipped to domain."""
    cont = schema.continuous_mask()
    code_max = schema.code_max_vector()
    out = genomes.copy()
    length = out.shape[1]
    for i in range(out.shape[0]):
        if rng.random() >= mutation_prob:
            continue
        tweak = rng.random(length) < tweak_prob
        noise = rng.normal(0.0, sigma, length)
        steps = rng.integers(0, 2, length) * 2.0 - 1.0
        row = out[i]
        cont_sel = tweak & cont
        row[cont_sel] = np.clip(row[cont_sel] + noise[cont_sel], 0.0, 1.0)
        disc_sel = tweak & ~cont
        row[disc_sel] = np.clip(row[disc_sel] + steps[disc_sel], 1.0, code_max[disc_sel])
    return out


# ---------------------------------------------------------------------------
# Evolution loop


@dataclass
class History:
    """Per-individual evaluation records plus the best-so-far trajectory."""

    records: list[dict] = field(default_factory=list)
    best_trajectory: list[dict] = field(default_factory=list)


@dataclass
class EvolveResult:
    best_genome: np.ndarray
    best_report: ScoreReport
    history: History
    base_accuracy: float
    base_flops: int
    thresholds: np.ndarray | None
    init_attempts: int


class _Scorer:
    """Genome -> ScoreReport with caching and optional parallel evaluation."""

    def __init__(self, model, schema, evaluator, config, executor):
        self.model = model
        self.schema = schema
        self.evaluator = evaluator
        self.config = config
        self.executor = executor
        self.base_flops = model_flops(model)
        self.base_accuracy: float | None = None
        self._cache: dict[bytes, ScoreReport] = {}

    def _eval_one(self, genome: np.ndarray) -> tuple[int, float]:
        plan = decode(genome, self.schema, self.model)
        delta = self.base_flops - compressed_flops(self.model, plan)
        return delta, self.evaluator.accuracy(genome, plan)

    def accuracy_of(self, genome: np.ndarray) -> float:
        return self.report_for(genome).accuracy

    def report_for(self, genome: np.ndarray) -> ScoreReport:
        return self.reports_for(genome[None, :])[0]

    def reports_for(self, genomes: np.ndarray) -> list[ScoreReport]:
        keys = [g.tobytes() for g in genomes]
        fresh: list[np.ndarray] = []
        fresh_keys: list[bytes] = []
        seen: set[bytes] = set()
        for key, genome in zip(keys, genomes):
            if key not in self._cache and key not in seen:
                seen.add(key)
                fresh.append(genome)
                fresh_keys.append(key)
        if fresh:
            if self.executor is not None and len(fresh) > 1:
                outcomes = list(self.executor.map(self._eval_one, fresh))
            else:
                outcomes = [self._eval_one(g) for g in fresh]
            for key, (delta, acc) in zip(fresh_keys, outcomes):
                self._cache[key] = score(
                    delta,
                    acc,
                    self.base_accuracy,
                    self.config.accuracy_floor,
                    self.config.penalty_floor,
                )
        return [self._cache[key] for key in keys]


def evolve(
    model: ModelSpec,
    schema: GenomeSchema,
    evaluator,
    config: EngineConfig,
    thresholds: np.ndarray | None = None,
    workers: int = 1,
    record_sink=None,
) -> EvolveResult:
    """Run the full search loop and return the best individual ever scored.

    The initial population is evaluated as iteration 0; each of the
    `config.iterations` genetic updates (selection, crossover, mutation,
    optional elitist reinsertion) is followed by another evaluation round.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        scorer = _Scorer(model, schema, evaluator, config, executor)
        identity = schema.identity_genome()
        base_accuracy = evaluator.accuracy(identity, decode(identity, schema, model))
        scorer.base_accuracy = base_accuracy

        if config.init_policy == "warm":
            if thresholds is None:
                thresholds = compute_thresholds(
                    model, schema, evaluator, config.accuracy_floor
                )
            init = warm_init(
                schema, thresholds, scorer.accuracy_of, config, rng, executor
            )
        else:
            init = uniform_init(schema, config, rng)
        genomes = init.genomes

        history = History()
        best_genome: np.ndarray | None = None
        best_report: ScoreReport | None = None

        for iteration in range(config.iterations + 1):
            reports = scorer.reports_for(genomes)
            for index, (genome, report) in enumerate(zip(genomes, reports)):
                record = {
                    "iteration": iteration,
                    "index": index,
                    "genome": [float(v) for v in genome],
                    "accuracy": report.accuracy,
                    "delta_flops": report.delta_flops,
                    "score": report.score,
                }
                history.records.append(record)
                if record_sink is not None:
                    record_sink(record)
            for genome, report in zip(genomes, reports):
                if best_report is None or report.score > best_report.score:
                    best_report = report
                    best_genome = genome.copy()
            history.best_trajectory.append(
                {
                    "iteration": iteration,
                    "score": best_report.score,
                    "accuracy": best_report.accuracy,
                    "delta_flops": best_report.delta_flops,
                    "flops_ratio": (
                        (scorer.base_flops - best_report.delta_flops) / scorer.base_flops
                        if scorer.base_flops
                        else 1.0
                    ),
                }
            )
            if iteration == config.iterations:
                break
            scores = np.array([r.score for r in reports])
            genomes = select(genomes, scores, rng)
            genomes = crossover(genomes, config.crossover_prob, config.swap_prob, rng)
            genomes = mutate(
                genomes, schema, config.mutation_prob, config.tweak_prob,
                config.mutation_sigma, rng,
            )
            if config.elitism:
                slot = int(rng.integers(config.population_size))
                genomes[slot] = best_genome

        return EvolveResult(
            best_genome=best_genome,
            best_report=best_report,
            history=history,
            base_accuracy=base_accuracy,
            base_flops=scorer.base_flops,
            thresholds=None if thresholds is None else np.asarray(thresholds, dtype=np.float64),
            init_attempts=init.attempts,
        )
    finally:
        if executor is not None:
            executor.shutdown()
