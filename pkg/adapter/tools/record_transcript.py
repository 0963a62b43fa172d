#!/usr/bin/env python3
"""Record a golden protocol transcript from the primary engine's client.

Drives evocomp's worker pool against this adapter through a teeing
wrapper, capturing every line in both directions:

    {"dir": "engine", "line": "..."}   engine -> worker
    {"dir": "worker", "line": "..."}   worker -> engine

Usage: python3 tools/record_transcript.py tests/goldens/handshake_transcript.jsonl
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from evocomp.evaluate import ExternalEvaluatorPool
from evocomp.genome import build_schema, decode
from evocomp.model import manifest_dict
from evocomp.assets import asset_path
from evocomp.model import load_model

TEE = Path(__file__).resolve().parent / "tee_worker.py"


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__, file=sys.stderr)
        return 2
    transcript = Path(sys.argv[1]).resolve()
    transcript.parent.mkdir(parents=True, exist_ok=True)
    if transcript.exists():
        transcript.unlink()

    model, _ = load_model(asset_path("tiny_mlp"))
    schema = build_schema(model, "prune_structured")
    command = [
        sys.executable, str(TEE), str(transcript),
        sys.executable, "-m", "evocomp_adapter", "--constant", "0.75",
    ]
    pool = ExternalEvaluatorPool(
        command, schema, manifest_dict(model), workers=1, timeout=30.0
    )
    try:
        for genome in (np.array([0.0, 0.0, 0.0]), np.array([0.25, 0.5, 0.0])):
            accuracy = pool.accuracy(genome, decode(genome, schema, model))
            assert accuracy == 0.75, accuracy
    finally:
        pool.close()
    print(f"recorded {transcript}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
