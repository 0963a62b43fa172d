#!/usr/bin/env python3
"""Protocol fixture: answers every evaluation with a fixed accuracy."""
import json
import sys

ACCURACY = float(sys.argv[1]) if len(sys.argv) > 1 else 0.75

for line in sys.stdin:
    if not line.strip():
        continue
    msg = json.loads(line)
    kind = msg.get("type")
    if kind == "hello":
        print(json.dumps({"type": "ready"}), flush=True)
    elif kind == "eval":
        print(
            json.dumps({"type": "result", "id": msg["id"], "accuracy": ACCURACY}),
            flush=True,
        )
    elif kind == "bye":
        break
