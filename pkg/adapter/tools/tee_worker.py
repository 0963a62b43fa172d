#!/usr/bin/env python3
"""Transparent stdin/stdout tee around a worker command, logging both
directions as JSON lines. Used to record golden protocol transcripts."""

import json
import subprocess
import sys
import threading

log_path = sys.argv[1]
command = sys.argv[2:]

log = open(log_path, "a")
log_lock = threading.Lock()
proc = subprocess.Popen(
    command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
)


def record(direction: str, line: str) -> None:
    with log_lock:
        log.write(json.dumps({"dir": direction, "line": line.rstrip("\n")}) + "\n")
        log.flush()


def pump_worker_output():
    for line in proc.stdout:
        record("worker", line)
        sys.stdout.write(line)
        sys.stdout.flush()


threading.Thread(target=pump_worker_output, daemon=True).start()
try:
    for line in sys.stdin:
        record("engine", line)
        proc.stdin.write(line)
        proc.stdin.flush()
finally:
    try:
        proc.stdin.close()
    except OSError:
        pass
    sys.exit(proc.wait())
