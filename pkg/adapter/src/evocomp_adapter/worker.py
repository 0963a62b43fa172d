"""Reference worker for the line-delimited JSON evaluation protocol.

The engine speaks one JSON object per line over stdin/stdout:

    engine -> worker  {"type":"hello","version":1,"schema":[...],
                       "model_manifest":{...}}
    worker -> engine  {"type":"ready"}
    engine -> worker  {"type":"eval","id":<u64>,"genome":[...],
                       "plan":[{"layer":i,"action":{...}},...]}
    worker -> engine  {"type":"result","id":<u64>,"accuracy":<0..1>}
    engine -> worker  {"type":"bye"}

Users supply a single hook ``score(plan) -> accuracy`` and the worker does
the rest: exactly one ``ready`` after ``hello``, one ``result`` per
request id, a clamp of out-of-range accuracies, and an accuracy of 0.0
(with a traceback on stderr) when the hook raises. The plan argument is
the request's decoded per-layer action list; how to apply it is entirely
the hook's business. stdout carries protocol objects only; stderr is for
human-readable logs.

Run as ``evocomp-adapter --hook mymodule:my_score`` or with
``--constant 0.75`` for a fixed-accuracy smoke worker.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys
import traceback
from dataclasses import dataclass, field


@dataclass
class WorkerSession:
    """State accumulated from the handshake."""

    version: int | None = None
    schema: list = field(default_factory=list)
    model_manifest: dict = field(default_factory=dict)
    ready_sent: bool = False
    answered: int = 0

PROTOCOL_VERSION = 1


def _emit(stream, obj: dict) -> None:
    stream.write(json.dumps(obj) + "\n")
    stream.flush()


def _log(message: str) -> None:
    print(f"evocomp-adapter: {message}", file=sys.stderr, flush=True)


def _clamped_accuracy(value, hook_name: str) -> float:
    accuracy = float(value)
    if accuracy != accuracy:  # NaN
        _log(f"hook {hook_name} returned NaN; scoring 0.0")
        return 0.0
    if accuracy < 0.0:
        _log(f"hook {hook_name} returned {accuracy}; clamped to 0.0")
        return 0.0
    if accuracy > 1.0:
        _log(f"hook {hook_name} returned {accuracy}; clamped to 1.0")
        return 1.0
    return accuracy


def serve(hook, stdin=None, stdout=None) -> int:
    """Answer protocol traffic until ``bye`` or EOF; returns the exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    hook_name = getattr(hook, "__name__", repr(hook))
    session = WorkerSession()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
            if not isinstance(message, dict):
                raise ValueError("message is not an object")
        except (json.JSONDecodeError, ValueError) as exc:
            _emit(stdout, {"type": "error", "message": f"malformed input line: {exc}"})
            continue

        kind = message.get("type")
        if kind == "hello":
            if session.ready_sent:
                _emit(stdout, {"type": "error", "message": "duplicate hello"})
                continue
            version = message.get("version")
            if version != PROTOCOL_VERSION:
                _emit(
                    stdout,
                    {"type": "error",
                     "message": f"unsupported protocol version {version!r}"},
                )
                continue
            session.version = version
            session.schema = message.get("schema", [])
            session.model_manifest = message.get("model_manifest", {})
            session.ready_sent = True
            _emit(stdout, {"type": "ready"})
        elif kind == "eval":
            if not session.ready_sent:
                _emit(stdout, {"type": "error", "message": "eval before hello"})
                continue
            request_id = message.get("id")
            try:
                accuracy = _clamped_accuracy(hook(message.get("plan", [])), hook_name)
            except Exception:
                _log(f"hook {hook_name} raised; scoring 0.0\n{traceback.format_exc()}")
                accuracy = 0.0
            session.answered += 1
            _emit(stdout, {"type": "result", "id": request_id, "accuracy": accuracy})
        elif kind == "bye":
            return 0
        else:
            _emit(stdout, {"type": "error", "message": f"unknown message type {kind!r}"})
    return 0


def load_hook(spec: str):
    """Resolve a ``module:attribute`` reference to a callable."""
    module_name, _, attribute = spec.partition(":")
    if not module_name or not attribute:
        raise SystemExit(f"--hook expects module:function, got {spec!r}")
    module = importlib.import_module(module_name)
    hook = getattr(module, attribute)
    if not callable(hook):
        raise SystemExit(f"{spec} is not callable")
    return hook


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="evocomp-adapter", description=__doc__.splitlines()[0]
    )
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--hook", help="module:function scoring hook")
    group.add_argument(
        "--constant", type=float, default=None,
        help="answer every request with this accuracy (smoke testing)",
    )
    args = parser.parse_args(argv)
    if args.constant is not None:
        value = args.constant

        def hook(plan, _value=value):
            return _value

        hook.__name__ = f"constant_{value}"
    else:
        hook = load_hook(args.hook)
    return serve(hook)


if __name__ == "__main__":
    sys.exit(main())
