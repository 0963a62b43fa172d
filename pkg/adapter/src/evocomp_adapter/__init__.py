"""Reference worker for the evocomp external-evaluation protocol."""

from .worker import PROTOCOL_VERSION, WorkerSession, load_hook, serve

__version__ = "0.1.0"
__all__ = ["PROTOCOL_VERSION", "WorkerSession", "load_hook", "serve"]
