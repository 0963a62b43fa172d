"""Bundled desk-scale assets: tiny trained models plus validation splits.

Regenerate with ``tools/make_assets.py``; each model manifest stores the
validation accuracy computed at asset-creation time under
``reference_accuracy``.
"""

from importlib import resources
from pathlib import Path

_NAMES = {
    "tiny_mlp": "tiny_mlp.evm",
    "small_cnn": "small_cnn.evm",
    "two_spirals": "two_spirals.csv",
    "blocks8": "blocks8.csv",
}


def asset_path(name: str) -> Path:
    """Filesystem path of a bundled asset by short name."""
    if name not in _NAMES:
        raise KeyError(f"unknown asset {name!r}; known: {sorted(_NAMES)}")
    return Path(str(resources.files(__package__).joinpath(_NAMES[name])))
