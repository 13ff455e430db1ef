"""Decentralized network topology emulation over a simulated data plane."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_experiment(name: str) -> Path:
    """Path of an experiment file shipped with the package, e.g. ``"dumbbell-6.yaml"``."""
    if not name.endswith(".yaml"):
        name += ".yaml"
    path = Path(str(resources.files(__name__) / "experiments" / name))
    if not path.is_file():
        raise FileNotFoundError(f"no bundled experiment {name!r}")
    return path
