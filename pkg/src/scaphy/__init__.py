"""scaphy: ICS attack detection from two sides of the control boundary.

The package builds a dependency-and-impact model of the physical process from
plant scenario files, learns the per-execution-phase API behaviour of the
control host, and correlates violations of either into scored, contextual
alerts.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def scenario_path(name: str) -> Path:
    """Filesystem path of one of the bundled demo scenarios."""
    base = resources.files(__name__) / "scenarios" / name
    path = Path(str(base))
    if not path.is_dir():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return path


def bundled_scenarios() -> list[str]:
    base = Path(str(resources.files(__name__) / "scenarios"))
    if not base.is_dir():
        return []
    return sorted(p.name for p in base.iterdir() if p.is_dir())
