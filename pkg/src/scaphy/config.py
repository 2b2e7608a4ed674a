"""Run configuration: every detection tunable in one flat, hashable record.

The config round-trips through a single TOML file and its digest is echoed
into every report so a run can be reproduced from its outputs alone.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace

from . import errors

if sys.version_info >= (3, 11):  # pragma: no cover - version shim
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# Function codes that change element state, per protocol.
DEFAULT_WRITE_CODES: dict[str, tuple[int, ...]] = {
    "modbus": (5,),
    "dnp3": (2,),
    "iec104": (45, 46),
}

DENOMINATOR_MODES = ("all_dep", "affected_only")


@dataclass(frozen=True)
class RunConfig:
    steady_eps: float = 0.01
    prune_threshold: float = 0.01
    cycle_max: int = 10_000
    bypass_delta_ms: float = 100.0
    fusion_window_ms: float = 10_000.0
    quiet_gap_cycles: int = 50
    ns_per_cycle: int = 1_000_000
    denominator_mode: str = "all_dep"
    severity_low_max: float = 0.25
    severity_medium_max: float = 0.60
    min_missing_fraction: float = 0.0
    seed: int = 0
    write_codes: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_WRITE_CODES)
    )

    def validate(self) -> "RunConfig":
        if not (0.0 < self.steady_eps < 1.0):
            raise errors.ConfigError(f"steady_eps {self.steady_eps} outside (0, 1)")
        if not (0.0 <= self.prune_threshold < 1.0):
            raise errors.ConfigError(f"prune_threshold {self.prune_threshold} outside [0, 1)")
        if self.cycle_max < 1:
            raise errors.ConfigError("cycle_max must be >= 1")
        if self.bypass_delta_ms <= 0 or self.fusion_window_ms <= 0:
            raise errors.ConfigError("correlation windows must be positive")
        if self.quiet_gap_cycles < 1 or self.ns_per_cycle < 1:
            raise errors.ConfigError("time base values must be positive")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise errors.ConfigError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if not (0.0 < self.severity_low_max < self.severity_medium_max < 1.0):
            raise errors.ConfigError("severity bands must satisfy 0 < low < medium < 1")
        if not (0.0 <= self.min_missing_fraction <= 1.0):
            raise errors.ConfigError("min_missing_fraction outside [0, 1]")
        return self

    # -- time helpers -------------------------------------------------------

    @property
    def quiet_gap_ns(self) -> int:
        return self.quiet_gap_cycles * self.ns_per_cycle

    @property
    def fusion_window_ns(self) -> int:
        return int(self.fusion_window_ms * 1_000_000)

    def is_write_code(self, protocol: str, function_code: int) -> bool:
        return function_code in self.write_codes.get(protocol.lower(), ())

    # -- serialisation ------------------------------------------------------

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "write_codes":
                continue
            value = getattr(self, f.name)
            if isinstance(value, str):
                lines.append(f'{f.name} = "{value}"')
            else:
                lines.append(f"{f.name} = {value}")
        lines.append("")
        lines.append("[write_codes]")
        for protocol, codes in sorted(self.write_codes.items()):
            lines.append(f"{protocol} = [{', '.join(str(c) for c in codes)}]")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]


def config_from_toml(text: str) -> RunConfig:
    doc = tomllib.loads(text)
    base = RunConfig()
    overrides: dict = {}
    valid = {f.name for f in fields(RunConfig)}
    for key, value in doc.items():
        if key == "write_codes":
            overrides["write_codes"] = {
                proto: tuple(int(c) for c in codes) for proto, codes in value.items()
            }
            continue
        if key not in valid:
            raise errors.ConfigError(f"unknown config key {key!r}")
        overrides[key] = value
    return replace(base, **overrides).validate()
