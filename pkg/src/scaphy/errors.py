"""Exception types raised while ingesting scenarios and deriving models.

Every error carries enough context (file, line, offending token) to point an
operator at the broken input.  Conditions that the pipeline can survive
(terminal collisions, untraceable processes, unconfirmed phase windows) are
reported as warnings or flags instead of exceptions.
"""

from __future__ import annotations


class ScaphyError(Exception):
    """Base class for all scenario and model errors."""


class ScenarioError(ScaphyError):
    """Invalid scenario input file."""

    def __init__(self, message: str, *, source: str | None = None, line: int | None = None):
        self.source = source
        self.line = line
        where = ""
        if source:
            where = f" [{source}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class MalformedTag(ScenarioError):
    """Tag text does not split into NAME.ID.TYPE."""


class UnknownValueType(ScenarioError):
    """Tag type suffix is not BOOL, INT or REAL."""


class DuplicateTag(ScenarioError):
    """The same full tag appears twice in the tag list."""


class ValueOutsideDomain(ScenarioError):
    """Initial value is not a member of the element's state domain."""


class UnresolvableTag(ScenarioError):
    """A referenced tag does not resolve to a parsed element."""


class SensorEqualsTerminal(ScenarioError):
    """A monitored-parameter tuple names the same element twice."""


class UnknownMnemonic(ScenarioError):
    """Statement list line uses a mnemonic outside LOAD/AND/OR/STORE."""


class NetworkWithoutStore(ScenarioError):
    """A statement network violates the one-STORE / one-plus-operand shape."""


class ClampInverted(ScenarioError):
    """Dynamics clamp has min above max, or the initial value lies outside."""


class RateForUnknownState(ScenarioError):
    """Rate entry targets a state outside the element's domain."""


class MissingDynamics(ScaphyError):
    """A simulated process has no dynamics definition."""


class StateOutsideDomain(ScaphyError):
    """Attempt to switch an element to a state outside its domain."""


class ImpactBoundError(ScaphyError):
    """A per-cycle impact slice exceeded magnitude 1; the boundary outcome
    bookkeeping no longer brackets the process movement."""


class EmptyTraining(ScaphyError):
    """No phase windows were found in any training trace."""


class UnknownProcess(ScaphyError):
    """Operation referenced a process id absent from the model."""


class ConfigError(ScaphyError):
    """Run configuration value outside its documented range."""
