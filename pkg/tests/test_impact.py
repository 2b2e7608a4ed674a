from __future__ import annotations

import json
import random

import pytest

from scaphy import errors, impact, ingest, sim

from conftest import make_elements

# Authored reference trace: geometric-ish decay where the running coefficient
# settles at the fourth cycle.  Slice ratios are -0.30, -0.36, -0.25, -0.3037,
# giving successive coefficient changes of 0.030, 0.027 and 0.0001; the first
# one below the 1% threshold lands exactly on cycle 4 and the outcome has
# descended from 9.19 to 2.15.
REFERENCE_DECAY = (9.19, 6.433, 4.11712, 3.08784, 2.15)
REFERENCE_CLAMP = (0.0, 10.0)


def one_shot_state(initial, rate, clamp=(0.0, 10.0)):
    model = {
        "P": {
            "initial": initial,
            "clamp": list(clamp),
            "rates": [{"tag": "ACT.0.BOOL", "state": 1, "rate": rate}],
        }
    }
    elements = make_elements(["ACT.0.BOOL"])
    dynamics = ingest.parse_dynamics(json.dumps(model), elements)
    return sim.initial_state(elements, dynamics)


class TestReferenceDecay:
    def test_steady_declared_at_cycle_four(self):
        acc = impact.replay_trace(REFERENCE_DECAY, REFERENCE_CLAMP)
        assert acc.steady
        assert acc.steady_cycle == 4

    def test_earlier_cycles_not_steady(self):
        acc = impact.replay_trace(REFERENCE_DECAY[:4], REFERENCE_CLAMP)
        assert not acc.steady

    def test_boundary_outcome_is_clamp_floor(self):
        acc = impact.replay_trace(REFERENCE_DECAY, REFERENCE_CLAMP)
        assert acc.psi_schedule[0] == 0.0


class TestDeriveIc:
    def test_zero_rate_state_scores_zero(self):
        state = one_shot_state(5.0, 2.0)
        result = impact.derive_ic("ACT.0.BOOL", 0, "P", state)
        assert result.ic == 0.0

    def test_single_cycle_to_boundary_is_unity(self):
        # One step covers the whole headroom: slice 1, one-cycle trace.
        state = one_shot_state(5.0, 5.0)
        result = impact.derive_ic("ACT.0.BOOL", 1, "P", state)
        assert result.ic == 1.0
        assert len(result.trace) == 1

    def test_downward_movement_uses_floor_boundary(self):
        state = one_shot_state(5.0, -5.0)
        result = impact.derive_ic("ACT.0.BOOL", 1, "P", state)
        assert result.ic == -1.0
        assert result.psi_schedule[0] == 0.0

    def test_missing_dynamics_propagates(self):
        state = one_shot_state(5.0, 2.0)
        with pytest.raises(errors.MissingDynamics):
            impact.derive_ic("ACT.0.BOOL", 1, "Ghost", state)


def random_trace(rng: random.Random):
    clamp = (0.0, 200.0)
    outcome = rng.uniform(20.0, 180.0)
    trace = [outcome]
    direction = rng.choice([1, -1])
    psi = clamp[1] if direction > 0 else clamp[0]
    for _ in range(rng.randint(1, 40)):
        headroom = psi - outcome
        outcome = outcome + headroom * rng.uniform(0.0, 1.0)
        trace.append(outcome)
    return trace, clamp


class TestInstantaneousEquivalence:
    def test_hundred_random_traces(self):
        rng = random.Random(42)
        for _ in range(100):
            trace, clamp = random_trace(rng)
            acc = impact.replay_trace(trace, clamp)
            instant = impact.derive_ic_instantaneous(trace, acc.psi_schedule)
            assert abs(acc.ic - instant) <= 1e-9
            assert abs(acc.ic) <= 1.0 + 1e-9

    def test_constant_trace_is_zero(self):
        acc = impact.replay_trace([5.0, 5.0, 5.0, 5.0], (0.0, 10.0))
        assert acc.ic == 0.0
        assert impact.derive_ic_instantaneous(
            [5.0, 5.0, 5.0, 5.0], acc.psi_schedule
        ) == 0.0

    def test_reference_decay_agreement(self):
        acc = impact.replay_trace(REFERENCE_DECAY, REFERENCE_CLAMP)
        instant = impact.derive_ic_instantaneous(REFERENCE_DECAY, acc.psi_schedule)
        assert abs(acc.ic - instant) <= 1e-9

    def test_trace_too_short(self):
        with pytest.raises(ValueError):
            impact.derive_ic_instantaneous([5.0], [])


class TestSliceBound:
    def test_reversal_past_boundary_raises(self):
        # Moving away from the boundary farther than the remaining headroom.
        with pytest.raises(errors.ImpactBoundError):
            impact.replay_trace([50.0, 99.0, 40.0], (0.0, 100.0))

    def test_division_guard_at_boundary(self):
        # Sitting on the boundary contributes zero slices, never a blowup.
        acc = impact.IcAccumulator((0.0, 100.0))
        acc.start(50.0)
        acc.feed(100.0)
        assert acc.boundary_reached
        acc.feed(100.0)
        assert acc.aggregate == 1.0


class TestWaterProfile:
    def test_exact_coefficients(self, water_bundle):
        profile = water_bundle.profile
        assert profile.ic[("LC", "PUMP.0.BOOL", 1.0)] == pytest.approx(0.86, abs=1e-9)
        assert profile.ic[("LC", "DVALVE.0.BOOL", 1.0)] == pytest.approx(-0.42, abs=1e-9)
        assert profile.ic[("LC", "VALVE.2.BOOL", 1.0)] == pytest.approx(-0.40, abs=1e-9)
        assert profile.ic[("Dosing", "DOSER.0.BOOL", 1.0)] == pytest.approx(0.58, abs=1e-9)

    def test_avg_max_shape(self, water_bundle):
        profile = water_bundle.profile
        maxima = [profile.ic_max[("LC", t)] for t in water_bundle.model.process("LC").dep]
        avg = sum(maxima) / len(maxima)
        assert avg == pytest.approx(0.56, abs=1e-9)
        assert max(maxima) == pytest.approx(0.86, abs=1e-9)

    def test_bounds_learned_from_derivations(self, water_bundle):
        lo, hi = water_bundle.profile.bounds["LC"]
        assert lo == pytest.approx(16.82, abs=1e-9)
        assert hi == pytest.approx(99.02, abs=1e-9)
        lo_d, hi_d = water_bundle.profile.bounds["Dosing"]
        assert lo_d == 0.0
        assert hi_d == pytest.approx(12.354, abs=1e-9)

    def test_signed_convention(self, water_bundle):
        profile = water_bundle.profile
        assert profile.ic[("LC", "PUMP.0.BOOL", 1.0)] > 0
        assert profile.ic[("LC", "DVALVE.0.BOOL", 1.0)] < 0


class TestPowerProfile:
    def test_breaker_open_coefficient(self, power_bundle):
        value = power_bundle.profile.ic[("LB", "BRK.0.BOOL", 0.0)]
        assert abs(value) == pytest.approx(0.65, abs=1e-9)
        assert value < 0

    def test_zero_rate_elements_pruned(self, power_bundle):
        assert {"AGG.0.BOOL", "PROT.0.BOOL", "DLINE.0.BOOL"} <= power_bundle.profile.pruned

    def test_annotated_nodes_exclude_pruned(self, power_bundle):
        annotated = power_bundle.annotated
        assert not (set(annotated.nodes) & power_bundle.profile.pruned)
        assert annotated.node_count() == 10

    def test_impact_annotations_present(self, power_bundle):
        node = power_bundle.annotated.nodes["BRK.0.BOOL"]
        assert ("LB", 0.0, power_bundle.profile.ic[("LB", "BRK.0.BOOL", 0.0)]) in node.impact


class TestResetDiscipline:
    def test_fresh_states_share_fingerprint(self, water_bundle):
        scenario = water_bundle.model.scenario
        a = sim.initial_state(scenario.elements, scenario.dynamics)
        b = sim.initial_state(scenario.elements, scenario.dynamics)
        assert a.fingerprint() == b.fingerprint()


class TestSteadyMonotonicity:
    def test_changes_stay_small_after_steady(self):
        # Pure geometric decay: slices constant, so once the change dips below
        # the threshold it stays there.
        trace = [100.0]
        for _ in range(30):
            trace.append(trace[-1] * 0.7)
        acc = impact.replay_trace(trace, (0.0, 200.0))
        assert acc.steady
        k = acc.steady_cycle
        history = acc.ic_history
        for i in range(k, len(history)):
            assert abs(history[i] - history[i - 1]) < impact.DEFAULT_STEADY_EPS


class TestProfileLookups:
    def test_strict_then_fallback(self, water_bundle):
        profile = water_bundle.profile
        # Strict hit in the deriving process.
        assert profile.ic_for("VALVE.2.BOOL", 1.0, "LC") == pytest.approx(-0.40, abs=1e-9)
        # No entry in the sink process: fall back to the strongest derived.
        assert profile.ic_for("VALVE.2.BOOL", 1.0, "Dosing") == pytest.approx(-0.40, abs=1e-9)
        assert profile.ic_for("GHOST.0.BOOL", 1.0) is None

    def test_json_round_trip(self, power_bundle):
        text = impact.profile_to_json(power_bundle.profile)
        again = impact.profile_from_json(text)
        assert again == power_bundle.profile
