from __future__ import annotations

import random

import pytest

from scaphy import errors, phases
from scaphy.phases import Access, ApiEvent, Phase, Space

MS = 1_000_000


def ev(t_ms, api=None, obj=None, access=None, eip="0x1", depth=1, space="user",
       phy_tx=False):
    return ApiEvent(
        t=int(t_ms * MS),
        api=api,
        obj=obj,
        access=Access(access) if access else None,
        share=None,
        eip=eip,
        depth=depth,
        space=Space(space),
        phy_tx=phy_tx,
    )


def monitor_alter_trace(t0=0.0):
    """The canonical cycle: read-open, polling loop, write-open, send, close."""
    return [
        ev(t0 + 0, "CreateFile", obj="COM1", access="READ", eip="0x10", depth=3),
        ev(t0 + 1, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
        ev(t0 + 2, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
        ev(t0 + 3, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
        ev(t0 + 4, "CreateFile", obj="COM1", access="WRITE", eip="0x30", depth=5),
        ev(t0 + 5, "WriteFile", obj="COM1", access="WRITE", eip="0x40", depth=6),
        ev(t0 + 6, "CloseHandle", obj="COM1", eip="0x50", depth=5),
    ]


class TestSegmentation:
    def test_canonical_cycle(self):
        windows = phases.segment_phases(monitor_alter_trace())
        assert [w.phase for w in windows] == [
            Phase.PROCESS_MONITORING,
            Phase.PROCESS_ALTERING,
        ]
        assert windows[0].start_idx == 0 and windows[0].end_idx == 3
        assert windows[1].start_idx == 4 and windows[1].end_idx == 6
        assert all(w.confirmed for w in windows)

    def test_empty_trace(self):
        assert phases.segment_phases([]) == []

    def test_initialization_prefix(self):
        trace = [
            ev(0, "LoadLibrary", eip="0x1", depth=2),
            ev(1, "RegOpenKey", eip="0x2", depth=2),
            *monitor_alter_trace(10.0),
        ]
        windows = phases.segment_phases(trace)
        assert windows[0].phase is Phase.INITIALIZATION
        assert (windows[0].start_idx, windows[0].end_idx) == (0, 1)

    def test_trace_without_device_activity_is_all_initialization(self):
        trace = [ev(0, "LoadLibrary"), ev(1, "GetProcAddress")]
        (window,) = phases.segment_phases(trace)
        assert window.phase is Phase.INITIALIZATION
        assert (window.start_idx, window.end_idx) == (0, 1)

    def test_loop_never_revisiting_anchor_is_unconfirmed(self):
        trace = [
            ev(0, "CreateFile", obj="COM1", access="READ", eip="0x10", depth=3),
            ev(1, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
            ev(2, "ReadFile", obj="COM1", access="READ", eip="0x21", depth=5),
            ev(3, "ReadFile", obj="COM1", access="READ", eip="0x22", depth=6),
        ]
        (window,) = phases.segment_phases(trace)
        assert window.phase is Phase.PROCESS_MONITORING
        assert not window.confirmed

    def test_same_phase_reopen_stays_in_window(self):
        # Extra write-handle creation mid-phase belongs to the running window.
        trace = [
            ev(0, "CreateFile", obj="COM1", access="WRITE", eip="0x30", depth=5),
            ev(1, "WriteFile", obj="COM1", access="WRITE", eip="0x40", depth=6),
            ev(2, "CreateFile", obj="COM2", access="WRITE", eip="0x41", depth=6),
            ev(3, "CloseHandle", obj="COM1", eip="0x50", depth=5),
        ]
        (window,) = phases.segment_phases(trace)
        assert window.phase is Phase.PROCESS_ALTERING
        assert (window.start_idx, window.end_idx) == (0, 3)

    def test_tail_after_altering_attributes_to_monitoring(self):
        trace = monitor_alter_trace() + [
            ev(10, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
            ev(11, "GlobalFree", eip="0x60", depth=4),
        ]
        windows = phases.segment_phases(trace)
        assert [w.phase for w in windows] == [
            Phase.PROCESS_MONITORING,
            Phase.PROCESS_ALTERING,
            Phase.PROCESS_MONITORING,
        ]

    def test_windows_disjoint_ordered_and_covering(self):
        rng = random.Random(5)
        apis = [
            ("CreateFile", "COM1", "READ"),
            ("CreateFile", "COM1", "WRITE"),
            ("ReadFile", "COM1", "READ"),
            ("WriteFile", "COM1", "WRITE"),
            ("CloseHandle", "COM1", None),
            ("GetTickCount", None, None),
            ("LoadLibrary", None, None),
        ]
        for _ in range(25):
            trace = []
            for i in range(rng.randint(1, 40)):
                api, obj, access = rng.choice(apis)
                trace.append(ev(i, api, obj=obj, access=access,
                                eip=hex(rng.randint(1, 5)), depth=rng.randint(1, 4)))
            windows = phases.segment_phases(trace)
            covered = []
            for w in windows:
                assert w.start_idx <= w.end_idx
                covered.extend(range(w.start_idx, w.end_idx + 1))
            assert covered == list(range(len(trace)))


class TestLearn:
    def test_union_property(self):
        a = [monitor_alter_trace()]
        b = [monitor_alter_trace() + [ev(20, "GlobalAlloc", eip="0x70", depth=6)]]
        merged = phases.learn_physics(a + b)
        from_a = phases.learn_physics(a)
        from_b = phases.learn_physics(b)
        for phase in Phase:
            assert merged.names[phase] == from_a.names[phase] | from_b.names[phase]
            assert merged.patterns[phase] == from_a.patterns[phase] | from_b.patterns[phase]

    def test_monotone_under_more_traces(self):
        small = phases.learn_physics([monitor_alter_trace()])
        big = phases.learn_physics([monitor_alter_trace(), monitor_alter_trace(50.0)])
        for phase in Phase:
            assert small.names[phase] <= big.names[phase]

    def test_water_training_has_ten_altering_calls(self, water_bundle):
        names = water_bundle.constraints.names[Phase.PROCESS_ALTERING]
        assert len(names) == 10

    def test_power_training_has_six_altering_calls(self, power_bundle):
        names = power_bundle.constraints.names[Phase.PROCESS_ALTERING]
        assert len(names) == 6

    def test_monitoring_only_training_gets_skeleton(self, caplog):
        trace = [
            ev(0, "CreateFile", obj="COM1", access="READ", eip="0x10", depth=3),
            ev(1, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
            ev(2, "ReadFile", obj="COM1", access="READ", eip="0x20", depth=4),
        ]
        with caplog.at_level("WARNING"):
            constraints = phases.learn_physics([trace])
        assert constraints.names[Phase.PROCESS_ALTERING] == {
            "CreateFile", "WriteFile", "CloseHandle",
        }
        assert constraints.degraded

    def test_empty_training_raises(self):
        with pytest.raises(errors.EmptyTraining):
            phases.learn_physics([[]])

    def test_skeleton_always_present(self, water_bundle):
        names = water_bundle.constraints.names
        assert {"CreateFile", "WriteFile", "CloseHandle"} <= names[Phase.PROCESS_ALTERING]
        assert {"CreateFile", "ReadFile", "CloseHandle"} <= names[Phase.PROCESS_MONITORING]


class TestCheckPhysics:
    def _constraints(self):
        return phases.learn_physics([monitor_alter_trace()])

    def test_library_load_in_altering_is_injection(self):
        trace = monitor_alter_trace()
        trace.insert(6, ev(5.5, "LoadLibrary", eip="0x99", depth=7))
        windows = phases.segment_phases(trace)
        violations = phases.check_physics(trace, windows, self._constraints())
        assert [v.kind for v in violations] == ["injection"]
        assert violations[0].phase is Phase.PROCESS_ALTERING
        assert "LoadLibrary" in violations[0].detail

    def test_registry_enumeration_in_monitoring_is_injection(self):
        trace = monitor_alter_trace()
        for i, api in enumerate(("OueryKey", "OpenKey", "QueryValueKey")):
            trace.insert(2 + i, ev(1.2 + 0.1 * i, api, eip="0x98", depth=5))
        windows = phases.segment_phases(trace)
        violations = phases.check_physics(trace, windows, self._constraints())
        assert {v.kind for v in violations} == {"injection"}
        assert len(violations) == 3
        assert all(v.phase is Phase.PROCESS_MONITORING for v in violations)

    def test_unknown_device_object_pattern_is_injection(self):
        trace = monitor_alter_trace()
        trace.insert(6, ev(5.5, "CreateFile", obj="COM9", access="WRITE",
                           eip="0x97", depth=6))
        windows = phases.segment_phases(trace)
        violations = phases.check_physics(trace, windows, self._constraints())
        assert [v.kind for v in violations] == ["injection"]
        assert "COM9" in violations[0].detail

    def test_training_is_self_consistent(self):
        trace = monitor_alter_trace()
        windows = phases.segment_phases(trace)
        assert phases.check_physics(trace, windows, self._constraints()) == []

    def test_kernel_write_without_device_write_is_bypass(self):
        trace = [
            ev(0, "DeviceIoControl", obj="COM1", eip="0xf0", depth=2, space="kernel"),
            ev(1, phy_tx=True),
        ]
        windows = phases.segment_phases(trace)
        violations = phases.check_physics(trace, windows, self._constraints())
        assert [v.kind for v in violations] == ["bypass"]

    def test_matched_transmit_is_clean(self):
        trace = monitor_alter_trace()
        trace.append(ev(6.5, phy_tx=True))
        windows = phases.segment_phases(trace)
        assert phases.check_physics(trace, windows, self._constraints()) == []

    def test_correlation_window_boundary(self):
        base = monitor_alter_trace()  # WriteFile at t=5ms
        inside = base + [ev(105.0, phy_tx=True)]
        outside = base + [ev(105.1, phy_tx=True)]
        constraints = self._constraints()
        w_in = phases.segment_phases(inside)
        w_out = phases.segment_phases(outside)
        assert phases.check_physics(inside, w_in, constraints) == []
        kinds = [v.kind for v in phases.check_physics(outside, w_out, constraints)]
        assert kinds == ["bypass"]

    def test_every_transmit_matched_or_flagged(self):
        rng = random.Random(9)
        constraints = self._constraints()
        for _ in range(20):
            trace = list(monitor_alter_trace())
            n_tx = rng.randint(1, 5)
            for k in range(n_tx):
                trace.append(ev(200.0 + 200.0 * k, phy_tx=True))
            windows = phases.segment_phases(trace)
            bypasses = [
                v for v in phases.check_physics(trace, windows, constraints)
                if v.kind == "bypass"
            ]
            # Only the first transmit sits within the delta of the device write.
            expected = sum(
                1 for e in trace
                if e.phy_tx and e.t - 5 * MS > 100 * MS
            )
            assert len(bypasses) == expected


class TestDriverStack:
    def attach(self, t, obj):
        return ev(t, "IoAttachDeviceToDeviceStack", obj=obj, eip="0xf1",
                  depth=2, space="kernel")

    def test_single_attach_is_benign(self):
        assert phases.check_driver_stack([self.attach(0, "COM1")]) == []

    def test_repeat_attach_same_stack(self):
        violations = phases.check_driver_stack(
            [self.attach(0, "COM1"), self.attach(1, "COM1")]
        )
        assert [v.kind for v in violations] == ["device_stack_tamper"]

    def test_two_stacks_independent(self):
        # Oracle: per-stack counting never crosses objects.
        trace = [self.attach(0, "COM1"), self.attach(1, "COM2")]
        assert phases.check_driver_stack(trace) == []

    def test_bookkeeping_matches_bruteforce(self):
        rng = random.Random(13)
        for _ in range(20):
            trace = [
                self.attach(i, rng.choice(["COM1", "COM2", "COM3"]))
                for i in range(rng.randint(1, 10))
            ]
            counts: dict[str, int] = {}
            expected = 0
            for e in trace:
                counts[e.obj] = counts.get(e.obj, 0) + 1
                if counts[e.obj] > 1:
                    expected += 1
            assert len(phases.check_driver_stack(trace)) == expected


class TestS3Mapping:
    def test_self_contained_exploit(self):
        trace = [
            ev(0, "WriteFile", obj="COM1", access="WRITE", eip="0x40", depth=2),
        ]
        report = phases.map_s3(trace)
        assert not report.present[phases.S3Layer.S4_1_INIT]
        assert report.present[phases.S3Layer.S4_3_ALTERING]
        assert report.present[phases.S3Layer.S2_DEVICE_OBJECT]

    def test_empty_trace_all_absent(self):
        report = phases.map_s3([])
        assert not any(report.present.values())

    def test_full_benign_cycle(self):
        trace = [ev(0, "LoadLibrary", eip="0x1", depth=2)] + monitor_alter_trace(1.0)
        trace.append(ev(10, phy_tx=True))
        report = phases.map_s3(trace)
        for layer in (
            phases.S3Layer.S4_1_INIT,
            phases.S3Layer.S4_2_MONITORING,
            phases.S3Layer.S4_3_ALTERING,
            phases.S3Layer.S3_ICS_CALLBACK,
            phases.S3Layer.S2_DEVICE_OBJECT,
            phases.S3Layer.S0_PHYSICAL_IO,
        ):
            assert report.present[layer], layer

    def test_event_maps_to_at_most_one_layer(self):
        trace = monitor_alter_trace()
        for event in trace:
            layer = phases.layer_of(event)
            assert layer is None or isinstance(layer, phases.S3Layer)


class TestTraceIo:
    def test_parse_sorts_by_time(self):
        text = "\n".join([
            '{"t": 2000, "api": "ReadFile", "eip": "0x1", "depth": 1, "space": "user"}',
            '{"t": 1000, "api": "CreateFile", "obj": "COM1", "access": "READ",'
            ' "eip": "0x2", "depth": 1, "space": "user"}',
        ])
        events = phases.parse_trace(text)
        assert [e.t for e in events] == [1000, 2000]

    def test_round_trip(self):
        original = monitor_alter_trace()
        text = "\n".join(phases.event_to_json(e) for e in original)
        assert phases.parse_trace(text) == original

    def test_constraints_round_trip(self, power_bundle):
        text = phases.constraints_to_json(power_bundle.constraints)
        again = phases.constraints_from_json(text)
        assert again.names == power_bundle.constraints.names
        assert again.patterns == power_bundle.constraints.patterns
