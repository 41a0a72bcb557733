"""Payload unit tests: arming gates, corruption semantics, locality, overheads."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rftrojan.payload import (
    ActivationEvent,
    ControlAddresses,
    ForceTo,
    OVERHEAD_TABLE,
    PayloadAttachment,
    PayloadKind,
    UnknownVariantError,
    apply_bc,
    expire_windows,
    filter_read,
    on_bus_write,
    overhead_record,
    overhead_report,
)
from rftrojan.regfile import RegisterFile
from rftrojan.trigger import PatternSpec

PATTERN = PatternSpec(terms=((0, 1), (3, 1), (6, 1), (4, 0)))
CTL = ControlAddresses(addr_x=0x602010, addr_y=0x602014, pattern=PATTERN)
MATCHING = 0x49
NON_MATCHING = 0x59


def bc_payload(entry=3, mask=0x3, force=ForceTo.ZEROS):
    return PayloadAttachment(PayloadKind.BC, CTL, target_entry=entry,
                             bit_mask=mask, force_to=force)


def rp_payload(entry=3, mask=0x3, port=1, window=4):
    return PayloadAttachment(PayloadKind.RP, CTL, target_entry=entry,
                             bit_mask=mask, infected_port=port, window_cycles=window)


def lbl_payload(port=1, bit=1, group=0, forced=0, window=4):
    return PayloadAttachment(PayloadKind.LBL, CTL, infected_port=port,
                             bit_position=bit, group_index=group,
                             forced_value=forced, window_cycles=window)


class TestArming:
    def test_dormant_without_latch(self):
        for p in (bc_payload(), rp_payload(), lbl_payload()):
            assert on_bus_write(p, False, 0x602010, MATCHING, 10) is None
            assert on_bus_write(p, False, 0x602014, MATCHING, 10) is None
            assert not p.is_active(10)

    def test_bc_zeros_fires_on_addr_x_with_pattern(self):
        p = bc_payload()
        ev = on_bus_write(p, True, 0x602010, MATCHING, 5)
        assert isinstance(ev, ActivationEvent) and ev.fired

    def test_bc_zeros_ignores_addr_y(self):
        p = bc_payload()
        assert on_bus_write(p, True, 0x602014, MATCHING, 5) is None

    def test_bc_ones_fires_on_addr_y(self):
        p = bc_payload(force=ForceTo.ONES)
        assert on_bus_write(p, True, 0x602014, MATCHING, 5).fired
        assert on_bus_write(p, True, 0x602010, MATCHING, 5) is None

    def test_bc_needs_pattern_match(self):
        p = bc_payload()
        assert on_bus_write(p, True, 0x602010, NON_MATCHING, 5) is None

    def test_rp_arms_on_addr_x_any_data(self):
        p = rp_payload(window=4)
        ev = on_bus_write(p, True, 0x602010, MATCHING, 10)
        assert ev.window_until == 14 and ev.forced_polarity == 1
        assert p.is_active(10) and p.is_active(13) and not p.is_active(14)

    def test_rp_polarity_follows_deploy_data(self):
        p = rp_payload()
        on_bus_write(p, True, 0x602010, NON_MATCHING, 10)
        assert p.forced_polarity == 0

    def test_lbl_arms_on_addr_y_with_pattern(self):
        p = lbl_payload(window=6)
        ev = on_bus_write(p, True, 0x602014, MATCHING, 20)
        assert ev.window_until == 26
        assert on_bus_write(p, True, 0x602014, NON_MATCHING, 30) is None


class TestBcCorruption:
    def test_force_zeros_bit_arithmetic(self):
        rf = RegisterFile()
        rf.force_stored(3, 0xFFFFFFFF)
        apply_bc(bc_payload(entry=3, mask=0x3), rf)
        assert rf.peek(3) == 0xFFFFFFFC

    def test_force_ones_bit_arithmetic(self):
        rf = RegisterFile()
        apply_bc(bc_payload(entry=3, mask=0x3, force=ForceTo.ONES), rf)
        assert rf.peek(3) == 0x3

    def test_persists_until_rewrite(self):
        rf = RegisterFile()
        rf.force_stored(3, 0xFF)
        apply_bc(bc_payload(entry=3, mask=0xF), rf)
        assert rf.peek(3) == 0xF0
        for _ in range(5):
            rf.commit_cycle()
        assert rf.peek(3) == 0xF0
        rf.write(0, 3, 0xFF)
        rf.commit_cycle()
        assert rf.peek(3) == 0xFF

    @given(st.integers(0, 0xFFFFFFFF), st.integers(1, 0xFFFFFFFF))
    def test_matches_naive_bit_loop(self, value, mask):
        # Oracle: per-bit loop instead of mask arithmetic.
        rf = RegisterFile()
        rf.force_stored(0, value)
        apply_bc(bc_payload(entry=0, mask=mask, force=ForceTo.ONES), rf)
        expected = value
        for b in range(32):
            if (mask >> b) & 1:
                expected |= 1 << b
        assert rf.peek(0) == expected


class TestFilterRead:
    def test_identity_when_inactive(self):
        payloads = [rp_payload(), lbl_payload()]
        for raw in (0, 0xFFFFFFFF, 0x12345678, 0xA5A55A5A):
            assert filter_read(payloads, 1, 3, raw, cycle=0) == raw

    def test_rp_one_to_zero_error(self):
        p = rp_payload(entry=3, mask=0x3, port=1)
        on_bus_write(p, True, 0x602010, MATCHING, 10)  # V_F = 1
        assert filter_read([p], 1, 3, 0b11, 11) == 0b00
        assert filter_read([p], 0, 3, 0b11, 11) == 0b11  # other port clean

    def test_rp_zero_to_one_error(self):
        p = rp_payload(entry=3, mask=0x3, port=1)
        on_bus_write(p, True, 0x602010, NON_MATCHING, 10)  # V_F = 0
        assert filter_read([p], 1, 3, 0b00, 11) == 0b11

    def test_rp_only_in_window(self):
        p = rp_payload(entry=3, mask=0x3, port=1, window=4)
        on_bus_write(p, True, 0x602010, MATCHING, 10)
        assert filter_read([p], 1, 3, 0b11, 13) == 0b00
        assert filter_read([p], 1, 3, 0b11, 14) == 0b11

    def test_lbl_hits_whole_group_single_bit(self):
        p = lbl_payload(port=1, bit=1, group=0, forced=0)
        on_bus_write(p, True, 0x602014, MATCHING, 10)
        for entry in range(16):
            assert filter_read([p], 1, entry, 0xFFFFFFFF, 11) == 0xFFFFFFFD
        assert filter_read([p], 1, 16, 0xFFFFFFFF, 11) == 0xFFFFFFFF
        assert filter_read([p], 0, 3, 0xFFFFFFFF, 11) == 0xFFFFFFFF

    def test_lbl_locality_exact_deviation_set(self):
        # Oracle sweep: deviations are exactly {(infected port, group entries)}
        # and differ only in bit_position.
        p = lbl_payload(port=2, bit=5, group=3, forced=1)
        on_bus_write(p, True, 0x602014, MATCHING, 100)
        deviations = []
        for port in range(4):
            for entry in range(256):
                raw = 0x0
                got = filter_read([p], port, entry, raw, 101)
                if got != raw:
                    deviations.append((port, entry, raw ^ got))
        expected = [(2, e, 1 << 5) for e in range(48, 64)]
        assert deviations == expected

    def test_rp_locality_exact_deviation_set(self):
        p = rp_payload(entry=77, mask=0xFF, port=0)
        on_bus_write(p, True, 0x602010, MATCHING, 100)
        deviations = []
        for port in range(4):
            for entry in range(256):
                raw = 0xFFFFFFFF
                got = filter_read([p], port, entry, raw, 101)
                if got != raw:
                    deviations.append((port, entry))
        assert deviations == [(0, 77)]

    def test_attachment_order_composition(self):
        a = rp_payload(entry=3, mask=0x1, port=1)
        b = lbl_payload(port=1, bit=0, group=0, forced=1)
        on_bus_write(a, True, 0x602010, MATCHING, 10)  # forces bit 0 -> 0
        on_bus_write(b, True, 0x602014, MATCHING, 10)  # forces bit 0 -> 1
        # a then b: LBL applied last wins on the shared bit.
        assert filter_read([a, b], 1, 3, 0b1, 11) == 0b1
        assert filter_read([b, a], 1, 3, 0b1, 11) == 0b0

    @settings(max_examples=50)
    @given(st.integers(0, 0xFFFFFFFF))
    def test_no_active_payload_is_identity(self, raw):
        payloads = [bc_payload(), rp_payload(), lbl_payload()]
        assert filter_read(payloads, 0, 3, raw, 0) == raw


class TestWindows:
    def test_expire_windows(self):
        p = rp_payload(window=4)
        on_bus_write(p, True, 0x602010, MATCHING, 10)
        assert expire_windows([p], 13) == []
        assert expire_windows([p], 14) == [p]
        assert p.active_until is None

    def test_rearm_extends_window(self):
        p = rp_payload(window=4)
        on_bus_write(p, True, 0x602010, MATCHING, 10)
        on_bus_write(p, True, 0x602010, MATCHING, 12)
        assert p.is_active(15)
        assert not p.is_active(16)


class TestOverhead:
    def test_table_has_six_rows(self):
        assert len(OVERHEAD_TABLE) == 6

    def test_bc_0_to_1_row(self):
        r = overhead_record(PayloadKind.BC, "0->1")
        assert (r.static_power_nw, r.dynamic_power_uw, r.area_um2) == (0.079, 62.44, 0.056)
        assert r.use_case == "Kernel Leak"

    def test_lbl_1_to_0_row(self):
        r = overhead_record(PayloadKind.LBL, "1->0")
        assert (r.static_power_nw, r.dynamic_power_uw, r.area_um2) == (11.26, 24.57, 0.026)
        assert r.use_case == "DoS"

    def test_rp_1_to_0_row(self):
        r = overhead_record(PayloadKind.RP, "1->0")
        assert (r.static_power_nw, r.dynamic_power_uw, r.area_um2) == (33.73, 112.34, 0.064)
        assert r.use_case == "Kernel Leak"

    def test_report_selects_by_attachment_variant(self):
        rows = overhead_report([bc_payload(force=ForceTo.ONES), lbl_payload(forced=0)])
        assert rows[0] == overhead_record(PayloadKind.BC, "0->1")
        assert rows[1] == overhead_record(PayloadKind.LBL, "1->0")

    def test_rp_report_follows_deploy_polarity(self):
        p = rp_payload()
        assert overhead_report([p])[0].polarity == "1->0"  # default sizing row
        on_bus_write(p, True, 0x602010, NON_MATCHING, 0)
        assert overhead_report([p])[0].polarity == "0->1"

    def test_unknown_variant_raises(self):
        with pytest.raises(UnknownVariantError):
            overhead_record(PayloadKind.BC, "sideways")


class TestValidation:
    def test_bc_requires_target(self):
        with pytest.raises(ValueError):
            PayloadAttachment(PayloadKind.BC, CTL, bit_mask=1)

    def test_zero_mask_rejected(self):
        with pytest.raises(ValueError):
            PayloadAttachment(PayloadKind.RP, CTL, target_entry=0, bit_mask=0)

    def test_lbl_bounds(self):
        with pytest.raises(ValueError):
            PayloadAttachment(PayloadKind.LBL, CTL, bit_position=32)
        with pytest.raises(ValueError):
            PayloadAttachment(PayloadKind.LBL, CTL, group_index=16)
