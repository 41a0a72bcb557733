"""Fault-injection payloads riding on the trigger latch.

Three payload families, each armed by a qualifying write on the L1 bus
while the trigger latch is asserted:

* BC  -- bitcell corruption: shorts masked bits of one stored entry to
         ground or supply; persists until the entry is rewritten.
* RP  -- read-port corruption: during a bounded window, masked bits of one
         entry read through one specific port return the inverse of the
         deploy write's pattern match.
* LBL -- local-bitline corruption: during a bounded window, one bit
         position of all 16 entries in one bitline group reads as a forced
         value on one port.

Control logic per attachment: two designated bus addresses (addr_x /
addr_y) plus a data pattern gate the arming.  The caller passes the latch
state as seen *before* this cycle's charge update, so the write that
latches the trigger never arms a payload itself; the next qualifying write
does.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

from .trigger import PatternSpec
from .regfile import RegisterFile, lbl_group

WORD_MASK = 0xFFFFFFFF
DEFAULT_WINDOW_CYCLES = 4  # stand-in for L1 load latency


class PayloadKind(enum.Enum):
    BC = "BC"
    RP = "RP"
    LBL = "LBL"


class ForceTo(enum.Enum):
    ZEROS = "zeros"
    ONES = "ones"


class UnknownVariantError(KeyError):
    """Attachment has no row in the overhead table."""


@dataclass(frozen=True)
class ControlAddresses:
    """The two bus addresses and data pattern gating payload arming."""

    addr_x: int
    addr_y: int
    pattern: PatternSpec


@dataclass(frozen=True)
class ActivationEvent:
    kind: PayloadKind
    cycle: int
    fired: bool            # True for BC (effect lands now)
    window_until: Optional[int] = None
    forced_polarity: Optional[int] = None


@dataclass
class PayloadAttachment:
    """One deployed payload instance with its control state.

    Field usage by kind:
      BC:  target_entry, bit_mask, force_to (zeros arms via addr_x, ones
           via addr_y)
      RP:  target_entry, bit_mask, infected_port, window_cycles;
           forced_polarity is set by each deploy write's pattern match
      LBL: infected_port, bit_position, group_index, forced_value,
           window_cycles
    """

    kind: PayloadKind
    control: ControlAddresses
    target_entry: Optional[int] = None
    bit_mask: int = 0
    force_to: ForceTo = ForceTo.ZEROS
    infected_port: int = 0
    bit_position: int = 0
    group_index: int = 0
    forced_value: int = 0
    window_cycles: int = DEFAULT_WINDOW_CYCLES

    active_until: Optional[int] = field(default=None, init=False)
    forced_polarity: Optional[int] = field(default=None, init=False)
    fire_count: int = field(default=0, init=False)

    def __post_init__(self):
        if self.kind in (PayloadKind.BC, PayloadKind.RP):
            if self.target_entry is None:
                raise ValueError(f"{self.kind.value} payload needs a target_entry")
            if not 0 <= self.bit_mask <= WORD_MASK:
                raise ValueError("bit_mask must fit the 32-bit word")
            if self.bit_mask == 0:
                raise ValueError("bit_mask must select at least one bit")
        if self.kind in (PayloadKind.RP, PayloadKind.LBL):
            if self.window_cycles < 1:
                raise ValueError("window_cycles must be >= 1")
        if self.kind is PayloadKind.LBL:
            if not 0 <= self.bit_position < 32:
                raise ValueError("bit_position must be in 0..31")
            if not 0 <= self.group_index < 16:
                raise ValueError("group_index must be in 0..15")
            if self.forced_value not in (0, 1):
                raise ValueError("forced_value must be 0 or 1")

    def is_active(self, cycle: int) -> bool:
        return self.active_until is not None and cycle < self.active_until

    @property
    def polarity(self) -> str:
        """Error direction used for overhead reporting.

        BC zeros / LBL forced-0 corrupt 1->0; the inverses corrupt 0->1.
        An RP attachment covers both directions; its row follows the last
        deploy's polarity and defaults to the single-transistor (1->0)
        sizing before any deploy.
        """
        if self.kind is PayloadKind.BC:
            return "0->1" if self.force_to is ForceTo.ONES else "1->0"
        if self.kind is PayloadKind.LBL:
            return "0->1" if self.forced_value == 1 else "1->0"
        if self.forced_polarity == 0:
            return "0->1"
        return "1->0"


def on_bus_write(
    payload: PayloadAttachment,
    trigger_latched: bool,
    addr: int,
    data: int,
    cycle: int,
) -> Optional[ActivationEvent]:
    """Control-logic reaction to one L1 write; called after the trigger cell
    has observed the cycle, with the latch state from before that update.
    """
    if not trigger_latched:
        return None
    ctl = payload.control
    if payload.kind is PayloadKind.BC:
        arm_addr = ctl.addr_x if payload.force_to is ForceTo.ZEROS else ctl.addr_y
        if addr == arm_addr and ctl.pattern.matches(data):
            payload.fire_count += 1
            return ActivationEvent(PayloadKind.BC, cycle, fired=True)
        return None
    if payload.kind is PayloadKind.RP:
        if addr == ctl.addr_x:
            payload.forced_polarity = 1 if ctl.pattern.matches(data) else 0
            payload.active_until = cycle + payload.window_cycles
            payload.fire_count += 1
            return ActivationEvent(
                PayloadKind.RP, cycle, fired=False,
                window_until=payload.active_until,
                forced_polarity=payload.forced_polarity,
            )
        return None
    # LBL
    if addr == ctl.addr_y and ctl.pattern.matches(data):
        payload.active_until = cycle + payload.window_cycles
        payload.fire_count += 1
        return ActivationEvent(
            PayloadKind.LBL, cycle, fired=False, window_until=payload.active_until
        )
    return None


def apply_bc(payload: PayloadAttachment, rf: RegisterFile) -> None:
    """Land a fired BC corruption in committed storage."""
    if payload.kind is not PayloadKind.BC:
        raise ValueError("apply_bc only applies to BC payloads")
    current = rf.peek(payload.target_entry)
    if payload.force_to is ForceTo.ZEROS:
        rf.force_stored(payload.target_entry, current & ~payload.bit_mask)
    else:
        rf.force_stored(payload.target_entry, current | payload.bit_mask)


def filter_read(
    payloads: Sequence[PayloadAttachment],
    port: int,
    addr: int,
    raw: int,
    cycle: int,
    cells_per_lbl: int = 16,
) -> int:
    """Read-path corruption; applies active payloads in attachment order."""
    word = raw
    for p in payloads:
        if p.kind is PayloadKind.RP:
            if p.is_active(cycle) and port == p.infected_port and addr == p.target_entry:
                if p.forced_polarity == 1:
                    word &= ~p.bit_mask & WORD_MASK
                else:
                    word |= p.bit_mask
        elif p.kind is PayloadKind.LBL:
            if (
                p.is_active(cycle)
                and port == p.infected_port
                and lbl_group(addr, cells_per_lbl) == p.group_index
            ):
                if p.forced_value:
                    word |= 1 << p.bit_position
                else:
                    word &= ~(1 << p.bit_position) & WORD_MASK
    return word & WORD_MASK


def expire_windows(payloads: Iterable[PayloadAttachment], cycle: int) -> List[PayloadAttachment]:
    """Close windows that have run out as of ``cycle``; returns the closed ones."""
    closed = []
    for p in payloads:
        if p.active_until is not None and cycle >= p.active_until:
            p.active_until = None
            closed.append(p)
    return closed


@dataclass(frozen=True)
class OverheadRecord:
    """Per-variant implementation cost figures echoed into reports."""

    kind: PayloadKind
    polarity: str
    static_power_nw: float
    dynamic_power_uw: float
    area_um2: float
    use_case: str


OVERHEAD_TABLE = (
    OverheadRecord(PayloadKind.BC, "0->1", 0.079, 62.44, 0.056, "Kernel Leak"),
    OverheadRecord(PayloadKind.BC, "1->0", 0.083, 8.37, 0.023, "Kernel Leak"),
    OverheadRecord(PayloadKind.RP, "0->1", 12.93, 45.38, 0.048, "Kernel Leak"),
    OverheadRecord(PayloadKind.RP, "1->0", 33.73, 112.34, 0.064, "Kernel Leak"),
    OverheadRecord(PayloadKind.LBL, "0->1", 35.28, 57.54, 0.022, "DoS"),
    OverheadRecord(PayloadKind.LBL, "1->0", 11.26, 24.57, 0.026, "DoS"),
)

_OVERHEAD_BY_VARIANT = {(r.kind, r.polarity): r for r in OVERHEAD_TABLE}


def overhead_record(kind: PayloadKind, polarity: str) -> OverheadRecord:
    try:
        return _OVERHEAD_BY_VARIANT[(kind, polarity)]
    except KeyError:
        raise UnknownVariantError(f"no overhead row for {kind!r} {polarity!r}") from None


def overhead_report(attachments: Sequence[PayloadAttachment]) -> List[OverheadRecord]:
    """One table row per attachment, selected by its kind and polarity."""
    return [overhead_record(a.kind, a.polarity) for a in attachments]
