"""Charge-pump trigger cell: pattern detection, charge accumulation, latch, reset.

The trigger watches the L1 write bus (the gating on address/set and data
pattern is done by the machine layer).  Each qualifying hammer write adds a
fixed charge increment at the sense node; each idle cycle leaks a fixed
amount; once the accumulated charge crosses the threshold an SR latch
asserts and stays asserted until a reset event.

All charge bookkeeping uses exact integer arithmetic on a common rational
lattice (numerators over one fixed denominator) so that:
  * the latch fires on exactly the configured hammer count,
  * trajectories are bit-identical across runs and platforms.
The one approximation: the ceiling clamp at ``v_max`` floors to the lattice,
which can sit up to one lattice unit (micro-volts) below the configured
``v_max``.  The latch threshold is never affected.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Tuple


def _as_fraction(value) -> Fraction:
    """Exact rational from config values.

    Floats are read through their shortest decimal repr, so a config value
    of 0.05 becomes exactly 1/20 rather than the nearest binary fraction.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


@dataclass(frozen=True)
class PatternSpec:
    """A conjunction of required bit values on the write-data bus.

    ``terms`` is a sequence of (bit_index, required_value) pairs; the
    pattern matches a word iff every listed bit has its required value.
    """

    terms: Tuple[Tuple[int, int], ...]
    bus_width: int = 32

    def __post_init__(self):
        terms = tuple((int(i), int(v)) for i, v in self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ValueError("pattern needs at least one term")
        seen = set()
        for i, v in terms:
            if not 0 <= i < self.bus_width:
                raise ValueError(f"pattern bit index {i} outside bus width {self.bus_width}")
            if v not in (0, 1):
                raise ValueError(f"pattern bit value must be 0 or 1, got {v}")
            if i in seen:
                raise ValueError(f"pattern bit index {i} listed twice")
            seen.add(i)

    def matches(self, data: int) -> bool:
        for i, v in self.terms:
            if (data >> i) & 1 != v:
                return False
        return True


def match_pattern(spec: PatternSpec, data: int) -> bool:
    """True iff every (bit, value) term of the pattern holds in ``data``."""
    return spec.matches(data)


def patterns_compatible(a: PatternSpec, b: PatternSpec) -> bool:
    """True if some word can match both patterns at once.

    Two patterns are only disjoint when they demand different values for at
    least one shared bit index.
    """
    required = dict(a.terms)
    return all(required.get(i, v) == v for i, v in b.terms)


class BusEvent(enum.Enum):
    """What the trigger cell saw on the bus this cycle."""

    HAMMER_SET = "hammer_set"
    HAMMER_RESET = "hammer_reset"
    IDLE = "idle"


class ResetMode(enum.Enum):
    COUNTED = "counted"
    IMMEDIATE = "immediate"


class TransitionKind(enum.Enum):
    TRIGGERED = "Triggered"
    RESET = "Reset"


@dataclass(frozen=True)
class TriggerTransition:
    kind: TransitionKind
    cycle: int
    hammer_index: int


# Leak-to-charge ratio shape: a 30% duty schedule must still make net
# positive progress, so leak/delta sits a margin epsilon below 3/7
# (= 0.3/0.7, the break-even ratio of a 30%-on periodic schedule).
_LEAK_RATIO_NUM = 3
_LEAK_RATIO_DEN = 7
DEFAULT_LEAK_MARGIN = Fraction(1, 20)  # 5%


@dataclass
class TriggerCell:
    """Behavioral trigger: charge node, SR latch, and counted/immediate reset.

    ``set_address``/``set_pattern`` and the reset twins are carried here as
    configuration; the machine layer decides per cycle whether a bus write
    qualifies and feeds exactly one :class:`BusEvent` per simulated cycle.
    """

    set_address: int = 0x602010
    set_pattern: PatternSpec = PatternSpec(terms=((0, 1), (3, 1), (6, 1), (4, 0)))
    reset_address: int = 0x603050
    reset_pattern: PatternSpec = PatternSpec(terms=((1, 1), (2, 1), (0, 0)))
    n_set: int = 1837
    n_reset: int = 92
    v_threshold: Fraction = Fraction(1, 2)
    v_max: Fraction = Fraction(1)
    leak_margin: Fraction = DEFAULT_LEAK_MARGIN
    reset_mode: ResetMode = ResetMode.COUNTED
    delta_per_hammer: Optional[Fraction] = None
    leak_per_idle_cycle: Optional[Fraction] = None

    latched: bool = field(default=False, init=False)
    hammer_count: int = field(default=0, init=False)
    reset_hammer_count: int = field(default=0, init=False)
    hammer_index_at_latch: Optional[int] = field(default=None, init=False)

    def __post_init__(self):
        self.v_threshold = _as_fraction(self.v_threshold)
        self.v_max = _as_fraction(self.v_max)
        self.leak_margin = _as_fraction(self.leak_margin)
        if self.delta_per_hammer is None or self.leak_per_idle_cycle is None:
            self.delta_per_hammer, self.leak_per_idle_cycle = calibrate(self)
        else:
            self.delta_per_hammer = _as_fraction(self.delta_per_hammer)
            self.leak_per_idle_cycle = _as_fraction(self.leak_per_idle_cycle)
        if self.n_reset < 1:
            raise ValueError("n_reset must be >= 1")
        reset_step = self.v_threshold / self.n_reset
        den = math.lcm(
            self.delta_per_hammer.denominator,
            self.leak_per_idle_cycle.denominator,
            reset_step.denominator,
            self.v_threshold.denominator,
        )
        self._den = den
        self._delta_u = int(self.delta_per_hammer * den)
        self._leak_u = int(self.leak_per_idle_cycle * den)
        self._reset_step_u = int(reset_step * den)
        self._threshold_u = int(self.v_threshold * den)
        self._vmax_u = math.floor(self.v_max * den)
        self._charge_u = 0
        self._reset_charge_u = 0
        self._max_charge_u = 0

    # -- observable state ---------------------------------------------------

    @property
    def charge(self) -> Fraction:
        return Fraction(self._charge_u, self._den)

    @property
    def charge_v(self) -> float:
        return self._charge_u / self._den

    @property
    def reset_charge(self) -> Fraction:
        return Fraction(self._reset_charge_u, self._den)

    @property
    def max_charge(self) -> Fraction:
        return Fraction(self._max_charge_u, self._den)

    def charge_repr(self) -> str:
        """Exact rational rendering used in traces."""
        return f"{self.charge.numerator}/{self.charge.denominator}"

    # -- cycle semantics -----------------------------------------------------

    def observe(self, event: BusEvent, cycle: int) -> Optional[TriggerTransition]:
        """Advance one cycle; returns a transition when the latch flips."""
        if event is BusEvent.HAMMER_SET:
            self.hammer_count += 1
            self._charge_u = min(self._charge_u + self._delta_u, self._vmax_u)
            if self._charge_u > self._max_charge_u:
                self._max_charge_u = self._charge_u
            if not self.latched and self._charge_u >= self._threshold_u:
                self.latched = True
                self.hammer_index_at_latch = self.hammer_count
                return TriggerTransition(TransitionKind.TRIGGERED, cycle, self.hammer_count)
            return None
        if event is BusEvent.IDLE:
            self._charge_u = max(self._charge_u - self._leak_u, 0)
            return None
        if event is BusEvent.HAMMER_RESET:
            self.reset_hammer_count += 1
            if self.reset_mode is ResetMode.IMMEDIATE:
                return self._do_reset(cycle)
            self._reset_charge_u += self._reset_step_u
            if self._reset_charge_u >= self._threshold_u:
                return self._do_reset(cycle)
            return None
        raise TypeError(f"unknown bus event {event!r}")

    def _do_reset(self, cycle: int) -> TriggerTransition:
        self.latched = False
        self._charge_u = 0
        self._reset_charge_u = 0
        index = self.reset_hammer_count
        self.reset_hammer_count = 0
        return TriggerTransition(TransitionKind.RESET, cycle, index)

    def idle_run(self, cycles: int) -> None:
        """Apply ``cycles`` consecutive idle cycles in closed form.

        Equivalent to calling :meth:`observe` with IDLE that many times:
        linear decay clamped at zero, no transitions possible.
        """
        if cycles <= 0:
            return
        self._charge_u = max(self._charge_u - self._leak_u * cycles, 0)

    def charge_after_idles(self, cycles: int) -> Fraction:
        """Charge value ``cycles`` idle cycles from now, without advancing."""
        return Fraction(max(self._charge_u - self._leak_u * cycles, 0), self._den)


def calibrate(cell: TriggerCell) -> Tuple[Fraction, Fraction]:
    """Per-hammer charge step and per-idle leak for a cell's configuration.

    delta is fixed by the continuous-hammer anchor (threshold reached on
    exactly the n_set-th hammer); leak is delta * 3/7 * (1 - margin) so a
    30%-on periodic schedule still converges while materially lower duty
    cycles decay back to zero.
    """
    n_set = cell.n_set
    v_threshold = _as_fraction(cell.v_threshold)
    v_max = _as_fraction(cell.v_max)
    margin = _as_fraction(cell.leak_margin)
    if n_set < 1:
        raise ValueError("n_set must be >= 1")
    if not 0 < v_threshold <= v_max:
        raise ValueError("v_threshold must lie in (0, v_max]")
    delta = v_threshold / n_set
    leak = delta * _LEAK_RATIO_NUM * (1 - margin) / _LEAK_RATIO_DEN
    return delta, leak


def observe_cycle(cell: TriggerCell, event: BusEvent, cycle: int) -> Optional[TriggerTransition]:
    """One simulated cycle; exactly one event per cycle."""
    return cell.observe(event, cycle)


def run_schedule(cell: TriggerCell, events: Sequence[BusEvent], start_cycle: int = 0):
    """Drive a whole event sequence; yields (cycle, transition) pairs."""
    for i, ev in enumerate(events):
        tr = cell.observe(ev, start_cycle + i)
        if tr is not None:
            yield start_cycle + i, tr
