"""Behavioral multi-ported register file with local-bitline grouping.

256 entries x 32 bits, 4 read / 4 write ports.  Writes issued during a
cycle commit at end of cycle; a read in the same cycle sees the pending
write through the bypass path.  The read path accepts an optional filter
hook where fault-injection payloads corrupt the returned word.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

ReadFilter = Callable[[int, int, int], int]  # (port, addr, raw) -> word


class WriteConflict(Exception):
    """Two write ports targeted the same entry in one cycle."""


@dataclass(frozen=True)
class RegisterFileGeometry:
    entries: int = 256
    word_bits: int = 32
    read_ports: int = 4
    write_ports: int = 4
    cells_per_lbl: int = 16
    lbls_per_gbl: int = 16

    def __post_init__(self):
        for name in ("entries", "word_bits", "read_ports", "write_ports",
                     "cells_per_lbl", "lbls_per_gbl"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cells_per_lbl * self.lbls_per_gbl != self.entries:
            raise ValueError("cells_per_lbl * lbls_per_gbl must equal entries")

    @property
    def word_mask(self) -> int:
        return (1 << self.word_bits) - 1

    def lbl_group(self, addr: int) -> int:
        """Index of the 16-entry local-bitline group containing ``addr``."""
        if not 0 <= addr < self.entries:
            raise ValueError(f"entry {addr} outside register file")
        return addr // self.cells_per_lbl


def lbl_group(addr: int, cells_per_lbl: int = 16) -> int:
    """Local-bitline group of an entry (default geometry: addr // 16)."""
    return addr // cells_per_lbl


@dataclass
class RegisterFile:
    """Storage array plus per-cycle pending-write (bypass) state."""

    geometry: RegisterFileGeometry = field(default_factory=RegisterFileGeometry)

    def __post_init__(self):
        self.words: List[int] = [0] * self.geometry.entries
        self.cycle: int = 0
        # entry -> (port, data); at most one pending write per entry per cycle
        self.pending: Dict[int, tuple] = {}

    def _check_port(self, port: int, limit: int, what: str) -> None:
        if not 0 <= port < limit:
            raise ValueError(f"{what} port {port} out of range")

    def _check_addr(self, addr: int) -> None:
        if not 0 <= addr < self.geometry.entries:
            raise ValueError(f"entry {addr} outside register file")

    def write(self, port: int, addr: int, data: int) -> None:
        """Issue a write; commits at end of the current cycle."""
        self._check_port(port, self.geometry.write_ports, "write")
        self._check_addr(addr)
        if addr in self.pending:
            raise WriteConflict(f"entry {addr} already has a pending write this cycle")
        self.pending[addr] = (port, data & self.geometry.word_mask)

    def read(self, port: int, addr: int, read_filter: Optional[ReadFilter] = None) -> int:
        """Read through a port: same-cycle pending write wins, then storage.

        The raw value passes through ``read_filter`` (payload hook) before
        being returned.
        """
        self._check_port(port, self.geometry.read_ports, "read")
        self._check_addr(addr)
        if addr in self.pending:
            raw = self.pending[addr][1]
        else:
            raw = self.words[addr]
        if read_filter is not None:
            return read_filter(port, addr, raw)
        return raw

    def commit_cycle(self) -> List[tuple]:
        """Commit pending writes, advance the cycle; returns committed list."""
        committed = []
        for addr, (port, data) in self.pending.items():
            self.words[addr] = data
            committed.append((port, addr, data))
        self.pending.clear()
        self.cycle += 1
        return committed

    def peek(self, addr: int) -> int:
        """Committed storage content, ignoring ports and pending writes."""
        self._check_addr(addr)
        return self.words[addr]

    def force_stored(self, addr: int, value: int) -> None:
        """Overwrite storage directly, bypassing the write ports.

        Models an analog short at the cell: the change lands in committed
        state immediately and persists until the entry is rewritten.
        """
        self._check_addr(addr)
        self.words[addr] = value & self.geometry.word_mask
