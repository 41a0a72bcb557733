"""Minimal CPU + memory model around the register file.

Architectural registers live in RF entries (the code-segment register
carries the 2-bit privilege field), address translation goes through a
per-process page table with a fully associative LRU TLB, and the
virtually-indexed L1 write path feeds the trigger cell and the payload
control logic.  Processes are cooperatively scheduled script interpreters;
an explicit context switch saves/restores the mapped RF entries (which is
what heals stored-bit corruption).

Privilege convention: the page-table U/S bit is 1 for kernel pages, and a
kernel page is accessible only at privilege 0.  Real x86 uses the opposite
U/S encoding; this model keeps the 1-means-kernel convention throughout.
Only privilege levels 0 and 3 are valid; a corrupted read that yields any
other value faults the process (a trashed segment register crashes the
code that depends on it).

Cycle phases: events land in fixed order trigger -> payload-control ->
reads -> write-commit -> defense.  A write's own permission check is
evaluated against the payload window state from before that write arms
anything: the control logic reacts to a completed bus write, so the write
that opens a window is checked with the old state and the write that
latches the trigger never arms a payload itself.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import payload as payload_mod
from .defense import (
    DetectionEvent,
    HashShadowStore,
    ObfuscationMap,
    VerifyConfig,
    VerifyMode,
    VerifyUnit,
)
from .payload import PayloadAttachment, PayloadKind
from .regfile import RegisterFile, RegisterFileGeometry
from .trigger import BusEvent, TriggerCell

PAGE_SIZE = 4096
ADDRESS_SPACE_BITS = 32

# Trace phase order within a cycle.
PHASE_TRIGGER = 0
PHASE_PAYLOAD = 1
PHASE_READS = 2
PHASE_WRITES = 3
PHASE_DEFENSE = 4

EventSink = Callable[[int, str, dict], None]


def _no_sink(phase: int, kind: str, fields: dict) -> None:
    pass


class AccessOutcome(enum.Enum):
    OK = "ok"
    SEGFAULT = "segfault"
    PAGEFAULT = "pagefault"


@dataclass(frozen=True)
class AccessResult:
    outcome: AccessOutcome
    pfn: int = 0
    offset: int = 0
    tlb_hit: bool = False
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome is AccessOutcome.OK

    @property
    def paddr(self) -> int:
        return self.pfn * PAGE_SIZE + self.offset


@dataclass(frozen=True)
class Pte:
    vpn: int
    pfn: int
    present: int = 1
    us_bit: int = 0   # 1 = kernel page
    rw_bit: int = 1   # 0 = read-only

    def __post_init__(self):
        if self.vpn < 0 or self.vpn >= 1 << (ADDRESS_SPACE_BITS - 12):
            raise ValueError(f"vpn {self.vpn:#x} outside the address space")
        if self.pfn < 0 or self.pfn >= 1 << (ADDRESS_SPACE_BITS - 12):
            raise ValueError(f"pfn {self.pfn:#x} outside the address space")


@dataclass(frozen=True)
class RegisterMap:
    """Where the architectural registers live in the RF."""

    cs_entry: int = 1
    cpl_bits: Tuple[int, int] = (1, 0)  # (high, low) bit positions in CS
    segment_entries: Dict[str, int] = field(default_factory=lambda: {"ss": 2, "ds": 3})
    control_entries: Dict[str, int] = field(
        default_factory=lambda: {"cr0": 4, "cr1": 5, "cr2": 6, "cr3": 7, "cr4": 8}
    )
    gpr_entries: Dict[str, int] = field(
        default_factory=lambda: {
            "eax": 9, "ebx": 10, "ecx": 11, "edx": 12,
            "esp": 13, "ebp": 14, "eip": 15,
        }
    )

    def __post_init__(self):
        if len(self.cpl_bits) != 2:
            raise ValueError("cpl_bits must name exactly two bit positions")
        entries = self.all_entries()
        if len(entries) != len(set(entries)):
            raise ValueError("register map entries must be distinct")

    def all_entries(self) -> List[int]:
        return (
            [self.cs_entry]
            + list(self.segment_entries.values())
            + list(self.control_entries.values())
            + list(self.gpr_entries.values())
        )

    def protected_entries(self) -> List[int]:
        """Entries covered by the hash shadow store (never the GPRs)."""
        return [self.cs_entry] + list(self.segment_entries.values()) + list(
            self.control_entries.values()
        )

    def name_to_entry(self, name: str) -> int:
        if name == "cs":
            return self.cs_entry
        for table in (self.segment_entries, self.control_entries, self.gpr_entries):
            if name in table:
                return table[name]
        raise KeyError(f"unknown register name {name!r}")

    def cpl_mask(self) -> int:
        hi, lo = self.cpl_bits
        return (1 << hi) | (1 << lo)

    def extract_cpl(self, word: int) -> int:
        hi, lo = self.cpl_bits
        return (((word >> hi) & 1) << 1) | ((word >> lo) & 1)

    def encode_cpl(self, word: int, cpl: int) -> int:
        hi, lo = self.cpl_bits
        word &= ~self.cpl_mask() & 0xFFFFFFFF
        word |= ((cpl >> 1) & 1) << hi
        word |= (cpl & 1) << lo
        return word


class ProcessStatus(enum.Enum):
    RUNNABLE = "runnable"
    FAULTED = "faulted"
    EXITED = "exited"


@dataclass
class Process:
    pid: int
    cpl: int = 3
    saved_registers: Dict[int, int] = field(default_factory=dict)
    page_table: Dict[int, Pte] = field(default_factory=dict)
    program: List[object] = field(default_factory=list)
    status: ProcessStatus = ProcessStatus.RUNNABLE
    cpl_port: Optional[int] = None

    # run bookkeeping
    step_index: int = 0
    repeats_left: int = 0
    kernel_bytes_read: int = 0
    fault: Optional[dict] = None
    register_reads: List[Tuple[str, int]] = field(default_factory=list)
    expectation_failures: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.cpl not in (0, 3):
            raise ValueError("process privilege must be 0 or 3")

    @property
    def runnable(self) -> bool:
        return self.status is ProcessStatus.RUNNABLE

    def mark_faulted(self, info: dict) -> None:
        self.status = ProcessStatus.FAULTED
        self.fault = info


@dataclass(frozen=True)
class L1Config:
    num_sets: int = 64
    line_size: int = 64

    def __post_init__(self):
        for name in ("num_sets", "line_size"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two")

    def raw_set_index(self, vaddr: int) -> int:
        return (vaddr // self.line_size) % self.num_sets


class Tlb:
    """Fully associative, LRU, keyed by (pid, vpn)."""

    def __init__(self, capacity: int = 16, enabled: bool = True):
        self.capacity = capacity
        self.enabled = enabled
        self.entries: "OrderedDict[Tuple[int, int], Pte]" = OrderedDict()

    def lookup(self, pid: int, vpn: int) -> Optional[Pte]:
        if not self.enabled:
            return None
        key = (pid, vpn)
        pte = self.entries.get(key)
        if pte is not None:
            self.entries.move_to_end(key)
        return pte

    def fill(self, pid: int, vpn: int, pte: Pte) -> None:
        if not self.enabled:
            return
        self.entries[(pid, vpn)] = pte
        self.entries.move_to_end((pid, vpn))
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)


class SimulationError(Exception):
    """A scenario asked the machine to do something unrunnable."""


class Machine:
    """One deterministic simulation instance."""

    def __init__(
        self,
        register_map: Optional[RegisterMap] = None,
        geometry: Optional[RegisterFileGeometry] = None,
        l1: Optional[L1Config] = None,
        trigger_cell: Optional[TriggerCell] = None,
        payloads: Sequence[PayloadAttachment] = (),
        verify_config: Optional[VerifyConfig] = None,
        hash_puf=None,
        obfuscation: Optional[ObfuscationMap] = None,
        tlb_capacity: int = 16,
        tlb_enabled: bool = True,
        cpl_port_policy: str = "fixed",
        cpl_fixed_port: int = 0,
        charge_sample_interval: int = 0,
        sink: EventSink = _no_sink,
    ):
        self.register_map = register_map or RegisterMap()
        self.geometry = geometry or RegisterFileGeometry()
        self.l1 = l1 or L1Config()
        self.trigger = trigger_cell or TriggerCell()
        self.payloads = list(payloads)
        self.obfuscation = obfuscation
        self.tlb = Tlb(tlb_capacity, tlb_enabled)
        self.cpl_port_policy = cpl_port_policy
        self.cpl_fixed_port = cpl_fixed_port
        self.charge_sample_interval = charge_sample_interval
        self.sink = sink

        self.rf = RegisterFile(self.geometry)
        self.memory: Dict[int, int] = {}
        self.processes: Dict[int, Process] = {}
        self.current_pid: Optional[int] = None
        self.cycle = 0
        self.ports_in_use: set = set()
        self.next_pid = 1
        self.detections: List[DetectionEvent] = []

        vc = verify_config or VerifyConfig()
        self.verify = VerifyUnit(vc, self.geometry.read_ports) if vc.mode is not VerifyMode.OFF else None
        if hash_puf is not None:
            self.hash_store: Optional[HashShadowStore] = HashShadowStore(
                hash_puf, self.register_map.protected_entries(), self.geometry.word_bits
            )
        else:
            self.hash_store = None

        self.monitored_set = self.l1.raw_set_index(self.trigger.set_address)
        self.monitored_reset_set = self.l1.raw_set_index(self.trigger.reset_address)
        self._cycle_observed = False

    # -- setup ---------------------------------------------------------------

    def add_process(self, process: Process) -> Process:
        self.processes[process.pid] = process
        self.next_pid = max(self.next_pid, process.pid + 1)
        if not process.saved_registers:
            process.saved_registers = {e: 0 for e in self.register_map.all_entries()}
        process.saved_registers = self._pin_cpl(dict(process.saved_registers), process.cpl)
        return process

    def _pin_cpl(self, registers: Dict[int, int], cpl: int) -> Dict[int, int]:
        cs = self.register_map.cs_entry
        registers[cs] = self.register_map.encode_cpl(registers.get(cs, 0), cpl)
        return registers

    # -- cycle bracketing ----------------------------------------------------

    def begin_cycle(self, cycle: int) -> None:
        self.cycle = cycle
        self.ports_in_use = set()
        self._cycle_observed = False
        for p in payload_mod.expire_windows(self.payloads, cycle):
            self.sink(PHASE_PAYLOAD, "WindowClose", {"payload": self.payloads.index(p),
                                                     "kind": p.kind.value})

    def end_cycle(self, cycle: int) -> None:
        if not self._cycle_observed:
            self.trigger.observe(BusEvent.IDLE, cycle)
        committed = self.rf.commit_cycle()
        for port, entry, data in committed:
            self.sink(PHASE_WRITES, "RfWrite", {"port": port, "entry": entry,
                                                "value": f"{data:#010x}"})
        interval = self.charge_sample_interval
        if interval and cycle % interval == 0:
            self.sink(PHASE_TRIGGER, "ChargeSample", {"charge": self.trigger.charge_repr()})

    # -- trigger / payload bus plumbing ---------------------------------------

    def _classify_bus_write(self, vaddr: int, data: int) -> BusEvent:
        raw = self.l1.raw_set_index(vaddr)
        runtime_set = self.obfuscation.apply(raw) if self.obfuscation else raw
        is_set = runtime_set == self.monitored_set and self.trigger.set_pattern.matches(data)
        is_reset = (
            runtime_set == self.monitored_reset_set
            and self.trigger.reset_pattern.matches(data)
        )
        if is_set and is_reset:
            raise SimulationError(
                "bus write qualifies as both set and reset hammer; "
                "scenario validation should have rejected this configuration"
            )
        if is_set:
            return BusEvent.HAMMER_SET
        if is_reset:
            return BusEvent.HAMMER_RESET
        return BusEvent.IDLE

    def _observe_bus_write(self, vaddr: int, data: int) -> bool:
        """Trigger + payload control reaction to one permitted L1 write."""
        event = self._classify_bus_write(vaddr, data)
        pre_latched = self.trigger.latched
        transition = self.trigger.observe(event, self.cycle)
        self._cycle_observed = True
        if event is not BusEvent.IDLE:
            raw = self.l1.raw_set_index(vaddr)
            runtime_set = self.obfuscation.apply(raw) if self.obfuscation else raw
            self.sink(PHASE_TRIGGER, "HammerObserved", {
                "kind": "set" if event is BusEvent.HAMMER_SET else "reset",
                "set": runtime_set,
                "vaddr": f"{vaddr:#x}",
                "data": f"{data:#010x}",
                "hammer": (self.trigger.hammer_count if event is BusEvent.HAMMER_SET
                           else self.trigger.reset_hammer_count),
                "charge": self.trigger.charge_repr(),
            })
        if transition is not None:
            self.sink(PHASE_TRIGGER, transition.kind.value, {
                "hammer": transition.hammer_index,
                "charge": self.trigger.charge_repr(),
            })
        for idx, p in enumerate(self.payloads):
            ev = payload_mod.on_bus_write(p, pre_latched, vaddr, data, self.cycle)
            if ev is None:
                continue
            if ev.fired:
                payload_mod.apply_bc(p, self.rf)
                self.sink(PHASE_PAYLOAD, "PayloadFired", {
                    "payload": idx, "kind": p.kind.value,
                    "entry": p.target_entry, "mask": f"{p.bit_mask:#x}",
                    "force": p.force_to.value,
                })
            else:
                fields = {"payload": idx, "kind": p.kind.value, "until": ev.window_until}
                if ev.forced_polarity is not None:
                    fields["vf"] = ev.forced_polarity
                self.sink(PHASE_PAYLOAD, "PayloadArmed", fields)
                self.sink(PHASE_PAYLOAD, "WindowOpen", {
                    "payload": idx, "until": ev.window_until,
                })
        return event is not BusEvent.IDLE

    # -- register reads --------------------------------------------------------

    def _payload_filter(self, port: int, addr: int, raw: int) -> int:
        return payload_mod.filter_read(
            self.payloads, port, addr, raw, self.cycle, self.geometry.cells_per_lbl
        )

    def _rf_read(self, port: int, entry: int) -> int:
        return self.rf.read(port, entry, self._payload_filter)

    def _defended_read(self, process: Process, port: int, entry: int) -> int:
        """RF read through payload filters plus any enabled defenses."""
        value = self._rf_read(port, entry)
        self.ports_in_use.add(port)
        if self.verify is not None:
            det, skipped = self.verify.verified_read(
                self._rf_read, port, entry, value, self.cycle, self.ports_in_use
            )
            if skipped:
                self.sink(PHASE_DEFENSE, "Skipped", {
                    "pid": process.pid, "entry": entry, "port": port,
                })
            elif det is not None:
                self.detections.append(det)
                self.sink(PHASE_DEFENSE, "Detection", {
                    "kind": det.kind.value, "entry": entry,
                    "primary_port": det.primary_port, "verify_port": det.verify_port,
                    "got": f"{det.got:#010x}", "expected": f"{det.expected:#010x}",
                })
        if self.hash_store is not None and self.hash_store.covers(entry):
            det = self.hash_store.on_read(entry, value, self.cycle)
            if det is not None:
                self.detections.append(det)
                self.sink(PHASE_DEFENSE, "Detection", {
                    "kind": det.kind.value, "entry": entry,
                    "got": f"{det.got:#010x}",
                })
        return value

    def _policy_port(self, process: Process) -> int:
        if self.cpl_port_policy == "per_process" and process.cpl_port is not None:
            return process.cpl_port
        return self.cpl_fixed_port

    def read_cpl(self, process: Process) -> int:
        """Privilege bits as the paging unit sees them: a live RF read of the
        code-segment entry through the policy port, payload filters applied.
        """
        port = self._policy_port(process)
        entry = self.register_map.cs_entry
        word = self._defended_read(process, port, entry)
        cpl = self.register_map.extract_cpl(word)
        self.sink(PHASE_READS, "CplRead", {
            "pid": process.pid, "port": port, "entry": entry,
            "raw": f"{word:#010x}", "cpl": cpl,
        })
        return cpl

    def read_register(self, process: Process, name: str) -> int:
        entry = self.register_map.name_to_entry(name)
        port = self._policy_port(process)
        value = self._defended_read(process, port, entry)
        process.register_reads.append((name, value))
        self.sink(PHASE_READS, "RfRead", {
            "pid": process.pid, "name": name, "entry": entry,
            "port": port, "value": f"{value:#010x}",
        })
        return value

    # -- translation -----------------------------------------------------------

    def translate_and_check(
        self, process: Process, vaddr: int, is_write: bool, current_cpl: int
    ) -> AccessResult:
        if not 0 <= vaddr < 1 << ADDRESS_SPACE_BITS:
            return AccessResult(AccessOutcome.SEGFAULT, reason="address_out_of_range")
        vpn = vaddr // PAGE_SIZE
        offset = vaddr % PAGE_SIZE
        pte = self.tlb.lookup(process.pid, vpn)
        tlb_hit = pte is not None
        if pte is None:
            pte = process.page_table.get(vpn)
            if pte is None or not pte.present:
                return AccessResult(AccessOutcome.PAGEFAULT, tlb_hit=False)
            self.tlb.fill(process.pid, vpn, pte)
        if pte.us_bit == 1 and current_cpl != 0:
            return AccessResult(AccessOutcome.SEGFAULT, tlb_hit=tlb_hit, reason="us_violation")
        if is_write and pte.rw_bit == 0:
            return AccessResult(AccessOutcome.SEGFAULT, tlb_hit=tlb_hit, reason="rw_violation")
        return AccessResult(AccessOutcome.OK, pfn=pte.pfn, offset=offset, tlb_hit=tlb_hit)

    def _checked_access(self, process: Process, vaddr: int, is_write: bool) -> AccessResult:
        cpl = self.read_cpl(process)
        if cpl not in (0, 3):
            res = AccessResult(AccessOutcome.SEGFAULT, reason="invalid_cpl")
        else:
            res = self.translate_and_check(process, vaddr, is_write, cpl)
        if res.outcome is AccessOutcome.SEGFAULT:
            self._fault(process, "SegFault", vaddr, res.reason)
        elif res.outcome is AccessOutcome.PAGEFAULT:
            self._fault(process, "PageFault", vaddr, "not_present")
        return res

    def _fault(self, process: Process, kind: str, vaddr: int, reason: str) -> None:
        process.mark_faulted({"kind": kind, "cycle": self.cycle,
                              "vaddr": vaddr, "reason": reason})
        self.sink(PHASE_READS, kind, {
            "pid": process.pid, "vaddr": f"{vaddr:#x}", "reason": reason,
        })

    # -- memory accesses ---------------------------------------------------------

    def cpu_write(self, process: Process, vaddr: int, data: int) -> AccessResult:
        """One L1 write: permission check, then trigger/payload plumbing."""
        data &= self.geometry.word_mask
        res = self._checked_access(process, vaddr, is_write=True)
        if not res.ok:
            return res
        self._observe_bus_write(vaddr, data)
        self.memory[res.paddr] = data
        pte = process.page_table.get(vaddr // PAGE_SIZE)
        self.sink(PHASE_WRITES, "AccessOk", {
            "pid": process.pid, "op": "write", "vaddr": f"{vaddr:#x}",
            "paddr": f"{res.paddr:#x}", "data": f"{data:#010x}",
            "kernel": pte.us_bit if pte else 0,
            "tlb": "hit" if res.tlb_hit else "miss",
        })
        return res

    def cpu_read(self, process: Process, vaddr: int) -> Tuple[AccessResult, int]:
        res = self._checked_access(process, vaddr, is_write=False)
        if not res.ok:
            return res, 0
        data = self.memory.get(res.paddr, 0)
        pte = process.page_table.get(vaddr // PAGE_SIZE)
        kernel = bool(pte and pte.us_bit == 1)
        if kernel:
            process.kernel_bytes_read += self.geometry.word_bits // 8
        self.sink(PHASE_READS, "AccessOk", {
            "pid": process.pid, "op": "read", "vaddr": f"{vaddr:#x}",
            "paddr": f"{res.paddr:#x}", "data": f"{data:#010x}",
            "kernel": int(kernel),
            "tlb": "hit" if res.tlb_hit else "miss",
        })
        return res, data

    # -- processes -----------------------------------------------------------------

    def _snapshot_mapped(self, process: Process) -> Dict[int, int]:
        snap = {e: self.rf.peek(e) for e in self.register_map.all_entries()}
        # The privilege field is re-imposed from the process's ring, not read
        # back from the (possibly corrupted) live register.
        return self._pin_cpl(snap, process.cpl)

    def context_switch(self, next_process: Process) -> None:
        if not next_process.runnable:
            raise SimulationError(f"cannot switch to non-runnable pid {next_process.pid}")
        prev = self.processes.get(self.current_pid) if self.current_pid is not None else None
        if prev is not None:
            prev.saved_registers = self._snapshot_mapped(prev)
        write_ports = self.geometry.write_ports
        for i, (entry, value) in enumerate(sorted(next_process.saved_registers.items())):
            self.rf.write(i % write_ports, entry, value)
            if self.hash_store is not None:
                self.hash_store.on_write(entry, value)
        self.current_pid = next_process.pid
        self.sink(PHASE_WRITES, "ContextSwitch", {
            "from": prev.pid if prev else 0, "to": next_process.pid,
        })

    def fork(self, parent: Process, n: int, child_program: Optional[List[object]] = None) -> List[Process]:
        """Clone the parent n times; children read their privilege bits
        through read ports assigned round-robin over the schedulable pool.
        """
        if n < 1:
            raise ValueError("fork count must be >= 1")
        pool = self.verify.schedulable_ports() if self.verify else tuple(
            range(self.geometry.read_ports)
        )
        snapshot = self._snapshot_mapped(parent)
        children = []
        for i in range(n):
            child = Process(
                pid=self.next_pid,
                cpl=parent.cpl,
                saved_registers=dict(snapshot),
                page_table=dict(parent.page_table),
                program=list(child_program) if child_program is not None else [],
                cpl_port=pool[i % len(pool)],
            )
            self.next_pid += 1
            self.processes[child.pid] = child
            children.append(child)
        return children
