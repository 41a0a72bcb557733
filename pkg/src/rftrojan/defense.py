"""Countermeasures: redundant-port read verification, keyed hash tags for
control/segment registers, and per-boot L1 set-index obfuscation.

The PUF is modeled as a secret-keyed deterministic challenge->response
mapping (keyed BLAKE2 truncated to the response width); only determinism
and key secrecy matter behaviorally.  Hash tags bind both the register
address (as the PUF challenge) and the written data (folded to the
response width), so either a retention failure or a read failure on a
protected entry shows up at the next read.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple


class VerifyMode(enum.Enum):
    OFF = "off"
    DEDICATED = "dedicated"
    OPPORTUNISTIC = "opportunistic"


class DetectionKind(enum.Enum):
    RF_READ_MISMATCH = "RF_READ_MISMATCH"
    REGISTER_HASH_MISMATCH = "REGISTER_HASH_MISMATCH"


@dataclass(frozen=True)
class DetectionEvent:
    kind: DetectionKind
    cycle: int
    entry: int
    primary_port: Optional[int] = None
    verify_port: Optional[int] = None
    got: int = 0
    expected: int = 0


@dataclass(frozen=True)
class VerifyConfig:
    mode: VerifyMode = VerifyMode.OFF
    reserved_port: int = 3
    # Synthetic read-port pressure per cycle, used to model phases where
    # other consumers keep ports busy and opportunistic checks get skipped.
    background_port_load: int = 0


class VerifyUnit:
    """Re-reads RF entries through a second port and compares."""

    def __init__(self, config: VerifyConfig, read_ports: int = 4):
        self.config = config
        self.read_ports = read_ports
        self.verified = 0
        self.skipped = 0

    @property
    def enabled(self) -> bool:
        return self.config.mode is not VerifyMode.OFF

    def schedulable_ports(self) -> Tuple[int, ...]:
        """Ports available to normal traffic (dedicated mode reserves one)."""
        if self.config.mode is VerifyMode.DEDICATED:
            return tuple(p for p in range(self.read_ports) if p != self.config.reserved_port)
        return tuple(range(self.read_ports))

    def pick_port(self, primary_port: int, ports_in_use: set) -> Optional[int]:
        if self.config.mode is VerifyMode.DEDICATED:
            return self.config.reserved_port
        busy = set(ports_in_use) | {primary_port}
        free = [p for p in range(self.read_ports) if p not in busy]
        free = free[self.config.background_port_load:]
        return free[0] if free else None

    def verified_read(
        self,
        read_fn: Callable[[int, int], int],
        primary_port: int,
        addr: int,
        primary_value: int,
        cycle: int,
        ports_in_use: set,
    ) -> Tuple[Optional[DetectionEvent], bool]:
        """Cross-check one read; returns (detection, skipped).

        ``read_fn(port, addr)`` must go through the same payload filters the
        primary read used.  Dedicated mode always checks on the reserved
        port in the same cycle; opportunistic mode only when a port is free.
        """
        port = self.pick_port(primary_port, ports_in_use)
        if port is None:
            self.skipped += 1
            return None, True
        check = read_fn(port, addr)
        ports_in_use.add(port)
        self.verified += 1
        if check != primary_value:
            return (
                DetectionEvent(
                    DetectionKind.RF_READ_MISMATCH, cycle, addr,
                    primary_port=primary_port, verify_port=port,
                    got=primary_value, expected=check,
                ),
                False,
            )
        return None, False


@dataclass(frozen=True)
class PufModel:
    """Keyed deterministic challenge->response mapping."""

    seed: int
    challenge_width: int = 16
    response_width: int = 32

    def response(self, challenge: int) -> int:
        if challenge < 0 or challenge >= 1 << self.challenge_width:
            raise ValueError(f"challenge {challenge} exceeds {self.challenge_width} bits")
        key = (self.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        msg = challenge.to_bytes((self.challenge_width + 7) // 8, "little")
        digest = hashlib.blake2b(msg, key=key, digest_size=8).digest()
        return int.from_bytes(digest, "little") & ((1 << self.response_width) - 1)


def puf_response(puf: PufModel, challenge: int) -> int:
    return puf.response(challenge)


def fold_word(data: int, word_bits: int, response_width: int) -> int:
    """Public word-folding digest: XOR of response-width chunks."""
    mask = (1 << response_width) - 1
    out = 0
    while data:
        out ^= data & mask
        data >>= response_width
    return out if word_bits else out


class MissingTagError(Exception):
    """A protected entry was read before it was ever written (scenario bug)."""


class HashShadowStore:
    """Per-entry tags for the protected (control + segment) registers."""

    def __init__(self, puf: PufModel, protected_entries: Sequence[int], word_bits: int = 32):
        self.puf = puf
        self.protected = frozenset(protected_entries)
        self.word_bits = word_bits
        self.tags: Dict[int, int] = {}

    def _tag(self, entry: int, data: int) -> int:
        return self.puf.response(entry) ^ fold_word(data, self.word_bits, self.puf.response_width)

    def covers(self, entry: int) -> bool:
        return entry in self.protected

    def on_write(self, entry: int, data: int) -> None:
        if entry in self.protected:
            self.tags[entry] = self._tag(entry, data)

    def on_read(self, entry: int, data_read: int, cycle: int) -> Optional[DetectionEvent]:
        if entry not in self.protected:
            return None
        if entry not in self.tags:
            raise MissingTagError(f"protected entry {entry} read before first write")
        expected = self.tags[entry]
        got = self._tag(entry, data_read)
        if got != expected:
            return DetectionEvent(
                DetectionKind.REGISTER_HASH_MISMATCH, cycle, entry,
                got=data_read, expected=expected,
            )
        return None


def make_permutation(seed: int, n: int) -> Tuple[int, ...]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return tuple(order)


@dataclass(frozen=True)
class ObfuscationMap:
    """Per-boot bijection over L1 set indices."""

    mapping: Tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError("obfuscation mapping must be a permutation")

    @classmethod
    def identity(cls, num_sets: int) -> "ObfuscationMap":
        return cls(tuple(range(num_sets)))

    @classmethod
    def from_seed(cls, seed: int, num_sets: int) -> "ObfuscationMap":
        return cls(make_permutation(seed, num_sets))

    @property
    def num_sets(self) -> int:
        return len(self.mapping)

    def apply(self, set_index: int) -> int:
        return self.mapping[set_index]


def obfuscate_index(obf_map: ObfuscationMap, set_index: int) -> int:
    """Physical set index for a raw (virtual-address-derived) set index."""
    return obf_map.apply(set_index)
