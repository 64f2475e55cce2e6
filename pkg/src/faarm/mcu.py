"""Emulated MCU firmware memory: a bounded byte region with a write lock and
an EL1-facing write channel.

Two lock flavors are modeled. Under hardware write-protect a locked region is
fully immutable (even the out-of-band test hook is refused); under a software
lock, EL1 writes are denied but the test hook can still tamper, which session
rechecks must catch. The region mutex doubles as the critical section the
secure loader uses to make verify-write-lock atomic against concurrent EL1
writers; interposition hooks for adversarial schedules are fired by callers
outside that critical section.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator

from .crypto import Digest, hash_data

DEFAULT_CAPACITY = 4 * 1024 * 1024


class RegionError(Exception):
    pass


class LockEngageError(RegionError):
    """The lock did not engage (fault-injection path)."""


class LockMode(Enum):
    HARDWARE_WP = "hardware-wp"
    SOFTWARE_LOCK = "software-lock"


class LockState(Enum):
    UNLOCKED = "unlocked"
    LOCKED = "locked"


class WriteOrigin(Enum):
    EL1 = "el1"
    EL3_SECURE_LOADER = "el3-secure-loader"
    TEST_HOOK = "test-hook"


class WriteOutcome(Enum):
    APPLIED = "applied"
    DENIED = "denied"


class HookPoint(Enum):
    """Deterministic interposition points around the load protocol."""

    PRE_VERIFY = "pre-verify"
    POST_VERIFY_PRE_LOCK = "post-verify-pre-lock"
    POST_LOCK = "post-lock"


@dataclass(frozen=True)
class WriteAttempt:
    origin: WriteOrigin
    offset: int
    data: bytes
    outcome: WriteOutcome
    cause: str | None = None


@dataclass(frozen=True)
class RegionSnapshot:
    content: bytes
    lock_state: LockState
    running_digest: Digest | None


class McuRegion:
    """The firmware region.

    audit_sink, when set, is called with a one-line detail string for every
    denied EL1 write; the monitor wires it to WRITE_DENIED audit records.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        lock_mode: LockMode = LockMode.HARDWARE_WP,
        audit_sink: Callable[[str], None] | None = None,
    ):
        if capacity < 1:
            raise RegionError("capacity must be positive")
        self.capacity = capacity
        self.lock_mode = lock_mode
        self.lock_state = LockState.UNLOCKED
        self.running_digest: Digest | None = None
        self.audit_sink = audit_sink
        self.fail_next_lock = False
        self.attempts: list[WriteAttempt] = []
        self._content = bytearray()
        self._mutex = threading.RLock()
        self._hooks: dict[HookPoint, list[Callable[[], None]]] = {p: [] for p in HookPoint}

    # -- critical section ----------------------------------------------------

    @contextmanager
    def exclusive(self) -> Iterator[None]:
        """The region mutex, shared with the EL1 write channel; the secure
        loader holds it across write+lock so no interleaving is possible."""
        with self._mutex:
            yield

    # -- write channels --------------------------------------------------------

    def el1_write(self, offset: int, data: bytes) -> WriteOutcome:
        """Normal-world write: applied only while unlocked and in range."""
        data = bytes(data)
        with self._mutex:
            if offset < 0 or offset + len(data) > self.capacity:
                return self._deny(WriteOrigin.EL1, offset, data, "range")
            if self.lock_state is LockState.LOCKED:
                return self._deny(WriteOrigin.EL1, offset, data, "locked")
            self._apply(offset, data)
            self.attempts.append(
                WriteAttempt(WriteOrigin.EL1, offset, data, WriteOutcome.APPLIED)
            )
            return WriteOutcome.APPLIED

    def secure_write(self, firmware: bytes) -> None:
        """EL3 loader path: replaces the entire image. Callers pair this with
        lock() inside a single exclusive() section."""
        firmware = bytes(firmware)
        with self._mutex:
            if self.lock_state is LockState.LOCKED:
                raise RegionError("secure write into a locked region")
            if len(firmware) > self.capacity:
                raise RegionError(
                    f"firmware of {len(firmware)} bytes exceeds capacity {self.capacity}"
                )
            self._content = bytearray(firmware)
            self.attempts.append(
                WriteAttempt(
                    WriteOrigin.EL3_SECURE_LOADER, 0, b"", WriteOutcome.APPLIED,
                    cause=f"secure-load:{len(firmware)}",
                )
            )

    def tamper_test_hook(self, offset: int, data: bytes) -> WriteOutcome:
        """Out-of-band mutation modeling tampering that a software lock cannot
        stop; refused while hardware write-protect is engaged."""
        data = bytes(data)
        with self._mutex:
            if offset < 0 or offset + len(data) > self.capacity:
                return self._deny(WriteOrigin.TEST_HOOK, offset, data, "range")
            if self.lock_state is LockState.LOCKED and self.lock_mode is LockMode.HARDWARE_WP:
                return self._deny(WriteOrigin.TEST_HOOK, offset, data, "hardware-wp")
            self._apply(offset, data)
            self.attempts.append(
                WriteAttempt(WriteOrigin.TEST_HOOK, offset, data, WriteOutcome.APPLIED)
            )
            return WriteOutcome.APPLIED

    # -- lock ----------------------------------------------------------------

    def lock(self) -> bool:
        """Engage the lock and record the content digest it covers.

        Returns False for an already-locked no-op; raises LockEngageError when
        fault injection is armed.
        """
        with self._mutex:
            if self.lock_state is LockState.LOCKED:
                return False
            if self.fail_next_lock:
                self.fail_next_lock = False
                raise LockEngageError("region lock did not engage")
            self.lock_state = LockState.LOCKED
            self.running_digest = hash_data(bytes(self._content))
            return True

    def unlock_for_update(self) -> None:
        """Monitor-private transition used at the start of an update cycle;
        only meaningful inside an exclusive() section."""
        with self._mutex:
            self.lock_state = LockState.UNLOCKED
            self.running_digest = None

    def recheck(self) -> bool:
        """True iff the locked content still hashes to the digest recorded at
        lock time. Requires a locked region."""
        with self._mutex:
            if self.lock_state is not LockState.LOCKED:
                raise RegionError("recheck requires a locked region")
            return hash_data(bytes(self._content)) == self.running_digest

    # -- observation -----------------------------------------------------------

    def read(self, offset: int = 0, size: int | None = None) -> bytes:
        with self._mutex:
            if size is None:
                return bytes(self._content[offset:])
            return bytes(self._content[offset : offset + size])

    def digest(self) -> Digest:
        with self._mutex:
            return hash_data(bytes(self._content))

    def size(self) -> int:
        with self._mutex:
            return len(self._content)

    def dump(self) -> dict:
        with self._mutex:
            return {
                "capacity": self.capacity,
                "lock_mode": self.lock_mode.value,
                "lock_state": self.lock_state.value,
                "size": len(self._content),
                "digest": hash_data(bytes(self._content)).hex,
                "running_digest": self.running_digest.hex if self.running_digest else None,
                "attempts": len(self.attempts),
            }

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> RegionSnapshot:
        with self._mutex:
            return RegionSnapshot(bytes(self._content), self.lock_state, self.running_digest)

    def restore(self, snap: RegionSnapshot) -> None:
        with self._mutex:
            self._content = bytearray(snap.content)
            self.lock_state = snap.lock_state
            self.running_digest = snap.running_digest

    # -- interposition hooks -------------------------------------------------------

    def add_hook(self, point: HookPoint, fn: Callable[[], None]) -> None:
        self._hooks[point].append(fn)

    def clear_hooks(self) -> None:
        for hooks in self._hooks.values():
            hooks.clear()

    def fire(self, point: HookPoint) -> None:
        """Run the hooks registered at point. Callers must not hold the region
        mutex here: hooks model adversarial writers racing the protocol."""
        for fn in list(self._hooks[point]):
            fn()

    # -- internals ------------------------------------------------------------------

    def _apply(self, offset: int, data: bytes) -> None:
        end = offset + len(data)
        if end > len(self._content):
            self._content.extend(b"\x00" * (end - len(self._content)))
        self._content[offset:end] = data

    def _deny(self, origin: WriteOrigin, offset: int, data: bytes, cause: str) -> WriteOutcome:
        self.attempts.append(WriteAttempt(origin, offset, data, WriteOutcome.DENIED, cause))
        if origin is WriteOrigin.EL1 and self.audit_sink is not None:
            self.audit_sink(f"el1 write denied ({cause}) offset={offset} len={len(data)}")
        return WriteOutcome.DENIED
