"""The EL3-style secure monitor: the ordered verify-and-lock load protocol,
protected-memory bookkeeping, session rechecks, and the task admission gate.

Load protocol, in order (a failing step rejects with the reason shown, appends
a VERIFY_REJECT record, and leaves both the counter and the region untouched):

  1. hash the firmware image
  2. compare against the manifest hash            -> hash-mismatch
  3. verify the signature over digest||manifest   -> bad-signature
  4. manifest identity matches this monitor       -> malformed-bundle
  5. version strictly above the committed counter -> rollback
  6. every manifest flag is known                 -> unknown-flag
  7. image fits the region                        -> oversize
  8. atomic secure write + lock (one critical
     section, so no EL1 write can interleave)     -> lock-failed
  9. protection table update, VERIFY_ACCEPT, counter commit, token issue

Verification and locking happen inside one serialized entry point: the TOCTOU
window between "checked" and "locked" is closed by construction, and the
interposition hooks used by adversarial tests fire outside the critical
section, where a real concurrent writer would sit.
"""

from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .crypto import CryptoError, Digest, hash_data, signing_payload, verify
from .mcu import HookPoint, LockEngageError, LockState, McuRegion
from .packaging import (
    FLAG_REQUIRES_LOCK,
    BundleError,
    FirmwarePackage,
    ManifestError,
    canonical_bytes,
    read_bundle,
)
from .state import AuditEvent, AuditRecord, SecureStateStore, read_audit

FIRMWARE_REGION_ID = "mcu-firmware"
TASK_DATA_REGION_ID = "gpu-task-data"
TASK_ENVELOPE_MAGIC = b"ENC1"


class MonitorError(Exception):
    pass


class ReplayError(Exception):
    """An audit log violates the protocol's replay invariants."""


class Phase(Enum):
    UNPROVISIONED = "unprovisioned"
    IDLE = "idle"
    VERIFYING = "verifying"
    LOADED_LOCKED = "loaded-locked"
    QUARANTINED = "quarantined"


class RejectionReason(Enum):
    BAD_SIGNATURE = "bad-signature"
    HASH_MISMATCH = "hash-mismatch"
    ROLLBACK = "rollback"
    UNKNOWN_FLAG = "unknown-flag"
    OVERSIZE = "oversize"
    LOCK_FAILED = "lock-failed"
    MALFORMED_BUNDLE = "malformed-bundle"


EXIT_SUCCESS = 0
EXIT_CODES: dict[RejectionReason, int] = {
    RejectionReason.BAD_SIGNATURE: 10,
    RejectionReason.HASH_MISMATCH: 11,
    RejectionReason.ROLLBACK: 12,
    RejectionReason.UNKNOWN_FLAG: 13,
    RejectionReason.LOCK_FAILED: 14,
    RejectionReason.MALFORMED_BUNDLE: 15,
    RejectionReason.OVERSIZE: 16,
}


@dataclass(frozen=True)
class AuthToken:
    """Session-scoped capability bound to one accepted load."""

    token_id: str
    version: int
    digest_hex: str


@dataclass(frozen=True)
class StageTimings:
    verify_ms: float
    lock_ms: float
    total_ms: float


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: RejectionReason | None
    detail: str | None
    version: int | None
    digest: Digest | None
    token: AuthToken | None
    timings: StageTimings

    @property
    def exit_code(self) -> int:
        if self.accepted:
            return EXIT_SUCCESS
        assert self.reason is not None
        return EXIT_CODES[self.reason]


@dataclass(frozen=True)
class TaskResult:
    admitted: bool
    reason: str | None
    digest_hex: str | None


@dataclass(frozen=True)
class MonitorStatus:
    phase: Phase
    current_version: int | None
    current_digest: Digest | None


@dataclass
class ProtectionTable:
    """Which originators may touch which protected region (bookkeeping that
    stands in for TZASC/SMMU window configuration)."""

    entries: dict[str, frozenset[str]] = field(default_factory=dict)

    def protect_locked_firmware(self) -> None:
        self.entries[FIRMWARE_REGION_ID] = frozenset({"EL3"})
        self.entries[TASK_DATA_REGION_ID] = frozenset({"EL3", "GPU"})

    def allowed(self, region_id: str) -> frozenset[str]:
        return self.entries.get(region_id, frozenset())


class Monitor:
    """One monitor instance guards one region with one state store."""

    def __init__(
        self,
        store: SecureStateStore,
        region: McuRegion,
        *,
        mcu_id: str,
        known_flags: Sequence[str] = (FLAG_REQUIRES_LOCK,),
    ):
        self.store = store
        self.region = region
        self.mcu_id = mcu_id
        self.known_flags = frozenset(known_flags)
        self.protection = ProtectionTable()
        self.phase = Phase.IDLE
        self.executed_tasks: list[dict] = []
        self._current_version: int | None = None
        self._current_digest: Digest | None = None
        self._token: AuthToken | None = None
        self._serial = threading.RLock()
        if region.audit_sink is None:
            region.audit_sink = self._denied_write_sink

    def _denied_write_sink(self, detail: str) -> None:
        self.store.append_audit(AuditEvent.WRITE_DENIED, detail=detail)

    # -- the load protocol -----------------------------------------------------

    def verify_and_lock(self, package: FirmwarePackage) -> VerifyResult:
        """Run the full ordered load protocol on an in-memory package."""
        with self._serial:
            previous_phase = self.phase
            self.phase = Phase.VERIFYING
            t_total = time.perf_counter()
            timings = {"verify_ms": 0.0, "lock_ms": 0.0}
            manifest = package.manifest

            def rejected(reason: RejectionReason, detail: str) -> VerifyResult:
                self.store.append_audit(
                    AuditEvent.VERIFY_REJECT,
                    version=manifest.version,
                    reason=reason.value,
                    detail=detail,
                )
                self.phase = previous_phase
                return VerifyResult(
                    accepted=False, reason=reason, detail=detail,
                    version=manifest.version, digest=None, token=None,
                    timings=StageTimings(
                        timings["verify_ms"], timings["lock_ms"],
                        (time.perf_counter() - t_total) * 1000.0,
                    ),
                )

            try:
                self.region.fire(HookPoint.PRE_VERIFY)

                t_verify = time.perf_counter()
                digest = hash_data(package.firmware)
                hash_ok = digest == manifest.firmware_hash
                signature_ok = hash_ok and verify(
                    self.store.anchor,
                    signing_payload(digest, canonical_bytes(manifest)),
                    package.signature,
                )
                timings["verify_ms"] = (time.perf_counter() - t_verify) * 1000.0
                if not hash_ok:
                    return rejected(
                        RejectionReason.HASH_MISMATCH,
                        f"firmware hashes to {digest.hex}, manifest says {manifest.firmware_hash.hex}",
                    )
                if not signature_ok:
                    return rejected(
                        RejectionReason.BAD_SIGNATURE,
                        "signature does not verify against the provisioned anchor",
                    )
                if manifest.mcu_id != self.mcu_id:
                    return rejected(
                        RejectionReason.MALFORMED_BUNDLE,
                        f"manifest mcu_id {manifest.mcu_id!r} does not match monitor {self.mcu_id!r}",
                    )
                if not self.store.check_version(manifest.version):
                    return rejected(
                        RejectionReason.ROLLBACK,
                        f"version {manifest.version} is not above counter {self.store.nv_counter}",
                    )
                unknown = sorted(set(manifest.flags) - self.known_flags)
                if unknown:
                    return rejected(RejectionReason.UNKNOWN_FLAG, f"unknown flags: {unknown}")
                if len(package.firmware) > self.region.capacity:
                    return rejected(
                        RejectionReason.OVERSIZE,
                        f"{len(package.firmware)} bytes exceeds region capacity {self.region.capacity}",
                    )
                requires_lock = FLAG_REQUIRES_LOCK in manifest.flags

                self.region.fire(HookPoint.POST_VERIFY_PRE_LOCK)

                t_lock = time.perf_counter()
                lock_engaged = False
                with self.region.exclusive():
                    snap = self.region.snapshot()
                    try:
                        self.region.unlock_for_update()
                        self.region.secure_write(package.firmware)
                        self.region.lock()
                        lock_engaged = True
                    except LockEngageError:
                        if requires_lock:
                            self.region.restore(snap)
                timings["lock_ms"] = (time.perf_counter() - t_lock) * 1000.0
                if not lock_engaged and requires_lock:
                    return rejected(
                        RejectionReason.LOCK_FAILED,
                        "region lock did not engage and the manifest requires it",
                    )

                if lock_engaged:
                    self.store.append_audit(
                        AuditEvent.LOCK, version=manifest.version, digest=digest.hex
                    )
                self.protection.protect_locked_firmware()
                self.store.append_audit(
                    AuditEvent.VERIFY_ACCEPT, version=manifest.version, digest=digest.hex
                )
                self.store.commit_version(manifest.version)

                self._current_version = manifest.version
                self._current_digest = digest
                self._token = AuthToken(secrets.token_hex(16), manifest.version, digest.hex)
                self.phase = Phase.LOADED_LOCKED
                total_ms = (time.perf_counter() - t_total) * 1000.0
                result = VerifyResult(
                    accepted=True, reason=None, detail=None,
                    version=manifest.version, digest=digest, token=self._token,
                    timings=StageTimings(timings["verify_ms"], timings["lock_ms"], total_ms),
                )
                self.region.fire(HookPoint.POST_LOCK)
                return result
            except BaseException:
                self.phase = previous_phase
                raise

    def verify_bundle(self, path: str | Path) -> VerifyResult:
        """Read a bundle from disk and run the load protocol; parse failures
        reject as malformed-bundle."""
        t0 = time.perf_counter()
        try:
            package = read_bundle(path)
        except (BundleError, ManifestError, CryptoError) as exc:
            detail = str(exc)
            with self._serial:
                self.store.append_audit(
                    AuditEvent.VERIFY_REJECT,
                    reason=RejectionReason.MALFORMED_BUNDLE.value,
                    detail=detail,
                )
            elapsed = (time.perf_counter() - t0) * 1000.0
            return VerifyResult(
                accepted=False, reason=RejectionReason.MALFORMED_BUNDLE, detail=detail,
                version=None, digest=None, token=None,
                timings=StageTimings(0.0, 0.0, elapsed),
            )
        return self.verify_and_lock(package)

    # -- sessions and tasks ---------------------------------------------------

    def session_start(self) -> bool:
        """Re-hash the region against the digest recorded at lock time.

        Returns True when the monitor is ready to admit tasks; a failed
        recheck quarantines until the next successful load.
        """
        with self._serial:
            if self.phase is Phase.QUARANTINED:
                return False
            if self.phase is not Phase.LOADED_LOCKED:
                raise MonitorError(f"no verified firmware loaded (phase {self.phase.value})")
            if self._region_clean():
                self.store.append_audit(
                    AuditEvent.SESSION_RECHECK,
                    version=self._current_version,
                    digest=self._current_digest.hex if self._current_digest else None,
                    detail="clean",
                )
                return True
            self._quarantine()
            return False

    def submit_task(self, token: AuthToken | None, payload: bytes) -> TaskResult:
        """Gate a task: valid token, loaded-locked phase, clean recheck, and a
        well-formed envelope; admission is recorded against the firmware digest."""
        with self._serial:
            if self.phase is Phase.QUARANTINED:
                return self._deny_task("quarantined")
            if self.phase is not Phase.LOADED_LOCKED or self._token is None:
                return self._deny_task("no-verified-firmware")
            if (
                token is None
                or token.token_id != self._token.token_id
                or token.version != self._token.version
                or token.digest_hex != self._token.digest_hex
            ):
                return self._deny_task("invalid-token")
            if not self._region_clean():
                self._quarantine()
                return self._deny_task("quarantined")
            if (
                not isinstance(payload, (bytes, bytearray))
                or len(payload) <= len(TASK_ENVELOPE_MAGIC)
                or bytes(payload[: len(TASK_ENVELOPE_MAGIC)]) != TASK_ENVELOPE_MAGIC
            ):
                return self._deny_task("bad-envelope")
            digest_hex = self._current_digest.hex  # type: ignore[union-attr]
            self.store.append_audit(
                AuditEvent.TASK_ADMIT, version=self._current_version, digest=digest_hex
            )
            self.executed_tasks.append({"digest": digest_hex, "payload_bytes": len(payload)})
            return TaskResult(True, None, digest_hex)

    def status(self) -> MonitorStatus:
        """Read-only snapshot; never mutates anything."""
        with self._serial:
            return MonitorStatus(self.phase, self._current_version, self._current_digest)

    # -- internals -----------------------------------------------------------

    def _region_clean(self) -> bool:
        if self.region.lock_state is LockState.LOCKED:
            return self.region.recheck()
        # tolerated unlocked load (lock fault without requires_lock): compare
        # directly against the verified digest
        return self._current_digest is not None and self.region.digest() == self._current_digest

    def _quarantine(self) -> None:
        self.store.append_audit(
            AuditEvent.SESSION_RECHECK,
            version=self._current_version,
            detail="tampered",
        )
        self.phase = Phase.QUARANTINED
        self._token = None

    def _deny_task(self, reason: str) -> TaskResult:
        self.store.append_audit(AuditEvent.TASK_DENY, reason=reason)
        return TaskResult(False, reason, None)


# -- audit replay -------------------------------------------------------------


def replay_protocol_invariants(records: Sequence[AuditRecord]) -> None:
    """Check a full audit log against the protocol's replay invariants:
    accepted versions strictly increase, every LOCK pairs with the accept that
    follows it, and every task admission names the latest accepted digest."""
    last_version = 0
    current_digest: str | None = None
    pending_lock: AuditRecord | None = None
    for record in records:
        if record.event is AuditEvent.LOCK:
            pending_lock = record
        elif record.event is AuditEvent.VERIFY_ACCEPT:
            if record.version is None or record.version <= last_version:
                raise ReplayError(
                    f"record {record.seq}: accepted version {record.version} "
                    f"is not above {last_version}"
                )
            if pending_lock is not None and pending_lock.digest != record.digest:
                raise ReplayError(
                    f"record {record.seq}: accept digest differs from the preceding lock"
                )
            last_version = record.version
            current_digest = record.digest
            pending_lock = None
        elif record.event is AuditEvent.TASK_ADMIT:
            if current_digest is None:
                raise ReplayError(f"record {record.seq}: task admitted before any accept")
            if record.digest != current_digest:
                raise ReplayError(
                    f"record {record.seq}: task admitted against digest {record.digest}, "
                    f"but the last accept was {current_digest}"
                )


def derive_status(state_dir: str | Path) -> MonitorStatus:
    """Reconstruct phase/version/digest by replaying the audit log; used by
    operator tooling, since the emulated region lives only inside a process."""
    state_dir = Path(state_dir)
    if not SecureStateStore.is_provisioned(state_dir):
        return MonitorStatus(Phase.UNPROVISIONED, None, None)
    phase = Phase.IDLE
    version: int | None = None
    digest: Digest | None = None
    for record in read_audit(state_dir):
        if record.event is AuditEvent.VERIFY_ACCEPT:
            phase = Phase.LOADED_LOCKED
            version = record.version
            digest = Digest.from_hex(record.digest) if record.digest else None
        elif record.event is AuditEvent.SESSION_RECHECK and record.detail == "tampered":
            phase = Phase.QUARANTINED
    return MonitorStatus(phase, version, digest)
