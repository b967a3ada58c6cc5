"""KME service logic behind the REST surface.

``get_enc_keys`` is the master-side path: it atomically issues local
keys, then pins the same ids at the peer KME through the reservation
link (RESERVE/ACK); a failed or unacknowledged reservation rolls the
local issuance back, so the application never holds bytes the peer
cannot serve.  ``get_dec_keys`` is the slave-side path: it claims keys
the peer reserved and answers idempotently inside a configurable replay
window.

Requested key sizes other than the stored slice size are served by
grouping ceil(size / key_size) consecutive records per delivered key;
the delivered key id is the first record's id and the grouping is
carried inside the RESERVE message, so both endpoints reconstruct the
same bytes.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

from .store import (
    InsufficientKeysError,
    InvalidTransitionError,
    KeyState,
    KeyStore,
    KmsError,
    UnknownKeyError,
)

__all__ = [
    "KmeConfig",
    "KmeService",
    "KmeStatusData",
    "UnknownSaeError",
    "InvalidSizeError",
    "OversizeRequestError",
    "TooManyKeysError",
    "PeerUnavailableError",
    "UnauthorizedSaeError",
    "KeyNotReservedError",
]


class UnknownSaeError(KmsError):
    pass


class UnauthorizedSaeError(KmsError):
    pass


class InvalidSizeError(KmsError):
    pass


class OversizeRequestError(InvalidSizeError):
    pass


class TooManyKeysError(KmsError):
    pass


class PeerUnavailableError(KmsError):
    """Peer KME did not acknowledge the reservation; retryable."""


class KeyNotReservedError(KmsError):
    pass


@dataclass
class KmeConfig:
    source_kme_id: str = "kme-a"
    target_kme_id: str = "kme-b"
    master_sae_id: str = "sae-a"
    slave_sae_id: str = "sae-b"
    key_size_bits: int = 256
    max_key_count: int = 100_000
    max_key_per_request: int = 128
    min_key_size_bits: int = 64
    max_key_size_bits: int = 1024
    reservation_ttl_s: float = 60.0
    replay_window_s: float = 30.0
    require_sae_auth: bool = True

    def __post_init__(self) -> None:
        if not self.min_key_size_bits <= self.key_size_bits <= self.max_key_size_bits:
            raise ValueError("key_size_bits must lie in [min_key_size_bits, max_key_size_bits]")
        if self.max_key_per_request < 1 or self.max_key_count < 1:
            raise ValueError("max_key_per_request and max_key_count must be >= 1")


@dataclass
class KmeStatusData:
    source_kme_id: str
    target_kme_id: str
    master_sae_id: str
    slave_sae_id: str
    key_size: int
    stored_key_count: int
    max_key_count: int
    max_key_per_request: int
    max_key_size: int
    min_key_size: int


@dataclass
class _ReplayEntry:
    keys: list[dict[str, str | bytes]]
    served_at: float


class KmeService:
    """One endpoint's key delivery service."""

    def __init__(self, store: KeyStore, config: KmeConfig, peer_link=None, clock=time.monotonic) -> None:
        self.store = store
        self.config = config
        self.peer_link = peer_link
        self._clock = clock
        self._lock = threading.RLock()
        self._replay: dict[frozenset[str], _ReplayEntry] = {}

    # -- validation ---------------------------------------------------------

    def _check_slave(self, slave_sae_id: str) -> None:
        if slave_sae_id != self.config.slave_sae_id:
            raise UnknownSaeError(f"unknown slave SAE {slave_sae_id!r}")

    def _check_master(self, master_sae_id: str) -> None:
        if master_sae_id != self.config.master_sae_id:
            raise UnknownSaeError(f"unknown master SAE {master_sae_id!r}")

    def check_caller(self, caller_sae_id: str | None) -> None:
        if not self.config.require_sae_auth:
            return
        if caller_sae_id not in (self.config.master_sae_id, self.config.slave_sae_id):
            raise UnauthorizedSaeError("caller SAE is not part of the configured pair")

    def _check_size(self, size_bits: int) -> None:
        if size_bits > self.config.max_key_size_bits:
            raise OversizeRequestError(
                f"size {size_bits} exceeds max_key_size {self.config.max_key_size_bits}"
            )
        if size_bits < self.config.min_key_size_bits or size_bits % 8 != 0:
            raise InvalidSizeError(
                f"size must be a multiple of 8 in "
                f"[{self.config.min_key_size_bits}, {self.config.max_key_size_bits}]"
            )

    # -- ETSI-014-style operations -------------------------------------------

    def get_status(self, slave_sae_id: str) -> KmeStatusData:
        self._check_slave(slave_sae_id)
        return KmeStatusData(
            source_kme_id=self.config.source_kme_id,
            target_kme_id=self.config.target_kme_id,
            master_sae_id=self.config.master_sae_id,
            slave_sae_id=self.config.slave_sae_id,
            key_size=self.config.key_size_bits,
            stored_key_count=self.store.count(KeyState.AVAILABLE),
            max_key_count=self.config.max_key_count,
            max_key_per_request=self.config.max_key_per_request,
            max_key_size=self.config.max_key_size_bits,
            min_key_size=self.config.min_key_size_bits,
        )

    def get_enc_keys(
        self, slave_sae_id: str, number: int = 1, size_bits: int | None = None
    ) -> list[dict[str, str | bytes]]:
        """Issue ``number`` keys of ``size_bits`` and pin them at the peer."""
        self._check_slave(slave_sae_id)
        size_bits = size_bits if size_bits is not None else self.config.key_size_bits
        self._check_size(size_bits)
        if number < 1 or number > self.config.max_key_per_request:
            raise TooManyKeysError(
                f"number must lie in [1, {self.config.max_key_per_request}]"
            )
        per_key = math.ceil(size_bits / self.store.key_size_bits)
        records = self.store.take_available(number * per_key)
        ids = [rec.key_id for rec in records]
        if self.peer_link is not None:
            ok = False
            try:
                ok = self.peer_link.send_reserve(
                    ids, size_bits=size_bits, per_key=per_key,
                    ttl_s=self.config.reservation_ttl_s,
                )
            finally:
                if not ok:
                    self.store.release(ids)
            if not ok:
                raise PeerUnavailableError("peer KME did not acknowledge the reservation")
        keys = []
        for g in range(number):
            group = records[g * per_key : (g + 1) * per_key]
            material = b"".join(rec.material for rec in group)[: size_bits // 8]
            keys.append({"key_ID": group[0].key_id, "key": material})
        return keys

    def handle_reserve(self, key_ids: list[str], size_bits: int, per_key: int, ttl_s: float) -> bool:
        """Peer-initiated reservation (RESERVE message)."""
        groups = [key_ids[i : i + per_key] for i in range(0, len(key_ids), per_key)]
        return self.store.reserve(key_ids, ttl_s=ttl_s, group_size_bits=size_bits, groups=groups)

    def handle_release(self, key_ids: list[str]) -> None:
        self.store.release(key_ids)

    def get_dec_keys(self, master_sae_id: str, key_ids: list[str]) -> list[dict[str, str | bytes]]:
        """Serve previously reserved keys by id; idempotent within the replay window."""
        self._check_master(master_sae_id)
        if not key_ids:
            raise InvalidSizeError("key_IDs must be non-empty")
        if len(key_ids) > self.config.max_key_per_request:
            raise TooManyKeysError(
                f"number must lie in [1, {self.config.max_key_per_request}]"
            )
        request_key = frozenset(key_ids)
        with self._lock:
            entry = self._replay.get(request_key)
            now = self._clock()
            if entry is not None:
                if now - entry.served_at <= self.config.replay_window_s:
                    return [dict(k) for k in entry.keys]
                del self._replay[request_key]
                raise KeyNotReservedError("replay window elapsed for already-issued keys")

            keys = []
            all_members: list[str] = []
            for key_id in key_ids:
                head = self.store.get(key_id)  # raises UnknownKeyError
                if head.group is not None and head.group[0] != key_id:
                    raise UnknownKeyError(f"key id {key_id} is not a deliverable key head")
                members = list(head.group) if head.group else [key_id]
                size_bits = head.group_size_bits or self.store.key_size_bits
                all_members.extend(members)
                keys.append((key_id, members, size_bits))
            try:
                records = self.store.claim_reserved(all_members)
            except InvalidTransitionError as exc:
                raise KeyNotReservedError(str(exc)) from exc
            by_id = {rec.key_id: rec for rec in records}
            out = []
            for key_id, members, size_bits in keys:
                material = b"".join(by_id[m].material for m in members)[: size_bits // 8]
                out.append({"key_ID": key_id, "key": material})
            self._replay[request_key] = _ReplayEntry(keys=[dict(k) for k in out], served_at=now)
            return out
