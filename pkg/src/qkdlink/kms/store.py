"""Key lifecycle store with an append-only journal.

Every state transition is appended to a SQLite journal (or kept in
memory for ``path=None``) and replayed on startup, so a restart loses no
AVAILABLE/RESERVED keys and can never resurrect a CONSUMED one.  The
in-memory map is the single synchronization point: transitions happen
under one lock and are therefore linearizable.

Key identifiers are name-based UUIDs over (block digest, slice index),
so the two endpoint stores assign identical ids to identical distilled
blocks without any coordination messages.

Lifecycle: AVAILABLE -> RESERVED -> ISSUED -> CONSUMED, forward-only;
the single sanctioned exception is the reservation timeout, which
releases an unclaimed RESERVED key back to AVAILABLE.
"""

from __future__ import annotations

import enum
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np

__all__ = [
    "KeyState",
    "KeyRecord",
    "KeyStore",
    "KmsError",
    "UnknownKeyError",
    "InsufficientKeysError",
    "DuplicateBlockError",
    "key_id_for_slice",
]

KEY_ID_NAMESPACE = uuid.UUID("9a1f40e2-7f5c-4b1b-9f5d-3f2aa61c0c55")


class KmsError(Exception):
    """Base class for key-store failures."""


class UnknownKeyError(KmsError):
    pass


class InsufficientKeysError(KmsError):
    """Not enough AVAILABLE keys; the request may be retried later."""


class DuplicateBlockError(KmsError):
    pass


class InvalidTransitionError(KmsError):
    pass


class KeyState(enum.IntEnum):
    AVAILABLE = 0
    RESERVED = 1
    ISSUED = 2
    CONSUMED = 3


@dataclass
class KeyRecord:
    key_id: str
    material: bytes
    state: KeyState
    sae_pair: tuple[str, str]
    created_at: float
    seq: int
    reserved_at: float | None = None
    reserved_ttl_s: float | None = None
    issued_at: float | None = None
    group: tuple[str, ...] | None = None  # multi-record key grouping
    group_size_bits: int | None = None


def key_id_for_slice(block_id: str, index: int) -> str:
    """Deterministic name-based UUID shared by both endpoints."""
    return str(uuid.uuid5(KEY_ID_NAMESPACE, f"{block_id}/{index}"))


class KeyStore:
    """Journal-backed key store for one KME endpoint."""

    def __init__(
        self,
        path: str | None = None,
        key_size_bits: int = 256,
        max_key_count: int = 100_000,
        sae_pair: tuple[str, str] = ("sae-master", "sae-slave"),
        clock=time.monotonic,
    ) -> None:
        if key_size_bits % 8 != 0 or key_size_bits <= 0:
            raise ValueError("key_size_bits must be a positive multiple of 8")
        self.key_size_bits = key_size_bits
        self.max_key_count = max_key_count
        self.sae_pair = sae_pair
        self._clock = clock
        self._lock = threading.RLock()
        self._keys: dict[str, KeyRecord] = {}
        self._order: list[str] = []  # insertion order for oldest-first issue
        self._blocks: set[str] = set()
        self._leftover = np.zeros(0, dtype=np.uint8)
        self._seq = 0
        # Conservation counters, in bits.
        self.ingested_bits = 0
        self.discarded_bits = 0
        self.lifetime_keys_created = 0

        self._db = sqlite3.connect(path or ":memory:", check_same_thread=False)
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS journal ("
            " seq INTEGER PRIMARY KEY AUTOINCREMENT,"
            " event TEXT NOT NULL,"
            " key_id TEXT,"
            " state INTEGER,"
            " material BLOB,"
            " block_id TEXT,"
            " ts REAL)"
        )
        self._db.commit()
        self._replay()

    # -- journal -----------------------------------------------------------

    def _append(self, event: str, key_id: str | None = None, state: int | None = None,
                material: bytes | None = None, block_id: str | None = None) -> None:
        self._db.execute(
            "INSERT INTO journal (event, key_id, state, material, block_id, ts)"
            " VALUES (?, ?, ?, ?, ?, ?)",
            (event, key_id, state, material, block_id, self._clock()),
        )

    def _replay(self) -> None:
        cur = self._db.execute(
            "SELECT event, key_id, state, material, block_id FROM journal ORDER BY seq"
        )
        for event, key_id, state, material, block_id in cur:
            if event == "block":
                self._blocks.add(block_id)
            elif event == "ingest_bits":
                self.ingested_bits += int(state)
            elif event == "discard_bits":
                self.discarded_bits += int(state)
            elif event == "leftover":
                self._leftover = np.unpackbits(np.frombuffer(material, dtype=np.uint8))[: int(state)]
            elif event == "create":
                self._seq += 1
                rec = KeyRecord(
                    key_id=key_id,
                    material=material,
                    state=KeyState.AVAILABLE,
                    sae_pair=self.sae_pair,
                    created_at=0.0,
                    seq=self._seq,
                )
                self._keys[key_id] = rec
                self._order.append(key_id)
                self.lifetime_keys_created += 1
            elif event == "state":
                rec = self._keys.get(key_id)
                if rec is not None:
                    new = KeyState(state)
                    if rec.state is KeyState.CONSUMED and new is not KeyState.CONSUMED:
                        continue  # never resurrect
                    rec.state = new

    # -- ingestion ---------------------------------------------------------

    def ingest(self, block_id: str, bits: np.ndarray) -> int:
        """Slice a verified secret block into fixed-size keys.

        Returns the number of KeyRecords created.  Leftover bits are
        prepended to the next block.  Duplicate block ids are rejected.
        """
        bits = np.asarray(bits, dtype=np.uint8)
        with self._lock:
            if block_id in self._blocks:
                raise DuplicateBlockError(f"block {block_id} already ingested")
            self._blocks.add(block_id)
            self._append("block", block_id=block_id)
            self._append("ingest_bits", state=int(bits.size))
            self.ingested_bits += int(bits.size)

            pool = np.concatenate([self._leftover, bits])
            n_keys = pool.size // self.key_size_bits
            created = 0
            for i in range(n_keys):
                if len(self._keys) >= self.max_key_count:
                    # Overflow beyond the store limit is discarded, not queued.
                    tail = pool[i * self.key_size_bits :]
                    self.discarded_bits += int(tail.size)
                    self._append("discard_bits", state=int(tail.size))
                    pool = pool[: i * self.key_size_bits]
                    break
                material = np.packbits(pool[i * self.key_size_bits : (i + 1) * self.key_size_bits]).tobytes()
                key_id = key_id_for_slice(block_id, i)
                self._seq += 1
                rec = KeyRecord(
                    key_id=key_id,
                    material=material,
                    state=KeyState.AVAILABLE,
                    sae_pair=self.sae_pair,
                    created_at=self._clock(),
                    seq=self._seq,
                )
                if key_id in self._keys:
                    raise DuplicateBlockError(f"key id collision for {key_id}")
                self._keys[key_id] = rec
                self._order.append(key_id)
                self.lifetime_keys_created += 1
                self._append("create", key_id=key_id, material=material)
                created += 1
            self._leftover = pool[created * self.key_size_bits :]
            self._append(
                "leftover",
                state=int(self._leftover.size),
                material=np.packbits(self._leftover).tobytes() if self._leftover.size else b"",
            )
            self._db.commit()
            return created

    # -- queries -----------------------------------------------------------

    @property
    def leftover_bits(self) -> int:
        return int(self._leftover.size)

    def count(self, state: KeyState) -> int:
        with self._lock:
            return sum(1 for rec in self._keys.values() if rec.state is state)

    def get(self, key_id: str) -> KeyRecord:
        with self._lock:
            rec = self._keys.get(key_id)
            if rec is None:
                raise UnknownKeyError(f"unknown key id {key_id}")
            return rec

    def bit_conservation(self) -> dict[str, int]:
        """Exact bit accounting: ingested = per-state + leftover + discarded."""
        with self._lock:
            per_state = {s: 0 for s in KeyState}
            for rec in self._keys.values():
                per_state[rec.state] += self.key_size_bits
            return {
                "ingested": self.ingested_bits,
                "available": per_state[KeyState.AVAILABLE],
                "reserved": per_state[KeyState.RESERVED],
                "issued": per_state[KeyState.ISSUED],
                "consumed": per_state[KeyState.CONSUMED],
                "leftover": self.leftover_bits,
                "discarded": self.discarded_bits,
            }

    # -- transitions -------------------------------------------------------

    def _transition(self, rec: KeyRecord, new: KeyState) -> None:
        if new < rec.state:
            raise InvalidTransitionError(f"{rec.key_id}: {rec.state.name} -> {new.name}")
        rec.state = new
        self._append("state", key_id=rec.key_id, state=int(new))

    def take_available(self, number: int) -> list[KeyRecord]:
        """Atomically move the ``number`` oldest AVAILABLE keys to ISSUED."""
        with self._lock:
            picked: list[KeyRecord] = []
            for key_id in self._order:
                rec = self._keys[key_id]
                if rec.state is KeyState.AVAILABLE:
                    picked.append(rec)
                    if len(picked) == number:
                        break
            if len(picked) < number:
                raise InsufficientKeysError(
                    f"requested {number} keys, only {len(picked)} available"
                )
            now = self._clock()
            for rec in picked:
                self._transition(rec, KeyState.ISSUED)
                rec.issued_at = now
            self._db.commit()
            return picked

    def release(self, key_ids: list[str]) -> None:
        """Compensating release (failed peer reservation / TTL expiry)."""
        with self._lock:
            for key_id in key_ids:
                rec = self._keys.get(key_id)
                if rec is not None and rec.state in (KeyState.RESERVED, KeyState.ISSUED):
                    rec.state = KeyState.AVAILABLE
                    rec.reserved_at = None
                    rec.reserved_ttl_s = None
                    rec.issued_at = None
                    self._append("state", key_id=key_id, state=int(KeyState.AVAILABLE))
            self._db.commit()

    def reserve(self, key_ids: list[str], ttl_s: float, group_size_bits: int | None = None,
                groups: list[list[str]] | None = None) -> bool:
        """Pin keys for a peer-initiated issuance (RESERVE message handler)."""
        with self._lock:
            records = []
            for key_id in key_ids:
                rec = self._keys.get(key_id)
                if rec is None or rec.state is not KeyState.AVAILABLE:
                    return False
                records.append(rec)
            now = self._clock()
            group_of: dict[str, tuple[str, ...]] = {}
            if groups:
                for g in groups:
                    for kid in g:
                        group_of[kid] = tuple(g)
            for rec in records:
                self._transition(rec, KeyState.RESERVED)
                rec.reserved_at = now
                rec.reserved_ttl_s = ttl_s
                rec.group = group_of.get(rec.key_id)
                rec.group_size_bits = group_size_bits
            self._db.commit()
            return True

    def claim_reserved(self, key_ids: list[str]) -> list[KeyRecord]:
        """RESERVED -> ISSUED for a dec_keys call; expired reservations fail."""
        with self._lock:
            self.expire_reservations()
            records = []
            for key_id in key_ids:
                rec = self._keys.get(key_id)
                if rec is None:
                    raise UnknownKeyError(f"unknown key id {key_id}")
                records.append(rec)
            now = self._clock()
            for rec in records:
                if rec.state is not KeyState.RESERVED:
                    raise InvalidTransitionError(
                        f"key {rec.key_id} is {rec.state.name}, not RESERVED"
                    )
            for rec in records:
                self._transition(rec, KeyState.ISSUED)
                rec.issued_at = now
            self._db.commit()
            return records

    def expire_reservations(self) -> int:
        """Release reservations whose TTL elapsed; returns how many."""
        with self._lock:
            now = self._clock()
            expired = [
                rec.key_id
                for rec in self._keys.values()
                if rec.state is KeyState.RESERVED
                and rec.reserved_at is not None
                and rec.reserved_ttl_s is not None
                and now - rec.reserved_at > rec.reserved_ttl_s
            ]
            if expired:
                self.release(expired)
            return len(expired)

    def mark_consumed(self, key_ids: list[str]) -> None:
        with self._lock:
            for key_id in key_ids:
                rec = self.get(key_id)
                self._transition(rec, KeyState.CONSUMED)
            self._db.commit()

    def close(self) -> None:
        self._db.close()
