"""Encrypted tunnel with periodic rekeying from the key delivery API.

Key transport: only key identifiers cross the wire.  The initiator
draws a key from its local KME (``enc_keys``), offers the id; the
responder fetches the same bytes from its own KME (``dec_keys``); both
prove possession by exchanging HMAC key-confirmation tags before the
epoch activates.  Every ``refresh_interval_s`` the initiator repeats
this with a fresh key; the previous epoch's key survives one epoch as a
decrypt-only grace window for in-flight frames and is then erased from
the key table.

File transfer: chunked DATA frames under the current epoch, a FILE_META
announcement and a FILE_END check.  Frames that fail authenticated
decryption are dropped; the receiver's FILE_END reply NACKs missing
chunks, which the sender retransmits (under fresh nonces).  A transfer
completes only when the receiver's digest matches the sender's.

On KMS starvation the tunnel pauses data rather than reusing old keys,
and resumes after the next successful rekey.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import socket
import struct
import threading
import time
import typing
from dataclasses import dataclass, field

from .client import EtsiClient, KmsInsufficientKeys
from .frames import (
    FrameError,
    PT_ACK,
    PT_DATA,
    PT_FILE_END,
    PT_FILE_META,
    PT_KEY_CONFIRM,
    PT_KEY_OFFER,
    PT_NACK,
    decrypt_frame,
    pack_frame,
    unpack_frame,
)
from .pool import PrefetchPool

__all__ = [
    "TunnelConfig",
    "Tunnel",
    "SessionEpoch",
    "TransferReport",
    "TunnelError",
    "ConfirmationError",
]

CHUNK_SIZE = 64 * 1024
DIR_INITIATOR = 0
DIR_RESPONDER = 1


class TunnelError(Exception):
    pass


class ConfirmationError(TunnelError):
    """Key-confirmation tags disagreed; the offered key is discarded."""


@dataclass
class TunnelConfig:
    role: str  # "initiator" | "responder"
    peer_host: str = "127.0.0.1"
    peer_port: int = 0
    kms_url: str = ""
    sae_id: str = ""
    peer_sae_id: str = ""
    refresh_interval_s: float = 10.0
    key_size_bits: int = 256
    low_water_mark: int = 4
    pool_path: str | None = None
    establish_timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.role not in ("initiator", "responder"):
            raise ValueError("role must be 'initiator' or 'responder'")
        if self.refresh_interval_s <= 0:
            raise ValueError("refresh_interval_s must be > 0")
        if self.key_size_bits != 256:
            raise ValueError("the AES-256-GCM cipher requires 256-bit keys")


class SessionEpoch(typing.NamedTuple):
    """One entry of the tunnel's keying history; epochs strictly increase
    and every data frame carries the epoch of the key that encrypted it."""

    epoch: int
    key_id: str
    established_at: float


@dataclass
class TransferReport:
    bytes: int
    duration_s: float
    epochs_used: list[int]
    digest: str
    retransmits: int = 0
    path: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "bytes": self.bytes,
                "duration_s": self.duration_s,
                "epochs_used": self.epochs_used,
                "digest": self.digest,
                "retransmits": self.retransmits,
            },
            sort_keys=True,
        )


def _confirm_tag(key: bytes, role: str, epoch: int, key_id: str) -> bytes:
    msg = b"qkdlink-confirm|" + role.encode() + b"|" + struct.pack(">Q", epoch) + key_id.encode()
    return hmac.new(key, msg, hashlib.sha256).digest()[:16]


@dataclass
class _IncomingFile:
    meta: dict
    chunks: dict[int, bytes] = field(default_factory=dict)
    epochs: set[int] = field(default_factory=set)
    started: float = field(default_factory=time.monotonic)


class Tunnel:
    """One endpoint of the Q-VPN tunnel."""

    def __init__(self, cfg: TunnelConfig, kms: EtsiClient | None = None, sock: socket.socket | None = None) -> None:
        self.cfg = cfg
        self.kms = kms or EtsiClient(cfg.kms_url, cfg.sae_id)
        self._sock = sock
        self._direction = DIR_INITIATOR if cfg.role == "initiator" else DIR_RESPONDER
        self._send_lock = threading.Lock()
        self._state_lock = threading.RLock()
        self._keys: dict[int, bytes] = {}
        self._epoch = 0
        self._send_seq = 0
        self._resume = threading.Event()
        self._stop = threading.Event()
        self._confirm_events: dict[int, threading.Event] = {}
        self._confirm_tags: dict[int, bytes] = {}
        self._recv_thread: threading.Thread | None = None
        self._rekey_thread: threading.Thread | None = None
        self._pool = PrefetchPool(cfg.pool_path)
        self._incoming: dict[int, _IncomingFile] = {}
        self._completed: "list[tuple[_IncomingFile, bytes]]" = []
        self._completed_cv = threading.Condition()
        self._acks: dict[int, dict] = {}
        self._ack_cv = threading.Condition()
        self._file_counter = 0
        self.epoch_log: list[SessionEpoch] = []
        self.pause_log: list[tuple[str, float]] = []
        self.error: Exception | None = None

    # -- connection management ---------------------------------------------

    def connect(self) -> "Tunnel":
        if self._sock is None:
            deadline = time.monotonic() + self.cfg.establish_timeout_s
            while True:
                try:
                    self._sock = socket.create_connection(
                        (self.cfg.peer_host, self.cfg.peer_port), timeout=5.0
                    )
                    break
                except OSError:
                    if time.monotonic() >= deadline:
                        raise TunnelError("could not reach peer control connection")
                    time.sleep(0.2)
        self._sock.settimeout(0.25)
        self._recv_thread = threading.Thread(target=self._recv_loop, daemon=True)
        self._recv_thread.start()
        return self

    def establish(self) -> None:
        """Bring the tunnel to epoch 1 and start the rekey schedule."""
        self.connect()
        if self.cfg.role == "initiator":
            self._rekey(first=True)
            self._rekey_thread = threading.Thread(target=self._rekey_loop, daemon=True)
            self._rekey_thread.start()
        else:
            if not self._resume.wait(timeout=self.cfg.establish_timeout_s):
                raise TunnelError("tunnel did not establish in time")

    # -- epoch management ----------------------------------------------------

    def _fetch_key_once(self) -> tuple[str, bytes]:
        """Single fetch attempt; raises KmsInsufficientKeys when starved."""
        taken = self._pool.take()
        if taken is not None:
            return taken
        k = self.kms.get_enc_keys(self.cfg.peer_sae_id, number=1, size=self.cfg.key_size_bits)[0]
        return k["key_ID"], k["key"]

    def _prefetch(self) -> None:
        try:
            while len(self._pool) < self.cfg.low_water_mark:
                k = self.kms.get_enc_keys(self.cfg.peer_sae_id, number=1, size=self.cfg.key_size_bits)[0]
                self._pool.put(k["key_ID"], k["key"])
        except KmsInsufficientKeys:
            pass

    def _rekey(self, first: bool = False) -> None:
        """Initiator-side epoch negotiation.

        A starved KME pauses data immediately; old keys are never reused
        to bridge the gap.  Fetching keeps retrying until the timeout.
        """
        new_epoch = self._epoch + 1
        deadline = time.monotonic() + self.cfg.establish_timeout_s
        while True:
            try:
                key_id, key = self._fetch_key_once()
                break
            except KmsInsufficientKeys:
                if self._resume.is_set():
                    self._resume.clear()
                    self.pause_log.append(("pause", time.monotonic()))
                if self._stop.is_set() or time.monotonic() >= deadline:
                    raise
                time.sleep(0.1)
        event = threading.Event()
        self._confirm_events[new_epoch] = event
        offer = struct.pack(">BQ", PT_KEY_OFFER, new_epoch) + key_id.encode()
        self._send_plain_or_current(offer, allow_plain=first)
        if not event.wait(timeout=self.cfg.establish_timeout_s):
            raise TunnelError(f"no key confirmation for epoch {new_epoch}")
        tag_r = self._confirm_tags.pop(new_epoch)
        if not hmac.compare_digest(tag_r, _confirm_tag(key, "responder", new_epoch, key_id)):
            raise ConfirmationError("responder confirmation tag mismatch; key discarded")
        reply = struct.pack(">BQ", PT_KEY_CONFIRM, new_epoch) + _confirm_tag(
            key, "initiator", new_epoch, key_id
        )
        self._send_plain_or_current(reply, allow_plain=first)
        self._activate_epoch(new_epoch, key_id, key)
        self._prefetch()

    def _activate_epoch(self, epoch: int, key_id: str, key: bytes) -> None:
        with self._state_lock, self._send_lock:
            self._keys[epoch] = key
            # One-epoch grace window: drop anything older than epoch - 1.
            for old in [e for e in self._keys if e < epoch - 1]:
                del self._keys[old]
            self._epoch = epoch
            self._send_seq = 0
            self.epoch_log.append(SessionEpoch(epoch, key_id, time.monotonic()))
        was_paused = not self._resume.is_set()
        self._resume.set()
        if was_paused and epoch > 1:
            self.pause_log.append(("resume", time.monotonic()))

    def _rekey_loop(self) -> None:
        while not self._stop.is_set():
            last = self.epoch_log[-1].established_at if self.epoch_log else time.monotonic()
            wait = max(0.0, last + self.cfg.refresh_interval_s - time.monotonic())
            if self._stop.wait(timeout=wait):
                return
            try:
                self._rekey()
            except KmsInsufficientKeys:
                continue  # paused; retry on the next loop iteration
            except (TunnelError, OSError) as exc:
                self.error = exc
                return

    # -- raw send/recv -------------------------------------------------------

    def _send_plain_or_current(self, plaintext: bytes, allow_plain: bool) -> None:
        with self._send_lock:
            if self._epoch == 0:
                if not allow_plain:
                    raise TunnelError("tunnel not established")
                frame = pack_frame(0, self._send_seq, plaintext, b"\x00" * 16)
                self._send_seq += 1
                self._sock.sendall(frame)
                return
        self._send_encrypted(plaintext)

    def _send_encrypted(self, plaintext: bytes) -> None:
        from .frames import encrypt_frame

        with self._send_lock:
            epoch = self._epoch
            if epoch == 0:
                raise TunnelError("tunnel not established")
            key = self._keys[epoch]
            seq = self._send_seq
            self._send_seq += 1
            frame = encrypt_frame(key, self._direction, epoch, seq, plaintext)
        self._sock.sendall(frame)

    def _recv_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            if self._stop.is_set():
                return None
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                continue
            except OSError:
                return None
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            header = self._recv_exact(4)
            if header is None:
                return
            (length,) = struct.unpack(">I", header)
            body = self._recv_exact(length)
            if body is None:
                return
            try:
                self._handle_frame(body)
            except FrameError:
                continue  # authenticated-decryption failure: drop the frame
            except Exception as exc:  # pragma: no cover - defensive
                self.error = exc
                return

    def _handle_frame(self, body: bytes) -> None:
        epoch, seq, ciphertext, tag = unpack_frame(body)
        peer_dir = 1 - self._direction
        if epoch == 0:
            if self._epoch != 0 or self.cfg.role == "initiator" and not self._confirm_events:
                # Plaintext control is only legal before the first epoch.
                if self._epoch != 0:
                    return
            plaintext = ciphertext
        else:
            with self._state_lock:
                key = self._keys.get(epoch)
            if key is None:
                raise FrameError(f"no key for epoch {epoch}")
            _, _, plaintext = decrypt_frame(key, peer_dir, body)
        if not plaintext:
            return
        ptype = plaintext[0]
        payload = plaintext[1:]
        if ptype == PT_KEY_OFFER:
            self._on_key_offer(payload, plain=(epoch == 0))
        elif ptype == PT_KEY_CONFIRM:
            self._on_key_confirm(payload, plain=(epoch == 0))
        elif ptype == PT_FILE_META:
            self._on_file_meta(payload)
        elif ptype == PT_DATA:
            self._on_data(payload, epoch)
        elif ptype == PT_FILE_END:
            self._on_file_end(payload)
        elif ptype in (PT_ACK, PT_NACK):
            self._on_ack(ptype, payload)

    # -- responder-side keying ----------------------------------------------

    def _on_key_offer(self, payload: bytes, plain: bool) -> None:
        (new_epoch,) = struct.unpack(">Q", payload[:8])
        key_id = payload[8:].decode()
        try:
            keys = self.kms.get_dec_keys(self.cfg.peer_sae_id, [key_id])
            key = keys[0]["key"]
        except Exception:
            # Unknown id (for example a tampered offer): answer with a
            # deliberately invalid tag so the initiator aborts cleanly.
            bad = struct.pack(">BQ", PT_KEY_CONFIRM, new_epoch) + b"\x00" * 16
            self._send_plain_or_current(bad, allow_plain=plain)
            return
        reply = struct.pack(">BQ", PT_KEY_CONFIRM, new_epoch) + _confirm_tag(
            key, "responder", new_epoch, key_id
        )
        self._pending_responder = (new_epoch, key_id, key)
        self._send_plain_or_current(reply, allow_plain=plain)

    def _on_key_confirm(self, payload: bytes, plain: bool) -> None:
        (epoch,) = struct.unpack(">Q", payload[:8])
        tag = payload[8:]
        if self.cfg.role == "initiator":
            self._confirm_tags[epoch] = tag
            event = self._confirm_events.get(epoch)
            if event is not None:
                event.set()
            return
        pending = getattr(self, "_pending_responder", None)
        if pending is None or pending[0] != epoch:
            return
        new_epoch, key_id, key = pending
        if hmac.compare_digest(tag, _confirm_tag(key, "initiator", epoch, key_id)):
            self._activate_epoch(new_epoch, key_id, key)
        self._pending_responder = None

    # -- file transfer --------------------------------------------------------

    def send_file(self, path: str, timeout_s: float = 120.0) -> TransferReport:
        """Transfer a file; returns once the receiver confirmed the digest."""
        with open(path, "rb") as handle:
            data = handle.read()
        return self.send_bytes(data, name=path.rsplit("/", 1)[-1], timeout_s=timeout_s)

    def send_bytes(self, data: bytes, name: str = "payload", timeout_s: float = 120.0) -> TransferReport:
        if not self._resume.wait(timeout=timeout_s):
            raise TunnelError("tunnel is paused (key starvation)")
        t0 = time.monotonic()
        digest = hashlib.sha256(data).digest()
        self._file_counter += 1
        file_id = self._file_counter
        n_chunks = (len(data) + CHUNK_SIZE - 1) // CHUNK_SIZE if data else 0
        epochs_used = set()
        name_b = name.encode()
        meta = struct.pack(">BIH", PT_FILE_META, file_id, len(name_b)) + name_b
        meta += struct.pack(">QIQ", len(data), CHUNK_SIZE, n_chunks) + digest
        self._send_encrypted(meta)

        def send_chunk(i: int) -> None:
            self._resume.wait(timeout=timeout_s)
            chunk = data[i * CHUNK_SIZE : (i + 1) * CHUNK_SIZE]
            epochs_used.add(self._epoch)
            self._send_encrypted(struct.pack(">BIQ", PT_DATA, file_id, i) + chunk)

        for i in range(n_chunks):
            send_chunk(i)
        retransmits = 0
        deadline = time.monotonic() + timeout_s
        while True:
            self._send_encrypted(struct.pack(">BI", PT_FILE_END, file_id))
            reply = self._wait_ack(file_id, deadline)
            if reply["type"] == PT_ACK:
                if reply["digest"] != digest:
                    raise TunnelError("receiver digest mismatch")
                break
            for i in reply["missing"]:
                retransmits += 1
                send_chunk(i)
        return TransferReport(
            bytes=len(data),
            duration_s=time.monotonic() - t0,
            epochs_used=sorted(epochs_used),
            digest=digest.hex(),
            retransmits=retransmits,
        )

    def _wait_ack(self, file_id: int, deadline: float) -> dict:
        with self._ack_cv:
            while file_id not in self._acks:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TunnelError("timed out waiting for transfer acknowledgement")
                self._ack_cv.wait(timeout=min(remaining, 0.5))
            return self._acks.pop(file_id)

    def _on_file_meta(self, payload: bytes) -> None:
        file_id, name_len = struct.unpack(">IH", payload[:6])
        name = payload[6 : 6 + name_len].decode()
        size, chunk_size, n_chunks = struct.unpack(">QIQ", payload[6 + name_len : 26 + name_len])
        digest = payload[26 + name_len : 58 + name_len]
        self._incoming[file_id] = _IncomingFile(
            meta={"name": name, "size": size, "chunk_size": chunk_size,
                  "n_chunks": n_chunks, "digest": digest}
        )

    def _on_data(self, payload: bytes, epoch: int) -> None:
        file_id, chunk_index = struct.unpack(">IQ", payload[:12])
        incoming = self._incoming.get(file_id)
        if incoming is None:
            return
        incoming.chunks[chunk_index] = payload[12:]
        incoming.epochs.add(epoch)

    def _on_file_end(self, payload: bytes) -> None:
        (file_id,) = struct.unpack(">I", payload[:4])
        incoming = self._incoming.get(file_id)
        if incoming is None:
            return
        n_chunks = incoming.meta["n_chunks"]
        missing = [i for i in range(n_chunks) if i not in incoming.chunks]
        if missing:
            head = missing[:512]
            nack = struct.pack(">BIH", PT_NACK, file_id, len(head))
            nack += b"".join(struct.pack(">Q", i) for i in head)
            self._send_encrypted(nack)
            return
        data = b"".join(incoming.chunks[i] for i in range(n_chunks))
        digest = hashlib.sha256(data).digest()
        ok = digest == incoming.meta["digest"] and len(data) == incoming.meta["size"]
        self._send_encrypted(struct.pack(">BIB", PT_ACK, file_id, 1 if ok else 0) + digest)
        if ok:
            del self._incoming[file_id]
            with self._completed_cv:
                self._completed.append((incoming, data))
                self._completed_cv.notify_all()

    def _on_ack(self, ptype: int, payload: bytes) -> None:
        if ptype == PT_ACK:
            file_id, ok = struct.unpack(">IB", payload[:5])
            entry = {"type": PT_ACK, "ok": bool(ok), "digest": payload[5:37]}
        else:
            file_id, count = struct.unpack(">IH", payload[:6])
            missing = [
                struct.unpack(">Q", payload[6 + 8 * i : 14 + 8 * i])[0] for i in range(count)
            ]
            entry = {"type": PT_NACK, "missing": missing}
        with self._ack_cv:
            self._acks[file_id] = entry
            self._ack_cv.notify_all()

    def receive_file(self, out_dir: str, timeout_s: float = 120.0) -> TransferReport:
        """Wait for the next completed transfer and write it to ``out_dir``."""
        import os

        with self._completed_cv:
            deadline = time.monotonic() + timeout_s
            while not self._completed:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TunnelError("timed out waiting for a file")
                self._completed_cv.wait(timeout=min(remaining, 0.5))
            incoming, data = self._completed.pop(0)
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, os.path.basename(incoming.meta["name"]) or "received.bin")
        with open(path, "wb") as handle:
            handle.write(data)
        return TransferReport(
            bytes=len(data),
            duration_s=time.monotonic() - incoming.started,
            epochs_used=sorted(incoming.epochs),
            digest=hashlib.sha256(data).hexdigest(),
            path=path,
        )

    # -- introspection and shutdown -------------------------------------------

    def key_table(self) -> dict[int, bytes]:
        with self._state_lock:
            return dict(self._keys)

    @property
    def epoch(self) -> int:
        return self._epoch

    @property
    def paused(self) -> bool:
        return not self._resume.is_set()

    def close(self) -> None:
        self._stop.set()
        self._resume.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        for t in (self._recv_thread, self._rekey_thread):
            if t is not None:
                t.join(timeout=3.0)
        self._pool.close()
