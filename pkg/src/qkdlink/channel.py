"""Authenticated classical channel between the Alice and Bob roles.

Wire format (all integers big-endian), used verbatim for the in-process
queue transport and for TCP:

    u32  frame_length   (bytes after this field)
    u64  round_id
    u8   phase tag      (Phase enum value)
    ...  payload        (frame_length - 17 bytes)
    8B   auth tag       (HMAC-SHA256 truncated to 64 bits)

The tag covers round_id, phase and payload.  Each round and direction
uses a fresh 256-bit MAC key drawn from an :class:`AuthKeyPool`; pools
bootstrap from a pre-shared secret and are replenished from distilled
key material, so both ends stay in lockstep without extra messages.

Parity-bearing frames (phase PARITY) carry an explicit disclosed-bit
count so reconciliation leakage can be audited directly from the frame
log.
"""

from __future__ import annotations

import hashlib
import hmac
import queue
import socket
import struct
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "Phase",
    "Frame",
    "ChannelAuthError",
    "ChannelClosedError",
    "PoolExhaustedError",
    "AuthKeyPool",
    "ChannelEnd",
    "QueueChannelEnd",
    "TcpChannelEnd",
    "make_inproc_pair",
    "frame_to_bytes",
    "frame_from_bytes",
]

AUTH_KEY_BYTES = 32
TAG_BYTES = 8
_HEADER = struct.Struct(">QB")  # round_id, phase


class Phase(IntEnum):
    CONTROL = 0
    SEED = 1
    ESTIMATE = 2
    PARITY = 3
    VERIFY = 4
    PA_SEED = 5
    ABORT = 6


class ChannelAuthError(Exception):
    """A frame failed tag verification (or arrived malformed)."""


class ChannelClosedError(Exception):
    """The peer closed the transport mid-protocol."""


class PoolExhaustedError(Exception):
    """The authentication key pool ran dry."""


@dataclass
class Frame:
    round_id: int
    phase: Phase
    payload: bytes
    tag: bytes = b""

    @property
    def disclosed_bits(self) -> int:
        """Parity bits disclosed by this frame (0 for non-parity phases)."""
        if self.phase is not Phase.PARITY:
            return 0
        if len(self.payload) < 4:
            return 0
        return struct.unpack(">I", self.payload[:4])[0]


def _mac(key: bytes, round_id: int, phase: int, payload: bytes) -> bytes:
    msg = _HEADER.pack(round_id, phase) + payload
    return hmac.new(key, msg, hashlib.sha256).digest()[:TAG_BYTES]


def frame_to_bytes(frame: Frame, key: bytes) -> bytes:
    tag = _mac(key, frame.round_id, int(frame.phase), frame.payload)
    body = _HEADER.pack(frame.round_id, int(frame.phase)) + frame.payload + tag
    return struct.pack(">I", len(body)) + body


def frame_from_bytes(body: bytes, key: bytes) -> Frame:
    if len(body) < _HEADER.size + TAG_BYTES:
        raise ChannelAuthError("short frame")
    round_id, phase = _HEADER.unpack_from(body, 0)
    payload = body[_HEADER.size : -TAG_BYTES]
    tag = body[-TAG_BYTES:]
    if not hmac.compare_digest(tag, _mac(key, round_id, phase, payload)):
        raise ChannelAuthError("frame tag verification failed")
    return Frame(round_id=round_id, phase=Phase(phase), payload=payload, tag=tag)


class AuthKeyPool:
    """FIFO reservoir of 256-bit authentication keys.

    Bootstrapped by expanding a pre-shared secret; replenished with raw
    distilled key material as rounds complete.  Both endpoints perform
    the same draw/replenish sequence, so their pools stay synchronized.
    """

    def __init__(self, preshared_secret: bytes, bootstrap_keys: int = 64) -> None:
        if not preshared_secret:
            raise ValueError("preshared secret must be non-empty")
        stream = hashlib.shake_256(b"qkdlink-auth-bootstrap" + preshared_secret).digest(
            AUTH_KEY_BYTES * bootstrap_keys
        )
        self._keys: deque[bytes] = deque(
            stream[i : i + AUTH_KEY_BYTES] for i in range(0, len(stream), AUTH_KEY_BYTES)
        )
        self.drawn_bits = 0

    def __len__(self) -> int:
        return len(self._keys)

    def draw(self) -> bytes:
        if not self._keys:
            raise PoolExhaustedError("authentication key pool exhausted")
        self.drawn_bits += AUTH_KEY_BYTES * 8
        return self._keys.popleft()

    def replenish(self, material: bytes) -> int:
        """Append whole 256-bit keys sliced from ``material``; returns count."""
        added = 0
        for i in range(0, len(material) - AUTH_KEY_BYTES + 1, AUTH_KEY_BYTES):
            self._keys.append(material[i : i + AUTH_KEY_BYTES])
            added += 1
        return added


class ChannelEnd:
    """One endpoint of the duplex authenticated channel.

    Subclasses provide ``_send_raw``/``_recv_raw``.  Every frame sent or
    received is appended to ``log`` for leakage audits.
    """

    def __init__(self, send_key: bytes, recv_key: bytes) -> None:
        self.send_key = send_key
        self.recv_key = recv_key
        self.log: list[tuple[str, Frame]] = []

    def rekey(self, send_key: bytes, recv_key: bytes) -> None:
        self.send_key = send_key
        self.recv_key = recv_key

    def send(self, round_id: int, phase: Phase, payload: bytes) -> None:
        frame = Frame(round_id=round_id, phase=phase, payload=payload)
        self._send_raw(frame_to_bytes(frame, self.send_key))
        self.log.append(("sent", frame))

    def recv(self, expect_phase: Phase | None = None) -> Frame:
        body = self._recv_raw()
        frame = frame_from_bytes(body, self.recv_key)
        self.log.append(("recv", frame))
        if frame.phase is Phase.ABORT:
            return frame
        if expect_phase is not None and frame.phase is not expect_phase:
            raise ChannelAuthError(f"expected phase {expect_phase!r}, got {frame.phase!r}")
        return frame

    def disclosed_parity_bits(self, direction: str | None = None) -> int:
        """Total parity bits disclosed in logged frames.

        ``direction`` restricts the audit to 'sent' or 'recv' entries.
        """
        return sum(
            f.disclosed_bits
            for d, f in self.log
            if direction is None or d == direction
        )

    def _send_raw(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_raw(self) -> bytes:
        raise NotImplementedError


class QueueChannelEnd(ChannelEnd):
    """In-process transport over a pair of thread-safe queues."""

    def __init__(
        self,
        outbox: "queue.Queue[bytes]",
        inbox: "queue.Queue[bytes]",
        send_key: bytes,
        recv_key: bytes,
        timeout_s: float = 30.0,
    ) -> None:
        super().__init__(send_key, recv_key)
        self._outbox = outbox
        self._inbox = inbox
        self._timeout_s = timeout_s
        self.tamper_hook = None  # test hook: callable(bytes) -> bytes

    def _send_raw(self, data: bytes) -> None:
        if self.tamper_hook is not None:
            data = self.tamper_hook(data)
        self._outbox.put(data)

    def _recv_raw(self) -> bytes:
        try:
            data = self._inbox.get(timeout=self._timeout_s)
        except queue.Empty as exc:
            raise ChannelClosedError("channel receive timed out") from exc
        return data[4:]  # strip the length prefix; queues preserve framing


def make_inproc_pair(
    alice_pool: AuthKeyPool, bob_pool: AuthKeyPool, timeout_s: float = 30.0
) -> tuple[QueueChannelEnd, QueueChannelEnd]:
    """Create the two ends of an in-process channel, keyed for round 0.

    Key convention per round: the Alice->Bob MAC key is drawn first, then
    the Bob->Alice key; both pools replay the same order.
    """
    a2b_a, b2a_a = alice_pool.draw(), alice_pool.draw()
    a2b_b, b2a_b = bob_pool.draw(), bob_pool.draw()
    if a2b_a != a2b_b or b2a_a != b2a_b:
        raise ChannelAuthError("endpoint key pools are out of sync")
    q_ab: "queue.Queue[bytes]" = queue.Queue()
    q_ba: "queue.Queue[bytes]" = queue.Queue()
    alice = QueueChannelEnd(q_ab, q_ba, send_key=a2b_a, recv_key=b2a_a, timeout_s=timeout_s)
    bob = QueueChannelEnd(q_ba, q_ab, send_key=b2a_b, recv_key=a2b_b, timeout_s=timeout_s)
    return alice, bob


class TcpChannelEnd(ChannelEnd):
    """Length-prefixed frames over a connected TCP socket."""

    def __init__(self, sock: socket.socket, send_key: bytes, recv_key: bytes) -> None:
        super().__init__(send_key, recv_key)
        self._sock = sock

    def _send_raw(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise ChannelClosedError("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_raw(self) -> bytes:
        (length,) = struct.unpack(">I", self._recv_exact(4))
        return self._recv_exact(length)

    def close(self) -> None:
        self._sock.close()
