"""Inter-KME reservation control channel.

Length-prefixed authenticated frames over TCP (or a loopback object for
in-process twin stores).  Byte layout, integers big-endian:

    u32  frame_length      (bytes after this field)
    u8   type              (1=RESERVE, 2=ACK, 3=RELEASE)
    u16  size_bits         (RESERVE only: delivered key size)
    u16  per_key           (RESERVE only: records grouped per key)
    u16  count             (number of key ids)
    16B * count             key ids (UUID bytes)
    u8   ok                (ACK only)
    8B   tag               (HMAC-SHA256 over everything before it,
                            truncated; keyed with the pair secret)
"""

from __future__ import annotations

import hashlib
import hmac
import socket
import struct
import threading
import uuid

__all__ = ["LoopbackPeerLink", "TcpPeerLink", "PeerServer", "PeerProtocolError"]

TYPE_RESERVE = 1
TYPE_ACK = 2
TYPE_RELEASE = 3
TAG_BYTES = 8


class PeerProtocolError(Exception):
    pass


def _tag(secret: bytes, body: bytes) -> bytes:
    return hmac.new(secret, body, hashlib.sha256).digest()[:TAG_BYTES]


def _pack_ids(key_ids: list[str]) -> bytes:
    return struct.pack(">H", len(key_ids)) + b"".join(uuid.UUID(k).bytes for k in key_ids)


def _unpack_ids(buf: bytes, offset: int) -> tuple[list[str], int]:
    (count,) = struct.unpack_from(">H", buf, offset)
    offset += 2
    ids = []
    for _ in range(count):
        ids.append(str(uuid.UUID(bytes=buf[offset : offset + 16])))
        offset += 16
    return ids, offset


def encode_reserve(key_ids: list[str], size_bits: int, per_key: int, secret: bytes) -> bytes:
    body = struct.pack(">BHH", TYPE_RESERVE, size_bits, per_key) + _pack_ids(key_ids)
    body += _tag(secret, body)
    return struct.pack(">I", len(body)) + body


def encode_release(key_ids: list[str], secret: bytes) -> bytes:
    body = struct.pack(">B", TYPE_RELEASE) + _pack_ids(key_ids)
    body += _tag(secret, body)
    return struct.pack(">I", len(body)) + body


def encode_ack(ok: bool, secret: bytes) -> bytes:
    body = struct.pack(">BB", TYPE_ACK, 1 if ok else 0)
    body += _tag(secret, body)
    return struct.pack(">I", len(body)) + body


def decode_frame(body: bytes, secret: bytes) -> dict:
    if len(body) < 1 + TAG_BYTES:
        raise PeerProtocolError("short control frame")
    payload, tag = body[:-TAG_BYTES], body[-TAG_BYTES:]
    if not hmac.compare_digest(tag, _tag(secret, payload)):
        raise PeerProtocolError("control frame tag verification failed")
    ftype = payload[0]
    if ftype == TYPE_RESERVE:
        size_bits, per_key = struct.unpack_from(">HH", payload, 1)
        ids, _ = _unpack_ids(payload, 5)
        return {"type": "reserve", "size_bits": size_bits, "per_key": per_key, "key_ids": ids}
    if ftype == TYPE_RELEASE:
        ids, _ = _unpack_ids(payload, 1)
        return {"type": "release", "key_ids": ids}
    if ftype == TYPE_ACK:
        return {"type": "ack", "ok": bool(payload[1])}
    raise PeerProtocolError(f"unknown control frame type {ftype}")


class LoopbackPeerLink:
    """Direct in-process link to the twin service (tests, single-process demos)."""

    def __init__(self, peer_service=None, ttl_s: float | None = None) -> None:
        self.peer_service = peer_service
        self.ttl_override = ttl_s
        self.fail_next = False  # test hook

    def send_reserve(self, key_ids: list[str], size_bits: int, per_key: int, ttl_s: float) -> bool:
        if self.fail_next:
            self.fail_next = False
            return False
        if self.peer_service is None:
            return True
        return self.peer_service.handle_reserve(
            key_ids, size_bits=size_bits, per_key=per_key,
            ttl_s=self.ttl_override if self.ttl_override is not None else ttl_s,
        )

    def send_release(self, key_ids: list[str]) -> None:
        if self.peer_service is not None:
            self.peer_service.handle_release(key_ids)


class TcpPeerLink:
    """Client side of the TCP control channel."""

    def __init__(self, host: str, port: int, secret: bytes, timeout_s: float = 5.0) -> None:
        self.host = host
        self.port = port
        self.secret = secret
        self.timeout_s = timeout_s

    def _roundtrip(self, frame: bytes, expect_ack: bool) -> bool:
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout_s) as sock:
                sock.sendall(frame)
                if not expect_ack:
                    return True
                header = self._recv_exact(sock, 4)
                (length,) = struct.unpack(">I", header)
                msg = decode_frame(self._recv_exact(sock, length), self.secret)
                return msg["type"] == "ack" and msg["ok"]
        except (OSError, PeerProtocolError):
            return False

    @staticmethod
    def _recv_exact(sock: socket.socket, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise PeerProtocolError("peer closed control connection")
            buf.extend(chunk)
        return bytes(buf)

    def send_reserve(self, key_ids: list[str], size_bits: int, per_key: int, ttl_s: float) -> bool:
        return self._roundtrip(encode_reserve(key_ids, size_bits, per_key, self.secret), expect_ack=True)

    def send_release(self, key_ids: list[str]) -> None:
        self._roundtrip(encode_release(key_ids, self.secret), expect_ack=False)


class PeerServer:
    """Server side of the TCP control channel; drives the local service."""

    def __init__(self, service, secret: bytes, host: str = "127.0.0.1", port: int = 0) -> None:
        self.service = service
        self.secret = secret
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def start(self) -> "PeerServer":
        self._thread.start()
        return self

    def _serve(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        try:
            with conn:
                conn.settimeout(5.0)
                header = TcpPeerLink._recv_exact(conn, 4)
                (length,) = struct.unpack(">I", header)
                msg = decode_frame(TcpPeerLink._recv_exact(conn, length), self.secret)
                if msg["type"] == "reserve":
                    ok = self.service.handle_reserve(
                        msg["key_ids"],
                        size_bits=msg["size_bits"],
                        per_key=msg["per_key"],
                        ttl_s=self.service.config.reservation_ttl_s,
                    )
                    conn.sendall(encode_ack(ok, self.secret))
                elif msg["type"] == "release":
                    self.service.handle_release(msg["key_ids"])
        except (OSError, PeerProtocolError):
            pass

    def stop(self) -> None:
        self._stop.set()
        self._sock.close()
        self._thread.join(timeout=2.0)
