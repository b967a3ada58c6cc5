"""Tunnel wire format.

Every frame on the data connection is laid out byte-exactly as

    u32 BE  length    (bytes after this field: 8 + 8 + len(ct) + 16)
    u64 BE  epoch     (0 = plaintext bootstrap control frames)
    u64 BE  sequence
    ...     ciphertext
    16B     tag       (AES-256-GCM tag; zero bytes for epoch-0 frames)

Epoch > 0 frames are AES-256-GCM under that epoch's key with the
12-byte nonce ``u32 BE direction || u64 BE sequence`` and the
epoch/sequence header bytes as associated data, so headers cannot be
swapped between frames.  The first plaintext byte is the payload type.
"""

from __future__ import annotations

import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

__all__ = [
    "FRAME_TAG_BYTES",
    "FrameError",
    "pack_frame",
    "unpack_frame",
    "encrypt_frame",
    "decrypt_frame",
    "PT_DATA",
    "PT_FILE_META",
    "PT_FILE_END",
    "PT_ACK",
    "PT_NACK",
    "PT_KEY_OFFER",
    "PT_KEY_CONFIRM",
    "PT_PAUSE",
    "PT_RESUME",
]

FRAME_TAG_BYTES = 16
_HEADER = struct.Struct(">QQ")  # epoch, sequence

# Payload type bytes (first plaintext byte).
PT_DATA = 1
PT_FILE_META = 2
PT_FILE_END = 3
PT_ACK = 4
PT_NACK = 5
PT_KEY_OFFER = 6
PT_KEY_CONFIRM = 7
PT_PAUSE = 8
PT_RESUME = 9


class FrameError(Exception):
    """Frame failed structural parsing or authenticated decryption."""


def pack_frame(epoch: int, sequence: int, ciphertext: bytes, tag: bytes) -> bytes:
    if len(tag) != FRAME_TAG_BYTES:
        raise FrameError(f"tag must be {FRAME_TAG_BYTES} bytes")
    body = _HEADER.pack(epoch, sequence) + ciphertext + tag
    return struct.pack(">I", len(body)) + body


def unpack_frame(body: bytes) -> tuple[int, int, bytes, bytes]:
    """Split a frame body (without the length prefix) into its fields."""
    if len(body) < _HEADER.size + FRAME_TAG_BYTES:
        raise FrameError("frame too short")
    epoch, sequence = _HEADER.unpack_from(body, 0)
    ciphertext = body[_HEADER.size : -FRAME_TAG_BYTES]
    tag = body[-FRAME_TAG_BYTES:]
    return epoch, sequence, ciphertext, tag


def _nonce(direction: int, sequence: int) -> bytes:
    return struct.pack(">IQ", direction, sequence)


def encrypt_frame(key: bytes, direction: int, epoch: int, sequence: int, plaintext: bytes) -> bytes:
    """Build a complete encrypted frame (length prefix included)."""
    aad = _HEADER.pack(epoch, sequence)
    ct_and_tag = AESGCM(key).encrypt(_nonce(direction, sequence), plaintext, aad)
    return pack_frame(epoch, sequence, ct_and_tag[:-FRAME_TAG_BYTES], ct_and_tag[-FRAME_TAG_BYTES:])


def decrypt_frame(key: bytes, direction: int, body: bytes) -> tuple[int, int, bytes]:
    """Authenticated decryption; returns (epoch, sequence, plaintext)."""
    epoch, sequence, ciphertext, tag = unpack_frame(body)
    aad = _HEADER.pack(epoch, sequence)
    try:
        plaintext = AESGCM(key).decrypt(_nonce(direction, sequence), ciphertext + tag, aad)
    except InvalidTag as exc:
        raise FrameError("frame authentication failed") from exc
    return epoch, sequence, plaintext
