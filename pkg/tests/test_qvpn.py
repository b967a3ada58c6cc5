"""Tunnel tests: wire format, keying, rekey discipline, transfer
integrity, starvation, and confidentiality plumbing."""

import hashlib
import socket
import struct
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from qkdlink.kms import KeyStore, KmeConfig, KmeService, LoopbackPeerLink
from qkdlink.kms.api import make_app
from qkdlink.qvpn import EtsiClient, Tunnel, TunnelConfig
from qkdlink.qvpn.frames import (
    FRAME_TAG_BYTES,
    FrameError,
    decrypt_frame,
    encrypt_frame,
    pack_frame,
    unpack_frame,
)
from qkdlink.qvpn.pool import PrefetchPool
from qkdlink.qvpn.tunnel import ConfirmationError


class TamperSocket:
    """Wraps a socket; flips one ciphertext byte of the n-th frame sent."""

    def __init__(self, sock, tamper_frame_index=None, byte_offset=30):
        self._sock = sock
        self._count = 0
        self.tamper_frame_index = tamper_frame_index
        self.byte_offset = byte_offset
        self.captured = bytearray()

    def sendall(self, data):
        self.captured.extend(data)
        if self.tamper_frame_index is not None and self._count == self.tamper_frame_index:
            mutable = bytearray(data)
            off = min(self.byte_offset, len(mutable) - 1)
            mutable[off] ^= 0x55
            data = bytes(mutable)
        self._count += 1
        return self._sock.sendall(data)

    def __getattr__(self, name):
        return getattr(self._sock, name)


def make_kme_pair(n_keys=64, seed=0):
    material = np.random.default_rng(seed).integers(0, 2, 256 * n_keys, dtype=np.uint8)
    store_a, store_b = KeyStore(), KeyStore()
    if n_keys:
        store_a.ingest("blk", material)
        store_b.ingest("blk", material)
    cfg = KmeConfig()
    svc_b = KmeService(store_b, cfg)
    svc_a = KmeService(store_a, cfg, peer_link=LoopbackPeerLink(svc_b))
    kms_a = EtsiClient("http://kme-a", "sae-a", http=TestClient(make_app(svc_a)))
    kms_b = EtsiClient("http://kme-b", "sae-b", http=TestClient(make_app(svc_b)))
    return kms_a, kms_b, store_a, store_b


def make_tunnel_pair(kms_a, kms_b, refresh=5.0, wrap_initiator=None):
    s1, s2 = socket.socketpair()
    if wrap_initiator is not None:
        s1 = wrap_initiator(s1)
    ti = Tunnel(
        TunnelConfig(role="initiator", sae_id="sae-a", peer_sae_id="sae-b",
                     refresh_interval_s=refresh, establish_timeout_s=15.0),
        kms=kms_a, sock=s1,
    )
    tr = Tunnel(
        TunnelConfig(role="responder", sae_id="sae-b", peer_sae_id="sae-a",
                     refresh_interval_s=refresh, establish_timeout_s=15.0),
        kms=kms_b, sock=s2,
    )
    return ti, tr


def establish_both(ti, tr):
    errors = []

    def responder():
        try:
            tr.establish()
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    thread = threading.Thread(target=responder)
    thread.start()
    ti.establish()
    thread.join(timeout=20)
    assert not errors, errors


class TestFrameFormat:
    def test_byte_exact_layout(self):
        ct = b"\xAA" * 10
        tag = b"\xBB" * 16
        wire = pack_frame(epoch=3, sequence=9, ciphertext=ct, tag=tag)
        # 4-byte length, 8-byte epoch, 8-byte sequence, ciphertext, 16-byte tag
        assert struct.unpack(">I", wire[:4])[0] == 8 + 8 + 10 + 16
        assert struct.unpack(">Q", wire[4:12])[0] == 3
        assert struct.unpack(">Q", wire[12:20])[0] == 9
        assert wire[20:30] == ct
        assert wire[30:46] == tag
        assert len(wire) == 46

    def test_unpack_roundtrip(self):
        wire = pack_frame(1, 2, b"abc", b"\x00" * FRAME_TAG_BYTES)
        epoch, seq, ct, tag = unpack_frame(wire[4:])
        assert (epoch, seq, ct, tag) == (1, 2, b"abc", b"\x00" * 16)

    def test_encrypt_decrypt_roundtrip(self):
        key = bytes(range(32))
        wire = encrypt_frame(key, direction=0, epoch=5, sequence=7, plaintext=b"hello")
        epoch, seq, pt = decrypt_frame(key, direction=0, body=wire[4:])
        assert (epoch, seq, pt) == (5, 7, b"hello")

    def test_header_is_authenticated(self):
        key = bytes(range(32))
        wire = bytearray(encrypt_frame(key, 0, 5, 7, b"hello"))
        wire[5] ^= 1  # flip a bit inside the epoch header
        with pytest.raises(FrameError):
            decrypt_frame(key, 0, bytes(wire[4:]))

    def test_direction_separates_nonces(self):
        key = bytes(range(32))
        wire = encrypt_frame(key, direction=0, epoch=1, sequence=0, plaintext=b"x")
        with pytest.raises(FrameError):
            decrypt_frame(key, direction=1, body=wire[4:])

    def test_tamper_detected(self):
        key = bytes(range(32))
        wire = bytearray(encrypt_frame(key, 0, 1, 1, b"payload"))
        wire[22] ^= 0x40
        with pytest.raises(FrameError):
            decrypt_frame(key, 0, bytes(wire[4:]))


class TestEstablish:
    def test_stocked_kmes_reach_epoch_one(self):
        kms_a, kms_b, *_ = make_kme_pair()
        ti, tr = make_tunnel_pair(kms_a, kms_b)
        try:
            establish_both(ti, tr)
            assert ti.epoch == 1
            assert tr.epoch == 1
            assert ti.epoch_log[0][1] == tr.epoch_log[0][1]  # same key id offered
        finally:
            ti.close()
            tr.close()

    def test_empty_kmes_block_then_succeed_after_ingest(self):
        kms_a, kms_b, store_a, store_b = make_kme_pair(n_keys=0)
        ti, tr = make_tunnel_pair(kms_a, kms_b)
        material = np.random.default_rng(5).integers(0, 2, 256 * 8, dtype=np.uint8)

        def late_ingest():
            time.sleep(0.6)
            store_a.ingest("late", material)
            store_b.ingest("late", material)

        threading.Thread(target=late_ingest).start()
        try:
            t0 = time.monotonic()
            establish_both(ti, tr)
            assert time.monotonic() - t0 >= 0.5  # it had to wait for keys
            assert ti.epoch == 1
        finally:
            ti.close()
            tr.close()

    def test_tampered_key_offer_aborts_without_tunnel(self):
        kms_a, kms_b, *_ = make_kme_pair()
        # Frame 0 from the initiator is the plaintext KEY_OFFER; corrupt
        # the key id in transit.
        ti, tr = make_tunnel_pair(
            kms_a, kms_b, wrap_initiator=lambda s: TamperSocket(s, tamper_frame_index=0)
        )
        thread = threading.Thread(target=lambda: tr.connect())
        thread.start()
        try:
            with pytest.raises((ConfirmationError, Exception)) as err:
                ti.establish()
            assert isinstance(err.value, (ConfirmationError,)) or "confirmation" in str(err.value)
            assert ti.epoch == 0
            assert tr.epoch == 0
        finally:
            ti.close()
            tr.close()
            thread.join(timeout=5)


class TestRekey:
    def test_epochs_advance_and_old_keys_erased(self):
        kms_a, kms_b, *_ = make_kme_pair()
        ti, tr = make_tunnel_pair(kms_a, kms_b, refresh=0.3)
        try:
            establish_both(ti, tr)
            time.sleep(1.1)
            assert ti.epoch >= 3
            held = sorted(ti.key_table())
            # one-epoch grace window: only the current and previous keys
            assert held == [ti.epoch - 1, ti.epoch]
            epochs = [e for e, _, _ in ti.epoch_log]
            assert epochs == sorted(set(epochs))  # strictly increasing
        finally:
            ti.close()
            tr.close()

    def test_key_ids_never_reused(self):
        kms_a, kms_b, *_ = make_kme_pair()
        ti, tr = make_tunnel_pair(kms_a, kms_b, refresh=0.25)
        try:
            establish_both(ti, tr)
            time.sleep(1.0)
            ids = [kid for _, kid, _ in ti.epoch_log]
            assert len(ids) >= 3
            assert len(ids) == len(set(ids))
        finally:
            ti.close()
            tr.close()


class TestFileTransfer:
    def test_empty_payload(self):
        kms_a, kms_b, *_ = make_kme_pair()
        ti, tr = make_tunnel_pair(kms_a, kms_b)
        try:
            establish_both(ti, tr)
            out = {}
            thread = threading.Thread(
                target=lambda: out.update(rep=tr.receive_file("/tmp/qvpn-test-out", timeout_s=10))
            )
            thread.start()
            rep = ti.send_bytes(b"", name="empty.bin", timeout_s=10)
            thread.join(timeout=15)
            assert rep.bytes == 0
            assert out["rep"].digest == rep.digest == hashlib.sha256(b"").hexdigest()
        finally:
            ti.close()
            tr.close()

    def test_megabyte_bit_exact(self, tmp_path):
        kms_a, kms_b, *_ = make_kme_pair()
        ti, tr = make_tunnel_pair(kms_a, kms_b)
        data = np.random.default_rng(8).integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
        src = tmp_path / "src.bin"
        src.write_bytes(data)
        try:
            establish_both(ti, tr)
            out = {}
            thread = threading.Thread(
                target=lambda: out.update(rep=tr.receive_file(str(tmp_path / "recv"), timeout_s=30))
            )
            thread.start()
            rep = ti.send_file(str(src), timeout_s=30)
            thread.join(timeout=30)
            received = (tmp_path / "recv" / "src.bin").read_bytes()
            assert received == data
            assert rep.digest == out["rep"].digest == hashlib.sha256(data).hexdigest()
        finally:
            ti.close()
            tr.close()

    def test_corrupted_frame_retransmitted(self):
        kms_a, kms_b, *_ = make_kme_pair()
        # Frame 0: plaintext offer; 1: confirm; then META is 2 and the
        # first DATA frame is 3 — corrupt a DATA frame.
        ti, tr = make_tunnel_pair(
            kms_a, kms_b, wrap_initiator=lambda s: TamperSocket(s, tamper_frame_index=4)
        )
        data = np.random.default_rng(9).integers(0, 256, 300_000, dtype=np.uint8).tobytes()
        try:
            establish_both(ti, tr)
            out = {}
            thread = threading.Thread(
                target=lambda: out.update(rep=tr.receive_file("/tmp/qvpn-retx", timeout_s=30))
            )
            thread.start()
            rep = ti.send_bytes(data, timeout_s=30)
            thread.join(timeout=30)
            assert rep.retransmits >= 1
            assert out["rep"].digest == rep.digest == hashlib.sha256(data).hexdigest()
        finally:
            ti.close()
            tr.close()

    def test_ciphertext_never_contains_plaintext_or_keys(self):
        kms_a, kms_b, *_ = make_kme_pair()
        taps = {}

        def wrap(sock):
            taps["tap"] = TamperSocket(sock)
            return taps["tap"]

        ti, tr = make_tunnel_pair(kms_a, kms_b, wrap_initiator=wrap)
        marker = b"KNOWN-PLAINTEXT-MARKER-0123456789" * 64
        try:
            establish_both(ti, tr)
            out = {}
            thread = threading.Thread(
                target=lambda: out.update(rep=tr.receive_file("/tmp/qvpn-scan", timeout_s=20))
            )
            thread.start()
            ti.send_bytes(marker, timeout_s=20)
            thread.join(timeout=20)
            captured = bytes(taps["tap"].captured)
            assert marker[:64] not in captured
            for key in ti.key_table().values():
                assert key not in captured
        finally:
            ti.close()
            tr.close()


class TestStarvation:
    def test_pause_and_resume_without_epoch_reuse(self):
        kms_a, kms_b, store_a, store_b = make_kme_pair(n_keys=1)
        ti, tr = make_tunnel_pair(kms_a, kms_b, refresh=0.3)
        ti.cfg.low_water_mark = 0  # no prefetch: force starvation
        material = np.random.default_rng(10).integers(0, 2, 256 * 8, dtype=np.uint8)
        try:
            establish_both(ti, tr)
            time.sleep(0.8)  # rekey attempts hit an empty store
            assert ti.paused
            paused_epoch = ti.epoch
            store_a.ingest("more", material)
            store_b.ingest("more", material)
            deadline = time.monotonic() + 5.0
            while ti.paused and time.monotonic() < deadline:
                time.sleep(0.05)
            assert not ti.paused
            assert ti.epoch > paused_epoch
            ids = [kid for _, kid, _ in ti.epoch_log]
            assert len(ids) == len(set(ids))
            assert [e for e, _, _ in ti.epoch_log] == sorted({e for e, _, _ in ti.epoch_log})
        finally:
            ti.close()
            tr.close()


class TestPrefetchPool:
    def test_put_take_delete(self, tmp_path):
        pool = PrefetchPool(str(tmp_path / "pool.sqlite"))
        pool.put("id-1", b"k" * 32)
        pool.put("id-2", b"m" * 32)
        assert len(pool) == 2
        key_id, material = pool.take()
        assert key_id == "id-1" and material == b"k" * 32
        assert len(pool) == 1
        pool.close()
        # persistence across reopen
        pool2 = PrefetchPool(str(tmp_path / "pool.sqlite"))
        assert len(pool2) == 1
        assert pool2.take()[0] == "id-2"
        assert pool2.take() is None
        pool2.close()
