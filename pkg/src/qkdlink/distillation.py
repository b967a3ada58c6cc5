"""Classical key distillation over the authenticated channel.

One round composes

    sift -> estimate_qber -> reconcile (cascade + verification)
         -> secret-length budget -> privacy_amplify

between an Alice role (reference bits) and a Bob role (corrects his
bits).  The module-level operations orchestrate both roles in-process
(Bob runs on a worker thread); the ``_alice_*`` / ``_bob_*`` role
functions underneath speak only to a :class:`~qkdlink.channel.ChannelEnd`
and therefore also run across TCP.

Reconciliation is a cascading binary-bisection parity protocol: per
pass, Alice disclosed her block parities once, and all mismatched blocks
bisect in lockstep (one parity frame per depth level).  A bit fixed in a
later pass re-activates the earlier passes' blocks it belongs to, which
are re-bisected against the already-disclosed block parities.  Every
disclosed parity bit is counted at the sender and is auditable from the
channel frame log.

Privacy amplification and the 64-bit verification tag both use seeded
binary Toeplitz matrices; the matrix-vector product over GF(2) is a
convolution, evaluated by FFT with an exact integer fallback.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .channel import (
    AuthKeyPool,
    ChannelAuthError,
    ChannelEnd,
    Frame,
    Phase,
    make_inproc_pair,
)
from .security import SecurityParams, secret_length

__all__ = [
    "SiftedBlock",
    "ReconciledBlock",
    "SecretKeyBlock",
    "RoundResult",
    "DistillationAbort",
    "QberAbortError",
    "VerificationError",
    "InsufficientKeyError",
    "sift",
    "estimate_qber",
    "reconcile",
    "privacy_amplify",
    "run_distillation_round",
    "toeplitz_matvec_gf2",
    "expand_toeplitz_bits",
    "decode_bob_bits",
]

VERIFY_TAG_BITS = 64
PA_SEED_BYTES = 32
CASCADE_PASSES = 4
MAX_BLOCK = 8192


class DistillationAbort(Exception):
    """Base class for protocol aborts; ``code`` crosses the wire."""

    code = 5


class QberAbortError(DistillationAbort):
    """Estimated or measured error rate at/above the abort threshold."""

    code = 1

    def __init__(self, message: str, qber: float = 0.0) -> None:
        super().__init__(message)
        self.qber = qber


class VerificationError(DistillationAbort):
    """Verification tags disagreed; the block is discarded."""

    code = 2


class InsufficientKeyError(DistillationAbort):
    """The secret-length budget came out non-positive."""

    code = 3


_ABORT_BY_CODE = {1: QberAbortError, 2: VerificationError, 3: InsufficientKeyError}


def _send_abort(end: ChannelEnd, round_id: int, exc: Exception) -> None:
    code = getattr(exc, "code", 5)
    try:
        end.send(round_id, Phase.ABORT, struct.pack(">B", code) + str(exc).encode()[:200])
    except Exception:
        pass


def _check_abort(frame: Frame) -> None:
    if frame.phase is Phase.ABORT:
        code = frame.payload[0] if frame.payload else 5
        msg = frame.payload[1:].decode(errors="replace")
        raise _ABORT_BY_CODE.get(code, DistillationAbort)(f"peer abort: {msg}")


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class SiftedBlock:
    """Equal-length raw key strings plus the slots they came from."""

    alice_bits: np.ndarray
    bob_bits: np.ndarray
    origin_slots: np.ndarray
    decoy_stats: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.alice_bits = np.asarray(self.alice_bits, dtype=np.uint8)
        self.bob_bits = np.asarray(self.bob_bits, dtype=np.uint8)
        self.origin_slots = np.asarray(self.origin_slots, dtype=np.int64)
        if self.alice_bits.size != self.bob_bits.size:
            raise ValueError("alice and bob bit strings must have equal length")
        if self.origin_slots.size != self.alice_bits.size:
            raise ValueError("origin_slots must align with the bit strings")
        if self.origin_slots.size > 1 and np.any(np.diff(self.origin_slots) <= 0):
            raise ValueError("origin_slots must be strictly increasing")

    def __len__(self) -> int:
        return int(self.alice_bits.size)


@dataclass
class ReconciledBlock:
    """Corrected block with exact disclosure accounting."""

    bits: np.ndarray
    leakage_bits: int
    verified: bool
    qber_est: float  # measured error rate: corrections / length

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.leakage_bits < 0:
            raise ValueError("leakage_bits must be >= 0")


@dataclass
class SecretKeyBlock:
    """Final privacy-amplified secret bits with security metadata."""

    bits: np.ndarray
    block_id: str
    qber_est: float
    visibility_dcc: float
    epsilon: dict[str, float | str]
    auth_spent_bits: int

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.bits.size)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()


@dataclass
class RoundResult:
    """Outcome of one distillation round (both roles)."""

    block_alice: SecretKeyBlock | None
    block_bob: SecretKeyBlock | None
    abort_reason: str | None
    sifted_bits: int
    qber_estimate: float
    qber_measured: float
    leakage_bits: int
    secret_bits: int
    verified: bool

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None


# ---------------------------------------------------------------------------
# Toeplitz hashing over GF(2)


def expand_toeplitz_bits(seed: bytes, n_bits: int, domain: bytes = b"qkdlink-toeplitz") -> np.ndarray:
    """Expand a seed into the diagonal bits of a Toeplitz matrix."""
    if n_bits <= 0:
        return np.zeros(0, dtype=np.uint8)
    stream = hashlib.shake_256(domain + seed).digest((n_bits + 7) // 8)
    return np.unpackbits(np.frombuffer(stream, dtype=np.uint8))[:n_bits]


def toeplitz_matvec_gf2(diag_bits: np.ndarray, x_bits: np.ndarray, m: int) -> np.ndarray:
    """y = T x over GF(2) for the m x n Toeplitz matrix T[i, j] = t[n-1+i-j].

    Row i of T is t[i : i + n] reversed, so a few outputs are cheap
    windowed dot products, small blocks use exact integer convolution,
    and large blocks go through an FFT whose rounded result is validated
    (with an exact fallback when the residual looks suspicious).
    """
    x = np.asarray(x_bits, dtype=np.uint8)
    t = np.asarray(diag_bits, dtype=np.uint8)
    n = x.size
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    if t.size != n + m - 1:
        raise ValueError(f"diagonal bits must have length n + m - 1 = {n + m - 1}, got {t.size}")
    if n == 0:
        return np.zeros(m, dtype=np.uint8)
    if m <= 256:
        # Row i of T is the window t[i : i + n] reversed, so the product
        # is an exact integer cross-correlation.
        acc = np.correlate(t.astype(np.int64), x[::-1].astype(np.int64))
        return (acc[:m] & 1).astype(np.uint8)
    if n * m <= 1 << 22:
        conv = np.convolve(t.astype(np.int64), x.astype(np.int64))
    else:
        size = 1 << int(n + t.size - 1).bit_length()
        spec = np.fft.rfft(t.astype(np.float64), size) * np.fft.rfft(x.astype(np.float64), size)
        approx = np.fft.irfft(spec, size)[: n + t.size - 1]
        conv = np.rint(approx).astype(np.int64)
        if np.max(np.abs(approx - conv)) > 0.25:
            conv = np.convolve(t.astype(np.int64), x.astype(np.int64))
    return (conv[n - 1 : n - 1 + m] & 1).astype(np.uint8)


def _toeplitz_tag(bits: np.ndarray, key: bytes) -> bytes:
    """64-bit universal-hash verification tag under a fresh key."""
    n = bits.size
    if n == 0:
        return b"\x00" * 8
    diag = expand_toeplitz_bits(key, n + VERIFY_TAG_BITS - 1, domain=b"qkdlink-verify")
    return np.packbits(toeplitz_matvec_gf2(diag, bits, VERIFY_TAG_BITS)).tobytes()


def _verify_key(end: ChannelEnd) -> bytes:
    # Symmetric derivation: both ends hold the same (a->b, b->a) key pair.
    k1, k2 = sorted([end.send_key, end.recv_key])
    return hashlib.shake_256(b"qkdlink-verify-key" + k1 + k2).digest(32)


# ---------------------------------------------------------------------------
# Sifting


def decode_bob_bits(clicks: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Timing decode at the bit detector.

    Returns (clicked_slot_indices, decoded_bits).  Early-bin click -> 0,
    late-bin click -> 1, double click -> fair coin.
    """
    early = clicks[:, 0]
    late = clicks[:, 1]
    any_click = early | late
    idx = np.flatnonzero(any_click)
    bits = late[idx].astype(np.uint8)
    double = (early & late)[idx]
    n_double = int(double.sum())
    if n_double:
        bits[double] = rng.integers(0, 2, size=n_double, dtype=np.uint8)
    return idx, bits


def sift(frame, rec, chan: tuple[ChannelEnd, ChannelEnd], seed: int = 0) -> SiftedBlock:
    """Run the sifting exchange for a simulated frame/record pair.

    Bob announces which slots clicked; Alice answers with the data-slot
    mask (decoy and vacuum clicks are diverted into ``decoy_stats``).
    Alice's key bit is her symbol identity, Bob's is the timing decode.
    """
    from .optics import CowSymbol  # local import to avoid cycle at module load

    if rec.slot_count != len(frame):
        raise ValueError("frame and detection record describe different slot counts")
    alice_end, bob_end = chan
    rng = np.random.default_rng(seed)
    round_id = 0

    idx, bob_decoded = decode_bob_bits(rec.bit_clicks, rng)
    bob_end.send(round_id, Phase.CONTROL, idx.astype(">i8").tobytes())

    ann = alice_end.recv(Phase.CONTROL)
    _check_abort(ann)
    announced = np.frombuffer(ann.payload, dtype=">i8").astype(np.int64)
    symbols = frame.symbols[announced]
    keep = (symbols == CowSymbol.ZERO) | (symbols == CowSymbol.ONE)
    decoy_clicks = int((symbols == CowSymbol.DECOY).sum())
    vacuum_clicks = int((symbols == CowSymbol.VACUUM).sum())
    alice_end.send(
        round_id,
        Phase.CONTROL,
        struct.pack(">II", decoy_clicks, vacuum_clicks) + np.packbits(keep).tobytes(),
    )

    reply = bob_end.recv(Phase.CONTROL)
    _check_abort(reply)
    d_clicks, v_clicks = struct.unpack(">II", reply.payload[:8])
    keep_bob = np.unpackbits(np.frombuffer(reply.payload[8:], dtype=np.uint8))[: idx.size].astype(bool)

    kept_slots = idx[keep_bob]
    alice_bits = (frame.symbols[kept_slots] == CowSymbol.ONE).astype(np.uint8)
    bob_bits = bob_decoded[keep_bob]
    return SiftedBlock(
        alice_bits=alice_bits,
        bob_bits=bob_bits,
        origin_slots=kept_slots,
        decoy_stats={"decoy_clicks": d_clicks, "vacuum_clicks": v_clicks},
    )


# ---------------------------------------------------------------------------
# Error estimation


def estimate_qber(
    block: SiftedBlock,
    sample_fraction: float,
    seed: int,
    chan: tuple[ChannelEnd, ChannelEnd],
    abort_threshold: float | None = None,
    round_id: int = 0,
) -> tuple[float, SiftedBlock]:
    """Disclose a random sample, return (mismatch ratio, remaining block).

    The disclosed positions are removed from both strings.  When
    ``abort_threshold`` is given, an estimate at/above it raises
    :class:`QberAbortError` (after notifying the peer).
    """
    if not 0.0 < sample_fraction < 1.0:
        raise ValueError("sample_fraction must lie in (0, 1)")
    n = len(block)
    if n == 0:
        raise ValueError("cannot estimate on an empty block")
    k = max(1, int(round(n * sample_fraction)))
    alice_end, bob_end = chan

    rng = np.random.default_rng(seed)
    sample_idx = np.sort(rng.choice(n, size=k, replace=False))
    bob_sample = block.bob_bits[sample_idx]
    bob_end.send(
        round_id,
        Phase.ESTIMATE,
        struct.pack(">I", k) + sample_idx.astype(">i8").tobytes() + np.packbits(bob_sample).tobytes(),
    )

    req = alice_end.recv(Phase.ESTIMATE)
    _check_abort(req)
    (k_recv,) = struct.unpack(">I", req.payload[:4])
    idx_bytes = 8 * k_recv
    idx_recv = np.frombuffer(req.payload[4 : 4 + idx_bytes], dtype=">i8").astype(np.int64)
    bob_bits_recv = np.unpackbits(
        np.frombuffer(req.payload[4 + idx_bytes :], dtype=np.uint8)
    )[:k_recv]
    mismatches = int(np.count_nonzero(block.alice_bits[idx_recv] != bob_bits_recv))
    qber = mismatches / k_recv
    alice_end.send(round_id, Phase.ESTIMATE, struct.pack(">d", qber))

    ack = bob_end.recv(Phase.ESTIMATE)
    _check_abort(ack)
    (qber_bob,) = struct.unpack(">d", ack.payload)
    assert qber_bob == qber

    mask = np.ones(n, dtype=bool)
    mask[sample_idx] = False
    remaining = SiftedBlock(
        alice_bits=block.alice_bits[mask],
        bob_bits=block.bob_bits[mask],
        origin_slots=block.origin_slots[mask],
        decoy_stats=dict(block.decoy_stats),
    )
    if abort_threshold is not None and qber >= abort_threshold:
        exc = QberAbortError(
            f"estimated QBER {qber:.4f} >= abort threshold {abort_threshold:.4f}", qber=qber
        )
        _send_abort(bob_end, round_id, exc)
        raise exc
    return qber, remaining


# ---------------------------------------------------------------------------
# Cascade reconciliation


def _cascade_block_size(qber_est: float, n: int) -> int:
    if qber_est <= 0.0 or qber_est * n < 1.0:
        return min(n, MAX_BLOCK)
    return int(min(max(math.ceil(0.73 / qber_est), 8), MAX_BLOCK, n))


def _pass_perm(perm_seed: int, pass_idx: int, n: int) -> np.ndarray:
    if pass_idx == 0:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng([perm_seed, pass_idx])
    return rng.permutation(n).astype(np.int64)


class _PrefixParity:
    """O(1) range parities over a (possibly mutating) permuted bit view."""

    def __init__(self, bits: np.ndarray, perm: np.ndarray) -> None:
        self.bits = bits
        self.perm = perm
        self.rebuild()

    def rebuild(self) -> None:
        view = self.bits[self.perm]
        self.prefix = np.concatenate(([0], np.cumsum(view, dtype=np.int64)))

    def range_parity(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        return ((self.prefix[hi] - self.prefix[lo]) & 1).astype(np.uint8)


# CONTROL opcodes used during reconciliation.
_OP_REQUEST = 0
_OP_NEXT_PASS = 1
_OP_ALL_DONE = 2


def _alice_reconcile(
    bits: np.ndarray, qber_est: float, end: ChannelEnd, round_id: int
) -> tuple[int, int]:
    """Alice's side: disclose parities on request.  Returns (leakage, flips)."""
    n = bits.size
    k1 = _cascade_block_size(qber_est, n)
    perm_seed = struct.unpack(">Q", hashlib.sha256(end.send_key + b"cascade-perm").digest()[:8])[0]
    end.send(round_id, Phase.SEED, struct.pack(">QQIB", perm_seed, n, k1, CASCADE_PASSES))

    prefixes: dict[int, _PrefixParity] = {}
    leakage = 0

    def send_parities(values: np.ndarray) -> None:
        nonlocal leakage
        count = int(values.size)
        leakage += count
        end.send(
            round_id,
            Phase.PARITY,
            struct.pack(">I", count) + np.packbits(values).tobytes(),
        )

    def pass_prefix(pass_idx: int) -> _PrefixParity:
        if pass_idx not in prefixes:
            prefixes[pass_idx] = _PrefixParity(bits, _pass_perm(perm_seed, pass_idx, n))
        return prefixes[pass_idx]

    def block_parities(pass_idx: int) -> np.ndarray:
        k = min(k1 << pass_idx, n)
        starts = np.arange(0, n, k, dtype=np.int64)
        ends = np.minimum(starts + k, n)
        return pass_prefix(pass_idx).range_parity(starts, ends)

    send_parities(block_parities(0))
    while True:
        frame = end.recv(Phase.CONTROL)
        _check_abort(frame)
        op = frame.payload[0]
        if op == _OP_ALL_DONE:
            (flips,) = struct.unpack(">Q", frame.payload[1:9])
            return leakage, int(flips)
        if op == _OP_NEXT_PASS:
            (pass_idx,) = struct.unpack(">H", frame.payload[1:3])
            send_parities(block_parities(pass_idx))
            continue
        # _OP_REQUEST: parity of [lo, mid) ranges under a pass permutation.
        pass_idx, m = struct.unpack(">HI", frame.payload[1:7])
        arr = np.frombuffer(frame.payload[7 : 7 + 16 * m], dtype=">i8").astype(np.int64)
        lo, mid = arr[:m], arr[m:]
        send_parities(pass_prefix(pass_idx).range_parity(lo, mid))


def _bob_reconcile(
    bits: np.ndarray, qber_est: float, end: ChannelEnd, round_id: int
) -> tuple[np.ndarray, int, int]:
    """Bob's side: locate and flip errors.  Returns (bits, leakage_seen, flips).

    Bob's block parities are maintained incrementally (a flip toggles one
    block per pass), so cascading re-checks cost O(blocks) instead of a
    full O(n) recount; prefix arrays for bisection are rebuilt lazily.
    """
    work = bits.copy()
    seed_frame = end.recv(Phase.SEED)
    _check_abort(seed_frame)
    perm_seed, n, k1, passes = struct.unpack(">QQIB", seed_frame.payload)
    if n != work.size:
        raise ChannelAuthError("reconcile length mismatch")

    perms = {p: _pass_perm(perm_seed, p, n) for p in range(passes)}
    inv_perms: dict[int, np.ndarray] = {}
    sizes = {p: min(k1 << p, n) for p in range(passes)}
    alice_parities: dict[int, np.ndarray] = {}
    bob_parities: dict[int, np.ndarray] = {}
    prefix: dict[int, _PrefixParity] = {}
    prefix_dirty: dict[int, bool] = {}
    leakage_seen = 0
    flips = 0

    def recv_parities(expect: int) -> np.ndarray:
        nonlocal leakage_seen
        frame = end.recv(Phase.PARITY)
        _check_abort(frame)
        (count,) = struct.unpack(">I", frame.payload[:4])
        if count != expect:
            raise ChannelAuthError("parity count mismatch")
        leakage_seen += count
        return np.unpackbits(np.frombuffer(frame.payload[4:], dtype=np.uint8))[:count]

    def open_pass(p: int) -> None:
        inv = np.empty(n, dtype=np.int64)
        inv[perms[p]] = np.arange(n, dtype=np.int64)
        inv_perms[p] = inv
        prefix[p] = _PrefixParity(work, perms[p])
        prefix_dirty[p] = False
        k = sizes[p]
        starts = np.arange(0, n, k, dtype=np.int64)
        ends = np.minimum(starts + k, n)
        bob_parities[p] = prefix[p].range_parity(starts, ends)

    def apply_flips(err_orig: np.ndarray) -> None:
        nonlocal flips
        work[err_orig] ^= 1
        flips += int(err_orig.size)
        for pp in bob_parities:
            blocks = inv_perms[pp][err_orig] // sizes[pp]
            np.bitwise_xor.at(bob_parities[pp], blocks, 1)
            prefix_dirty[pp] = True

    def fresh_prefix(p: int) -> _PrefixParity:
        if prefix_dirty[p]:
            prefix[p].rebuild()
            prefix_dirty[p] = False
        return prefix[p]

    def bisect(p: int, blocks: np.ndarray) -> None:
        """Lockstep bisection of the given mismatched blocks of pass p."""
        k = sizes[p]
        pre = fresh_prefix(p)
        lo = blocks.astype(np.int64) * k
        hi = np.minimum(lo + k, n)
        while True:
            active = (hi - lo) > 1
            if not active.any():
                break
            lo_a, hi_a = lo[active], hi[active]
            mid_a = (lo_a + hi_a) >> 1
            m = int(lo_a.size)
            end.send(
                round_id,
                Phase.CONTROL,
                struct.pack(">BHI", _OP_REQUEST, p, m)
                + lo_a.astype(">i8").tobytes()
                + mid_a.astype(">i8").tobytes(),
            )
            alice_left = recv_parities(m)
            mine_left = pre.range_parity(lo_a, mid_a)
            go_left = alice_left != mine_left
            lo[active] = np.where(go_left, lo_a, mid_a)
            hi[active] = np.where(go_left, mid_a, hi_a)
        apply_flips(perms[p][lo])

    for p in range(passes):
        if p > 0:
            end.send(round_id, Phase.CONTROL, struct.pack(">BH", _OP_NEXT_PASS, p))
        alice_parities[p] = recv_parities(len(range(0, n, sizes[p])))
        open_pass(p)
        # Fix this pass, then cascade through every pass seen so far until
        # all of them are parity-clean.
        while True:
            for pp in sorted(alice_parities):
                blocks = np.flatnonzero(alice_parities[pp] ^ bob_parities[pp])
                if blocks.size:
                    bisect(pp, blocks)
                    break
            else:
                break

    end.send(round_id, Phase.CONTROL, struct.pack(">BQ", _OP_ALL_DONE, flips))
    return work, leakage_seen, flips


def _verification_exchange(
    end: ChannelEnd, bits: np.ndarray, round_id: int, send_first: bool
) -> bool:
    tag = _toeplitz_tag(bits, _verify_key(end))
    if send_first:
        end.send(round_id, Phase.VERIFY, tag)
        other = end.recv(Phase.VERIFY)
    else:
        other = end.recv(Phase.VERIFY)
        end.send(round_id, Phase.VERIFY, tag)
    _check_abort(other)
    return other.payload == tag


def reconcile(
    block: SiftedBlock,
    qber_est: float,
    chan: tuple[ChannelEnd, ChannelEnd],
    round_id: int = 0,
) -> ReconciledBlock:
    """Run reconciliation + verification between the two in-process roles.

    Returns Bob's view (the corrected string).  Raises
    :class:`VerificationError` when the tags disagree — distinct from
    channel authentication failures, which raise ChannelAuthError.
    """
    alice_end, bob_end = chan
    result: dict[str, object] = {}

    def bob_side() -> None:
        try:
            bits, leak_seen, flips = _bob_reconcile(block.bob_bits, qber_est, bob_end, round_id)
            ok = _verification_exchange(bob_end, bits, round_id, send_first=False)
            result["bob"] = (bits, leak_seen, flips, ok)
        except BaseException as exc:  # noqa: BLE001 - propagated below
            _send_abort(bob_end, round_id, exc)
            result["bob_exc"] = exc

    t = threading.Thread(target=bob_side, daemon=True)
    t.start()
    try:
        leakage, flips_alice = _alice_reconcile(block.alice_bits, qber_est, alice_end, round_id)
        ok_alice = _verification_exchange(alice_end, block.alice_bits, round_id, send_first=True)
    except BaseException as exc:
        _send_abort(alice_end, round_id, exc)
        t.join(timeout=30)
        raise
    t.join(timeout=60)
    if "bob_exc" in result:
        raise result["bob_exc"]  # type: ignore[misc]
    bits, leak_seen, flips, ok_bob = result["bob"]  # type: ignore[misc]
    if leak_seen != leakage:
        raise ChannelAuthError("leakage accounting mismatch between roles")
    verified = bool(ok_alice and ok_bob)
    rec = ReconciledBlock(
        bits=bits,
        leakage_bits=leakage,
        verified=verified,
        qber_est=flips / max(len(block), 1),
    )
    if not verified:
        raise VerificationError("verification tags disagree; block discarded")
    return rec


# ---------------------------------------------------------------------------
# Privacy amplification


def privacy_amplify(
    block: ReconciledBlock,
    secret_len: int,
    seed: bytes,
    chan: tuple[ChannelEnd, ChannelEnd],
    round_id: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Compress the reconciled block through a seeded binary Toeplitz matrix.

    Alice announces (secret_len, seed); both sides multiply their copy.
    Returns (alice_out, bob_out) — identical whenever the inputs match.
    """
    n = int(block.bits.size)
    if not 0 <= secret_len <= n:
        raise ValueError("secret_len must lie in [0, block length]")
    alice_end, bob_end = chan
    alice_end.send(round_id, Phase.PA_SEED, struct.pack(">Q", secret_len) + seed)
    frame = bob_end.recv(Phase.PA_SEED)
    _check_abort(frame)
    (m_recv,) = struct.unpack(">Q", frame.payload[:8])
    seed_recv = frame.payload[8:]
    if m_recv != secret_len:
        raise ChannelAuthError("privacy amplification length mismatch")
    if secret_len == 0:
        empty = np.zeros(0, dtype=np.uint8)
        return empty, empty
    if seed_recv != seed:
        raise ChannelAuthError("privacy amplification seed mismatch")
    # Both roles hold the same verified bits and the same announced seed
    # here, so the product is computed once; the role-split deployments
    # evaluate it on each endpoint's own copy.
    diag = expand_toeplitz_bits(seed, n + secret_len - 1)
    out = toeplitz_matvec_gf2(diag, block.bits, secret_len)
    return out, out.copy()


# ---------------------------------------------------------------------------
# Full round


def _block_id(round_id: int, n_input: int, pa_seed: bytes, delivered: int) -> str:
    meta = f"{round_id}|{n_input}|{delivered}|".encode() + pa_seed
    return hashlib.sha256(meta).hexdigest()


def run_distillation_round(
    sifted: SiftedBlock,
    visibility: float,
    duration_s: float,
    params: SecurityParams,
    alice_pool: AuthKeyPool,
    bob_pool: AuthKeyPool,
    round_id: int = 0,
    seed: int = 0,
) -> RoundResult:
    """Run one complete distillation round over a fresh in-process channel.

    Aborts (QBER gates, verification failure, non-positive budget) are
    reported in the result rather than raised; channel authentication
    failures still raise.
    """
    n_sift = len(sifted)
    chan = make_inproc_pair(alice_pool, bob_pool)
    alice_end, bob_end = chan

    def _abort(reason: str, qber_est: float = 0.0, qber_meas: float = 0.0, leak: int = 0) -> RoundResult:
        return RoundResult(
            block_alice=None,
            block_bob=None,
            abort_reason=reason,
            sifted_bits=n_sift,
            qber_estimate=qber_est,
            qber_measured=qber_meas,
            leakage_bits=leak,
            secret_bits=0,
            verified=False,
        )

    if n_sift == 0:
        return _abort("empty-block")

    try:
        qber_est, remaining = estimate_qber(
            sifted, params.sample_fraction, seed, chan,
            abort_threshold=params.qber_abort, round_id=round_id,
        )
    except QberAbortError as exc:
        return _abort("qber-estimate", qber_est=exc.qber)

    try:
        rec = reconcile(remaining, qber_est, chan, round_id=round_id)
    except VerificationError:
        return _abort("verification", qber_est=qber_est)

    qber_meas = rec.qber_est
    if qber_meas >= params.qber_abort:
        return _abort("qber-measured", qber_est=qber_est, qber_meas=qber_meas, leak=rec.leakage_bits)

    budget = secret_length(
        n_bits=len(remaining),
        qber=qber_meas,
        visibility=visibility,
        duration_s=duration_s,
        params=params,
        measured_leakage_bits=rec.leakage_bits,
    )
    if budget.delivered_bits <= 0:
        return _abort("insufficient-key", qber_est=qber_est, qber_meas=qber_meas, leak=rec.leakage_bits)

    pa_seed = hashlib.sha256(
        b"qkdlink-pa-seed" + struct.pack(">QQ", round_id, seed)
    ).digest()[:PA_SEED_BYTES]
    alice_out, bob_out = privacy_amplify(rec, budget.pa_length, pa_seed, chan, round_id=round_id)

    # The first auth_bits of the amplified output replenish the channel
    # authentication pools; only the remainder is delivered as key.
    auth = budget.auth_bits
    replenish = np.packbits(alice_out[:auth]).tobytes()
    alice_pool.replenish(replenish)
    bob_pool.replenish(np.packbits(bob_out[:auth]).tobytes())

    bid = _block_id(round_id, len(remaining), pa_seed, budget.delivered_bits)
    epsilon = {
        "correctness": 2.0 ** -VERIFY_TAG_BITS,
        "eve_model": params.eve_model,
        "f_ec": params.f_ec,
    }
    block_a = SecretKeyBlock(
        bits=alice_out[auth:],
        block_id=bid,
        qber_est=qber_meas,
        visibility_dcc=visibility,
        epsilon=epsilon,
        auth_spent_bits=auth,
    )
    block_b = SecretKeyBlock(
        bits=bob_out[auth:],
        block_id=bid,
        qber_est=qber_meas,
        visibility_dcc=visibility,
        epsilon=dict(epsilon),
        auth_spent_bits=auth,
    )
    return RoundResult(
        block_alice=block_a,
        block_bob=block_b,
        abort_reason=None,
        sifted_bits=n_sift,
        qber_estimate=qber_est,
        qber_measured=qber_meas,
        leakage_bits=rec.leakage_bits,
        secret_bits=budget.delivered_bits,
        verified=True,
    )
