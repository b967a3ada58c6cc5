"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The heavyweight
campaign fixtures are session-scoped and shared between criteria; every
tolerance is pinned here, not configurable.
"""

import base64
import hashlib
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient

from qkdlink import distillation as dist
from qkdlink.channel import AuthKeyPool, make_inproc_pair
from qkdlink.distillation import (
    QberAbortError,
    VerificationError,
    estimate_qber,
    expand_toeplitz_bits,
    reconcile,
    toeplitz_matvec_gf2,
)
from qkdlink.harness.calibrate import calibrate
from qkdlink.harness.campaign import run_attenuation_sweep, run_stability
from qkdlink.harness.config import LinkConfig, config_digest
from qkdlink.harness.outputs import metrics_to_csv, sweep_to_csv
from qkdlink.kms import (
    InsufficientKeysError,
    KeyStore,
    KmeConfig,
    KmeService,
    LoopbackPeerLink,
)
from qkdlink.kms.api import make_app
from qkdlink.qvpn import EtsiClient, Tunnel, TunnelConfig
from qkdlink.security import SecurityParams, binary_entropy, secret_fraction

STABILITY_INTERVALS = 1000
SWEEP_BANDS = {3.0: 2303.0, 5.0: 1730.0, 7.0: 1473.0, 8.0: 1016.0, 10.0: 746.0}


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{criterion}] {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def calibrated_cfg() -> LinkConfig:
    cfg = LinkConfig()
    result = calibrate(cfg.raw["calibration"]["targets"], seed=cfg.seed, cfg=cfg)
    assert result.feasible
    return result.apply(cfg)


@pytest.fixture(scope="session")
def stability_run(calibrated_cfg):
    t0 = time.perf_counter()
    metrics, summary = run_stability(calibrated_cfg, n_intervals=STABILITY_INTERVALS)
    elapsed = time.perf_counter() - t0
    return metrics, summary, elapsed


@pytest.fixture(scope="session")
def sweep_run(calibrated_cfg):
    return run_attenuation_sweep(calibrated_cfg)


class TestCriterion1BaselineReproduction:
    def test_calibrated_stability_means(self, stability_run):
        metrics, summary, elapsed = stability_run
        skr = summary.mean["skr_bps"]
        qber = summary.mean["qber"]
        vis = summary.mean["visibility_dcc"]
        det = summary.mean["detections_per_s"]
        checks = [
            abs(skr - 2392.0) / 2392.0 <= 0.10,
            abs(qber - 0.019) <= 0.005,
            abs(vis - 0.9912) <= 0.003,
            abs(det - 18199.0) / 18199.0 <= 0.10,
            elapsed <= 600.0,
        ]
        report(
            "criterion 1",
            all(checks),
            f"{STABILITY_INTERVALS} intervals in {elapsed:.0f}s: "
            f"SKR={skr:.1f} bps (target 2392±10%), QBER={qber*100:.2f}% (1.9±0.5pp), "
            f"visibility={vis*100:.2f}% (99.12±0.3pp), detections={det:.0f}/s (18199±10%)",
        )
        assert all(checks)


class TestCriterion2AttenuationSweep:
    def test_sweep_bands_monotone_cutoff_saturation(self, sweep_run):
        rows = {r.added_db: r for r in sweep_run}
        in_band = {
            added: 0.65 * target <= rows[added].skr_bps_mean <= 1.35 * target
            for added, target in SWEEP_BANDS.items()
        }
        means = [r.skr_bps_mean for r in sweep_run]
        monotone = all(a >= b - 1e-9 for a, b in zip(means, means[1:]))
        zero_at_12 = rows[12.0].skr_bps_mean == 0.0
        saturation = rows[3.0].skr_bps_mean >= 0.9 * rows[0.0].skr_bps_mean
        passed = all(in_band.values()) and monotone and zero_at_12 and saturation
        detail = ", ".join(
            f"+{a:g}dB={rows[a].skr_bps_mean:.0f}bps({'ok' if ok else 'OUT'})"
            for a, ok in in_band.items()
        )
        report(
            "criterion 2",
            passed,
            f"{detail}; monotone={monotone}, zero@+12dB={zero_at_12}, "
            f"SKR(+3)>=0.9*SKR(0)={saturation}",
        )
        assert all(in_band.values())
        assert monotone
        assert zero_at_12
        assert saturation


class TestCriterion3QberDistribution:
    def test_qber_samples(self, stability_run):
        metrics, _, _ = stability_run
        qs = np.array([m.qber for m in metrics])
        frac_below = float((qs < 0.029).mean())
        q_max = float(qs.max())
        passed = frac_below >= 0.97 and q_max < 0.06
        report(
            "criterion 3",
            passed,
            f"{frac_below*100:.1f}% of samples < 2.9% (need >=97%), max={q_max*100:.2f}% (< 6%)",
        )
        assert passed


class TestCriterion4DistillationCorrectness:
    N_ROUNDS = 10_000
    BLOCK_BITS = 1024

    def test_no_verified_unequal_and_abort_totality(self):
        rng = np.random.default_rng(41)
        params = SecurityParams(pp_cap_bps=1e9, f_ec=1.2)
        flip_probs = [0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06]
        verified_unequal = 0
        emitted_above_threshold = 0
        leakage_mismatches = 0
        verification_failures = 0
        emitted = 0

        psk = b"acceptance-criterion-4"
        for i in range(self.N_ROUNDS):
            p = flip_probs[i % len(flip_probs)]
            n = self.BLOCK_BITS
            alice = rng.integers(0, 2, n, dtype=np.uint8)
            bob = alice.copy()
            n_err = int(rng.binomial(n, p))
            if n_err:
                bob[rng.choice(n, size=n_err, replace=False)] ^= 1
            block = dist.SiftedBlock(alice, bob, np.arange(n))

            pool_a = AuthKeyPool(psk + i.to_bytes(4, "big"), bootstrap_keys=4)
            pool_b = AuthKeyPool(psk + i.to_bytes(4, "big"), bootstrap_keys=4)
            chan = make_inproc_pair(pool_a, pool_b)
            alice_end, bob_end = chan
            try:
                qber_est, remaining = estimate_qber(
                    block, params.sample_fraction, seed=i, chan=chan,
                    abort_threshold=params.qber_abort,
                )
            except QberAbortError:
                continue  # aborted before any disclosure of key material
            realized = float(np.count_nonzero(remaining.alice_bits != remaining.bob_bits)) / len(remaining)
            try:
                rec = reconcile(remaining, qber_est, chan)
            except VerificationError:
                verification_failures += 1
                continue
            if not np.array_equal(rec.bits, remaining.alice_bits):
                verified_unequal += 1
            if rec.leakage_bits != alice_end.disclosed_parity_bits(direction="sent"):
                leakage_mismatches += 1
            if rec.qber_est >= params.qber_abort:
                continue  # gate before emission
            emitted += 1
            if realized >= params.qber_abort:
                emitted_above_threshold += 1

        passed = (
            verified_unequal == 0 and emitted_above_threshold == 0 and leakage_mismatches == 0
        )
        report(
            "criterion 4",
            passed,
            f"{self.N_ROUNDS} rounds (emitted {emitted}, tag-rejected {verification_failures}): "
            f"verified-with-unequal-keys={verified_unequal}, "
            f"emissions-at/above-abort-threshold={emitted_above_threshold}, "
            f"leakage-audit-mismatches={leakage_mismatches}",
        )
        assert passed


class TestCriterion5PrivacyAmplificationOracle:
    def test_bruteforce_toeplitz_agreement(self):
        rng = np.random.default_rng(55)
        failures = 0
        for case in range(200):
            n = int(rng.integers(1, 33))
            m = int(rng.integers(1, 17))
            seed = rng.bytes(32)
            diag = expand_toeplitz_bits(seed, n + m - 1)
            x = rng.integers(0, 2, n, dtype=np.uint8)
            T = np.zeros((m, n), dtype=np.int64)
            for i in range(m):
                for j in range(n):
                    T[i, j] = diag[n - 1 + i - j]
            want = ((T @ x.astype(np.int64)) % 2).astype(np.uint8)
            got = toeplitz_matvec_gf2(diag, x, m)
            if not np.array_equal(want, got):
                failures += 1
        report("criterion 5", failures == 0, f"200 brute-force GF(2) cases, {failures} mismatches")
        assert failures == 0


class TestCriterion6SecurityAnchors:
    def test_anchors(self):
        checks = {
            "h(0.5)=1": binary_entropy(0.5) == 1.0,
            "h symmetric (1001-grid, <=1e-12)": all(
                abs(binary_entropy(float(x)) - binary_entropy(float(1 - x))) <= 1e-12
                for x in np.linspace(0.0, 1.0, 1001)
            ),
            "|1-2h(0.11)|<=1e-3": abs(1.0 - 2.0 * binary_entropy(0.11)) <= 1e-3,
            "secret_fraction(0,1)=1": secret_fraction(0.0, 1.0, SecurityParams()) == 1.0,
        }
        report("criterion 6", all(checks.values()), "; ".join(f"{k}:{v}" for k, v in checks.items()))
        assert all(checks.values())


class TestCriterion7KmsLinearizability:
    N_KEYS = 10_000
    N_CLIENTS = 64

    def test_concurrent_drain_exact_once(self):
        material = np.random.default_rng(71).integers(0, 2, 256 * self.N_KEYS, dtype=np.uint8)
        store_a = KeyStore(max_key_count=self.N_KEYS)
        store_b = KeyStore(max_key_count=self.N_KEYS)
        store_a.ingest("stress", material)
        store_b.ingest("stress", material)
        cfg = KmeConfig(max_key_count=self.N_KEYS)
        svc_b = KmeService(store_b, cfg)
        svc_a = KmeService(store_a, cfg, peer_link=LoopbackPeerLink(svc_b))

        issued: list[tuple[str, bytes]] = []
        lock = threading.Lock()

        def client():
            grabbed = []
            while True:
                try:
                    keys = svc_a.get_enc_keys("sae-b", number=4)
                except InsufficientKeysError:
                    break
                grabbed.extend((k["key_ID"], k["key"]) for k in keys)
            with lock:
                issued.extend(grabbed)

        with ThreadPoolExecutor(max_workers=self.N_CLIENTS) as pool:
            futures = [pool.submit(client) for _ in range(self.N_CLIENTS)]
            for f in futures:
                f.result()

        unique_ids = {k for k, _ in issued}
        conservation = store_a.bit_conservation()
        conserved = (
            conservation["ingested"]
            == conservation["available"] + conservation["reserved"] + conservation["issued"]
            + conservation["consumed"] + conservation["leftover"] + conservation["discarded"]
        )
        # Remaining stock is a multiple of 4 short of the drain, so drain
        # the tail with number=1 calls for an exact count.
        while True:
            try:
                keys = svc_a.get_enc_keys("sae-b", number=1)
            except InsufficientKeysError:
                break
            issued.extend((k["key_ID"], k["key"]) for k in keys)
        unique_ids = {k for k, _ in issued}

        # Byte-exact agreement between the two endpoint stores.
        agree = all(store_b.get(kid).material == kb for kid, kb in issued)
        exact_once = len(issued) == self.N_KEYS and len(unique_ids) == self.N_KEYS
        passed = exact_once and conserved and agree
        report(
            "criterion 7",
            passed,
            f"{self.N_CLIENTS} clients drained {len(issued)} keys "
            f"({len(unique_ids)} unique of {self.N_KEYS}); conservation={conserved}; "
            f"twin-store byte agreement={agree}",
        )
        assert passed


class TestCriterion8ApiConformance:
    def test_documented_shapes_and_errors(self):
        material = np.random.default_rng(81).integers(0, 2, 256 * 8, dtype=np.uint8)
        store_a, store_b = KeyStore(), KeyStore()
        store_a.ingest("blk", material)
        store_b.ingest("blk", material)
        cfg = KmeConfig()
        svc_b = KmeService(store_b, cfg)
        svc_a = KmeService(store_a, cfg, peer_link=LoopbackPeerLink(svc_b))
        client_a = TestClient(make_app(svc_a))
        client_b = TestClient(make_app(svc_b))
        auth_a = {"X-SAE-ID": "sae-a"}
        auth_b = {"X-SAE-ID": "sae-b"}

        status = client_a.get("/api/v1/keys/sae-b/status", headers=auth_a).json()
        shape_ok = {"source_KME_ID", "stored_key_count", "key_size"} <= set(status)

        enc = client_a.post(
            "/api/v1/keys/sae-b/enc_keys", json={"number": 2, "size": 256}, headers=auth_a
        ).json()
        keys_ok = set(enc) == {"keys"} and all(set(k) == {"key_ID", "key"} for k in enc["keys"])
        b64_ok = all(
            len(k["key"]) == 44 and len(base64.b64decode(k["key"])) == 32 for k in enc["keys"]
        )
        dec = client_b.post(
            "/api/v1/keys/sae-a/dec_keys",
            json={"key_IDs": [{"key_ID": k["key_ID"]} for k in enc["keys"]]},
            headers=auth_b,
        ).json()
        roundtrip_ok = {k["key_ID"]: k["key"] for k in dec["keys"]} == {
            k["key_ID"]: k["key"] for k in enc["keys"]
        }

        unknown = client_b.post(
            "/api/v1/keys/sae-a/dec_keys",
            json={"key_IDs": [{"key_ID": str(uuid.uuid4())}]},
            headers=auth_b,
        )
        unknown_ok = unknown.status_code == 404 and unknown.json()["code"] == "UNKNOWN_KEY_ID"
        oversize = client_a.post(
            "/api/v1/keys/sae-b/enc_keys", json={"number": 1, "size": 8192}, headers=auth_a
        )
        oversize_ok = oversize.status_code == 400 and oversize.json()["code"] == "OVERSIZE_REQUEST"

        passed = shape_ok and keys_ok and b64_ok and roundtrip_ok and unknown_ok and oversize_ok
        report(
            "criterion 8",
            passed,
            f"status-shape={shape_ok}, key-shape={keys_ok}, 44-char-base64={b64_ok}, "
            f"roundtrip={roundtrip_ok}, unknown-id={unknown_ok}, oversize={oversize_ok}",
        )
        assert passed


class TestCriterion9QvpnEndToEnd:
    def test_transfer_epochs_and_supply(self, calibrated_cfg, tmp_path):
        import socket

        from qkdlink.harness.campaign import run_interval

        # Feed both KMEs from the simulated link: distillation rounds from
        # the calibrated physics, ingested at both endpoints.
        store_a, store_b = KeyStore(), KeyStore()
        params = calibrated_cfg.security()
        skr_bps = 0.0
        for i in range(3):
            metrics, result = run_interval(calibrated_cfg, params, None, 10.0, 91, 9, i)
            assert result.abort_reason is None
            store_a.ingest(result.block_alice.block_id, result.block_alice.bits)
            store_b.ingest(result.block_bob.block_id, result.block_bob.bits)
            skr_bps = metrics.skr_bps
        cfg = KmeConfig()
        svc_b = KmeService(store_b, cfg)
        svc_a = KmeService(store_a, cfg, peer_link=LoopbackPeerLink(svc_b))
        kms_a = EtsiClient("http://kme-a", "sae-a", http=TestClient(make_app(svc_a)))
        kms_b = EtsiClient("http://kme-b", "sae-b", http=TestClient(make_app(svc_b)))

        s1, s2 = socket.socketpair()
        ti = Tunnel(
            TunnelConfig(role="initiator", sae_id="sae-a", peer_sae_id="sae-b",
                         refresh_interval_s=10.0),
            kms=kms_a, sock=s1,
        )
        tr = Tunnel(
            TunnelConfig(role="responder", sae_id="sae-b", peer_sae_id="sae-a",
                         refresh_interval_s=10.0),
            kms=kms_b, sock=s2,
        )
        payload = np.random.default_rng(92).integers(0, 256, 10 * 1024 * 1024, dtype=np.uint8).tobytes()
        src = tmp_path / "payload.bin"
        src.write_bytes(payload)
        received = {}
        try:
            errors = []
            responder = threading.Thread(
                target=lambda: (tr.establish(), received.update(rep=tr.receive_file(str(tmp_path / "out"), timeout_s=90)))
            )
            responder.start()
            ti.establish()
            t_start = time.monotonic()
            send_report = ti.send_file(str(src), timeout_s=90)
            responder.join(timeout=120)

            digest_ok = (
                send_report.digest
                == received["rep"].digest
                == hashlib.sha256(payload).hexdigest()
            )
            bitexact = (tmp_path / "out" / "payload.bin").read_bytes() == payload

            # Observe the rekey schedule over a 60 s window.
            while time.monotonic() - t_start < 62.0:
                time.sleep(0.5)
            epochs = [(e, t) for e, _, t in ti.epoch_log]
            window = [t for _, t in epochs if t <= t_start + 61.5]
            spacings = np.diff([t for _, t in epochs])
            seven_epochs = len(window) >= 7
            spacing_ok = bool(np.all(np.abs(spacings - 10.0) <= 1.0))
            no_pause = len(ti.pause_log) == 0

            supply_keys_per_s = skr_bps / 256.0
            demand_keys_per_s = 1.0 / 10.0
            supply_ok = supply_keys_per_s > 8.0 and supply_keys_per_s / demand_keys_per_s > 50.0

            passed = digest_ok and bitexact and seven_epochs and spacing_ok and no_pause and supply_ok
            report(
                "criterion 9",
                passed,
                f"10 MiB transfer bit-exact={bitexact and digest_ok}; epochs in 60s window="
                f"{len(window)} (need >=7), spacing 10±1s={spacing_ok}; no pause={no_pause}; "
                f"supply={supply_keys_per_s:.1f} keys/s vs demand {demand_keys_per_s} keys/s",
            )
            assert passed
        finally:
            ti.close()
            tr.close()


class TestCriterion10Determinism:
    def test_byte_identical_csv_artifacts(self, calibrated_cfg, stability_run, sweep_run):
        metrics, summary, _ = stability_run
        digest = config_digest(calibrated_cfg)
        seed = calibrated_cfg.seed

        # Re-run the full stability and sweep campaigns with the same seed
        # and config; every emitted CSV byte must match.
        metrics2, summary2 = run_stability(calibrated_cfg, n_intervals=STABILITY_INTERVALS)
        stability_identical = metrics_to_csv(metrics, digest, seed) == metrics_to_csv(
            metrics2, digest, seed
        )
        rows2 = run_attenuation_sweep(calibrated_cfg)
        sweep_identical = sweep_to_csv(sweep_run, digest, seed) == sweep_to_csv(rows2, digest, seed)

        passed = stability_identical and sweep_identical
        report(
            "criterion 10",
            passed,
            f"stability CSV byte-identical={stability_identical}, "
            f"sweep CSV byte-identical={sweep_identical}",
        )
        assert passed
