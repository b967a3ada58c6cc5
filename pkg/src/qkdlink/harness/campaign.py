"""Stability campaigns and attenuation sweeps over the simulated link.

Each monitoring interval draws its detection statistics from the
aggregate sampler (:func:`qkdlink.optics.sample_interval_counts`),
synthesizes the corresponding sifted block, and runs a real distillation
round over the authenticated channel.  Intervals are seeded
independently from ``(seed, stream, index)`` — including their
authentication pools — so results are reproducible and independent of
execution order.

Wall-clock time never enters: interval timestamps are simulated
seconds, and a ten-day field campaign is represented by however many
intervals the configuration asks for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import optics
from ..channel import AuthKeyPool
from ..distillation import RoundResult, SiftedBlock, run_distillation_round
from ..security import SecurityParams, skr_predict
from .config import LinkConfig, config_digest

__all__ = [
    "LinkMetrics",
    "CampaignSummary",
    "SweepRow",
    "synthesize_sifted_block",
    "run_interval",
    "run_stability",
    "run_attenuation_sweep",
]


@dataclass
class LinkMetrics:
    """One monitoring interval's headline numbers."""

    timestamp: float  # simulated seconds since campaign start
    skr_bps: float
    qber: float
    visibility_dcc: float
    detections_total: int

    def __post_init__(self) -> None:
        for name in ("timestamp", "skr_bps", "qber", "visibility_dcc"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.qber <= 1.0 or not 0.0 <= self.visibility_dcc <= 1.0:
            raise ValueError("qber and visibility must lie in [0, 1]")
        if self.skr_bps < 0.0:
            raise ValueError("skr_bps must be >= 0")


@dataclass
class CampaignSummary:
    mean: dict[str, float]
    std: dict[str, float]
    n_intervals: int
    interval_s: float
    duration_s: float
    config_digest: str
    aborted_intervals: int

    @classmethod
    def from_metrics(
        cls, metrics: list[LinkMetrics], interval_s: float, digest: str, aborted: int
    ) -> "CampaignSummary":
        if len(metrics) < 2:
            raise ValueError("summary needs at least 2 samples")
        fields = {
            "skr_bps": [m.skr_bps for m in metrics],
            "qber": [m.qber for m in metrics],
            "visibility_dcc": [m.visibility_dcc for m in metrics],
            "detections_per_s": [m.detections_total / interval_s for m in metrics],
        }
        return cls(
            mean={k: float(np.mean(v)) for k, v in fields.items()},
            std={k: float(np.std(v)) for k, v in fields.items()},
            n_intervals=len(metrics),
            interval_s=interval_s,
            duration_s=len(metrics) * interval_s,
            config_digest=digest,
            aborted_intervals=aborted,
        )


@dataclass
class SweepRow:
    added_db: float
    skr_bps_mean: float
    skr_bps_std: float
    qber_mean: float
    qber_std: float
    skr_bps_predicted: float
    aborted_fraction: float
    n_intervals: int


def synthesize_sifted_block(
    counts: optics.IntervalCounts, rng: np.random.Generator
) -> SiftedBlock:
    """Build the sifted bit pair implied by the interval's click counts.

    Alice's data bits are uniform; Bob differs on wrong-timing clicks and
    on half of the double clicks (fair-coin resolution), at uniformly
    random positions.
    """
    n = counts.sifted_count
    if n == 0:
        return SiftedBlock(
            alice_bits=np.zeros(0, dtype=np.uint8),
            bob_bits=np.zeros(0, dtype=np.uint8),
            origin_slots=np.zeros(0, dtype=np.int64),
        )
    alice = rng.integers(0, 2, n, dtype=np.uint8)
    n_err = counts.data_wrong + int(rng.binomial(counts.data_double, 0.5))
    bob = alice.copy()
    if n_err:
        err_pos = rng.choice(n, size=min(n_err, n), replace=False)
        bob[err_pos] ^= 1
    return SiftedBlock(
        alice_bits=alice,
        bob_bits=bob,
        origin_slots=np.arange(n, dtype=np.int64),
        decoy_stats={
            "decoy_clicks": counts.decoy_single + 2 * counts.decoy_double,
            "vacuum_clicks": counts.vacuum_single + 2 * counts.vacuum_double,
        },
    )


def _interval_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def run_interval(
    cfg: LinkConfig,
    params: SecurityParams,
    added_loss_db: float | None,
    interval_s: float,
    seed: int,
    stream: int,
    index: int,
    jitter_db: float = 0.0,
) -> tuple[LinkMetrics, RoundResult]:
    """Simulate one monitoring interval and distill it."""
    rng = _interval_rng(seed, stream, index)
    added = cfg.raw["physics"]["added_loss_db"] if added_loss_db is None else added_loss_db
    if jitter_db > 0.0:
        added = max(0.0, added + jitter_db * float(rng.standard_normal()))
    ch = cfg.channel(added_loss_db=added)
    src, det, probs = cfg.source(), cfg.detector(), cfg.probs()

    counts = optics.sample_interval_counts(ch, src, det, probs, interval_s, rng)
    visibility = optics.visibility_dcc(
        counts.mon_constructive, counts.mon_destructive, counts.dark_gate_expectation
    )
    block = synthesize_sifted_block(counts, rng)

    # Fresh per-interval pools keep intervals order-independent; the
    # bootstrap stands in for key material carried over from prior rounds.
    psk = cfg.preshared_secret() + index.to_bytes(8, "big") + stream.to_bytes(8, "big")
    pool_a, pool_b = AuthKeyPool(psk), AuthKeyPool(psk)
    result = run_distillation_round(
        block,
        visibility=visibility,
        duration_s=interval_s,
        params=params,
        alice_pool=pool_a,
        bob_pool=pool_b,
        round_id=index,
        seed=int(rng.integers(0, 2**62)),
    )
    metrics = LinkMetrics(
        timestamp=index * interval_s,
        skr_bps=result.secret_bits / interval_s,
        qber=result.qber_measured if result.qber_measured > 0 or not result.aborted else result.qber_estimate,
        visibility_dcc=visibility,
        detections_total=counts.detections_total,
    )
    return metrics, result


def run_stability(
    cfg: LinkConfig,
    n_intervals: int | None = None,
    interval_s: float | None = None,
    seed: int | None = None,
) -> tuple[list[LinkMetrics], CampaignSummary]:
    """Repeated simulated distillation rounds at the configured loss."""
    n = n_intervals if n_intervals is not None else int(cfg.raw["harness"]["stability_intervals"])
    dt = interval_s if interval_s is not None else float(cfg.raw["harness"]["interval_s"])
    sd = seed if seed is not None else cfg.seed
    params = cfg.security()
    metrics: list[LinkMetrics] = []
    aborted = 0
    for i in range(n):
        m, result = run_interval(cfg, params, None, dt, sd, stream=0, index=i)
        metrics.append(m)
        aborted += int(result.aborted)
    summary = CampaignSummary.from_metrics(metrics, dt, config_digest(cfg), aborted)
    return metrics, summary


def run_attenuation_sweep(
    cfg: LinkConfig,
    added_db_list: list[float] | None = None,
    intervals_per_point: int | None = None,
    interval_s: float | None = None,
    seed: int | None = None,
) -> list[SweepRow]:
    """Sweep added attenuation; reports simulated and analytic SKR per point.

    Attenuator insertion-loss uncertainty is injected as per-interval
    input jitter with the configured sigma for each point.
    """
    added_list = (
        added_db_list
        if added_db_list is not None
        else [float(x) for x in cfg.raw["harness"]["sweep_added_db"]]
    )
    n = (
        intervals_per_point
        if intervals_per_point is not None
        else int(cfg.raw["harness"]["sweep_intervals_per_point"])
    )
    dt = interval_s if interval_s is not None else float(cfg.raw["harness"]["interval_s"])
    sd = seed if seed is not None else cfg.seed
    params = cfg.security()
    rows: list[SweepRow] = []
    for point_idx, added in enumerate(added_list):
        jitter = cfg.jitter_for(added)
        skrs, qbers, aborts = [], [], 0
        for i in range(n):
            m, result = run_interval(
                cfg, params, added, dt, sd, stream=1000 + point_idx, index=i, jitter_db=jitter
            )
            skrs.append(m.skr_bps)
            qbers.append(m.qber)
            aborts += int(result.aborted)
        predicted = skr_predict(
            cfg.channel(added_loss_db=added), cfg.source(), cfg.detector(), cfg.probs(),
            params, round_duration_s=dt,
        )
        rows.append(
            SweepRow(
                added_db=added,
                skr_bps_mean=float(np.mean(skrs)),
                skr_bps_std=float(np.std(skrs)),
                qber_mean=float(np.mean(qbers)),
                qber_std=float(np.std(qbers)),
                skr_bps_predicted=predicted,
                aborted_fraction=aborts / n,
                n_intervals=n,
            )
        )
    return rows
