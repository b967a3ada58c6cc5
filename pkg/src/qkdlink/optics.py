"""Monte Carlo model of a COW-4 time-bin quantum channel.

Each clock slot holds two half-slot bins. The four symbols map onto
(early, late) bin occupations:

    ZERO   -> (pulse, empty)
    ONE    -> (empty, pulse)
    DECOY  -> (pulse, pulse)
    VACUUM -> (empty, empty)

Weak coherent pulses carry a mean photon number ``mu``; the intensity
modulator leaks a fraction ``extinction`` of that into nominally empty
bins.  The receiver splits the light between a bit detector (fraction
``1 - monitor_tap``) and a monitoring interferometer (``monitor_tap``).
All detectors are threshold detectors with Poissonian click statistics:

    p_click = 1 - (1 - dark_prob) * exp(-mu_eff)

The interferometer is modelled statistically rather than by field
amplitudes: every adjacent pair of nominally pulsed bins forms a
coherent pair whose light splits between the constructive and the
destructive output port as (1 + V)/2 and (1 - V)/2, where V is the
source interference visibility.

Two samplers share the same probability model:

* :func:`simulate_detection` draws an explicit per-bin record for a
  ``SymbolFrame`` (used for oracle tests and small demos);
* :func:`sample_interval_counts` draws only the sufficient statistics
  (pattern counts) and is what the campaign harness uses, because a
  single simulated second spans 1.25e9 slots.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CowSymbol",
    "SymbolFrame",
    "ChannelParams",
    "SourceParams",
    "DetectorParams",
    "DetectionRecord",
    "RateModel",
    "IntervalCounts",
    "DEFAULT_PROBS",
    "transmittance",
    "click_probability",
    "generate_frame",
    "simulate_detection",
    "expected_rates",
    "sample_interval_counts",
    "visibility_dcc",
    "VisibilityUndefinedError",
]

PROB_SUM_TOL = 1e-12


class CowSymbol(enum.IntEnum):
    """COW-4 symbol alphabet; values index probability vectors."""

    ZERO = 0
    ONE = 1
    DECOY = 2
    VACUUM = 3


# (early, late) bin occupation per symbol, indexed by CowSymbol value.
BIN_PATTERNS = np.array(
    [
        [1, 0],  # ZERO
        [0, 1],  # ONE
        [1, 1],  # DECOY
        [0, 0],  # VACUUM
    ],
    dtype=np.uint8,
)

#: Default emission probabilities for ZERO, ONE, DECOY, VACUUM.
DEFAULT_PROBS = np.array([0.45, 0.45, 0.05, 0.05])


class VisibilityUndefinedError(ValueError):
    """Both dark-corrected monitor counts are zero; visibility has no value."""


def _validate_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (4,):
        raise ValueError(f"probs must have 4 entries (ZERO, ONE, DECOY, VACUUM), got shape {probs.shape}")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("probs entries must lie in [0, 1]")
    if abs(float(probs.sum()) - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"probs must sum to 1 within {PROB_SUM_TOL}, got {probs.sum()!r}")
    return probs


@dataclass
class SymbolFrame:
    """Alice's transmitted symbol sequence.

    ``symbols`` stores the CowSymbol codes as a uint8 array so that
    multi-million-slot frames stay cheap; entries compare equal to the
    CowSymbol members.
    """

    symbols: np.ndarray
    seed: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.symbols = np.asarray(self.symbols, dtype=np.uint8)
        if self.symbols.size == 0:
            raise ValueError("frame must contain at least one slot")
        if self.symbols.max(initial=0) > 3:
            raise ValueError("symbol codes must be in 0..3")
        self.probs = _validate_probs(self.probs)

    def __len__(self) -> int:
        return int(self.symbols.size)


@dataclass
class ChannelParams:
    """Quantum-channel attenuation budget."""

    loss_db: float = 12.47
    added_loss_db: float = 0.0
    length_km: float = 19.87

    def __post_init__(self) -> None:
        if self.loss_db < 0.0 or self.added_loss_db < 0.0:
            raise ValueError("channel losses must be >= 0 dB")

    @property
    def total_loss_db(self) -> float:
        return self.loss_db + self.added_loss_db

    @property
    def transmittance(self) -> float:
        return transmittance(self.total_loss_db)


@dataclass
class SourceParams:
    """Transmitter parameters.

    ``extinction`` is the intensity-modulator leakage: the mean photon
    number emitted in a nominally empty bin as a fraction of a full
    pulse.  It is the dominant bit-error mechanism at low loss.
    """

    rep_rate_hz: float = 1.25e9
    mu: float = 1.117e-3
    v_src: float = 0.9912
    extinction: float = 0.0155

    def __post_init__(self) -> None:
        if self.rep_rate_hz <= 0.0:
            raise ValueError("rep_rate_hz must be > 0")
        # mu = 0 is allowed so the dark-floor regime can be simulated.
        if self.mu < 0.0:
            raise ValueError("mu must be >= 0")
        if not 0.0 <= self.v_src <= 1.0:
            raise ValueError("v_src must lie in [0, 1]")
        if not 0.0 <= self.extinction < 1.0:
            raise ValueError("extinction must lie in [0, 1)")


@dataclass
class DetectorParams:
    """Receiver parameters; ``dark_prob`` is per half-slot gate per detector."""

    efficiency: float = 0.25
    dark_prob: float = 5.6e-8
    monitor_tap: float = 0.10
    dead_slots: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if not 0.0 <= self.dark_prob <= 1.0:
            raise ValueError("dark_prob must lie in [0, 1]")
        if not 0.0 <= self.monitor_tap < 1.0:
            raise ValueError("monitor_tap must lie in [0, 1)")
        if self.dead_slots < 0 or int(self.dead_slots) != self.dead_slots:
            raise ValueError("dead_slots must be a non-negative integer")


@dataclass
class DetectionRecord:
    """Bob's raw detection outcomes for one frame.

    ``bit_clicks``/``dark_flags`` have shape (slot_count, 2): one flag per
    half-slot bin at the bit detector.  Monitor arrays are indexed by the
    adjacent-bin pair position b (pair = bins b and b+1 of the flattened
    bin sequence) and have length 2*slot_count - 1.
    """

    bit_clicks: np.ndarray
    dark_flags: np.ndarray
    mon_constructive: np.ndarray
    mon_destructive: np.ndarray
    mon_dark_constructive: np.ndarray
    mon_dark_destructive: np.ndarray
    slot_count: int

    def __post_init__(self) -> None:
        if self.bit_clicks.shape != (self.slot_count, 2):
            raise ValueError("bit_clicks must have shape (slot_count, 2)")
        if np.any(self.dark_flags & ~self.bit_clicks):
            raise ValueError("dark_flags must be a subset of bit_clicks")
        if np.any(self.mon_dark_constructive & ~self.mon_constructive):
            raise ValueError("monitor dark flags must be a subset of monitor clicks")
        if np.any(self.mon_dark_destructive & ~self.mon_destructive):
            raise ValueError("monitor dark flags must be a subset of monitor clicks")


def transmittance(loss_db: float) -> float:
    """Convert a dB attenuation to a linear transmittance 10^(-loss/10)."""
    if loss_db < 0.0:
        raise ValueError("loss_db must be >= 0")
    if not math.isfinite(loss_db):
        raise ValueError("loss_db must be finite")
    return 10.0 ** (-loss_db / 10.0)


def click_probability(mu_eff: float, dark_prob: float) -> float:
    """Threshold-detector click probability for one gate.

    Combines Poissonian photon statistics with an independent dark-count
    process: 1 - (1 - dark_prob) * exp(-mu_eff).
    """
    if mu_eff < 0.0:
        raise ValueError("mu_eff must be >= 0")
    if not 0.0 <= dark_prob <= 1.0:
        raise ValueError("dark_prob must lie in [0, 1]")
    return 1.0 - (1.0 - dark_prob) * math.exp(-mu_eff)


def generate_frame(seed: int, n_slots: int, probs: np.ndarray = DEFAULT_PROBS) -> SymbolFrame:
    """Draw an i.i.d. symbol frame; reproducible for a given seed."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    probs = _validate_probs(probs)
    rng = np.random.default_rng(seed)
    symbols = rng.choice(4, size=n_slots, p=probs).astype(np.uint8)
    return SymbolFrame(symbols=symbols, seed=seed, probs=probs)


def _bin_means(
    frame_bins: np.ndarray, ch: ChannelParams, src: SourceParams, det: DetectorParams
) -> tuple[np.ndarray, np.ndarray]:
    """Mean photon number per bin at the bit detector and at the monitor."""
    t = ch.transmittance
    m_bit = src.mu * t * det.efficiency * (1.0 - det.monitor_tap)
    m_mon = src.mu * t * det.efficiency * det.monitor_tap
    scale = np.where(frame_bins > 0, 1.0, src.extinction)
    return m_bit * scale, m_mon * scale


def _apply_dead_time(clicks: np.ndarray, dead_bins: int) -> np.ndarray:
    """Drop clicks that fall within ``dead_bins`` bins after an accepted click.

    ``clicks`` is a flat boolean array over bins.  Non-paralyzable model:
    only accepted clicks open a dead window.  Click rates here are sparse,
    so a Python loop over click positions is fine.
    """
    if dead_bins <= 0 or not clicks.any():
        return clicks
    idx = np.flatnonzero(clicks)
    keep = np.ones(idx.size, dtype=bool)
    last = -1 - dead_bins
    for k, pos in enumerate(idx):
        if pos - last <= dead_bins:
            keep[k] = False
        else:
            last = pos
    out = np.zeros_like(clicks)
    out[idx[keep]] = True
    return out


def simulate_detection(
    frame: SymbolFrame,
    ch: ChannelParams,
    src: SourceParams,
    det: DetectorParams,
    seed: int,
) -> DetectionRecord:
    """Sample one detection record for a frame; bit-identical for a given seed.

    Draw order is fixed (bit photon field, bit dark field, monitor fields)
    so that records are reproducible across runs.
    """
    n = len(frame)
    rng = np.random.default_rng(seed)
    frame_bins = BIN_PATTERNS[frame.symbols]  # (n, 2)

    mean_bit, mean_mon = _bin_means(frame_bins, ch, src, det)
    p_photon = 1.0 - np.exp(-mean_bit)

    photon = rng.random((n, 2)) < p_photon
    dark = rng.random((n, 2)) < det.dark_prob
    clicks = photon | dark
    # A click counts as dark-induced only when no photon detection occurred.
    dark_flags = dark & ~photon

    if det.dead_slots > 0:
        flat = _apply_dead_time(clicks.reshape(-1), int(det.dead_slots) * 2)
        clicks = flat.reshape(n, 2)
        dark_flags &= clicks

    # Monitoring interferometer: adjacent nominally-pulsed bin pairs.
    flat_pulse = frame_bins.reshape(-1).astype(bool)
    flat_mon_mean = mean_mon.reshape(-1)
    coherent = flat_pulse[:-1] & flat_pulse[1:]
    pair_mean = flat_mon_mean[:-1] + flat_mon_mean[1:]
    v = src.v_src
    mean_c = np.where(coherent, pair_mean * (1.0 + v) / 2.0, 0.0)
    mean_d = np.where(coherent, pair_mean * (1.0 - v) / 2.0, 0.0)

    def _port(mean_port: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p_sig = 1.0 - np.exp(-mean_port)
        sig = rng.random(mean_port.size) < p_sig
        drk = (rng.random(mean_port.size) < det.dark_prob) & coherent
        port_clicks = sig | drk
        return port_clicks, drk & ~sig

    mon_c, mon_c_dark = _port(mean_c)
    mon_d, mon_d_dark = _port(mean_d)

    if det.dead_slots > 0:
        dead_bins = int(det.dead_slots) * 2
        mon_c = _apply_dead_time(mon_c, dead_bins)
        mon_d = _apply_dead_time(mon_d, dead_bins)
        mon_c_dark &= mon_c
        mon_d_dark &= mon_d

    return DetectionRecord(
        bit_clicks=clicks,
        dark_flags=dark_flags,
        mon_constructive=mon_c,
        mon_destructive=mon_d,
        mon_dark_constructive=mon_c_dark,
        mon_dark_destructive=mon_d_dark,
        slot_count=n,
    )


@dataclass
class RateModel:
    """Closed-form expectations matching the samplers' probability model.

    Rates are per second; probabilities are per slot / per gate.
    """

    p_click_pulse_bin: float
    p_click_empty_bin: float
    p_data_detect: float
    p_data_error: float
    raw_qber_expected: float
    bit_click_rate_hz: float
    detections_per_second: float
    sifted_rate_hz: float
    coherent_pair_rate_hz: float
    mon_constructive_hz: float
    mon_destructive_hz: float
    mon_dark_rate_hz: float
    visibility_dcc_expected: float

    @property
    def mon_rates(self) -> dict[str, float]:
        return {
            "constructive_hz": self.mon_constructive_hz,
            "destructive_hz": self.mon_destructive_hz,
            "pair_rate_hz": self.coherent_pair_rate_hz,
            "dark_rate_hz": self.mon_dark_rate_hz,
        }


def expected_rates(
    ch: ChannelParams,
    src: SourceParams,
    det: DetectorParams,
    probs: np.ndarray = DEFAULT_PROBS,
) -> RateModel:
    """Analytic counterpart of the Monte Carlo samplers.

    ``detections_per_second`` counts every avalanche at the bit detector,
    including dark counts (a double-click slot contributes two).  The
    dead-time correction uses the standard non-paralyzable factor
    1 / (1 + rate_per_slot * dead_slots) and is exact for dead_slots = 0.
    """
    probs = _validate_probs(probs)
    t = ch.transmittance
    m_bit = src.mu * t * det.efficiency * (1.0 - det.monitor_tap)
    m_mon = src.mu * t * det.efficiency * det.monitor_tap
    d = det.dark_prob

    p1 = click_probability(m_bit, d)  # pulse bin
    p0 = click_probability(m_bit * src.extinction, d)  # empty bin

    # Data slot (one pulse bin, one empty bin).
    p_det = p1 + p0 - p1 * p0
    # Wrong-timing click, or a double click resolved by a fair coin.
    p_err = p0 * (1.0 - p1) + 0.5 * p1 * p0
    qber = p_err / p_det if p_det > 0.0 else 0.0

    p_data = probs[CowSymbol.ZERO] + probs[CowSymbol.ONE]
    p_decoy = probs[CowSymbol.DECOY]
    p_vac = probs[CowSymbol.VACUUM]

    # Expected clicks per slot (avalanche count, not slot occupancy).
    clicks_per_slot = p_data * (p1 + p0) + p_decoy * 2.0 * p1 + p_vac * 2.0 * p0
    if det.dead_slots > 0:
        clicks_per_slot /= 1.0 + clicks_per_slot * det.dead_slots

    detections_hz = src.rep_rate_hz * clicks_per_slot
    sifted_hz = src.rep_rate_hz * p_data * p_det

    # Monitor line: within-slot DECOY pairs plus cross-slot (late pulse,
    # early pulse) pairs; successive symbols are independent.
    p_late = probs[CowSymbol.ONE] + p_decoy
    p_early = probs[CowSymbol.ZERO] + p_decoy
    pairs_per_slot = p_decoy + p_late * p_early
    pair_rate_hz = src.rep_rate_hz * pairs_per_slot

    pair_mean = 2.0 * m_mon
    pc = click_probability(pair_mean * (1.0 + src.v_src) / 2.0, d)
    pd = click_probability(pair_mean * (1.0 - src.v_src) / 2.0, d)
    mon_c_hz = pair_rate_hz * pc
    mon_d_hz = pair_rate_hz * pd
    dark_hz = pair_rate_hz * d

    c_corr = max(mon_c_hz - dark_hz, 0.0)
    d_corr = max(mon_d_hz - dark_hz, 0.0)
    if c_corr + d_corr > 0.0:
        vis = min(max((c_corr - d_corr) / (c_corr + d_corr), 0.0), 1.0)
    else:
        vis = 0.0

    return RateModel(
        p_click_pulse_bin=p1,
        p_click_empty_bin=p0,
        p_data_detect=p_det,
        p_data_error=p_err,
        raw_qber_expected=qber,
        bit_click_rate_hz=sifted_hz,
        detections_per_second=detections_hz,
        sifted_rate_hz=sifted_hz,
        coherent_pair_rate_hz=pair_rate_hz,
        mon_constructive_hz=mon_c_hz,
        mon_destructive_hz=mon_d_hz,
        mon_dark_rate_hz=dark_hz,
        visibility_dcc_expected=vis,
    )


@dataclass
class IntervalCounts:
    """Sufficient statistics for one monitoring interval.

    Data-slot click patterns: ``data_correct`` (signal bin only),
    ``data_wrong`` (empty bin only), ``data_double`` (both bins).
    ``*_clicked`` fields for decoy/vacuum slots count (single, double)
    patterns.  Monitor counts are per port, split into photon-induced and
    dark-induced clicks.
    """

    n_slots: int
    duration_s: float
    slots_per_kind: np.ndarray
    data_correct: int
    data_wrong: int
    data_double: int
    decoy_single: int
    decoy_double: int
    vacuum_single: int
    vacuum_double: int
    mon_pairs: int
    mon_c_photon: int
    mon_c_dark: int
    mon_d_photon: int
    mon_d_dark: int
    dark_gate_expectation: float = field(default=0.0)

    @property
    def sifted_count(self) -> int:
        return self.data_correct + self.data_wrong + self.data_double

    @property
    def detections_total(self) -> int:
        return (
            self.data_correct
            + self.data_wrong
            + 2 * self.data_double
            + self.decoy_single
            + 2 * self.decoy_double
            + self.vacuum_single
            + 2 * self.vacuum_double
        )

    @property
    def mon_constructive(self) -> int:
        return self.mon_c_photon + self.mon_c_dark

    @property
    def mon_destructive(self) -> int:
        return self.mon_d_photon + self.mon_d_dark


def sample_interval_counts(
    ch: ChannelParams,
    src: SourceParams,
    det: DetectorParams,
    probs: np.ndarray,
    duration_s: float,
    rng: np.random.Generator,
) -> IntervalCounts:
    """Sample the aggregate outcome counts of ``duration_s`` seconds of link.

    Distribution-equivalent to :func:`simulate_detection` followed by
    counting, except that the number of cross-slot coherent pairs is drawn
    as a binomial (neighbour correlations in the exact sequence statistics
    only affect its variance, not its mean).  Requires dead_slots = 0; at
    the calibrated operating point the click rate is ~1e-5 per slot, where
    dead time is negligible anyway.
    """
    if det.dead_slots != 0:
        raise ValueError("sample_interval_counts requires dead_slots = 0")
    probs = _validate_probs(probs)
    n_slots = int(round(src.rep_rate_hz * duration_s))
    if n_slots <= 0:
        raise ValueError("interval too short: zero slots")

    rates = expected_rates(ch, src, det, probs)
    p1, p0 = rates.p_click_pulse_bin, rates.p_click_empty_bin

    slots_per_kind = rng.multinomial(n_slots, probs)
    n_data = int(slots_per_kind[CowSymbol.ZERO] + slots_per_kind[CowSymbol.ONE])
    n_decoy = int(slots_per_kind[CowSymbol.DECOY])
    n_vac = int(slots_per_kind[CowSymbol.VACUUM])

    # Joint click pattern per data slot: signal-only, empty-only, both, none.
    pats = rng.multinomial(
        n_data,
        [p1 * (1.0 - p0), p0 * (1.0 - p1), p1 * p0, (1.0 - p1) * (1.0 - p0)],
    )
    decoy_pats = rng.multinomial(
        n_decoy, [2.0 * p1 * (1.0 - p1), p1 * p1, (1.0 - p1) ** 2]
    )
    vac_pats = rng.multinomial(n_vac, [2.0 * p0 * (1.0 - p0), p0 * p0, (1.0 - p0) ** 2])

    # Coherent pairs: exact count for within-slot DECOY pairs, binomial for
    # cross-slot pairs.
    p_late = probs[CowSymbol.ONE] + probs[CowSymbol.DECOY]
    p_early = probs[CowSymbol.ZERO] + probs[CowSymbol.DECOY]
    n_pairs = n_decoy + int(rng.binomial(n_slots - 1, p_late * p_early))

    t = ch.transmittance
    m_mon = src.mu * t * det.efficiency * det.monitor_tap
    pair_mean = 2.0 * m_mon
    d = det.dark_prob

    def _port_counts(mean_port: float) -> tuple[int, int]:
        p_sig = 1.0 - math.exp(-mean_port)
        p_dark_only = math.exp(-mean_port) * d
        sig, dark_only, _ = rng.multinomial(
            n_pairs, [p_sig, p_dark_only, 1.0 - p_sig - p_dark_only]
        )
        return int(sig), int(dark_only)

    c_photon, c_dark = _port_counts(pair_mean * (1.0 + src.v_src) / 2.0)
    d_photon, d_dark = _port_counts(pair_mean * (1.0 - src.v_src) / 2.0)

    return IntervalCounts(
        n_slots=n_slots,
        duration_s=duration_s,
        slots_per_kind=slots_per_kind,
        data_correct=int(pats[0]),
        data_wrong=int(pats[1]),
        data_double=int(pats[2]),
        decoy_single=int(decoy_pats[0]),
        decoy_double=int(decoy_pats[1]),
        vacuum_single=int(vac_pats[0]),
        vacuum_double=int(vac_pats[1]),
        mon_pairs=n_pairs,
        mon_c_photon=c_photon,
        mon_c_dark=c_dark,
        mon_d_photon=d_photon,
        mon_d_dark=d_dark,
        dark_gate_expectation=n_pairs * d,
    )


def visibility_dcc(
    mon_constructive_count: float,
    mon_destructive_count: float,
    dark_count_estimate: float,
) -> float:
    """Dark-count-corrected interference visibility.

    V = (C - D) / (C + D) over dark-subtracted counts, clamped to [0, 1].
    Corrected counts are floored at zero (the dark estimate is an
    expectation and can exceed a sampled count).
    """
    if mon_constructive_count < 0 or mon_destructive_count < 0:
        raise ValueError("counts must be >= 0")
    if dark_count_estimate < 0:
        raise ValueError("dark_count_estimate must be >= 0")
    c = max(float(mon_constructive_count) - float(dark_count_estimate), 0.0)
    d = max(float(mon_destructive_count) - float(dark_count_estimate), 0.0)
    if c + d == 0.0:
        raise VisibilityUndefinedError(
            "both dark-corrected monitor counts are zero; visibility undefined"
        )
    return min(max((c - d) / (c + d), 0.0), 1.0)
