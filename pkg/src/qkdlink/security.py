"""Secret-fraction bookkeeping for the distilled key.

The secret fraction charged against a reconciled block is

    r = 1 - f_ec * h(Q) - I_eve(V)

where h is the binary entropy, Q the block error rate, V the
dark-corrected monitor visibility and I_eve a pluggable bound on the
eavesdropper information per sifted bit.  The default bound,
``visibility_entropy``, charges h((1 + V) / 2): zero at perfect
coherence, one full bit at V = 0.  It is a monotone visibility penalty
chosen for this artifact, not a vendor formula; alternatives register
under :data:`EVE_MODELS`.

Delivered throughput is additionally clamped by a post-processing cap,
which reproduces the saturation plateau the attenuation sweep shows at
low loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import optics

__all__ = [
    "SecurityParams",
    "SecretLengthBudget",
    "EVE_MODELS",
    "binary_entropy",
    "eve_information",
    "secret_fraction",
    "secret_length",
    "skr_predict",
]


def binary_entropy(x: float) -> float:
    """Binary entropy h(x) in bits, with h(0) = h(1) = 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("binary_entropy domain is [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def _eve_visibility_entropy(visibility: float) -> float:
    return binary_entropy((1.0 + visibility) / 2.0)


#: Registered eavesdropper-information models, selectable by name.
EVE_MODELS: dict[str, Callable[[float], float]] = {
    "visibility_entropy": _eve_visibility_entropy,
}


@dataclass
class SecurityParams:
    """Key-rate model parameters.

    ``pp_cap_bps`` caps delivered secret bits per second (post-processing
    throughput limit).  ``sample_fraction`` is the share of sifted bits
    disclosed for error estimation; ``auth_bits_per_direction`` is the
    per-round channel-authentication budget.
    """

    f_ec: float = 1.2
    qber_abort: float = 0.06
    eve_model: str = "visibility_entropy"
    pp_cap_bps: float = 2392.0
    sample_fraction: float = 0.1
    auth_bits_per_direction: int = 256

    def __post_init__(self) -> None:
        if self.f_ec < 1.0:
            raise ValueError("f_ec must be >= 1")
        if not 0.0 < self.qber_abort < 0.5:
            raise ValueError("qber_abort must lie in (0, 0.5)")
        if self.pp_cap_bps <= 0.0:
            raise ValueError("pp_cap_bps must be > 0")
        if not 0.0 < self.sample_fraction < 1.0:
            raise ValueError("sample_fraction must lie in (0, 1)")
        if self.eve_model not in EVE_MODELS:
            raise ValueError(f"unknown eve_model {self.eve_model!r}; known: {sorted(EVE_MODELS)}")

    @property
    def auth_bits_per_round(self) -> int:
        return 2 * self.auth_bits_per_direction


def eve_information(visibility: float, params: SecurityParams | None = None) -> float:
    """Eavesdropper information bound in bits per sifted bit."""
    if not 0.0 <= visibility <= 1.0:
        raise ValueError("visibility must lie in [0, 1]")
    model = EVE_MODELS[params.eve_model if params is not None else "visibility_entropy"]
    return model(visibility)


def secret_fraction(qber: float, visibility: float, params: SecurityParams) -> float:
    """Signed secret fraction r; callers treat r <= 0 (or QBER at/above the
    abort threshold) as an abort."""
    if not 0.0 <= qber <= 1.0:
        raise ValueError("qber must lie in [0, 1]")
    return 1.0 - params.f_ec * binary_entropy(qber) - eve_information(visibility, params)


@dataclass
class SecretLengthBudget:
    """Exact bit budget for one reconciled block."""

    secrecy_bits: int
    pa_length: int
    delivered_bits: int
    ec_charge_bits: int
    eve_charge_bits: int
    auth_bits: int


def secret_length(
    n_bits: int,
    qber: float,
    visibility: float,
    duration_s: float,
    params: SecurityParams,
    measured_leakage_bits: int = 0,
) -> SecretLengthBudget:
    """Integer secret-length budget for a reconciled block of ``n_bits``.

    The error-correction charge is max(measured leakage, ceil(f_ec * h(Q)
    * n)); the privacy-amplification output additionally funds the
    per-round authentication budget, and the delivered remainder is capped
    at pp_cap_bps * duration.
    """
    if n_bits < 0:
        raise ValueError("n_bits must be >= 0")
    ec_charge = max(int(measured_leakage_bits), math.ceil(params.f_ec * binary_entropy(qber) * n_bits))
    eve_charge = math.ceil(eve_information(visibility, params) * n_bits)
    secrecy = n_bits - ec_charge - eve_charge
    auth = params.auth_bits_per_round
    cap_bits = math.floor(params.pp_cap_bps * duration_s)
    pa_length = min(secrecy, cap_bits + auth)
    delivered = pa_length - auth
    return SecretLengthBudget(
        secrecy_bits=secrecy,
        pa_length=max(pa_length, 0),
        delivered_bits=delivered,
        ec_charge_bits=ec_charge,
        eve_charge_bits=eve_charge,
        auth_bits=auth,
    )


def skr_predict(
    ch: optics.ChannelParams,
    src: optics.SourceParams,
    det: optics.DetectorParams,
    probs: np.ndarray,
    params: SecurityParams,
    round_duration_s: float = 10.0,
) -> float:
    """Analytic secret key rate in bits per second, floored at zero.

    min(sifted_rate * (1 - sample_fraction) * r - auth_overhead, pp_cap),
    with an immediate zero when the expected QBER reaches the abort
    threshold or the secret fraction is non-positive.
    """
    if round_duration_s <= 0.0:
        raise ValueError("round_duration_s must be > 0")
    rates = optics.expected_rates(ch, src, det, probs)
    q = rates.raw_qber_expected
    v = rates.visibility_dcc_expected
    if q >= params.qber_abort:
        return 0.0
    r = secret_fraction(q, v, params)
    if r <= 0.0:
        return 0.0
    overhead_bps = params.auth_bits_per_round / round_duration_s
    raw = rates.sifted_rate_hz * (1.0 - params.sample_fraction) * r - overhead_bps
    return max(0.0, min(raw, params.pp_cap_bps))
