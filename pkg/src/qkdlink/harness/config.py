"""Hierarchical configuration file shared by all subcommands.

YAML schema (all sections optional; defaults below):

    physics:      loss_db, added_loss_db, length_km, rep_rate_hz, mu,
                  v_src, extinction, efficiency, dark_prob, monitor_tap,
                  dead_slots, probs {zero, one, decoy, vacuum}
    security:     f_ec, qber_abort, eve_model, pp_cap_bps,
                  sample_fraction, auth_bits_per_direction
    distillation: preshared_secret_hex
    kms:          key_size_bits, max_key_count, max_key_per_request,
                  min_key_size_bits, max_key_size_bits, reservation_ttl_s,
                  replay_window_s, require_sae_auth, ids/ports/data_dir
    tunnel:       refresh_interval_s, key_size_bits, low_water_mark
    harness:      seed, interval_s, stability_intervals,
                  sweep_added_db, sweep_intervals_per_point,
                  attenuator_jitter_db {added_db: sigma}
    calibration:  targets {skr_bps, qber, visibility, detections_per_s},
                  max_evals

Environment overrides: QKDLINK_KMS_PORT, QKDLINK_PEER_PORT,
QKDLINK_DATA_DIR.  The config digest is the SHA-256 of the canonical
JSON dump of the resolved configuration; together with the seed it
fully determines every emitted CSV byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..optics import ChannelParams, DetectorParams, SourceParams
from ..security import SecurityParams

__all__ = ["DEFAULT_CONFIG", "LinkConfig", "load_config", "dump_config", "config_digest"]

DEFAULT_CONFIG: dict = {
    "physics": {
        "loss_db": 12.47,
        "added_loss_db": 0.0,
        "length_km": 19.87,
        "rep_rate_hz": 1.25e9,
        "mu": 1.117e-3,
        "v_src": 0.9912,
        "extinction": 0.0155,
        "efficiency": 0.25,
        "dark_prob": 5.6e-8,
        "monitor_tap": 0.10,
        "dead_slots": 0,
        "probs": {"zero": 0.45, "one": 0.45, "decoy": 0.05, "vacuum": 0.05},
    },
    "security": {
        "f_ec": 1.2,
        "qber_abort": 0.06,
        "eve_model": "visibility_entropy",
        "pp_cap_bps": 2392.0,
        "sample_fraction": 0.1,
        "auth_bits_per_direction": 256,
    },
    "distillation": {
        "preshared_secret_hex": "8c6a5f9e33f04d6fb6a1c2d3e4f50617",
    },
    "kms": {
        "key_size_bits": 256,
        "max_key_count": 100000,
        "max_key_per_request": 128,
        "min_key_size_bits": 64,
        "max_key_size_bits": 1024,
        "reservation_ttl_s": 60.0,
        "replay_window_s": 30.0,
        "require_sae_auth": True,
        "kme_id_local": "kme-a",
        "kme_id_peer": "kme-b",
        "master_sae_id": "sae-a",
        "slave_sae_id": "sae-b",
        "api_port": 8440,
        "peer_port": 8441,
        "peer_host": "127.0.0.1",
        "control_secret_hex": "5e1b03c9aa6f4e22",
        "data_dir": "./qkdlink-data",
    },
    "tunnel": {
        "refresh_interval_s": 10.0,
        "key_size_bits": 256,
        "low_water_mark": 4,
    },
    "harness": {
        "seed": 20240901,
        "interval_s": 10.0,
        "stability_intervals": 1000,
        "sweep_added_db": [0.0, 3.0, 5.0, 7.0, 8.0, 10.0, 12.0],
        "sweep_intervals_per_point": 30,
        "attenuator_jitter_db": {"3.0": 0.2, "5.0": 0.2, "7.0": 0.2, "8.0": 0.4, "10.0": 0.4},
    },
    "calibration": {
        "targets": {
            "skr_bps": 2392.0,
            "qber": 0.019,
            "visibility": 0.9912,
            "detections_per_s": 18199.0,
        },
        "max_evals": 10000,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class LinkConfig:
    """Resolved configuration with typed parameter-set accessors."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    def channel(self, added_loss_db: float | None = None) -> ChannelParams:
        p = self.raw["physics"]
        return ChannelParams(
            loss_db=p["loss_db"],
            added_loss_db=p["added_loss_db"] if added_loss_db is None else added_loss_db,
            length_km=p["length_km"],
        )

    def source(self) -> SourceParams:
        p = self.raw["physics"]
        return SourceParams(
            rep_rate_hz=p["rep_rate_hz"], mu=p["mu"], v_src=p["v_src"], extinction=p["extinction"]
        )

    def detector(self) -> DetectorParams:
        p = self.raw["physics"]
        return DetectorParams(
            efficiency=p["efficiency"],
            dark_prob=p["dark_prob"],
            monitor_tap=p["monitor_tap"],
            dead_slots=p["dead_slots"],
        )

    def probs(self) -> np.ndarray:
        p = self.raw["physics"]["probs"]
        return np.array([p["zero"], p["one"], p["decoy"], p["vacuum"]], dtype=float)

    def security(self) -> SecurityParams:
        s = self.raw["security"]
        return SecurityParams(
            f_ec=s["f_ec"],
            qber_abort=s["qber_abort"],
            eve_model=s["eve_model"],
            pp_cap_bps=s["pp_cap_bps"],
            sample_fraction=s["sample_fraction"],
            auth_bits_per_direction=s["auth_bits_per_direction"],
        )

    def preshared_secret(self) -> bytes:
        return bytes.fromhex(self.raw["distillation"]["preshared_secret_hex"])

    @property
    def seed(self) -> int:
        return int(self.raw["harness"]["seed"])

    def jitter_for(self, added_db: float) -> float:
        table = self.raw["harness"].get("attenuator_jitter_db", {})
        return float(table.get(str(added_db), table.get(f"{added_db:g}", 0.0)) or 0.0)

    def with_updates(self, **sections) -> "LinkConfig":
        return LinkConfig(raw=_deep_merge(self.raw, sections))


def _apply_env_overrides(raw: dict) -> dict:
    env_map = {
        "QKDLINK_KMS_PORT": ("kms", "api_port", int),
        "QKDLINK_PEER_PORT": ("kms", "peer_port", int),
        "QKDLINK_DATA_DIR": ("kms", "data_dir", str),
    }
    for env, (section, key, cast) in env_map.items():
        value = os.environ.get(env)
        if value is not None:
            raw[section][key] = cast(value)
    return raw


def load_config(path: str | Path | None = None) -> LinkConfig:
    """Load a YAML config file merged over the defaults (env vars last)."""
    raw = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            user = yaml.safe_load(handle) or {}
        if not isinstance(user, dict):
            raise ValueError(f"config root must be a mapping, got {type(user).__name__}")
        raw = _deep_merge(raw, user)
    return LinkConfig(raw=_apply_env_overrides(raw))


def dump_config(cfg: LinkConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(cfg.raw, handle, sort_keys=True)


def config_digest(cfg: LinkConfig) -> str:
    """SHA-256 over the canonical JSON form of the resolved config."""
    canonical = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(canonical.encode()).hexdigest()
