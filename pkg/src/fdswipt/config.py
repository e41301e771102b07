"""Scenario configuration, unit conversions, and validation.

Everything inside the library works in linear units: watts for powers and
noise variances, plain ratios for SINR targets, efficiencies, and antenna
gains.  dB/dBm values appear only at the boundary, i.e. in configuration
files and in CSV/report output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path


def dbm_to_watts(p_dbm: float) -> float:
    """Convert a power from dBm to watts: 10^(p/10) * 1e-3."""
    return 10.0 ** (p_dbm / 10.0) * 1e-3


def watts_to_dbm(p_w: float) -> float:
    """Convert a power from watts to dBm.  Requires p_w > 0."""
    if p_w <= 0.0:
        raise ValueError(f"cannot express non-positive power {p_w} W in dBm")
    return 10.0 * math.log10(p_w / 1e-3)


def db_to_linear(x_db: float) -> float:
    """Convert a dB ratio to a linear ratio: 10^(x/10)."""
    return 10.0 ** (x_db / 10.0)


def linear_to_db(x: float) -> float:
    """Convert a linear ratio to dB.  Requires x > 0."""
    if x <= 0.0:
        raise ValueError(f"cannot express non-positive ratio {x} in dB")
    return 10.0 * math.log10(x)


class ConfigError(ValueError):
    """Raised when a scenario configuration violates an invariant.

    Carries the complete list of per-field violations so a caller can
    report all problems at once instead of fixing them one at a time.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class SystemConfig:
    """All scenario constants for one simulated cell.

    Counts
    ------
    n_bs_antennas        transmit/receive antennas at the full-duplex BS
    n_eh_antennas        antennas per energy harvester
    n_dl_users           single-antenna downlink users
    n_ul_users           single-antenna uplink users
    n_harvesters         multi-antenna roaming energy harvesters

    Powers and QoS (linear units)
    -----------------------------
    p_max_dl             total downlink transmit power budget [W]
    p_max_ul             per-uplink-user transmit power caps [W]
    sinr_req_dl          per-downlink-user required SINR [ratio]
    sinr_req_ul          per-uplink-user required SINR [ratio]
    eh_min               per-harvester minimum harvested power [W]
    noise_dl             per-downlink-user receiver noise power [W]
    noise_ul             BS receiver noise power [W]
    noise_eh             harvester thermal noise power [W]; carried for
                         completeness but never used: thermal noise is
                         negligible next to the harvested signal power
    si_noisiness         residual self-interference factor after
                         cancellation [ratio], 0 <= value <= 1
    eh_efficiency        per-harvester RF-to-DC conversion efficiency

    Geometry / fading
    -----------------
    user_dist_range      (min, max) BS distance for UL/DL users [m]
    harvester_dist_range (min, max) BS distance for harvesters [m]
    path_loss_exponent   log-distance path loss exponent
    reference_distance   path loss reference distance [m]
    bs_antenna_gain      BS antenna gain [linear]
    user_antenna_gain    user/harvester antenna gain [linear]
    rician_k_factor      Rician K-factor for EH and SI channels [linear]

    carrier_mhz / bandwidth_khz are recorded as metadata only; all noise
    powers are specified directly rather than derived from bandwidth.
    """

    n_bs_antennas: int
    n_eh_antennas: int
    n_dl_users: int
    n_ul_users: int
    n_harvesters: int

    p_max_dl: float
    p_max_ul: tuple[float, ...]
    sinr_req_dl: tuple[float, ...]
    sinr_req_ul: tuple[float, ...]
    eh_min: tuple[float, ...]
    noise_dl: tuple[float, ...]
    noise_ul: float
    noise_eh: float
    si_noisiness: float
    eh_efficiency: tuple[float, ...]

    user_dist_range: tuple[float, float] = (10.0, 50.0)
    harvester_dist_range: tuple[float, float] = (2.0, 10.0)
    path_loss_exponent: float = 3.6
    reference_distance: float = 10.0
    bs_antenna_gain: float = 10.0
    user_antenna_gain: float = 1.0
    rician_k_factor: float = db_to_linear(6.0)

    carrier_mhz: float = 915.0
    bandwidth_khz: float = 200.0


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Check every invariant of ``cfg``; return it unchanged if all hold.

    Raises ConfigError listing every violated field.  Validation is
    idempotent: a validated config validates again to the same object.
    """
    v: list[str] = []
    k, m, j = cfg.n_dl_users, cfg.n_ul_users, cfg.n_harvesters

    if cfg.n_bs_antennas < 1:
        v.append("n_bs_antennas must be >= 1")
    if cfg.n_eh_antennas < 1:
        v.append("n_eh_antennas must be >= 1")
    for name in ("n_dl_users", "n_ul_users", "n_harvesters"):
        if getattr(cfg, name) < 0:
            v.append(f"{name} must be >= 0")
    if m > cfg.n_bs_antennas:
        v.append(
            f"n_ul_users M exceeds N (M={m}, N={cfg.n_bs_antennas}): "
            "zero-forcing reception needs M <= N"
        )

    def check_len(name: str, want: int) -> tuple:
        vals = getattr(cfg, name)
        if len(vals) != want:
            v.append(f"{name} must have length {want}, got {len(vals)}")
            return ()
        return vals

    p_ul = check_len("p_max_ul", m)
    g_dl = check_len("sinr_req_dl", k)
    g_ul = check_len("sinr_req_ul", m)
    ehm = check_len("eh_min", j)
    n_dl = check_len("noise_dl", k)
    eta = check_len("eh_efficiency", j)

    if not (math.isfinite(cfg.p_max_dl) and cfg.p_max_dl >= 0):
        v.append("p_max_dl must be a finite power >= 0")
    for i, p in enumerate(p_ul):
        if not (math.isfinite(p) and p >= 0):
            v.append(f"p_max_ul[{i}] must be a finite power >= 0")
    for i, g in enumerate(g_dl):
        if not (math.isfinite(g) and g > 0):
            v.append(f"sinr_req_dl[{i}] must be > 0")
    for i, g in enumerate(g_ul):
        if not (math.isfinite(g) and g > 0):
            v.append(f"sinr_req_ul[{i}] must be > 0")
    for i, p in enumerate(ehm):
        if not (math.isfinite(p) and p >= 0):
            v.append(f"eh_min[{i}] must be a finite power >= 0")
    for i, s in enumerate(n_dl):
        if not (math.isfinite(s) and s >= 0):
            v.append(f"noise_dl[{i}] must be a finite power >= 0")
    if not (math.isfinite(cfg.noise_ul) and cfg.noise_ul >= 0):
        v.append("noise_ul must be a finite power >= 0")
    if not (math.isfinite(cfg.noise_eh) and cfg.noise_eh >= 0):
        v.append("noise_eh must be a finite power >= 0")
    if not (0.0 <= cfg.si_noisiness <= 1.0):
        v.append(f"si_noisiness must lie in [0, 1], got {cfg.si_noisiness}")
    for i, e in enumerate(eta):
        if not (0.0 <= e <= 1.0):
            v.append(f"eh_efficiency[{i}] out of range [0, 1]: {e}")

    for name in ("user_dist_range", "harvester_dist_range"):
        lo, hi = getattr(cfg, name)
        if not (0.0 < lo <= hi):
            v.append(f"{name} must satisfy 0 < min <= max, got ({lo}, {hi})")
    if cfg.path_loss_exponent <= 0:
        v.append("path_loss_exponent must be > 0")
    if cfg.reference_distance <= 0:
        v.append("reference_distance must be > 0")
    if cfg.bs_antenna_gain <= 0 or cfg.user_antenna_gain <= 0:
        v.append("antenna gains must be > 0 (linear)")
    if cfg.rician_k_factor < 0:
        v.append("rician_k_factor must be >= 0")

    if v:
        raise ConfigError(v)
    return cfg


# --------------------------------------------------------------------------
# File boundary: flat-key JSON with dB/dBm units, converted on load.
# --------------------------------------------------------------------------

def _broadcast(value, count: int) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return tuple(float(value) for _ in range(count))
    vals = tuple(float(x) for x in value)
    return vals


def config_from_dict(d: dict) -> SystemConfig:
    """Build a validated SystemConfig from a flat dict in boundary units.

    Scalars given for per-user/per-harvester keys broadcast to all
    entries, matching the common case of identical requirements.
    """
    d = dict(d)
    k = int(d["n_dl_users"])
    m = int(d["n_ul_users"])
    j = int(d["n_harvesters"])

    def dbm_list(key: str, count: int) -> tuple[float, ...]:
        return tuple(dbm_to_watts(x) for x in _broadcast(d[key], count))

    def db_list(key: str, count: int) -> tuple[float, ...]:
        return tuple(db_to_linear(x) for x in _broadcast(d[key], count))

    cfg = SystemConfig(
        n_bs_antennas=int(d["n_bs_antennas"]),
        n_eh_antennas=int(d["n_eh_antennas"]),
        n_dl_users=k,
        n_ul_users=m,
        n_harvesters=j,
        p_max_dl=dbm_to_watts(float(d["p_max_dl_dbm"])),
        p_max_ul=dbm_list("p_max_ul_dbm", m),
        sinr_req_dl=db_list("sinr_req_dl_db", k),
        sinr_req_ul=db_list("sinr_req_ul_db", m),
        eh_min=dbm_list("eh_min_dbm", j),
        noise_dl=dbm_list("noise_dl_dbm", k),
        noise_ul=dbm_to_watts(float(d["noise_ul_dbm"])),
        noise_eh=dbm_to_watts(float(d["noise_eh_dbm"])),
        si_noisiness=db_to_linear(float(d["si_cancellation_db"])),
        eh_efficiency=_broadcast(d["eh_efficiency"], j),
        user_dist_range=(float(d["user_dist_min_m"]), float(d["user_dist_max_m"])),
        harvester_dist_range=(
            float(d["harvester_dist_min_m"]),
            float(d["harvester_dist_max_m"]),
        ),
        path_loss_exponent=float(d["path_loss_exponent"]),
        reference_distance=float(d["reference_distance_m"]),
        bs_antenna_gain=db_to_linear(float(d["bs_antenna_gain_dbi"])),
        user_antenna_gain=db_to_linear(float(d["user_antenna_gain_dbi"])),
        rician_k_factor=db_to_linear(float(d["rician_k_factor_db"])),
        carrier_mhz=float(d.get("carrier_mhz", 915.0)),
        bandwidth_khz=float(d.get("bandwidth_khz", 200.0)),
    )
    return validate_config(cfg)


def load_config(path: str | Path) -> SystemConfig:
    """Load and validate a flat-key JSON configuration file."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    try:
        return config_from_dict(data)
    except KeyError as exc:
        raise ConfigError([f"{path}: missing key {exc.args[0]!r}"]) from exc


def config_to_dict(cfg: SystemConfig) -> dict:
    """Express a SystemConfig in the flat boundary-unit schema.

    Per-entry lists collapse back to a scalar when all entries agree,
    which keeps the canonical files readable.
    """

    def collapse(values):
        vals = list(values)
        if vals and all(x == vals[0] for x in vals):
            return vals[0]
        return vals

    return {
        "n_bs_antennas": cfg.n_bs_antennas,
        "n_eh_antennas": cfg.n_eh_antennas,
        "n_dl_users": cfg.n_dl_users,
        "n_ul_users": cfg.n_ul_users,
        "n_harvesters": cfg.n_harvesters,
        "p_max_dl_dbm": watts_to_dbm(cfg.p_max_dl),
        "p_max_ul_dbm": collapse(watts_to_dbm(p) for p in cfg.p_max_ul),
        "sinr_req_dl_db": collapse(linear_to_db(g) for g in cfg.sinr_req_dl),
        "sinr_req_ul_db": collapse(linear_to_db(g) for g in cfg.sinr_req_ul),
        "eh_min_dbm": collapse(watts_to_dbm(p) for p in cfg.eh_min),
        "noise_dl_dbm": collapse(watts_to_dbm(p) for p in cfg.noise_dl),
        "noise_ul_dbm": watts_to_dbm(cfg.noise_ul),
        "noise_eh_dbm": watts_to_dbm(cfg.noise_eh),
        "si_cancellation_db": linear_to_db(cfg.si_noisiness),
        "eh_efficiency": collapse(cfg.eh_efficiency),
        "user_dist_min_m": cfg.user_dist_range[0],
        "user_dist_max_m": cfg.user_dist_range[1],
        "harvester_dist_min_m": cfg.harvester_dist_range[0],
        "harvester_dist_max_m": cfg.harvester_dist_range[1],
        "path_loss_exponent": cfg.path_loss_exponent,
        "reference_distance_m": cfg.reference_distance,
        "bs_antenna_gain_dbi": linear_to_db(cfg.bs_antenna_gain),
        "user_antenna_gain_dbi": linear_to_db(cfg.user_antenna_gain)
        if cfg.user_antenna_gain != 1.0
        else 0.0,
        "rician_k_factor_db": linear_to_db(cfg.rician_k_factor),
        "carrier_mhz": cfg.carrier_mhz,
        "bandwidth_khz": cfg.bandwidth_khz,
    }


def save_config(cfg: SystemConfig, path: str | Path) -> None:
    """Write the canonical flat-key JSON form of ``cfg``."""
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write("\n")


# --------------------------------------------------------------------------
# Canonical scenarios.
# --------------------------------------------------------------------------

def table1_config() -> SystemConfig:
    """Full published scenario: N=8 BS antennas, K=3 DL users, M=8 UL
    users, J=2 harvesters with 3 antennas each; 46/23 dBm power budgets,
    21/15 dB SINR targets, -20 dBm harvest floor, -110 dB residual SI.
    """
    return validate_config(
        SystemConfig(
            n_bs_antennas=8,
            n_eh_antennas=3,
            n_dl_users=3,
            n_ul_users=8,
            n_harvesters=2,
            p_max_dl=dbm_to_watts(46.0),
            p_max_ul=tuple(dbm_to_watts(23.0) for _ in range(8)),
            sinr_req_dl=tuple(db_to_linear(21.0) for _ in range(3)),
            sinr_req_ul=tuple(db_to_linear(15.0) for _ in range(8)),
            eh_min=tuple(dbm_to_watts(-20.0) for _ in range(2)),
            noise_dl=tuple(dbm_to_watts(-71.0) for _ in range(3)),
            noise_ul=dbm_to_watts(-83.0),
            noise_eh=dbm_to_watts(-83.0),
            si_noisiness=db_to_linear(-110.0),
            eh_efficiency=(0.8, 0.8),
        )
    )


def desk_config() -> SystemConfig:
    """Desk-scale scenario for CI and acceptance runs: N=4, K=2, M=2,
    J=1, with the published power/noise levels and 15 dB SINR targets.
    """
    return validate_config(
        SystemConfig(
            n_bs_antennas=4,
            n_eh_antennas=2,
            n_dl_users=2,
            n_ul_users=2,
            n_harvesters=1,
            p_max_dl=dbm_to_watts(46.0),
            p_max_ul=tuple(dbm_to_watts(23.0) for _ in range(2)),
            sinr_req_dl=tuple(db_to_linear(15.0) for _ in range(2)),
            sinr_req_ul=tuple(db_to_linear(15.0) for _ in range(2)),
            eh_min=(dbm_to_watts(-20.0),),
            noise_dl=tuple(dbm_to_watts(-71.0) for _ in range(2)),
            noise_ul=dbm_to_watts(-83.0),
            noise_eh=dbm_to_watts(-83.0),
            si_noisiness=db_to_linear(-110.0),
            eh_efficiency=(0.8,),
        )
    )


def tiny_config() -> SystemConfig:
    """Smallest non-degenerate scenario (N=2, K=M=J=1), used by the
    brute-force search cross-checks.
    """
    return validate_config(
        SystemConfig(
            n_bs_antennas=2,
            n_eh_antennas=2,
            n_dl_users=1,
            n_ul_users=1,
            n_harvesters=1,
            p_max_dl=dbm_to_watts(46.0),
            p_max_ul=(dbm_to_watts(23.0),),
            sinr_req_dl=(db_to_linear(15.0),),
            sinr_req_ul=(db_to_linear(15.0),),
            eh_min=(dbm_to_watts(-20.0),),
            noise_dl=(dbm_to_watts(-71.0),),
            noise_ul=dbm_to_watts(-83.0),
            noise_eh=dbm_to_watts(-83.0),
            si_noisiness=db_to_linear(-110.0),
            eh_efficiency=(0.8,),
        )
    )
