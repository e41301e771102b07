"""Seeded generation of node geometry and channel realizations.

Every draw is a pure function of (config, seed).  Randomness comes from
counter-based Philox substreams keyed on (master seed, domain, kind), so
realizations are reproducible regardless of how trials are scheduled.

Small-scale fading: user channels (BS-user, user-BS, user-user) are
i.i.d. Rayleigh; energy-harvester channels and the self-interference
channel are Rician.  Large-scale gain is log-distance,
``antenna_gains * (d_ref / d) ** exponent``, folded into the per-entry
mean power of the fading draw.  The self-interference channel carries
unit large-scale gain; its magnitude is set by the cancellation factor
where it is consumed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SystemConfig

log = logging.getLogger(__name__)

# Substream domains.
_GEOMETRY = 0
_CHANNELS = 1

# Channel kinds within the channel domain.
_KIND_DL = 0
_KIND_UL = 1
_KIND_CCI = 2
_KIND_SI = 3
_KIND_EH_BS = 4
_KIND_EH_UL = 5


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream for (seed, *path)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Geometry:
    """Planar node layout for one trial.  The BS sits at the origin."""

    dl_pos: np.ndarray  # (K, 2) [m]
    ul_pos: np.ndarray  # (M, 2)
    eh_pos: np.ndarray  # (J, 2)
    dl_user_dist: np.ndarray  # (K,)
    ul_user_dist: np.ndarray  # (M,)
    harvester_dist: np.ndarray  # (J,)
    ul_dl_pair_dist: np.ndarray  # (M, K)


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of every channel in the system.

    h      (K, N)        BS -> downlink user k
    g      (M, N)        uplink user m -> BS
    f      (M, K)        uplink user m -> downlink user k
    h_si   (N, N)        BS transmit -> BS receive leakage
    omega  (J, N, N_EH)  BS -> harvester j
    phi    (J, M, N_EH)  uplink user m -> harvester j
    """

    h: np.ndarray
    g: np.ndarray
    f: np.ndarray
    h_si: np.ndarray
    omega: np.ndarray
    phi: np.ndarray

    @property
    def n_dl_users(self) -> int:
        return self.h.shape[0]

    @property
    def n_ul_users(self) -> int:
        return self.g.shape[0]

    @property
    def n_harvesters(self) -> int:
        return self.omega.shape[0]

    @property
    def n_bs_antennas(self) -> int:
        return self.h_si.shape[0]


def _annulus_points(rng: np.random.Generator, count: int, lo: float, hi: float) -> np.ndarray:
    """Points with distance ~ U[lo, hi] and angle ~ U[0, 2pi)."""
    r = rng.uniform(lo, hi, size=count)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def place_users(cfg: SystemConfig, seed: int) -> Geometry:
    """Draw node positions for one trial; deterministic in (cfg, seed)."""
    rng = substream(seed, _GEOMETRY)
    dl = _annulus_points(rng, cfg.n_dl_users, *cfg.user_dist_range)
    ul = _annulus_points(rng, cfg.n_ul_users, *cfg.user_dist_range)
    eh = _annulus_points(rng, cfg.n_harvesters, *cfg.harvester_dist_range)
    pair = np.linalg.norm(ul[:, None, :] - dl[None, :, :], axis=2)
    return Geometry(
        dl_pos=dl,
        ul_pos=ul,
        eh_pos=eh,
        dl_user_dist=np.linalg.norm(dl, axis=1),
        ul_user_dist=np.linalg.norm(ul, axis=1),
        harvester_dist=np.linalg.norm(eh, axis=1),
        ul_dl_pair_dist=pair,
    )


def rayleigh_vector(length: int, mean_power: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. circularly-symmetric complex Gaussian entries with per-entry
    mean square ``mean_power``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if mean_power < 0:
        raise ValueError("mean_power must be >= 0")
    re = rng.standard_normal(length)
    im = rng.standard_normal(length)
    return np.sqrt(mean_power / 2.0) * (re + 1j * im)


def rician_matrix(
    rows: int,
    cols: int,
    k_factor: float,
    mean_power: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Rician fading matrix with per-entry mean square ``mean_power``.

    The deterministic line-of-sight component is all-ones (any fixed
    unit-modulus choice gives the stated statistics); the scattered part
    is unit-variance circularly-symmetric Gaussian.
    """
    if k_factor < 0:
        raise ValueError("k_factor must be >= 0")
    los = np.ones((rows, cols), dtype=complex)
    nlos = (rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))) / np.sqrt(2.0)
    return np.sqrt(mean_power) * (
        np.sqrt(k_factor / (k_factor + 1.0)) * los
        + np.sqrt(1.0 / (k_factor + 1.0)) * nlos
    )


def path_gain(cfg: SystemConfig, dist: float, antenna_gain: float) -> float:
    """Log-distance large-scale gain: antenna_gain * (d_ref / d) ** exponent."""
    return antenna_gain * (cfg.reference_distance / dist) ** cfg.path_loss_exponent


_G_RANK_RTOL = 1e-10


def draw_channels(cfg: SystemConfig, geo: Geometry, seed: int) -> ChannelRealization:
    """Draw one full channel realization; deterministic in (cfg, geo, seed).

    The uplink matrix G = [g_1 ... g_M] is redrawn (with a perturbed
    substream) in the probability-zero event that it loses full column
    rank, preserving the fading distribution almost surely.
    """
    n, n_eh = cfg.n_bs_antennas, cfg.n_eh_antennas
    kk, mm, jj = cfg.n_dl_users, cfg.n_ul_users, cfg.n_harvesters
    gain_bs_user = cfg.bs_antenna_gain * cfg.user_antenna_gain
    gain_user_user = cfg.user_antenna_gain**2

    rng_dl = substream(seed, _CHANNELS, _KIND_DL)
    h = np.zeros((kk, n), dtype=complex)
    for k in range(kk):
        h[k] = rayleigh_vector(n, path_gain(cfg, geo.dl_user_dist[k], gain_bs_user), rng_dl)

    g = np.zeros((mm, n), dtype=complex)
    for attempt in range(16):
        rng_ul = substream(seed, _CHANNELS, _KIND_UL, attempt)
        for m in range(mm):
            g[m] = rayleigh_vector(n, path_gain(cfg, geo.ul_user_dist[m], gain_bs_user), rng_ul)
        if mm == 0:
            break
        sv = np.linalg.svd(g.T, compute_uv=False)
        if sv[-1] > _G_RANK_RTOL * sv[0]:
            break
        log.warning("rank-deficient uplink matrix on attempt %d; redrawing", attempt)
    else:
        raise RuntimeError("uplink channel matrix remained rank-deficient after redraws")

    rng_cci = substream(seed, _CHANNELS, _KIND_CCI)
    f = np.zeros((mm, kk), dtype=complex)
    for m in range(mm):
        for k in range(kk):
            f[m, k] = rayleigh_vector(
                1, path_gain(cfg, geo.ul_dl_pair_dist[m, k], gain_user_user), rng_cci
            )[0]

    rng_si = substream(seed, _CHANNELS, _KIND_SI)
    h_si = rician_matrix(n, n, cfg.rician_k_factor, 1.0, rng_si)

    rng_ehb = substream(seed, _CHANNELS, _KIND_EH_BS)
    omega = np.zeros((jj, n, n_eh), dtype=complex)
    for j in range(jj):
        omega[j] = rician_matrix(
            n, n_eh, cfg.rician_k_factor,
            path_gain(cfg, geo.harvester_dist[j], gain_bs_user), rng_ehb,
        )

    rng_ehu = substream(seed, _CHANNELS, _KIND_EH_UL)
    phi = np.zeros((jj, mm, n_eh), dtype=complex)
    for j in range(jj):
        for m in range(mm):
            d = np.linalg.norm(geo.ul_pos[m] - geo.eh_pos[j])
            phi[j, m] = rician_matrix(
                n_eh, 1, cfg.rician_k_factor,
                path_gain(cfg, d, gain_user_user), rng_ehu,
            )[:, 0]

    return ChannelRealization(h=h, g=g, f=f, h_si=h_si, omega=omega, phi=phi)


# --------------------------------------------------------------------------
# Regression fixtures: binary blob + CSV manifest.
# --------------------------------------------------------------------------

def _fixture_entries(chan: ChannelRealization) -> list[tuple[str, np.ndarray]]:
    entries = [("h", chan.h), ("g", chan.g), ("f", chan.f), ("h_si", chan.h_si)]
    for j in range(chan.n_harvesters):
        entries.append((f"omega[{j}]", chan.omega[j]))
    for j in range(chan.n_harvesters):
        entries.append((f"phi[{j}]", chan.phi[j]))
    return entries


def dump_channels(chan: ChannelRealization, base: str | Path) -> None:
    """Write ``base``.bin / ``base``.csv regression fixture.

    The binary file holds each matrix row-major as interleaved
    real/imag little-endian float64; the CSV manifest records name,
    byte offset, and shape per matrix.
    """
    base = Path(base)
    offset = 0
    rows = []
    with open(base.with_suffix(".bin"), "wb") as fb:
        for name, arr in _fixture_entries(chan):
            flat = np.empty(arr.size * 2, dtype="<f8")
            flat[0::2] = arr.real.ravel(order="C")
            flat[1::2] = arr.imag.ravel(order="C")
            fb.write(flat.tobytes())
            rows.append((name, offset, arr.shape[0], arr.shape[1]))
            offset += flat.nbytes
    with open(base.with_suffix(".csv"), "w", newline="") as fc:
        w = csv.writer(fc)
        w.writerow(["name", "offset_bytes", "rows", "cols"])
        w.writerows(rows)


def load_channels(base: str | Path) -> ChannelRealization:
    """Read a fixture written by dump_channels."""
    base = Path(base)
    blob = base.with_suffix(".bin").read_bytes()
    mats: dict[str, np.ndarray] = {}
    with open(base.with_suffix(".csv"), newline="") as fc:
        for rec in csv.DictReader(fc):
            r, c = int(rec["rows"]), int(rec["cols"])
            off = int(rec["offset_bytes"])
            flat = np.frombuffer(blob, dtype="<f8", count=r * c * 2, offset=off)
            mats[rec["name"]] = (flat[0::2] + 1j * flat[1::2]).reshape(r, c)
    jj = sum(1 for name in mats if name.startswith("omega["))
    omega = np.stack([mats[f"omega[{j}]"] for j in range(jj)]) if jj else np.zeros((0, 0, 0), complex)
    phi = np.stack([mats[f"phi[{j}]"] for j in range(jj)]) if jj else np.zeros((0, 0, 0), complex)
    return ChannelRealization(
        h=mats["h"], g=mats["g"], f=mats["f"], h_si=mats["h_si"], omega=omega, phi=phi
    )
