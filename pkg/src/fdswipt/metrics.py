"""Closed-form physical-layer metrics for a candidate allocation.

These are the honest, vector-form formulas: receive SINRs for both
links, harvested power, transmit powers, and the per-constraint QoS
slacks.  The optimizer uses the lifted matrix forms of the same
quantities, so this module doubles as the independent verifier for
recovered solutions.

Tolerances for the feasibility verdict: 1e-7 absolute on quantities in
watts, 1e-7 relative on SINR ratios (watt scales span many orders of
magnitude in the shipped scenarios, SINR targets do not).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization
from .config import SystemConfig

ABS_TOL_W = 1e-7
REL_TOL_SINR = 1e-7


class SingularChannelError(np.linalg.LinAlgError):
    """Uplink matrix not full column rank; carries the condition number."""

    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(
            f"uplink channel matrix is numerically rank-deficient (cond={cond:.3e}); "
            "zero-forcing reception is undefined"
        )


@dataclass(frozen=True)
class Allocation:
    """A physical resource allocation: K downlink beams, one energy
    covariance, and M uplink powers."""

    w: np.ndarray  # (K, N) complex beamforming vectors
    q_cov: np.ndarray  # (N, N) complex Hermitian PSD
    p_ul: np.ndarray  # (M,) watts

    def validate(self) -> "Allocation":
        q = self.q_cov
        herm_err = np.linalg.norm(q - q.conj().T)
        if herm_err > 1e-10 * max(1.0, np.linalg.norm(q)):
            raise ValueError(f"energy covariance not Hermitian (|Q - Q^H| = {herm_err:.2e})")
        trace = float(np.trace(q).real)
        min_eig = float(np.linalg.eigvalsh((q + q.conj().T) / 2.0)[0])
        if min_eig < -1e-9 * max(trace, 1e-30):
            raise ValueError(f"energy covariance not PSD (min eig {min_eig:.2e})")
        if np.any(self.p_ul < 0):
            raise ValueError("uplink powers must be non-negative")
        return self


@dataclass(frozen=True)
class QosCheckReport:
    """Per-constraint slacks for one allocation.

    Slacks for power-type constraints are in watts; SINR slacks are
    relative, (achieved - required) / required.  ``feasible`` holds iff
    every slack clears its tolerance.
    """

    slacks: dict[str, float]
    feasible: bool


@dataclass(frozen=True)
class MetricsReport:
    dl_sinr: np.ndarray  # (K,)
    ul_sinr: np.ndarray  # (M,)
    eh_power: np.ndarray  # (J,) watts
    dl_tx_power: float
    ul_tx_power: float
    objectives: tuple[float, float, float]  # (F1, F2, F3 = -sum EH)
    qos: QosCheckReport

    def csv_header(self) -> str:
        """Column order: feasible, dl_tx_power_w, ul_tx_power_w, f1_w,
        f2_w, f3_w, dl_sinr[k]..., ul_sinr[m]..., eh_power_w[j]...
        """
        cols = ["feasible", "dl_tx_power_w", "ul_tx_power_w", "f1_w", "f2_w", "f3_w"]
        cols += [f"dl_sinr[{k}]" for k in range(len(self.dl_sinr))]
        cols += [f"ul_sinr[{m}]" for m in range(len(self.ul_sinr))]
        cols += [f"eh_power_w[{j}]" for j in range(len(self.eh_power))]
        return ",".join(cols)

    def csv_row(self) -> str:
        vals = [
            "1" if self.qos.feasible else "0",
            repr(self.dl_tx_power),
            repr(self.ul_tx_power),
            *(repr(x) for x in self.objectives),
            *(repr(float(x)) for x in self.dl_sinr),
            *(repr(float(x)) for x in self.ul_sinr),
            *(repr(float(x)) for x in self.eh_power),
        ]
        return ",".join(vals)


def zf_receive_matrix(g_list: np.ndarray) -> np.ndarray:
    """Zero-forcing receive matrix Z = (G^H G)^-1 G^H for G = [g_1 .. g_M].

    ``g_list`` has uplink channel vectors as rows, shape (M, N); the
    returned Z is (M, N) with Z @ G = I_M.  Raises SingularChannelError
    when G is numerically rank-deficient.
    """
    g_list = np.asarray(g_list, dtype=complex)
    m = g_list.shape[0]
    if m == 0:
        return np.zeros((0, g_list.shape[1] if g_list.ndim == 2 else 0), dtype=complex)
    gmat = g_list.T  # (N, M)
    sv = np.linalg.svd(gmat, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularChannelError(cond=float(sv[0] / max(sv[-1], 1e-300)))
    gram = gmat.conj().T @ gmat
    return np.linalg.solve(gram, gmat.conj().T)


def _zf_vectors(chan: ChannelRealization) -> np.ndarray:
    """Receive vectors z_m such that z_m^H g_i = delta_mi.

    These are the conjugated rows of the zero-forcing matrix; every
    quantity downstream (|g^H z|^2, z^H diag(.) z, |z|^2) is what the
    matrix rows produce under plain products.
    """
    return zf_receive_matrix(chan.g).conj()


def downlink_sinr(alloc: Allocation, chan: ChannelRealization, cfg: SystemConfig,
                  k: int, duplex: str = "fd") -> float:
    """Receive SINR of downlink user k.

    |h_k^H w_k|^2 over (other beams + uplink co-channel interference +
    noise).  The energy beam never appears: its pseudo-random sequence
    is known at the users and cancelled before decoding.  Half-duplex
    operation drops the co-channel term.
    """
    hk = chan.h[k]
    sig = abs(np.vdot(hk, alloc.w[k])) ** 2
    interf = sum(
        abs(np.vdot(hk, alloc.w[i])) ** 2 for i in range(chan.n_dl_users) if i != k
    )
    if duplex == "fd":
        interf += float(np.sum(alloc.p_ul * np.abs(chan.f[:, k]) ** 2))
    return sig / (interf + cfg.noise_dl[k])


def si_leakage_power(alloc: Allocation, chan: ChannelRealization, cfg: SystemConfig,
                     z_m: np.ndarray) -> float:
    """Residual self-interference power at the BS after cancellation,
    rho * z^H diag(H_si (sum_k w_k w_k^H + Q) H_si^H) z."""
    x_cov = alloc.q_cov + sum(np.outer(wk, wk.conj()) for wk in alloc.w)
    a = chan.h_si @ x_cov @ chan.h_si.conj().T
    return float(cfg.si_noisiness * np.sum(np.abs(z_m) ** 2 * np.real(np.diag(a))))


def uplink_sinr(alloc: Allocation, chan: ChannelRealization, cfg: SystemConfig,
                m: int, duplex: str = "fd") -> float:
    """Receive SINR of uplink user m under zero-forcing reception.

    The inter-user term is computed, not assumed zero, so this stays an
    honest check for solutions produced in the lifted formulation.
    Half-duplex operation drops the self-interference term.
    """
    z = _zf_vectors(chan)
    zm = z[m]
    sig = alloc.p_ul[m] * abs(np.vdot(zm, chan.g[m])) ** 2
    interf = sum(
        alloc.p_ul[i] * abs(np.vdot(zm, chan.g[i])) ** 2
        for i in range(chan.n_ul_users)
        if i != m
    )
    if duplex == "fd":
        interf += si_leakage_power(alloc, chan, cfg, zm)
    return sig / (interf + cfg.noise_ul * float(np.vdot(zm, zm).real))


def harvested_power(alloc: Allocation, chan: ChannelRealization, cfg: SystemConfig,
                    j: int, duplex: str = "fd") -> float:
    """Power harvested by node j.

    eta_j * [ sum_k |Omega_j^H w_k|^2 + Tr(Omega_j^H Q Omega_j)
              + sum_m P_m |phi_jm|^2 ];  thermal noise is ignored, being
    negligible next to the received signal power.  In half-duplex
    operation each link is active in one of two equal slots, so the
    reported value is the time average (half of each phase's harvest).
    """
    om = chan.omega[j]
    dl_part = sum(float(np.linalg.norm(om.conj().T @ wk) ** 2) for wk in alloc.w)
    dl_part += float(np.trace(om.conj().T @ alloc.q_cov @ om).real)
    ul_part = float(
        np.sum(alloc.p_ul * np.sum(np.abs(chan.phi[j]) ** 2, axis=1))
    )
    scale = 0.5 if duplex == "hd" else 1.0
    return cfg.eh_efficiency[j] * scale * (dl_part + ul_part)


def hd_sinr_target(gamma: float) -> float:
    """SINR required in one half-duplex slot to match the full-duplex
    rate target gamma over the full interval: (1 + gamma)^2 - 1."""
    return (1.0 + gamma) ** 2 - 1.0


def evaluate(alloc: Allocation, chan: ChannelRealization, cfg: SystemConfig,
             duplex: str = "fd") -> MetricsReport:
    """All metrics plus per-constraint slacks for one allocation.

    With ``duplex='hd'`` the SINRs drop self- and co-channel
    interference, the SINR requirements are the half-duplex targets
    (1+gamma)^2 - 1, and harvested power is the two-phase time average.
    """
    if duplex not in ("fd", "hd"):
        raise ValueError(f"duplex must be 'fd' or 'hd', got {duplex!r}")
    kk, mm, jj = chan.n_dl_users, chan.n_ul_users, chan.n_harvesters

    dl = np.array([downlink_sinr(alloc, chan, cfg, k, duplex) for k in range(kk)])
    ul = np.array([uplink_sinr(alloc, chan, cfg, m, duplex) for m in range(mm)])
    eh = np.array([harvested_power(alloc, chan, cfg, j, duplex) for j in range(jj)])

    dl_tx = float(sum(np.linalg.norm(wk) ** 2 for wk in alloc.w) + np.trace(alloc.q_cov).real)
    ul_tx = float(np.sum(alloc.p_ul))
    f3 = -float(np.sum(eh))

    req_dl = np.asarray(cfg.sinr_req_dl)
    req_ul = np.asarray(cfg.sinr_req_ul)
    if duplex == "hd":
        req_dl = np.array([hd_sinr_target(g) for g in req_dl])
        req_ul = np.array([hd_sinr_target(g) for g in req_ul])

    slacks: dict[str, float] = {"dl_budget": cfg.p_max_dl - dl_tx}
    for m in range(mm):
        slacks[f"ul_cap[{m}]"] = cfg.p_max_ul[m] - float(alloc.p_ul[m])
    for k in range(kk):
        slacks[f"dl_sinr[{k}]"] = (float(dl[k]) - req_dl[k]) / req_dl[k]
    for m in range(mm):
        slacks[f"ul_sinr[{m}]"] = (float(ul[m]) - req_ul[m]) / req_ul[m]
    for j in range(jj):
        slacks[f"eh_min[{j}]"] = float(eh[j]) - cfg.eh_min[j]
    for m in range(mm):
        slacks[f"ul_nonneg[{m}]"] = float(alloc.p_ul[m])
    q_sym = (alloc.q_cov + alloc.q_cov.conj().T) / 2.0
    slacks["energy_cov_psd"] = float(np.linalg.eigvalsh(q_sym)[0]) if q_sym.size else 0.0

    feasible = True
    for name, slack in slacks.items():
        tol = REL_TOL_SINR if "sinr" in name else ABS_TOL_W
        if slack < -tol:
            feasible = False

    return MetricsReport(
        dl_sinr=dl,
        ul_sinr=ul,
        eh_power=eh,
        dl_tx_power=dl_tx,
        ul_tx_power=ul_tx,
        objectives=(dl_tx, ul_tx, f3),
        qos=QosCheckReport(slacks=slacks, feasible=feasible),
    )
