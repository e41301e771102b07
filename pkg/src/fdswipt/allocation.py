"""Resource-allocation problems: single-objective solves, the weighted
min-max scalarization over (downlink power, uplink power, negated
harvested energy), rank-one beamformer recovery, optimality diagnostics,
and the half-duplex baseline.

The quadratic SINR constraints become linear in the lifted variables
W_k = w_k w_k^H (plus the energy covariance Q and uplink powers P_m),
at the price of a rank-one constraint on each W_k that is dropped for
the solve.  Under statistically independent channels and positive SINR
targets the relaxation is tight: every optimal W_k is rank one and the
optimal Q has rank at most one, which recovery checks instance by
instance instead of assuming.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .channel import ChannelRealization
from .config import SystemConfig
from .metrics import Allocation, MetricsReport, evaluate, hd_sinr_target, zf_receive_matrix

OBJECTIVE_KINDS = ("dl", "ul", "eh")
CONTRACT_DUAL = sdp.CONTRACT_RESIDUAL


class InfeasibleError(RuntimeError):
    """The QoS constraint set is empty for this channel realization."""

    def __init__(self, binding: list[str], message: str = ""):
        self.binding = binding
        text = "QoS requirements are infeasible for this realization"
        if binding:
            text += "; most implicated constraints: " + ", ".join(binding)
        if message:
            text += f" ({message})"
        super().__init__(text)


class SolverFailureError(RuntimeError):
    """The conic backend did not return a usable optimal solution."""

    def __init__(self, solution: sdp.ConicSolution):
        self.solution = solution
        super().__init__(
            f"solver failure [{solution.backend}]: status={solution.status} "
            f"{solution.message}"
        )


@dataclass(frozen=True)
class WeightVector:
    """Preference weights over the three objectives; entries in [0, 1]
    summing to one."""

    l1: float
    l2: float
    l3: float

    def __post_init__(self):
        vals = (self.l1, self.l2, self.l3)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError(f"weights must lie in [0, 1]: {vals}")
        if abs(sum(vals) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1: {vals}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.l1, self.l2, self.l3)

    def corner(self) -> int | None:
        """Index (1-based) of the objective with unit weight, if any."""
        for n, v in enumerate(self.as_tuple(), start=1):
            if v == 1.0:
                return n
        return None


@dataclass(frozen=True)
class IdealPoint:
    """Per-objective optima of the shared constraint set; the reference
    point of the min-max scalarization."""

    f_star: tuple[float, float, float]
    allocations: dict[int, "RelaxedAllocation"] = field(repr=False, default_factory=dict)


@dataclass
class RankReport:
    w_fraction: np.ndarray  # per-beam dominant-eigenvalue fraction of trace
    q_fraction: float | None  # None when Q is (numerically) zero
    w_rank: list[int]
    q_rank: int
    rank_one_ok: bool
    tol: float

    def to_record(self) -> dict:
        return {
            "w_fraction": [float(x) for x in self.w_fraction],
            "q_fraction": self.q_fraction,
            "w_rank": self.w_rank,
            "q_rank": self.q_rank,
            "rank_one_ok": self.rank_one_ok,
            "tol": self.tol,
        }


class RankOneRecoveryError(RuntimeError):
    """A lifted beamforming matrix was not numerically rank one."""

    def __init__(self, report: RankReport):
        self.report = report
        worst = float(np.min(report.w_fraction)) if len(report.w_fraction) else 1.0
        if report.q_fraction is not None:
            worst = min(worst, report.q_fraction)
        super().__init__(
            f"rank-one recovery failed: worst dominant-eigenvalue fraction "
            f"{worst:.8f} < 1 - {report.tol:g}"
        )


class RecoveryVerificationError(RuntimeError):
    """A recovered allocation failed independent re-verification."""

    def __init__(self, report: MetricsReport):
        self.metrics = report
        bad = {k: v for k, v in report.qos.slacks.items() if v < 0}
        super().__init__(f"recovered allocation re-verifies infeasible: {bad}")


@dataclass
class KktReport:
    """Complementary-slackness and dual-rank diagnostics at an optimum.

    The dual matrices are reconstructed from the scalar constraint
    multipliers via stationarity, then checked against the solver's own
    PSD duals (reconstruction_err) and against the primal blocks.
    """

    yq_norm: float
    xw_norms: list[float]
    yq_scale: float
    xw_scales: list[float]
    rank_y: int
    rank_x: list[int]
    reconstruction_err: float
    slackness_ok: bool
    dual_rank_ok: bool
    ok: bool

    def to_record(self) -> dict:
        return {
            "yq_norm": self.yq_norm,
            "xw_norms": self.xw_norms,
            "yq_scale": self.yq_scale,
            "xw_scales": self.xw_scales,
            "rank_y": self.rank_y,
            "rank_x": self.rank_x,
            "reconstruction_err": self.reconstruction_err,
            "slackness_ok": self.slackness_ok,
            "dual_rank_ok": self.dual_rank_ok,
            "ok": self.ok,
        }


@dataclass
class RelaxedAllocation:
    """Solution of one relaxed solve, in the lifted variables, together
    with the solved problem and its dual payload."""

    w_lift: np.ndarray  # (K, N, N) Hermitian PSD
    q_cov: np.ndarray  # (N, N)
    p_ul: np.ndarray  # (M,)
    tau: float | None
    objective_values: tuple[float, float, float]
    duplex: str
    kind: str  # 'dl' | 'ul' | 'eh' | 'tcheby'
    weights: WeightVector | None
    solution: sdp.ConicSolution = field(repr=False)
    problem: sdp.ConicProblem = field(repr=False)

    def to_record(self) -> dict:
        def cplx(a: np.ndarray):
            return [[[float(v.real), float(v.imag)] for v in row] for row in a]

        return {
            "kind": self.kind,
            "duplex": self.duplex,
            "weights": self.weights.as_tuple() if self.weights else None,
            "tau": self.tau,
            "objective_values": list(self.objective_values),
            "p_ul": [float(p) for p in self.p_ul],
            "q_cov": cplx(self.q_cov),
            "w_lift": [cplx(w) for w in self.w_lift],
            "rel_gap": self.solution.rel_gap,
            "primal_residual": self.solution.primal_residual,
            "dual_residual": self.solution.dual_residual,
            "backend": self.solution.backend,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2)


# --------------------------------------------------------------------------
# Lifted constants shared by all constraint builders.
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LiftedConstants:
    h_outer: np.ndarray  # (K, N, N): h_k h_k^H
    zf_gain: np.ndarray  # (M, M): |z_m^H g_i|^2, rows m
    z_norm2: np.ndarray  # (M,): |z_m|^2
    si_quad: np.ndarray  # (M, N, N): rho * H_si^H diag(|z_m|^2) H_si
    eh_outer: np.ndarray  # (J, N, N): Omega_j Omega_j^H
    phi_norm2: np.ndarray  # (J, M): |phi_jm|^2


def lifted_constants(chan: ChannelRealization, cfg: SystemConfig) -> LiftedConstants:
    kk, mm, jj = chan.n_dl_users, chan.n_ul_users, chan.n_harvesters
    n = chan.n_bs_antennas
    h_outer = np.stack([np.outer(chan.h[k], chan.h[k].conj()) for k in range(kk)]) \
        if kk else np.zeros((0, n, n), complex)
    zmat = zf_receive_matrix(chan.g)
    if mm:
        cross = zmat @ chan.g.T  # (M, M): z_m^H g_i for z_m = conj(row m)
        zf_gain = np.abs(cross) ** 2
        z_norm2 = np.sum(np.abs(zmat) ** 2, axis=1)
        si_quad = np.stack([
            cfg.si_noisiness
            * chan.h_si.conj().T @ np.diag(np.abs(zmat[m]) ** 2) @ chan.h_si
            for m in range(mm)
        ])
    else:
        zf_gain = np.zeros((0, 0))
        z_norm2 = np.zeros(0)
        si_quad = np.zeros((0, n, n), complex)
    eh_outer = np.stack([chan.omega[j] @ chan.omega[j].conj().T for j in range(jj)]) \
        if jj else np.zeros((0, n, n), complex)
    phi_norm2 = np.sum(np.abs(chan.phi) ** 2, axis=2) if jj else np.zeros((0, mm))
    return LiftedConstants(h_outer, zf_gain, z_norm2, si_quad, eh_outer, phi_norm2)


def _dl_power_expr(kk: int, n: int) -> sdp.LinExpr:
    e = sdp.LinExpr()
    eye = np.eye(n)
    for k in range(kk):
        e.add_psd(f"W[{k}]", eye)
    e.add_psd("Q", eye)
    return e


def _ul_power_expr(mm: int) -> sdp.LinExpr:
    e = sdp.LinExpr()
    for m in range(mm):
        e.add_scalar(f"P[{m}]", 1.0)
    return e


def _eh_total_expr(cfg: SystemConfig, lift: LiftedConstants, hd: bool) -> sdp.LinExpr:
    """Total harvested power, time-averaged over the two slots in
    half-duplex operation."""
    e = sdp.LinExpr()
    scale = 0.5 if hd else 1.0
    jj = lift.eh_outer.shape[0]
    kk = lift.h_outer.shape[0]
    mm = lift.phi_norm2.shape[1] if jj else len(lift.z_norm2)
    for j in range(jj):
        coeff = cfg.eh_efficiency[j] * scale
        for k in range(kk):
            e.add_psd(f"W[{k}]", coeff * lift.eh_outer[j])
        e.add_psd("Q", coeff * lift.eh_outer[j])
        for m in range(mm):
            e.add_scalar(f"P[{m}]", coeff * lift.phi_norm2[j, m])
    return e


def build_transformed(
    chan: ChannelRealization,
    cfg: SystemConfig,
    objective: str,
    weights: WeightVector | None = None,
    ideal: IdealPoint | None = None,
    hd: bool = False,
    anchor: tuple[str, float] | None = None,
) -> sdp.ConicProblem:
    """Assemble the relaxed allocation problem for one realization.

    ``objective`` is 'dl' (minimize downlink transmit power), 'ul'
    (minimize uplink transmit power), 'eh' (maximize total harvested
    power, built as minimizing its negation), or 'tcheby' (minimize the
    worst weighted deviation from the ideal point; requires ``weights``
    and ``ideal``).

    ``anchor = (kind, bound)`` additionally caps the objective of
    ``kind`` at ``bound``; used to select a specific point of a
    degenerate optimal face by a secondary minimization.

    The half-duplex variant replaces each SINR target gamma with
    (1 + gamma)^2 - 1, drops self-interference from the uplink rows and
    co-channel interference from the downlink rows, and time-averages
    harvested power over the two slots.
    """
    if objective not in OBJECTIVE_KINDS + ("tcheby",):
        raise ValueError(f"unknown objective {objective!r}")
    lift = lifted_constants(chan, cfg)
    kk, mm, jj = chan.n_dl_users, chan.n_ul_users, chan.n_harvesters
    n = chan.n_bs_antennas

    prob = sdp.ConicProblem(name=f"{'hd-' if hd else ''}{objective}")
    for k in range(kk):
        prob.add_psd_var(f"W[{k}]", n)
    prob.add_psd_var("Q", n)
    for m in range(mm):
        prob.add_scalar_var(f"P[{m}]")
    if objective == "tcheby":
        prob.add_scalar_var("tau")

    prob.add_linear_constraint(_dl_power_expr(kk, n), "<=", cfg.p_max_dl, "dl_budget")
    for m in range(mm):
        prob.add_linear_constraint(
            sdp.LinExpr().add_scalar(f"P[{m}]", 1.0), "<=", cfg.p_max_ul[m],
            f"ul_cap[{m}]",
        )

    for k in range(kk):
        gamma = cfg.sinr_req_dl[k]
        if hd:
            gamma = hd_sinr_target(gamma)
        e = sdp.LinExpr().add_psd(f"W[{k}]", lift.h_outer[k] / gamma)
        for i in range(kk):
            if i != k:
                e.add_psd(f"W[{i}]", -lift.h_outer[k])
        if not hd:
            for m in range(mm):
                e.add_scalar(f"P[{m}]", -float(np.abs(chan.f[m, k]) ** 2))
        prob.add_linear_constraint(e, ">=", cfg.noise_dl[k], f"dl_sinr[{k}]")

    for m in range(mm):
        gamma = cfg.sinr_req_ul[m]
        if hd:
            gamma = hd_sinr_target(gamma)
        e = sdp.LinExpr().add_scalar(f"P[{m}]", float(lift.zf_gain[m, m]) / gamma)
        for i in range(mm):
            if i != m:
                e.add_scalar(f"P[{i}]", -float(lift.zf_gain[m, i]))
        if not hd:
            for k in range(kk):
                e.add_psd(f"W[{k}]", -lift.si_quad[m])
            e.add_psd("Q", -lift.si_quad[m])
        prob.add_linear_constraint(
            e, ">=", cfg.noise_ul * float(lift.z_norm2[m]), f"ul_sinr[{m}]"
        )

    eh_expr = _eh_total_expr(cfg, lift, hd)
    scale = 0.5 if hd else 1.0
    for j in range(jj):
        e = sdp.LinExpr()
        coeff = cfg.eh_efficiency[j] * scale
        for k in range(kk):
            e.add_psd(f"W[{k}]", coeff * lift.eh_outer[j])
        e.add_psd("Q", coeff * lift.eh_outer[j])
        for m in range(mm):
            e.add_scalar(f"P[{m}]", coeff * lift.phi_norm2[j, m])
        prob.add_linear_constraint(e, ">=", cfg.eh_min[j], f"eh_min[{j}]")

    for m in range(mm):
        prob.add_linear_constraint(
            sdp.LinExpr().add_scalar(f"P[{m}]", 1.0), ">=", 0.0, f"ul_nonneg[{m}]"
        )

    if anchor is not None:
        kind, bound = anchor
        exprs = {"dl": _dl_power_expr(kk, n), "ul": _ul_power_expr(mm),
                 "eh": eh_expr.scaled(-1.0)}
        prob.add_linear_constraint(exprs[kind], "<=", float(bound), "anchor")

    if objective == "dl":
        prob.set_objective("min", _dl_power_expr(kk, n))
    elif objective == "ul":
        prob.set_objective("min", _ul_power_expr(mm))
    elif objective == "eh":
        prob.set_objective("min", eh_expr.scaled(-1.0))
    else:
        if weights is None or ideal is None:
            raise ValueError("the scalarized problem needs weights and an ideal point")
        exprs = {
            1: _dl_power_expr(kk, n),
            2: _ul_power_expr(mm),
            3: eh_expr.scaled(-1.0),
        }
        for nn, lam in enumerate(weights.as_tuple(), start=1):
            e = exprs[nn].scaled(lam).plus(
                sdp.LinExpr().add_scalar("tau", -1.0)
            )
            prob.add_linear_constraint(
                e, "<=", lam * ideal.f_star[nn - 1], f"deviation[{nn}]"
            )
        prob.set_objective("min", sdp.LinExpr().add_scalar("tau", 1.0))
    return prob


# --------------------------------------------------------------------------
# Solving.
# --------------------------------------------------------------------------

def _objective_triple(
    chan: ChannelRealization, cfg: SystemConfig, sol: sdp.ConicSolution, hd: bool
) -> tuple[float, float, float]:
    lift = lifted_constants(chan, cfg)
    kk = chan.n_dl_users
    n = chan.n_bs_antennas
    f1 = sdp.expr_value(_dl_power_expr(kk, n), sol)
    f2 = sdp.expr_value(_ul_power_expr(chan.n_ul_users), sol)
    f3 = -sdp.expr_value(_eh_total_expr(cfg, lift, hd), sol)
    return (f1, f2, f3)


def _solution_to_allocation(
    chan: ChannelRealization,
    cfg: SystemConfig,
    prob: sdp.ConicProblem,
    sol: sdp.ConicSolution,
    kind: str,
    weights: WeightVector | None,
    hd: bool,
) -> RelaxedAllocation:
    if sol.status == "infeasible":
        raise InfeasibleError(sol.binding_hint, sol.message)
    if sol.status != "optimal":
        raise SolverFailureError(sol)
    kk, mm = chan.n_dl_users, chan.n_ul_users
    n = chan.n_bs_antennas
    w_lift = np.stack([sol.blocks[f"W[{k}]"] for k in range(kk)]) if kk \
        else np.zeros((0, n, n), complex)
    return RelaxedAllocation(
        w_lift=w_lift,
        q_cov=sol.blocks["Q"],
        p_ul=np.array([sol.scalars[f"P[{m}]"] for m in range(mm)]),
        tau=sol.scalars.get("tau"),
        objective_values=_objective_triple(chan, cfg, sol, hd),
        duplex="hd" if hd else "fd",
        kind=kind,
        weights=weights,
        solution=sol,
        problem=prob,
    )


def solve_single_objective(
    chan: ChannelRealization,
    cfg: SystemConfig,
    n: int,
    backend: str = "clarabel",
    tol: float = 1e-9,
    hd: bool = False,
) -> tuple[float, RelaxedAllocation]:
    """Solve objective n (1 = downlink power, 2 = uplink power,
    3 = harvested energy as negated maximization); returns the optimal
    value F_n* and the relaxed allocation.

    For n = 1 and n = 2 the optimal face is degenerate in the variables
    the objective ignores (any feasible uplink powers coexist with the
    minimal downlink power, and vice versa), and an interior-point
    solver parks mid-face there.  A second solve minimizes the
    counterpart transmit power subject to staying on the optimal face,
    which pins a deterministic, physically sensible representative
    without changing the reported optimum.
    """
    if n not in (1, 2, 3):
        raise ValueError("objective index must be 1, 2, or 3")
    kind = OBJECTIVE_KINDS[n - 1]
    prob = build_transformed(chan, cfg, kind, hd=hd)
    sol = sdp.solve(prob, tol=tol, backend=backend)
    f_star = float(sol.objective) if sol.objective is not None else None
    sol = _polish(chan, cfg, prob, sol, backend, tol)
    alloc = _solution_to_allocation(chan, cfg, prob, sol, kind, None, hd)
    return f_star, alloc


def _polish(chan: ChannelRealization, cfg: SystemConfig, prob: sdp.ConicProblem,
            sol: sdp.ConicSolution, backend: str, tol: float) -> sdp.ConicSolution:
    """Re-minimize uplink powers, then the energy covariance, then the
    beam matrices, at (nearly) fixed objective.

    Faces of these problems are degenerate in whatever the objective
    ignores, and the beam blocks often sit many orders below the power
    budget, where an interior-point pass cannot resolve their rank-one
    structure; the staged footprint minimization pins a deterministic
    representative whose beams are cleanly rank one.  The objective
    value is certified by the original solve's duality gap; only primal
    values are replaced.
    """
    if not sol.blocks or sol.objective is None:
        return sol
    if sol.rel_gap > 1e-7 or sol.dual_residual > CONTRACT_DUAL:
        return sol
    mm = chan.n_ul_users
    kk = chan.n_dl_users
    # beams are polished jointly (with per-block footprint weights): a
    # sequential per-beam pass leaves each later beam squeezed against
    # the freshly tightened rows of the earlier ones
    stages: list[set[str]] = []
    if mm:
        stages.append({f"P[{m}]" for m in range(mm)})
    stages.append({"Q"})
    w_stage = {f"W[{k}]" for k in range(kk)}
    if kk:
        stages.append(w_stage)
    out = sdp.polish_solution(prob, sol, stages, backend=backend, tol=tol)

    def worst_fraction(s: sdp.ConicSolution) -> float:
        worst = 1.0
        for name in list(w_stage) + ["Q"]:
            x = s.blocks[name]
            vals = np.linalg.eigvalsh((x + x.conj().T) / 2.0)
            tr = float(np.sum(np.clip(vals, 0.0, None)))
            if tr > 1e-12 * cfg.p_max_dl:
                worst = min(worst, float(vals[-1]) / tr)
        return worst

    # Iterate to self-consistency: the first sweep's fold margins are
    # sized on the incoming point's activities, which the sweep itself
    # may shrink by orders; re-sweeping re-measures them.  Also covers
    # stages that left residual eigenmass; varying the fold margin
    # breaks deterministic attractors of a stuck stage.
    def quality(s: sdp.ConicSolution) -> tuple:
        return (min(worst_fraction(s), 1.0 - 1e-9), -s.primal_residual)

    for margin in (1e-7, 1e-7, 1e-6, 3e-8):
        if worst_fraction(out) >= 1.0 - 1e-7 and out.primal_residual <= 3e-7:
            break
        nxt = sdp.polish_solution(prob, out, stages, backend=backend, tol=tol,
                                  fold_margin=margin)
        if quality(nxt) > quality(out):
            out = nxt
    return out


def compute_ideal_point(
    chan: ChannelRealization,
    cfg: SystemConfig,
    backend: str = "clarabel",
    tol: float = 1e-9,
    hd: bool = False,
) -> IdealPoint:
    """Per-objective optima for this realization, allocations cached."""
    f_star = []
    allocations = {}
    for n in (1, 2, 3):
        val, alloc = solve_single_objective(chan, cfg, n, backend=backend, tol=tol, hd=hd)
        f_star.append(val)
        allocations[n] = alloc
    return IdealPoint(f_star=tuple(f_star), allocations=allocations)


def solve_tchebycheff(
    chan: ChannelRealization,
    cfg: SystemConfig,
    weights: WeightVector,
    ideal: IdealPoint,
    backend: str = "clarabel",
    tol: float = 1e-9,
    hd: bool = False,
) -> RelaxedAllocation:
    """Minimize the largest weighted deviation from the ideal point.

    A unit weight on one objective makes the scalarized problem
    equivalent to that single-objective problem, so corner weight
    vectors are delegated to the direct solve: the shared deviation
    variable cannot resolve an objective whose scale is many orders
    below the others', while the direct solve is exact there.
    """
    corner = weights.corner()
    if corner is not None:
        _, alloc = solve_single_objective(
            chan, cfg, corner, backend=backend, tol=tol, hd=hd
        )
        alloc.weights = weights
        return alloc
    prob = build_transformed(chan, cfg, "tcheby", weights=weights, ideal=ideal, hd=hd)
    sol = sdp.solve(prob, tol=tol, backend=backend)
    sol = _polish(chan, cfg, prob, sol, backend, tol)
    return _solution_to_allocation(chan, cfg, prob, sol, "tcheby", weights, hd)


def solve_hd_baseline(
    chan: ChannelRealization,
    cfg: SystemConfig,
    weights: WeightVector,
    ideal_hd: IdealPoint,
    backend: str = "clarabel",
    tol: float = 1e-9,
) -> RelaxedAllocation:
    """Half-duplex baseline: same pipeline under the transformed SINR
    targets, no self-/co-channel interference, per-slot power caps, and
    time-averaged harvesting."""
    return solve_tchebycheff(chan, cfg, weights, ideal_hd, backend=backend,
                             tol=tol, hd=True)


# --------------------------------------------------------------------------
# Rank-one recovery.
# --------------------------------------------------------------------------

def _phase_normalize(w: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(w)
    if norm == 0:
        return w
    for v in w:
        if abs(v) > 1e-12 * norm:
            return w * (v.conj() / abs(v))
    return w


def _refit_powers(
    dirs: np.ndarray,  # (K, N) unit beam directions
    q_dir: np.ndarray | None,  # (N,) unit energy direction or None
    start: np.ndarray,  # (K + 1 + M,) initial powers [p_k..., q, P_m...]
    chan: ChannelRealization,
    cfg: SystemConfig,
    duplex: str,
    max_adjust: float = 1e-4,
) -> np.ndarray | None:
    """Exact-feasibility power refit at fixed beam directions.

    Eigenvector truncation loses a slice of each lifted matrix that can
    be more signal-aligned than its trace share, leaving the recovered
    point a hair outside the QoS set.  With directions frozen, every
    constraint is linear in the powers, so the smallest uniform relative
    power adjustment restoring exact feasibility is a tiny LP (solved
    with HiGHS).  Returns the adjusted powers, or None if no adjustment
    within ``max_adjust`` exists.
    """
    from scipy.optimize import linprog

    kk = dirs.shape[0]
    mm = chan.n_ul_users
    jj = chan.n_harvesters
    nv = kk + 1 + mm  # powers followed by the adjustment variable epsilon
    zmat = zf_receive_matrix(chan.g)

    # per-unit-power coefficient tables in the exact vector-form physics
    a = np.zeros((kk, kk))  # a[k, i] = |h_k^H u_i|^2
    for k in range(kk):
        for i in range(kk):
            a[k, i] = abs(np.vdot(chan.h[k], dirs[i])) ** 2
    aq = np.array([abs(np.vdot(chan.h[k], q_dir)) ** 2 if q_dir is not None else 0.0
                   for k in range(kk)])
    si_w = np.zeros((mm, kk))
    si_q = np.zeros(mm)
    gz = np.zeros((mm, mm))
    for m in range(mm):
        zm = zmat[m].conj()
        diag_w = [chan.h_si @ dirs[i] for i in range(kk)]
        for i in range(kk):
            si_w[m, i] = cfg.si_noisiness * float(
                np.sum(np.abs(zm) ** 2 * np.abs(diag_w[i]) ** 2)
            )
        if q_dir is not None:
            hq = chan.h_si @ q_dir
            si_q[m] = cfg.si_noisiness * float(np.sum(np.abs(zm) ** 2 * np.abs(hq) ** 2))
        for i in range(mm):
            gz[m, i] = abs(np.vdot(zm, chan.g[i])) ** 2
    r_w = np.zeros((jj, kk))
    r_q = np.zeros(jj)
    for j in range(jj):
        om = chan.omega[j]
        for i in range(kk):
            r_w[j, i] = float(np.linalg.norm(om.conj().T @ dirs[i]) ** 2)
        if q_dir is not None:
            r_q[j] = float(np.linalg.norm(om.conj().T @ q_dir) ** 2)
    phi2 = np.sum(np.abs(chan.phi) ** 2, axis=2) if jj else np.zeros((0, mm))

    req_dl = [hd_sinr_target(g) if duplex == "hd" else g for g in cfg.sinr_req_dl]
    req_ul = [hd_sinr_target(g) if duplex == "hd" else g for g in cfg.sinr_req_ul]
    eh_scale = 0.5 if duplex == "hd" else 1.0

    raw_rows, raw_rhs = [], []

    def add_ub(row, rhs):
        raw_rows.append(np.asarray(row, dtype=float))
        raw_rhs.append(float(rhs))

    for k in range(kk):
        row = np.zeros(nv)
        row[k] = -a[k, k]
        for i in range(kk):
            if i != k:
                row[i] = req_dl[k] * a[k, i]
        if duplex == "fd":
            for m in range(mm):
                row[kk + 1 + m] = req_dl[k] * float(np.abs(chan.f[m, k]) ** 2)
        add_ub(row, -req_dl[k] * cfg.noise_dl[k])
    for m in range(mm):
        row = np.zeros(nv)
        row[kk + 1 + m] = -gz[m, m]
        for i in range(mm):
            if i != m:
                row[kk + 1 + i] = req_ul[m] * gz[m, i]
        if duplex == "fd":
            for i in range(kk):
                row[i] = req_ul[m] * si_w[m, i]
            row[kk] = req_ul[m] * si_q[m]
        znorm2 = float(np.sum(np.abs(zmat[m]) ** 2))
        add_ub(row, -req_ul[m] * cfg.noise_ul * znorm2)
    for j in range(jj):
        row = np.zeros(nv)
        coeff = cfg.eh_efficiency[j] * eh_scale
        for i in range(kk):
            row[i] = -coeff * r_w[j, i]
        row[kk] = -coeff * r_q[j]
        for m in range(mm):
            row[kk + 1 + m] = -coeff * phi2[j, m]
        add_ub(row, -cfg.eh_min[j])
    row = np.zeros(nv)
    row[: kk + 1] = 1.0
    add_ub(row, cfg.p_max_dl)
    for m in range(mm):
        row = np.zeros(nv)
        row[kk + 1 + m] = 1.0
        add_ub(row, cfg.p_max_ul[m])

    # substitute x = start * (1 + y): rows become O(1) in the deviation
    # variables after activity normalization, which keeps every
    # constraint visible to the LP solver's absolute tolerances
    rows_y, rhs_y = [], []
    for row, rhs in zip(raw_rows, raw_rhs):
        coeff = row * start
        slack = rhs - float(row @ start)
        scale = float(np.sum(np.abs(coeff))) + abs(slack)
        if scale <= 0.0:
            continue
        # small strict-feasibility offset so the refitted point clears
        # the downstream verification rather than grazing it
        rows_y.append(np.append(coeff / scale, 0.0))
        rhs_y.append(slack / scale - 1e-10)
    # |y_i| <= eps
    for i in range(nv):
        if start[i] <= 0.0:
            continue
        e_row = np.zeros(nv + 1)
        e_row[i], e_row[nv] = 1.0, -1.0
        rows_y.append(e_row)
        rhs_y.append(0.0)
        e_row = np.zeros(nv + 1)
        e_row[i], e_row[nv] = -1.0, -1.0
        rows_y.append(e_row)
        rhs_y.append(0.0)

    opts = {"primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10}
    c = np.zeros(nv + 1)
    c[nv] = 1.0
    bounds = [(-1.0, None)] * nv + [(0.0, max_adjust)]
    for i in range(nv):
        if start[i] <= 0.0:
            bounds[i] = (0.0, 0.0)
    a_ub = np.array(rows_y)
    b_ub = np.array(rhs_y)
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs",
                  options=opts)
    if not res.success:
        return None
    eps = float(res.x[nv])

    # second phase: with the worst-case adjustment fixed, move as little
    # total mass as possible so untouched powers stay exactly put (an
    # epsilon-only LP vertex would otherwise park everything on the box)
    n_aux = nv
    a2 = np.zeros((a_ub.shape[0] + 2 * nv, nv + 1 + n_aux))
    b2 = np.zeros(a_ub.shape[0] + 2 * nv)
    a2[: a_ub.shape[0], : nv + 1] = a_ub
    b2[: a_ub.shape[0]] = b_ub
    for i in range(nv):
        r = a_ub.shape[0] + 2 * i
        a2[r, i], a2[r, nv + 1 + i] = 1.0, -1.0
        a2[r + 1, i], a2[r + 1, nv + 1 + i] = -1.0, -1.0
    c2 = np.zeros(nv + 1 + n_aux)
    c2[nv + 1:] = 1.0
    bounds2 = bounds[:nv] + [(eps, eps)] + [(0.0, None)] * n_aux
    res2 = linprog(c2, A_ub=a2, b_ub=b2, bounds=bounds2, method="highs",
                   options=opts)
    if res2.success:
        return start * (1.0 + np.asarray(res2.x[:nv]))
    return start * (1.0 + np.asarray(res.x[:nv]))


def recover_beamformers(
    rel: RelaxedAllocation,
    chan: ChannelRealization,
    cfg: SystemConfig,
    tol: float = 1e-5,
) -> tuple[Allocation, RankReport]:
    """Extract physical beamformers from a lifted optimum.

    Each beam is sqrt(lambda_max) times the dominant eigenvector of its
    lifted matrix, with the global phase fixed so the first significant
    entry is real-positive.  The energy covariance is clipped to its
    dominant eigenpair, or zeroed when its trace is negligible against
    the downlink budget.  Raises RankOneRecoveryError when any dominant
    fraction falls below 1 - tol, and re-verifies the recovered
    allocation against the closed-form metrics before returning.
    """
    kk = rel.w_lift.shape[0]
    n = rel.q_cov.shape[0]
    dirs = np.zeros((kk, n), dtype=complex)
    beam_power = np.zeros(kk)
    fractions = np.zeros(kk)
    ranks = []
    for k in range(kk):
        wk = (rel.w_lift[k] + rel.w_lift[k].conj().T) / 2.0
        vals, vecs = np.linalg.eigh(wk)
        lam = float(vals[-1])
        tr = float(np.sum(np.clip(vals, 0.0, None)))
        fractions[k] = lam / tr if tr > 0 else 0.0
        ranks.append(int(np.sum(vals > tol * max(lam, 0.0))) if lam > 0 else 0)
        beam_power[k] = max(lam, 0.0)
        dirs[k] = _phase_normalize(vecs[:, -1])

    q_sym = (rel.q_cov + rel.q_cov.conj().T) / 2.0
    tr_q = float(np.trace(q_sym).real)
    # zero-threshold must sit far below any energy beam that carries a
    # binding harvest: with hot near-field harvester channels, covariances
    # of 1e-8 W already deliver the -20 dBm floor
    if tr_q <= 1e-12 * cfg.p_max_dl:
        q_dir = None
        q_power = 0.0
        q_fraction = None
        q_rank = 0
    else:
        vals, vecs = np.linalg.eigh(q_sym)
        lam = float(vals[-1])
        q_fraction = lam / tr_q
        q_rank = int(np.sum(vals > tol * lam))
        q_dir = vecs[:, -1]
        q_power = lam

    ok = bool(np.all(fractions >= 1.0 - tol)) and (
        q_fraction is None or q_fraction >= 1.0 - tol
    )
    report = RankReport(
        w_fraction=fractions, q_fraction=q_fraction, w_rank=ranks,
        q_rank=q_rank, rank_one_ok=ok, tol=tol,
    )
    if not ok:
        raise RankOneRecoveryError(report)

    # Truncating the lifted matrices sheds a sliver of signal and
    # harvest; a power-only refit at the recovered directions restores
    # exact feasibility with a relative adjustment at the sliver's scale.
    start = np.concatenate([beam_power, [q_power], rel.p_ul])
    refit = _refit_powers(dirs, q_dir, start, chan, cfg, rel.duplex)
    if refit is not None:
        beam_power = refit[:kk]
        q_power = float(refit[kk])
        p_ul = refit[kk + 1:]
    else:
        p_ul = rel.p_ul.copy()

    w = np.sqrt(beam_power)[:, None] * dirs
    q_rec = q_power * np.outer(q_dir, q_dir.conj()) if q_dir is not None \
        else np.zeros((n, n), dtype=complex)
    alloc = Allocation(w=w, q_cov=q_rec, p_ul=np.asarray(p_ul)).validate()
    verdict = evaluate(alloc, chan, cfg, duplex=rel.duplex)
    if not verdict.qos.feasible:
        raise RecoveryVerificationError(verdict)
    return alloc, report


# --------------------------------------------------------------------------
# Optimality diagnostics.
# --------------------------------------------------------------------------

def kkt_diagnostics(
    rel: RelaxedAllocation,
    slackness_tol: float = 1e-5,
    rank_rtol: float = 1e-6,
) -> KktReport:
    """Complementary slackness and dual-rank checks on a solved instance.

    The PSD multipliers are rebuilt from the scalar constraint duals via
    stationarity of the Lagrangian; complementary slackness requires
    each product with its primal block to vanish, and the beam
    multipliers must have rank at least N-1 (which is what pins every
    beam to rank one).
    """
    sol, prob = rel.solution, rel.problem
    if not sol.duals:
        raise ValueError("solution carries no duals; was the solve successful?")
    kk = rel.w_lift.shape[0]
    n = rel.q_cov.shape[0]

    y_star = sdp.dual_certificate_matrix(prob, sol, "Q")
    x_stars = [sdp.dual_certificate_matrix(prob, sol, f"W[{k}]") for k in range(kk)]

    recon = 0.0
    for name, rec in [("Q", y_star)] + [(f"W[{k}]", x_stars[k]) for k in range(kk)]:
        if name in sol.psd_duals:
            num = np.linalg.norm(rec - sol.psd_duals[name])
            recon = max(recon, float(num / (1.0 + np.linalg.norm(rec))))

    yq = float(np.linalg.norm(y_star @ rel.q_cov))
    yq_scale = float(np.linalg.norm(y_star) * np.linalg.norm(rel.q_cov))
    xw, xw_scales = [], []
    for k in range(kk):
        xw.append(float(np.linalg.norm(x_stars[k] @ rel.w_lift[k])))
        xw_scales.append(float(np.linalg.norm(x_stars[k]) * np.linalg.norm(rel.w_lift[k])))

    def num_rank(mat: np.ndarray) -> int:
        sv = np.linalg.svd(mat, compute_uv=False)
        if not len(sv) or sv[0] == 0:
            return 0
        return int(np.sum(sv > rank_rtol * sv[0]))

    rank_y = num_rank(y_star)
    rank_x = [num_rank(x) for x in x_stars]

    slackness_ok = yq <= slackness_tol * max(yq_scale, 1e-30) and all(
        v <= slackness_tol * max(s, 1e-30) for v, s in zip(xw, xw_scales)
    )
    dual_rank_ok = all(r >= n - 1 for r in rank_x)
    return KktReport(
        yq_norm=yq, xw_norms=xw, yq_scale=yq_scale, xw_scales=xw_scales,
        rank_y=rank_y, rank_x=rank_x, reconstruction_err=recon,
        slackness_ok=slackness_ok, dual_rank_ok=dual_rank_ok,
        ok=slackness_ok and dual_rank_ok,
    )
