"""Sum-rate beamforming from estimated channels: SCA on the relaxed SDP, then IRM.

Each device's covariance ``W_k`` is optimised inside a working subspace
spanned by every vector its constraints can see (all estimated channels and,
when coverage is active, the steering vectors of its coverage grid) plus one
extra direction orthogonal to them.  All constraint and objective values are
evaluated exactly for the covariance actually returned; the subspace only
restricts the search to where the optimum lives up to ``subspace_tol``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .array import steering_matrix
from .conic import Affine, ConicProblem, MatrixAffine, Status, make_backend
from .config import SystemConfig, angle_domain

log = logging.getLogger(__name__)

LOG2E = 1.0 / math.log(2.0)

OK = "ok"
RANK_RELAXED = "rank_relaxed"
THRESHOLD_RELAXED = "threshold_relaxed"
FAILED = "failed"


@dataclass(frozen=True)
class Coverage:
    """Coverage interval centre and angle standard deviation for one device."""

    theta_hat: float
    sigma_theta: float


@dataclass
class BeamformingProblem:
    h_hats: np.ndarray  # (K, N_t)
    coverage: list[Coverage | None]
    thresholds: tuple[float, ...]
    bounds: tuple[float, ...]

    @property
    def num_devices(self) -> int:
        return self.h_hats.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.h_hats.shape[1]

    @classmethod
    def from_config(cls, h_hats, cfg: SystemConfig, coverage: Sequence[Coverage | None] | None = None,
                    thresholds: Sequence[float] | None = None) -> "BeamformingProblem":
        h_hats = np.atleast_2d(np.asarray(h_hats, dtype=complex))
        K = h_hats.shape[0]
        if coverage is None:
            coverage = [None] * K
        if thresholds is None:
            thresholds = [cfg.rate_threshold(k) for k in range(K)]
        return cls(h_hats, list(coverage), tuple(thresholds), tuple(cfg.coverage_bound(k) for k in range(K)))


@dataclass
class ScaResult:
    status: str
    W_list: list[np.ndarray] | None
    objective_trace: list[float]
    iterations: int
    thresholds: tuple[float, ...] | None
    # reduced-space state kept for IRM
    Y_list: list[np.ndarray] | None = None
    context: "_Context | None" = None


@dataclass
class BeamformingSolution:
    W_list: list[np.ndarray] | None
    w_list: list[np.ndarray] | None
    objective: float
    per_device_est_rate: list[float]
    status: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_covariance(self) -> np.ndarray:
        return sum(np.outer(w, w.conj()) for w in self.w_list)


# ----------------------------------------------------------------------------
# coverage grid

def coverage_angles(theta_hat: float, sigma_theta: float, cfg: SystemConfig) -> np.ndarray:
    """M equally spaced angles over theta_hat +- l*sigma, clipped to the angle domain."""
    lo, hi = angle_domain(cfg.angle_convention)
    half = cfg.coverage_sigma_mult * sigma_theta
    left = max(theta_hat - half, lo)
    right = min(theta_hat + half, hi)
    return np.linspace(left, right, cfg.coverage_samples)


def coverage_constraints(theta_hat: float, sigma_theta: float, bound: float,
                         cfg: SystemConfig) -> list[np.ndarray]:
    """Hermitian matrices C with ``Re tr(C W_k) >= 0`` encoding the two-sided gain bound.

    For each grid angle c: ``|g(theta_hat) - g(c)| <= B tr(W)`` becomes
    ``tr((B I - D) W) >= 0`` and ``tr((B I + D) W) >= 0`` with
    ``D = a(theta_hat) a(theta_hat)^H - a(c) a(c)^H``.
    """
    n = cfg.num_tx_antennas
    a0 = steering_matrix(theta_hat, n, cfg)[:, 0]
    A = steering_matrix(coverage_angles(theta_hat, sigma_theta, cfg), n, cfg)
    ref = np.outer(a0, a0.conj())
    out = []
    for col in A.T:
        D = ref - np.outer(col, col.conj())
        out.append(bound * np.eye(n) - D)
        out.append(bound * np.eye(n) + D)
    return out


def coverage_slack(W: np.ndarray, theta_hat: float, sigma_theta: float, bound: float,
                   cfg: SystemConfig) -> np.ndarray:
    """``B tr(W) - |g(theta_hat) - g(c)|`` for every grid angle (non-negative when satisfied)."""
    n = W.shape[0]
    a0 = steering_matrix(theta_hat, n, cfg)[:, 0]
    A = steering_matrix(coverage_angles(theta_hat, sigma_theta, cfg), n, cfg)
    g0 = np.real(a0.conj() @ W @ a0)
    g = np.real(np.einsum("ia,ij,ja->a", A.conj(), W, A))
    return bound * np.trace(W).real - np.abs(g0 - g)


# ----------------------------------------------------------------------------
# rates and the SCA minorant

def _powers(h: np.ndarray, Ws: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([np.real(h.conj() @ W @ h) for W in Ws])


def estimated_rates(h_hats, Ws, noise_var: float) -> np.ndarray:
    """Estimated rate of every device for covariances ``Ws``."""
    K = len(Ws)
    out = np.empty(K)
    for k in range(K):
        p = _powers(h_hats[k], Ws)
        out[k] = math.log2(1.0 + p[k] / (p.sum() - p[k] + noise_var))
    return out


def taylor_bound(W_list, expansion_W_list, h_hats, k: int, noise_var: float) -> float:
    """Concave minorant of the estimated rate of device k, tight at ``expansion_W_list``.

    The interference log-term is replaced by its first-order expansion; the
    result never exceeds the true estimated rate.
    """
    h = h_hats[k]
    p = _powers(h, W_list)
    p0 = _powers(h, expansion_W_list)
    interf0 = p0.sum() - p0[k] + noise_var
    linear = LOG2E / interf0 * ((p.sum() - p[k]) - (p0.sum() - p0[k]))
    return math.log2(p.sum() + noise_var) - math.log2(interf0) - linear


# ----------------------------------------------------------------------------
# working subspaces

@dataclass
class _Context:
    cfg: SystemConfig
    problem: BeamformingProblem
    bases: list[np.ndarray]  # (N, n_k) orthonormal
    h_red: list[list[np.ndarray]]  # h_red[k][i] = B_i^H h_k
    cov_red: list[list[np.ndarray]]  # reduced coverage matrices per device
    noise_var: float

    def lift(self, Y_list: Sequence[np.ndarray]) -> list[np.ndarray]:
        out = []
        for B, Y in zip(self.bases, Y_list):
            W = B @ Y @ B.conj().T
            out.append((W + W.conj().T) / 2)
        return out

    def powers(self, k: int, Y_list) -> np.ndarray:
        return np.array([np.real(self.h_red[k][i].conj() @ Y_list[i] @ self.h_red[k][i])
                         for i in range(len(Y_list))])

    def sum_rate(self, Y_list) -> float:
        total = 0.0
        for k in range(len(Y_list)):
            p = self.powers(k, Y_list)
            total += math.log2(1.0 + p[k] / (p.sum() - p[k] + self.noise_var))
        return total

    def rates(self, Y_list) -> list[float]:
        out = []
        for k in range(len(Y_list)):
            p = self.powers(k, Y_list)
            out.append(math.log2(1.0 + p[k] / (p.sum() - p[k] + self.noise_var)))
        return out


def _working_basis(vectors: np.ndarray, n: int, tol: float) -> np.ndarray:
    if tol <= 0 or vectors.shape[0] == 0:
        return np.eye(n, dtype=complex)
    M = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    U, s, _ = np.linalg.svd(M.T, full_matrices=True)
    r = int(np.sum(s > tol * s[0]))
    if r >= n - 1:
        return np.eye(n, dtype=complex)
    # least visible direction carries power the constraints cannot see
    return np.concatenate([U[:, :r], U[:, -1:]], axis=1)


def _build_context(problem: BeamformingProblem, cfg: SystemConfig) -> _Context:
    K, n = problem.num_devices, problem.num_antennas
    bases, cov_full = [], []
    for k in range(K):
        vecs = [problem.h_hats]
        cov = problem.coverage[k]
        mats: list[np.ndarray] = []
        if cov is not None:
            angles = np.concatenate([[cov.theta_hat], coverage_angles(cov.theta_hat, cov.sigma_theta, cfg)])
            vecs.append(steering_matrix(angles, n, cfg).T)
            mats = coverage_constraints(cov.theta_hat, cov.sigma_theta, problem.bounds[k], cfg)
        bases.append(_working_basis(np.concatenate(vecs), n, cfg.solver.subspace_tol))
        cov_full.append(mats)
    h_red = [[bases[i].conj().T @ problem.h_hats[k] for i in range(K)] for k in range(K)]
    cov_red = [[bases[k].conj().T @ C @ bases[k] for C in cov_full[k]] for k in range(K)]
    return _Context(cfg, problem, bases, h_red, cov_red, cfg.comm_noise_var)


# ----------------------------------------------------------------------------
# convex subproblem

def _subproblem(ctx: _Context, expansion: Sequence[np.ndarray], thresholds: tuple[float, ...] | None,
                irm: tuple[list[np.ndarray | None], float] | None = None) -> ConicProblem:
    K = ctx.problem.num_devices
    sigma2 = ctx.noise_var
    p = ConicProblem()
    names = [p.add_matrix_var(f"W{k}", ctx.bases[k].shape[1]) for k in range(K)]
    for k in range(K):
        p.add_var_psd(names[k], f"psd[{k}]")
    p.add_eq(Affine(-ctx.cfg.total_power, traces={nm: np.eye(ctx.bases[k].shape[1])
                                                  for k, nm in enumerate(names)}), "power")
    H = [[np.outer(v, v.conj()) for v in row] for row in ctx.h_red]

    obj = Affine()
    for k in range(K):
        # log(u) = log(u / S) + log(S) keeps the cone rows O(1)
        S = sigma2 + ctx.cfg.total_power * float(np.vdot(ctx.problem.h_hats[k], ctx.problem.h_hats[k]).real)
        t = p.add_scalar_var(f"t{k}")
        p.add_exp_cone(Affine(scalars={t: 1.0}), Affine(1.0),
                       Affine(sigma2 / S, traces={names[i]: H[k][i] / S for i in range(K)}), f"log[{k}]")
        p0 = ctx.powers(k, expansion)
        interf0 = p0.sum() - p0[k] + sigma2
        scale = LOG2E / interf0
        obj.scalars[t] = LOG2E
        obj.constant += math.log2(S) - math.log2(interf0) + scale * (p0.sum() - p0[k])
        for i in range(K):
            if i != k:
                obj.traces[names[i]] = obj.traces.get(names[i], 0) - scale * H[k][i]

        if thresholds is not None and thresholds[k] > 0:
            g = 2.0 ** thresholds[k] - 1.0
            traces = {names[k]: H[k][k] / S}
            for i in range(K):
                if i != k:
                    traces[names[i]] = -g * H[k][i] / S
            p.add_ineq(Affine(-g * sigma2 / S, traces=traces), f"rate[{k}]")

        for j, C in enumerate(ctx.cov_red[k]):
            p.add_ineq(Affine(traces={names[k]: C}), f"cover[{k},{j}]")

    if irm is not None:
        subspaces, weight = irm
        for k, V in enumerate(subspaces):
            if V is None:
                continue
            e = p.add_scalar_var(f"e{k}")
            m = V.shape[1]
            p.add_psd(MatrixAffine(np.zeros((m, m)), scalars={e: np.eye(m)},
                                   congruences=[(names[k], V, -1.0)]), f"rank[{k}]")
            obj.scalars[e] = -weight
    p.maximize(obj)
    return p


def _solve(problem: ConicProblem, backend, tol: float):
    sol = backend.solve(problem, tol)
    if sol.status is Status.NUMERICAL_FAILURE or sol.status is Status.ITERATION_LIMIT:
        log.debug("conic solve %s, retrying with tol x10", sol.status.value)
        sol = backend.solve(problem, tol * 10)
    return sol


def _hermitize(X: np.ndarray) -> np.ndarray:
    return (X + X.conj().T) / 2


def _psd_project(Y_list: Sequence[np.ndarray], total_power: float) -> list[np.ndarray]:
    """Clip the small negative eigenvalues an interior-point solution carries and
    rescale so the traces again sum to the power budget."""
    out = []
    for Y in Y_list:
        vals, vecs = np.linalg.eigh(_hermitize(Y))
        out.append(_hermitize((vecs * np.maximum(vals, 0.0)) @ vecs.conj().T))
    total = sum(float(np.trace(Y).real) for Y in out)
    if total > 0:
        out = [Y * (total_power / total) for Y in out]
    return out


# ----------------------------------------------------------------------------
# public drivers

def sca_solve(problem: BeamformingProblem, cfg: SystemConfig, backend=None,
              thresholds: tuple[float, ...] | None | str = "default") -> ScaResult:
    """Successive convex approximation of the relaxed (rank-free) problem.

    ``thresholds=None`` drops the rate-threshold constraints entirely.
    Returns ``status`` ``"ok"``, ``"infeasible"`` or ``"failed"``.
    """
    backend = backend or make_backend(cfg.solver.backend, cfg.solver.tol)
    if isinstance(thresholds, str):
        thresholds = problem.thresholds
    K = problem.num_devices
    if thresholds is not None:
        # no beam can beat interference-free MRT at full power
        for k in range(K):
            ceiling = math.log2(1.0 + cfg.total_power * float(np.vdot(problem.h_hats[k], problem.h_hats[k]).real)
                                / cfg.comm_noise_var)
            if thresholds[k] > ceiling:
                return ScaResult("infeasible", None, [], 0, thresholds)
    ctx = _build_context(problem, cfg)
    c0 = cfg.total_power / (K * problem.num_antennas)
    Y = [c0 * np.eye(B.shape[1], dtype=complex) for B in ctx.bases]
    trace: list[float] = []
    q = 0
    for q in range(1, cfg.solver.sca_max_iter + 1):
        sol = _solve(_subproblem(ctx, Y, thresholds), backend, cfg.solver.tol)
        if sol.status is Status.INFEASIBLE:
            return ScaResult("infeasible", None, trace, q, thresholds)
        if not sol.optimal:
            if trace:
                # the previous iterate is feasible and at least as good as every earlier one
                log.info("SCA subproblem %d failed (%s); keeping iterate %d", q, sol.status.value, q - 1)
                break
            log.warning("SCA subproblem failed: %s", sol.status.value)
            return ScaResult(FAILED, None, trace, q, thresholds)
        Y_new = [_hermitize(sol.values[f"W{k}"]) for k in range(K)]
        value = ctx.sum_rate(Y_new)
        if trace and value < trace[-1]:
            # only solver inexactness can lower the minorant-driven objective:
            # keep the previous iterate, which is already converged to that accuracy
            log.debug("SCA step lowered the objective by %.3g; stopping", trace[-1] - value)
            break
        Y = Y_new
        trace.append(value)
        if len(trace) > 1 and trace[-1] - trace[-2] < cfg.solver.sca_tol:
            break
    return ScaResult(OK, ctx.lift(Y), trace, q, thresholds, Y, ctx)


def _irm_subspaces(Y_list: Sequence[np.ndarray]) -> list[np.ndarray | None]:
    out = []
    for Y in Y_list:
        if Y.shape[0] < 2:
            out.append(None)
            continue
        _, vecs = np.linalg.eigh(Y)
        out.append(vecs[:, :-1])
    return out


def _rank_ratio(W: np.ndarray) -> float:
    tr = np.trace(W).real
    if tr <= 0:
        return 1.0
    return float(np.linalg.eigvalsh(W)[-1] / tr)


def _extract(ctx: _Context, Y_list, cfg: SystemConfig) -> list[np.ndarray]:
    ws = []
    for B, Y in zip(ctx.bases, Y_list):
        vals, vecs = np.linalg.eigh(Y)
        w = B @ (math.sqrt(max(vals[-1], 0.0)) * vecs[:, -1])
        lead = np.argmax(np.abs(w))
        if abs(w[lead]) > 0:
            w = w * (abs(w[lead]) / w[lead])
        ws.append(w)
    total = sum(float(np.vdot(w, w).real) for w in ws)
    if total > 0:
        ws = [w * math.sqrt(cfg.total_power / total) for w in ws]
    return ws


def irm_refine(relaxed: ScaResult, problem: BeamformingProblem, cfg: SystemConfig,
               backend=None) -> BeamformingSolution:
    """Drive each relaxed covariance to rank one by penalised subspace constraints."""
    backend = backend or make_backend(cfg.solver.backend, cfg.solver.tol)
    ctx = relaxed.context or _build_context(problem, cfg)
    s = cfg.solver
    K = problem.num_devices
    Y = list(relaxed.Y_list) if relaxed.Y_list is not None else \
        [_hermitize(B.conj().T @ W @ B) for B, W in zip(ctx.bases, relaxed.W_list)]
    weight = s.irm_weight0
    penalties: list[list[float]] = []
    objective_trace: list[float] = []
    r = 0
    failed = None
    for r in range(1, s.irm_max_iter + 1):
        subspaces = _irm_subspaces(Y)
        sol = _solve(_subproblem(ctx, Y, relaxed.thresholds, (subspaces, weight)), backend, s.tol)
        if not sol.optimal:
            failed = sol.status.value
            # late failures are common once the penalty block is nearly singular;
            # the previous iterate is kept and judged by its rank ratio
            (log.info if r > 1 else log.warning)("IRM subproblem %d failed: %s", r, failed)
            break
        Y = [_hermitize(sol.values[f"W{k}"]) for k in range(K)]
        e = [max(float(sol.values[f"e{k}"]), 0.0) if subspaces[k] is not None else 0.0 for k in range(K)]
        penalties.append(e)
        objective_trace.append(ctx.sum_rate(Y))
        if all(e[k] <= s.irm_rank_tol * np.trace(Y[k]).real for k in range(K)):
            break
        weight *= s.irm_growth

    Y = _psd_project(Y, cfg.total_power)
    W_list = ctx.lift(Y)
    w_list = _extract(ctx, Y, cfg)
    relaxed_rates = ctx.rates(Y)
    ww = [np.outer(w, w.conj()) for w in w_list]
    rates = list(estimated_rates(problem.h_hats, ww, ctx.noise_var))
    ratios = [_rank_ratio(W) for W in W_list]
    reproduces = all(abs(a - b) <= 0.01 * max(abs(b), 1e-12) for a, b in zip(rates, relaxed_rates))
    status = OK if all(x >= s.rank_ok_ratio for x in ratios) and reproduces else RANK_RELAXED
    diagnostics = {
        "sca_iterations": relaxed.iterations,
        "sca_objective_trace": list(relaxed.objective_trace),
        "irm_iterations": r,
        "irm_objective_trace": objective_trace,
        "irm_penalties": penalties,
        "irm_final_weight": weight,
        "rank_ratios": ratios,
        "relaxed_objective": float(sum(relaxed_rates)),
        "subspace_dims": [B.shape[1] for B in ctx.bases],
        "thresholds": None if relaxed.thresholds is None else list(relaxed.thresholds),
    }
    if failed is not None:
        diagnostics["irm_failure"] = failed
    return BeamformingSolution(W_list, w_list, float(sum(rates)), rates, status, diagnostics)


def threshold_fallback(thresholds: Sequence[float], attempt: int, cfg: SystemConfig) -> tuple[float, ...] | None:
    """Rate thresholds for the ``attempt``-th retry after an infeasible solve.

    Thresholds are halved on each of the first ``max_threshold_halvings``
    attempts; after that ``None`` is returned, meaning the constraint is dropped.
    """
    if attempt > cfg.solver.max_threshold_halvings:
        return None
    return tuple(g / 2 ** attempt for g in thresholds)


def optimize_beamforming(problem: BeamformingProblem, cfg: SystemConfig, backend=None) -> BeamformingSolution:
    """Full pipeline: SCA, threshold fallback on infeasibility, IRM, extraction."""
    backend = backend or make_backend(cfg.solver.backend, cfg.solver.tol)
    thresholds: tuple[float, ...] | None = problem.thresholds
    attempt = 0
    events = []
    while True:
        relaxed = sca_solve(problem, cfg, backend, thresholds)
        if relaxed.status != "infeasible":
            break
        if thresholds is None:
            relaxed = ScaResult(FAILED, None, [], 0, None)
            break
        attempt += 1
        thresholds = threshold_fallback(problem.thresholds, attempt, cfg)
        events.append(None if thresholds is None else list(thresholds))
        log.info("rate thresholds infeasible; retrying with %s", thresholds)
    if relaxed.status == FAILED:
        return BeamformingSolution(None, None, float("nan"), [float("nan")] * problem.num_devices, FAILED,
                                   {"threshold_events": events})
    sol = irm_refine(relaxed, problem, cfg, backend)
    sol.diagnostics["threshold_events"] = events
    if events:
        sol.status = THRESHOLD_RELAXED
    return sol
