"""Small conic-programming layer over complex Hermitian matrix variables.

Problems are described with :class:`ConicProblem` (Hermitian matrix variables,
real scalar variables, affine equalities/inequalities, exponential cones and
Hermitian PSD cones) and handed to a backend.  Two backends exist:

* :class:`ClarabelBackend` compiles the description straight into Clarabel's
  standard form.  Hermitian variables are parametrised by their n^2 real
  degrees of freedom and every Hermitian PSD constraint goes through the real
  embedding ``[[Re M, -Im M], [Im M, Re M]]``.
* :class:`CvxpyBackend` rebuilds the problem with cvxpy's complex variables.
  It is slower and serves as an independent cross-check.

Conventions: ``ineq`` means ``expr >= 0``; ``exp`` means
``y * exp(x / y) <= z`` for the triple ``(x, y, z)``; ``psd`` means the
Hermitian affine matrix expression is positive semidefinite.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical-failure"
    ITERATION_LIMIT = "iteration-limit"


@dataclass
class Affine:
    """``constant + sum_s c_s * s + sum_X Re tr(A_X X)`` with Hermitian ``A_X``."""

    constant: float = 0.0
    scalars: dict[str, float] = field(default_factory=dict)
    traces: dict[str, np.ndarray] = field(default_factory=dict)

    def value(self, values: Mapping[str, object]) -> float:
        total = self.constant
        for name, c in self.scalars.items():
            total += c * float(values[name])
        for name, A in self.traces.items():
            total += float(np.real(np.vdot(A, values[name])))  # Re tr(A^H X) = Re tr(A X)
        return total


@dataclass
class MatrixAffine:
    """``constant + sum_s s * F_s + sum coef * V^H X V`` (all Hermitian, size m)."""

    constant: np.ndarray
    scalars: dict[str, np.ndarray] = field(default_factory=dict)
    congruences: list[tuple[str, np.ndarray, float]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.constant.shape[0]

    def value(self, values: Mapping[str, object]) -> np.ndarray:
        M = self.constant.astype(complex)
        for name, F in self.scalars.items():
            M = M + float(values[name]) * F
        for name, V, coef in self.congruences:
            M = M + coef * (V.conj().T @ values[name] @ V)
        return M


@dataclass
class Constraint:
    kind: str  # "eq" | "ineq" | "exp" | "psd"
    expr: object
    label: str = ""


@dataclass
class ConicSolution:
    status: Status
    values: dict[str, object] | None = None
    objective: float | None = None
    solve_time: float = 0.0
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class ConicProblem:
    """Maximisation of an affine objective over a product of cones."""

    def __init__(self) -> None:
        self.matrix_vars: dict[str, int] = {}
        self.scalar_vars: list[str] = []
        self.objective = Affine()
        self.constraints: list[Constraint] = []

    # -- declaration -------------------------------------------------------
    def add_matrix_var(self, name: str, dim: int) -> str:
        self._check_new(name)
        self.matrix_vars[name] = int(dim)
        return name

    def add_scalar_var(self, name: str) -> str:
        self._check_new(name)
        self.scalar_vars.append(name)
        return name

    def _check_new(self, name: str) -> None:
        if name in self.matrix_vars or name in self.scalar_vars:
            raise ValueError(f"variable {name!r} already declared")

    def maximize(self, expr: Affine) -> None:
        self.objective = expr

    def add_eq(self, expr: Affine, label: str = "") -> None:
        self.constraints.append(Constraint("eq", expr, label))

    def add_ineq(self, expr: Affine, label: str = "") -> None:
        self.constraints.append(Constraint("ineq", expr, label))

    def add_exp_cone(self, x: Affine, y: Affine, z: Affine, label: str = "") -> None:
        self.constraints.append(Constraint("exp", (x, y, z), label))

    def add_psd(self, expr: MatrixAffine, label: str = "") -> None:
        self.constraints.append(Constraint("psd", expr, label))

    def add_var_psd(self, name: str, label: str = "") -> None:
        n = self.matrix_vars[name]
        self.add_psd(MatrixAffine(np.zeros((n, n)), congruences=[(name, np.eye(n), 1.0)]), label)

    # -- checks ------------------------------------------------------------
    def validate(self) -> None:
        """Raise ValueError if any term references an undeclared variable or bad data."""
        def check_affine(e: Affine) -> None:
            for name in e.scalars:
                if name not in self.scalar_vars:
                    raise ValueError(f"undeclared scalar variable {name!r}")
            for name, A in e.traces.items():
                if name not in self.matrix_vars:
                    raise ValueError(f"undeclared matrix variable {name!r}")
                n = self.matrix_vars[name]
                if A.shape != (n, n):
                    raise ValueError(f"coefficient for {name!r} has shape {A.shape}, expected {(n, n)}")
                if not np.allclose(A, A.conj().T, atol=1e-9 * max(1.0, np.abs(A).max())):
                    raise ValueError(f"coefficient for {name!r} is not Hermitian")

        check_affine(self.objective)
        for c in self.constraints:
            if c.kind in ("eq", "ineq"):
                check_affine(c.expr)
            elif c.kind == "exp":
                for e in c.expr:
                    check_affine(e)
            elif c.kind == "psd":
                m = c.expr.size
                for name, F in c.expr.scalars.items():
                    if name not in self.scalar_vars:
                        raise ValueError(f"undeclared scalar variable {name!r}")
                    if F.shape != (m, m):
                        raise ValueError("PSD scalar coefficient has wrong shape")
                for name, V, _ in c.expr.congruences:
                    if name not in self.matrix_vars:
                        raise ValueError(f"undeclared matrix variable {name!r}")
                    if V.shape[0] != self.matrix_vars[name] or V.shape[1] != m:
                        raise ValueError("PSD congruence has wrong shape")
            else:
                raise ValueError(f"unknown constraint kind {c.kind!r}")

    def max_violation(self, values: Mapping[str, object]) -> float:
        """Largest constraint violation of ``values``, evaluated directly on the description."""
        worst = 0.0
        for name in self.matrix_vars:
            X = values[name]
            worst = max(worst, float(np.abs(X - X.conj().T).max()))
        for c in self.constraints:
            if c.kind == "eq":
                worst = max(worst, abs(c.expr.value(values)))
            elif c.kind == "ineq":
                worst = max(worst, -c.expr.value(values))
            elif c.kind == "exp":
                x, y, z = (e.value(values) for e in c.expr)
                if y <= 0:
                    worst = max(worst, -y, 0.0 if (x <= 0 and z >= 0) else abs(x))
                else:
                    worst = max(worst, y * math.exp(min(x / y, 700.0)) - z)
            else:
                M = c.expr.value(values)
                worst = max(worst, -float(np.linalg.eigvalsh((M + M.conj().T) / 2)[0]))
        return worst

    def describe(self) -> str:
        """Plain-text dump of dimensions, cones and sparsity, for reproducing failures."""
        lines = ["# conic problem (maximize)"]
        for name, n in self.matrix_vars.items():
            lines.append(f"matrix {name} hermitian {n}x{n}")
        for name in self.scalar_vars:
            lines.append(f"scalar {name}")
        counts: dict[str, int] = {}
        for c in self.constraints:
            counts[c.kind] = counts.get(c.kind, 0) + 1
        lines.append("cones " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
        for i, c in enumerate(self.constraints):
            if c.kind in ("eq", "ineq"):
                nnz = len(c.expr.scalars) + sum(int(np.count_nonzero(A)) for A in c.expr.traces.values())
                lines.append(f"{i} {c.kind} {c.label} nnz={nnz} const={c.expr.constant:.17g}")
            elif c.kind == "exp":
                lines.append(f"{i} exp {c.label}")
            else:
                lines.append(f"{i} psd {c.label} size={c.expr.size} terms={len(c.expr.congruences)}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# real parametrisation of Hermitian matrices: [diag | Re upper | Im upper]

@lru_cache(maxsize=64)
def _upper(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, 1)


def hermitian_dofs(n: int) -> int:
    return n * n


def trace_coefficients(A: np.ndarray) -> np.ndarray:
    """Vector c with ``Re tr(A X) = c . dofs(X)`` for Hermitian A."""
    iu = _upper(A.shape[0])
    upper = A[iu]
    return np.concatenate([np.real(np.diag(A)), 2 * upper.real, 2 * upper.imag])


def dofs_to_hermitian(x: np.ndarray, n: int) -> np.ndarray:
    iu = _upper(n)
    k = len(iu[0])
    X = np.zeros((n, n), dtype=complex)
    X[iu] = x[n:n + k] + 1j * x[n + k:n + 2 * k]
    X = X + X.conj().T
    X[np.diag_indices(n)] = x[:n]
    return X


def congruence_basis(V: np.ndarray) -> np.ndarray:
    """Images ``V^H B_p V`` of the n^2 dof basis matrices, shape ``(n^2, m, m)``."""
    n = V.shape[0]
    iu = _upper(n)
    outer = np.einsum("ia,jb->ijab", V.conj(), V)  # V^H E_ij V
    diag = outer[np.arange(n), np.arange(n)]
    upper = outer[iu]
    lower = outer[iu[1], iu[0]]
    return np.concatenate([diag, upper + lower, 1j * (upper - lower)])


@lru_cache(maxsize=64)
def _triangle_index(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Clarabel: upper triangle, column-major, off-diagonals scaled by sqrt(2)
    rows, cols = [], []
    for j in range(size):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    rows, cols = np.array(rows), np.array(cols)
    scale = np.where(rows == cols, 1.0, math.sqrt(2.0))
    return rows, cols, scale


def embedded_triangle(M: np.ndarray) -> np.ndarray:
    """Triangle vector(s) of the real embedding of Hermitian ``M`` (..., m, m)."""
    m = M.shape[-1]
    re, im = M.real, M.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    R = np.concatenate([top, bottom], axis=-2)
    rows, cols, scale = _triangle_index(2 * m)
    return R[..., rows, cols] * scale


# ----------------------------------------------------------------------------
# backends

class ClarabelBackend:
    name = "clarabel"

    # Settings overrides tried in order.  The KKT factorisation occasionally
    # breaks down in the first few iterations (step length 0); a larger static
    # regularisation plus a shorter step avoids it.
    PROFILES = ({}, {"static_regularization_constant": 1e-7, "max_step_fraction": 0.9})

    def __init__(self, tol: float = DEFAULT_TOL, max_iter: int = 200):
        self.tol = tol
        self.max_iter = max_iter

    def _layout(self, problem: ConicProblem) -> tuple[dict[str, slice], dict[str, int], int]:
        offsets: dict[str, slice] = {}
        pos = 0
        for name, n in problem.matrix_vars.items():
            offsets[name] = slice(pos, pos + hermitian_dofs(n))
            pos += hermitian_dofs(n)
        scalar_pos = {}
        for name in problem.scalar_vars:
            scalar_pos[name] = pos
            pos += 1
        return offsets, scalar_pos, pos

    def _affine_row(self, e: Affine, offsets, scalar_pos, nvar: int) -> np.ndarray:
        row = np.zeros(nvar)
        for name, c in e.scalars.items():
            row[scalar_pos[name]] += c
        for name, A in e.traces.items():
            row[offsets[name]] += trace_coefficients(A)
        return row

    def compile(self, problem: ConicProblem):
        """Return ``(q, A, b, cones, layout)`` for minimising -objective."""
        import clarabel

        offsets, scalar_pos, nvar = self._layout(problem)
        blocks: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {"eq": [], "ineq": [], "exp": [], "psd": []}
        psd_sizes = []
        for c in problem.constraints:
            if c.kind in ("eq", "ineq"):
                row = self._affine_row(c.expr, offsets, scalar_pos, nvar)
                blocks[c.kind].append((row[None, :], np.array([c.expr.constant])))
            elif c.kind == "exp":
                rows = np.stack([self._affine_row(e, offsets, scalar_pos, nvar) for e in c.expr])
                blocks["exp"].append((rows, np.array([e.constant for e in c.expr])))
            else:
                expr: MatrixAffine = c.expr
                m = expr.size
                const = embedded_triangle(expr.constant.astype(complex))
                G = np.zeros((const.size, nvar))
                for name, F in expr.scalars.items():
                    G[:, scalar_pos[name]] += embedded_triangle(F.astype(complex))
                for name, V, coef in expr.congruences:
                    G[:, offsets[name]] += coef * embedded_triangle(congruence_basis(V)).T
                blocks["psd"].append((G, const))
                psd_sizes.append(2 * m)

        # s = G x + h must lie in the cone  ->  A = -G, b = h
        A_parts, b_parts, cones = [], [], []
        n_eq = sum(r.shape[0] for r, _ in blocks["eq"])
        n_ineq = sum(r.shape[0] for r, _ in blocks["ineq"])
        if n_eq:
            cones.append(clarabel.ZeroConeT(n_eq))
        if n_ineq:
            cones.append(clarabel.NonnegativeConeT(n_ineq))
        for kind in ("eq", "ineq", "exp", "psd"):
            for G, h in blocks[kind]:
                A_parts.append(-G)
                b_parts.append(h)
        cones += [clarabel.ExponentialConeT() for _ in blocks["exp"]]
        cones += [clarabel.PSDTriangleConeT(s) for s in psd_sizes]
        A = sp.csc_matrix(np.vstack(A_parts)) if A_parts else sp.csc_matrix((0, nvar))
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        q = -self._affine_row(problem.objective, offsets, scalar_pos, nvar)
        # the argmax is scale-invariant; large objective coefficients stall the IPM
        qmax = np.abs(q).max(initial=0.0)
        if qmax > 0:
            q = q / qmax
        return q, A, b, cones, (offsets, scalar_pos, nvar)

    def solve(self, problem: ConicProblem, tol: float | None = None) -> ConicSolution:
        import clarabel

        tol = self.tol if tol is None else tol
        start = time.perf_counter()
        q, A, b, cones, (offsets, scalar_pos, nvar) = self.compile(problem)
        P = sp.csc_matrix((nvar, nvar))
        for profile in self.PROFILES:
            settings = clarabel.DefaultSettings()
            settings.verbose = False
            settings.max_iter = self.max_iter
            settings.tol_feas = tol
            settings.tol_gap_abs = tol
            settings.tol_gap_rel = tol
            settings.presolve_enable = False
            settings.chordal_decomposition_enable = False
            for key, value in profile.items():
                setattr(settings, key, value)
            try:
                result = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
            except Exception:  # solver panics surface as plain exceptions
                status = Status.NUMERICAL_FAILURE
                result = None
                continue
            status = _clarabel_status(str(result.status))
            if status is not Status.NUMERICAL_FAILURE:
                break
        elapsed = time.perf_counter() - start
        if result is None:
            return ConicSolution(Status.NUMERICAL_FAILURE, solve_time=elapsed)
        values = None
        objective = None
        if status in (Status.OPTIMAL, "almost"):
            x = np.asarray(result.x)
            values = {name: dofs_to_hermitian(x[sl], problem.matrix_vars[name]) for name, sl in offsets.items()}
            values.update({name: float(x[i]) for name, i in scalar_pos.items()})
            objective = problem.objective.value(values)
            if status == "almost":
                scale = 1.0 + float(np.abs(b).max(initial=0.0))
                status = Status.OPTIMAL if problem.max_violation(values) <= 10 * tol * scale \
                    else Status.NUMERICAL_FAILURE
                if status is not Status.OPTIMAL:
                    values = objective = None
        return ConicSolution(status, values, objective, elapsed, int(result.iterations))


def _clarabel_status(text: str):
    if text == "Solved":
        return Status.OPTIMAL
    if text == "AlmostSolved":
        return "almost"
    if text in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return Status.INFEASIBLE
    if text in ("DualInfeasible", "AlmostDualInfeasible"):
        return Status.UNBOUNDED
    if text in ("MaxIterations", "MaxTime"):
        return Status.ITERATION_LIMIT
    return Status.NUMERICAL_FAILURE


class CvxpyBackend:
    """Reference backend through cvxpy's complex Hermitian variables."""

    name = "cvxpy"

    def __init__(self, tol: float = DEFAULT_TOL, solver: str = "CLARABEL"):
        self.tol = tol
        self.solver = solver

    def solve(self, problem: ConicProblem, tol: float | None = None) -> ConicSolution:
        import cvxpy as cp

        tol = self.tol if tol is None else tol
        X = {name: cp.Variable((n, n), hermitian=True, name=name) for name, n in problem.matrix_vars.items()}
        s = {name: cp.Variable(name=name) for name in problem.scalar_vars}

        def affine(e: Affine):
            terms = [cp.Constant(e.constant)]
            terms += [c * s[name] for name, c in e.scalars.items()]
            terms += [cp.real(cp.trace(A @ X[name])) for name, A in e.traces.items()]
            return cp.sum(cp.hstack(terms))

        cons = []
        for c in problem.constraints:
            if c.kind == "eq":
                cons.append(affine(c.expr) == 0)
            elif c.kind == "ineq":
                cons.append(affine(c.expr) >= 0)
            elif c.kind == "exp":
                x, y, z = (affine(e) for e in c.expr)
                cons.append(cp.constraints.ExpCone(x, y, z))
            else:
                expr: MatrixAffine = c.expr
                M = cp.Constant(expr.constant.astype(complex))
                for name, F in expr.scalars.items():
                    M = M + s[name] * F
                for name, V, coef in expr.congruences:
                    M = M + coef * (V.conj().T @ X[name] @ V)
                cons.append((M + M.H) / 2 >> 0)
        prob = cp.Problem(cp.Maximize(affine(problem.objective)), cons)
        start = time.perf_counter()
        kwargs = {}
        if self.solver == "CLARABEL":
            kwargs = {"tol_feas": tol, "tol_gap_abs": tol, "tol_gap_rel": tol}
        try:
            prob.solve(solver=self.solver, **kwargs)
        except cp.error.SolverError:
            return ConicSolution(Status.NUMERICAL_FAILURE, solve_time=time.perf_counter() - start)
        elapsed = time.perf_counter() - start
        status = {
            cp.OPTIMAL: Status.OPTIMAL,
            cp.INFEASIBLE: Status.INFEASIBLE,
            cp.UNBOUNDED: Status.UNBOUNDED,
            cp.USER_LIMIT: Status.ITERATION_LIMIT,
        }.get(prob.status, Status.NUMERICAL_FAILURE)
        if status is not Status.OPTIMAL:
            return ConicSolution(status, solve_time=elapsed)
        values = {name: np.asarray(v.value) for name, v in X.items()}
        values = {name: (V + V.conj().T) / 2 for name, V in values.items()}
        values.update({name: float(v.value) for name, v in s.items()})
        return ConicSolution(status, values, problem.objective.value(values), elapsed,
                             int(prob.solver_stats.num_iters or 0))


def make_backend(name: str = "clarabel", tol: float = DEFAULT_TOL):
    if name == "clarabel":
        return ClarabelBackend(tol)
    if name == "cvxpy":
        return CvxpyBackend(tol)
    raise ValueError(f"unknown backend {name!r}")


def solve(problem: ConicProblem, tol: float = DEFAULT_TOL, backend=None) -> ConicSolution:
    """Solve ``problem``; non-optimal outcomes are reported through ``status``."""
    problem.validate()
    backend = backend or ClarabelBackend(tol)
    return backend.solve(problem, tol)
