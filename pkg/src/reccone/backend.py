"""Solver backend for the scalar subproblems.

Three capabilities are needed: linear programs (weight-set feasibility and
support in the polyhedral case), semidefinite-constrained programs (dual
feasibility and support for semidefinite problems), and the small convex QP
that projects a point onto the convex hull of a finite point set.

LPs go to scipy's HiGHS interface. Anything with a PSD block goes through
cvxpy (CLARABEL, falling back to SCS); canonicalized problems are cached by
constraint structure so that repeated solves of the same problem shape with
different right-hand sides or objectives stay cheap. Hull projection is an
exact min-norm-point routine, so no external QP solver is involved.
"""

from __future__ import annotations

import hashlib
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.optimize import linprog


class BackendFailure(RuntimeError):
    """A solver returned an unusable status for a query that needs an answer."""


class Status(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class Block:
    """One variable block of a conic program.

    ``free`` and ``nonneg`` blocks are vectors of length ``size``; a ``psd``
    block is a symmetric ``size x size`` matrix constrained to the PSD cone.
    """

    name: str
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in ("free", "nonneg", "psd"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.size < 0:
            raise ValueError("block size must be nonnegative")


# A linear row over blocks: {block name: coefficient}. Vector blocks take a
# coefficient vector, psd blocks a symmetric matrix M meaning tr(M X).
Row = dict


@dataclass
class ConicProgram:
    """Self-contained conic program: linear objective over tagged blocks,
    affine equalities and <=-inequalities."""

    blocks: tuple[Block, ...]
    objective: Row = field(default_factory=dict)
    maximize: bool = False
    eq: list[tuple[Row, float]] = field(default_factory=list)
    ineq: list[tuple[Row, float]] = field(default_factory=list)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def has_psd(self) -> bool:
        return any(b.kind == "psd" for b in self.blocks)


@dataclass
class SolverResult:
    status: Status
    value: float | None = None
    point: dict[str, np.ndarray] | None = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class ConicSolverBackend(ABC):
    """Capability contract for the scalar subproblems.

    Implementations must be deterministic for identical input and tolerance
    settings, with feasibility answers correct to ``feas_tol``. Unless
    ``reentrant`` is True, calls are serialized behind an internal gate.
    """

    capabilities: frozenset = frozenset({"lp", "qp", "sdp-feasibility", "sdp-support"})
    feas_tol: float = 1e-8
    reentrant: bool = False

    def __init__(self):
        self._gate = threading.Lock()

    @abstractmethod
    def _solve(self, program: ConicProgram) -> SolverResult: ...

    @abstractmethod
    def _solve_qcqp(self, Q0, d0, quads, A, b) -> SolverResult: ...

    def solve(self, program: ConicProgram) -> SolverResult:
        if self.reentrant:
            return self._solve(program)
        with self._gate:
            return self._solve(program)

    def solve_qcqp(self, Q0, d0, quads=(), A=None, b=None) -> SolverResult:
        """Minimize x'Q0 x + d0'x subject to x'Q x + c'x + r <= 0 for each
        (Q, c, r) in quads and Ax <= b. Q0 and all Q must be PSD."""
        if self.reentrant:
            return self._solve_qcqp(Q0, d0, quads, A, b)
        with self._gate:
            return self._solve_qcqp(Q0, d0, quads, A, b)

    def hull_project(self, points: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Euclidean projection of x onto conv(points); returns (distance, nearest)."""
        return _min_norm_point(np.asarray(points, float), np.asarray(x, float))


def _flatten_layout(blocks):
    """Offsets of vector blocks in a flat variable; rejects psd blocks."""
    offs, n = {}, 0
    for blk in blocks:
        if blk.kind == "psd":
            raise ValueError("psd block in LP path")
        offs[blk.name] = (n, blk.kind)
        n += blk.size
    return offs, n


def _row_to_flat(row, offs, n):
    out = np.zeros(n)
    for name, coeff in row.items():
        start, _ = offs[name]
        coeff = np.atleast_1d(np.asarray(coeff, float))
        out[start:start + coeff.size] = coeff
    return out


class DefaultBackend(ConicSolverBackend):
    """scipy/HiGHS for LPs, cvxpy (CLARABEL, SCS fallback) for PSD blocks,
    min-norm-point for hull projections."""

    def __init__(self):
        super().__init__()
        self._templates: dict[bytes, "_CvxpyTemplate"] = {}

    # -- LP path ----------------------------------------------------------

    def _solve_lp(self, prog: ConicProgram) -> SolverResult:
        offs, n = _flatten_layout(prog.blocks)
        if n == 0:
            # constant program: feasible iff all constraints hold at x = ()
            ok = all(abs(r) <= 1e-12 for _, r in prog.eq) and all(r >= -1e-12 for _, r in prog.ineq)
            if ok:
                return SolverResult(Status.OPTIMAL, 0.0, {b.name: np.zeros(0) for b in prog.blocks})
            return SolverResult(Status.INFEASIBLE)
        c = _row_to_flat(prog.objective, offs, n)
        if prog.maximize:
            c = -c
        A_eq = b_eq = A_ub = b_ub = None
        if prog.eq:
            A_eq = np.array([_row_to_flat(r, offs, n) for r, _ in prog.eq])
            b_eq = np.array([rhs for _, rhs in prog.eq])
        if prog.ineq:
            A_ub = np.array([_row_to_flat(r, offs, n) for r, _ in prog.ineq])
            b_ub = np.array([rhs for _, rhs in prog.ineq])
        bounds = []
        for blk in prog.blocks:
            lo = 0.0 if blk.kind == "nonneg" else None
            bounds.extend([(lo, None)] * blk.size)
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=bounds, method="highs")
        if res.status == 0:
            point = {name: res.x[s:s + blk.size]
                     for blk in prog.blocks
                     for name, (s, _) in [(blk.name, offs[blk.name])]}
            val = res.fun if not prog.maximize else -res.fun
            return SolverResult(Status.OPTIMAL, float(val), point)
        if res.status == 2:
            return SolverResult(Status.INFEASIBLE)
        if res.status == 3:
            return SolverResult(Status.UNBOUNDED)
        return SolverResult(Status.NUMERICAL_FAILURE)

    # -- conic path via cvxpy ----------------------------------------------

    def _template_key(self, prog: ConicProgram) -> bytes:
        h = hashlib.sha1()
        h.update(repr([(b.name, b.kind, b.size) for b in prog.blocks]).encode())
        h.update(b"max" if prog.maximize else b"min")
        h.update(repr(sorted(prog.objective)).encode())
        for tag, rows in ((b"eq", prog.eq), (b"ineq", prog.ineq)):
            h.update(tag + str(len(rows)).encode())
            for row, _ in rows:
                for name in sorted(row):
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(np.asarray(row[name], float)).tobytes())
        return h.digest()

    def _solve_conic(self, prog: ConicProgram) -> SolverResult:
        key = self._template_key(prog)
        tmpl = self._templates.get(key)
        if tmpl is None:
            tmpl = _CvxpyTemplate(prog)
            self._templates[key] = tmpl
        return tmpl.solve(prog)

    def _solve(self, prog: ConicProgram) -> SolverResult:
        if prog.has_psd():
            return self._solve_conic(prog)
        return self._solve_lp(prog)

    def _solve_qcqp(self, Q0, d0, quads, A, b) -> SolverResult:
        import cvxpy as cp

        n = len(d0)
        x = cp.Variable(n)
        obj = cp.quad_form(x, cp.psd_wrap(np.asarray(Q0, float))) + np.asarray(d0, float) @ x
        cons = []
        for Q, c, r in quads:
            cons.append(cp.quad_form(x, cp.psd_wrap(np.asarray(Q, float)))
                        + np.asarray(c, float) @ x + float(r) <= 0)
        if A is not None and np.size(A):
            cons.append(np.asarray(A, float) @ x <= np.asarray(b, float))
        problem = cp.Problem(cp.Minimize(obj), cons)
        return _run_cvxpy(problem, lambda: {"x": np.asarray(x.value, float).reshape(n)})


class _CvxpyTemplate:
    """Canonicalized cvxpy problem for one constraint structure.

    Right-hand sides and the objective vector enter as Parameters, so solving
    the same structure with new data skips re-canonicalization.
    """

    def __init__(self, prog: ConicProgram):
        import cvxpy as cp

        self._cp = cp
        self._vars = {}
        for blk in prog.blocks:
            if blk.kind == "psd":
                self._vars[blk.name] = cp.Variable((blk.size, blk.size), PSD=True)
            elif blk.kind == "nonneg":
                self._vars[blk.name] = cp.Variable(blk.size, nonneg=True)
            else:
                self._vars[blk.name] = cp.Variable(blk.size)
        self._obj_params = {}
        obj = 0
        for name in sorted(prog.objective):
            blk = prog.block(name)
            if blk.kind == "psd":
                p = cp.Parameter((blk.size, blk.size), symmetric=True)
                obj = obj + cp.trace(p @ self._vars[name])
            else:
                p = cp.Parameter(blk.size)
                obj = obj + p @ self._vars[name]
            self._obj_params[name] = p
        self._eq_rhs = cp.Parameter(len(prog.eq)) if prog.eq else None
        self._ineq_rhs = cp.Parameter(len(prog.ineq)) if prog.ineq else None
        cons = []
        for rows, rhs_param, is_eq in ((prog.eq, self._eq_rhs, True),
                                       (prog.ineq, self._ineq_rhs, False)):
            if not rows:
                continue
            exprs = []
            for row, _ in rows:
                e = 0
                for name, coeff in row.items():
                    blk = prog.block(name)
                    coeff = np.asarray(coeff, float)
                    if blk.kind == "psd":
                        e = e + cp.trace(coeff @ self._vars[name])
                    else:
                        e = e + coeff @ self._vars[name]
                exprs.append(e)
            stacked = cp.hstack(exprs)
            cons.append(stacked == rhs_param if is_eq else stacked <= rhs_param)
        sense = cp.Maximize(obj) if prog.maximize else cp.Minimize(obj)
        self._problem = cp.Problem(sense, cons)
        self._blocks = prog.blocks

    def solve(self, prog: ConicProgram) -> SolverResult:
        for name, p in self._obj_params.items():
            blk = prog.block(name)
            val = np.asarray(prog.objective[name], float)
            if blk.kind == "psd":
                p.value = 0.5 * (val + val.T)
            else:
                p.value = val.reshape(blk.size)
        if self._eq_rhs is not None:
            self._eq_rhs.value = np.array([rhs for _, rhs in prog.eq], float)
        if self._ineq_rhs is not None:
            self._ineq_rhs.value = np.array([rhs for _, rhs in prog.ineq], float)

        def extract():
            out = {}
            for blk in self._blocks:
                v = self._vars[blk.name].value
                if v is None:
                    v = np.zeros((blk.size, blk.size) if blk.kind == "psd" else blk.size)
                out[blk.name] = np.asarray(v, float)
            return out

        return _run_cvxpy(self._problem, extract)


def _run_cvxpy(problem, extract: Callable[[], dict]) -> SolverResult:
    import cvxpy as cp

    try:
        problem.solve(solver=cp.CLARABEL)
    except cp.error.SolverError:
        problem.status = None
    if problem.status not in (cp.OPTIMAL, cp.INFEASIBLE, cp.UNBOUNDED):
        try:
            problem.solve(solver=cp.SCS, eps=1e-9, max_iters=50000)
        except cp.error.SolverError:
            return SolverResult(Status.NUMERICAL_FAILURE)
    status = problem.status
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolverResult(Status.OPTIMAL, float(problem.value), extract())
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolverResult(Status.INFEASIBLE)
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return SolverResult(Status.UNBOUNDED)
    return SolverResult(Status.NUMERICAL_FAILURE)


# -- exact hull projection -------------------------------------------------

def _min_norm_point(points: np.ndarray, x: np.ndarray,
                    tol: float = 1e-12, max_iter: int = 10000):
    """Wolfe's min-norm-point algorithm for min ||x - sum l_i p_i||,
    l >= 0, sum l = 1. Finite and exact up to `tol` times the data scale."""
    P = np.atleast_2d(points)
    if P.shape[0] == 0:
        raise ValueError("empty point set")
    Y = P - x
    norms2 = np.einsum("ij,ij->i", Y, Y)
    scale = 1.0 + float(norms2.max())
    S = [int(np.argmin(norms2))]
    lam = np.array([1.0])
    for _ in range(max_iter):
        w = lam @ Y[S]
        g = Y @ w
        ww = float(w @ w)
        j = int(np.argmin(g))
        if g[j] >= ww - tol * scale or j in S:
            nearest = x + w
            return float(np.sqrt(max(ww, 0.0))), nearest
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            Ys = Y[S]
            k = len(S)
            K = np.zeros((k + 1, k + 1))
            K[:k, :k] = Ys @ Ys.T
            K[:k, k] = 1.0
            K[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            alpha = sol[:k]
            if alpha.min() > tol:
                lam = alpha
                break
            drop = alpha <= tol
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(drop, lam / np.maximum(lam - alpha, 1e-300), np.inf)
            theta = min(1.0, float(ratios.min()))
            lam = (1.0 - theta) * lam + theta * alpha
            lam[lam < tol] = 0.0
            if not (lam == 0.0).any():
                # numerical safety: force the blocking index out
                lam[int(np.argmin(ratios))] = 0.0
            keep = lam > 0.0
            S = [s for s, k_ in zip(S, keep) if k_]
            lam = lam[keep]
            lam = lam / lam.sum()
    raise BackendFailure("min-norm-point projection did not converge")


_BACKENDS = {"default": DefaultBackend}
_instances: dict[str, ConicSolverBackend] = {}


def register_backend(name: str, factory) -> None:
    _BACKENDS[name] = factory


def default_backend() -> ConicSolverBackend:
    """Backend selected by the RECCONE_BACKEND environment variable."""
    name = os.environ.get("RECCONE_BACKEND", "default")
    if name not in _BACKENDS:
        raise BackendFailure(f"unknown backend {name!r}; registered: {sorted(_BACKENDS)}")
    if name not in _instances:
        _instances[name] = _BACKENDS[name]()
    return _instances[name]


def resolve_backend(backend: ConicSolverBackend | None) -> ConicSolverBackend:
    return backend if backend is not None else default_backend()
