"""Exact polyhedral calculus in low dimension.

Double description for extreme rays of H-form cones (with lineality handled
as +/- ray pairs), dual cones, projection of lifted cones, vertex enumeration
of polytopes via homogenization, point-to-hull distance, and a sampling
estimator for the Hausdorff distance between unit-ball sections of cones.
The estimator is a guaranteed lower bound on the true distance and is used
for verification only, never inside certified tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .backend import ConicSolverBackend, resolve_backend

ADJ_TOL = 1e-9          # double description adjacency / activity tolerance
DEDUP_TOL = 1e-8        # angular (chord) tolerance for deduplicating rays
DEGENERACY_BAND = 100.0  # |margin| in (tol, band*tol) counts as ambiguous


class NumericalDegeneracy(RuntimeError):
    """Incremental insertion hit an adjacency/activity margin too close to
    the tolerance to classify reliably. Reported, not silently resolved."""


class EmptyProjection(RuntimeError):
    """The projected cone is {0}."""


def unit_rows(M: np.ndarray, drop_tol: float = 1e-13) -> np.ndarray:
    """Normalize rows to unit length, dropping (near-)zero rows."""
    M = np.atleast_2d(np.asarray(M, float))
    if M.size == 0:
        return M.reshape(0, M.shape[1] if M.ndim == 2 else 0)
    norms = np.linalg.norm(M, axis=1)
    keep = norms > drop_tol
    return M[keep] / norms[keep, None]


def dedup_rows(M: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    """Remove rows within chord distance `tol` of an earlier row."""
    out = []
    for row in M:
        if not any(np.linalg.norm(row - r) < tol for r in out):
            out.append(row)
    return np.array(out) if out else M.reshape(0, M.shape[1])


def _lex_sorted(M: np.ndarray) -> np.ndarray:
    if len(M) <= 1:
        return M
    order = np.lexsort(np.round(M.T[::-1], 12))
    return M[order]


# ---------------------------------------------------------------------------
# Cone types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolyhedralCone:
    """Finitely generated cone in R^dim.

    `rays` is the V-form (unit rows; an empty array means the cone {0}),
    `halfspaces` is the H-form with rows n meaning {x | n.x >= 0} (an empty
    array means the whole space). Either form may be None when unknown.
    A non-pointed cone carries its lineality space as +/- ray pairs.
    """

    dim: int
    rays: np.ndarray | None = None
    halfspaces: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        for name in ("rays", "halfspaces"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.atleast_2d(np.asarray(arr, float))
            if arr.size == 0:
                arr = arr.reshape(0, self.dim)
            if arr.shape[1] != self.dim:
                raise ValueError(f"{name} have dimension {arr.shape[1]}, expected {self.dim}")
            if name == "rays" and len(arr):
                norms = np.linalg.norm(arr, axis=1)
                if norms.min() < 1e-13:
                    raise ValueError("zero ray")
                arr = arr / norms[:, None]
            elif len(arr):
                arr = unit_rows(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.rays is None and self.halfspaces is None:
            raise ValueError("cone needs at least one representation")
        if self.rays is not None and self.halfspaces is not None and len(self.rays) and len(self.halfspaces):
            slack = self.rays @ self.halfspaces.T
            if slack.min() < -1e-9:
                raise ValueError("rays violate halfspaces: representations are incoherent")

    @classmethod
    def from_rays(cls, rays, dim: int | None = None) -> "PolyhedralCone":
        rays = np.atleast_2d(np.asarray(rays, float))
        if rays.size == 0:
            if dim is None:
                raise ValueError("dim required for the zero cone")
            rays = rays.reshape(0, dim)
        return cls(dim=rays.shape[1], rays=rays)

    @classmethod
    def from_halfspaces(cls, halfspaces, dim: int | None = None) -> "PolyhedralCone":
        H = np.atleast_2d(np.asarray(halfspaces, float))
        if H.size == 0:
            if dim is None:
                raise ValueError("dim required for the full-space cone")
            H = H.reshape(0, dim)
        return cls(dim=H.shape[1], halfspaces=H)

    def vform(self) -> np.ndarray:
        """Generating rays, computing them from the H-form if necessary."""
        if self.rays is not None:
            return self.rays
        return extreme_rays(self.halfspaces, dim=self.dim)

    def with_rays(self) -> "PolyhedralCone":
        if self.rays is not None:
            return self
        return PolyhedralCone(self.dim, rays=self.vform(), halfspaces=self.halfspaces)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, float)
        if self.halfspaces is not None:
            if len(self.halfspaces) == 0:
                return True
            return float((self.halfspaces @ x).min()) >= -tol * (1.0 + np.linalg.norm(x))
        return cone_distance(self.rays, x) <= tol * (1.0 + np.linalg.norm(x))

    def is_pointed(self, tol: float = 1e-9) -> bool:
        rays = self.vform()
        if len(rays) <= 1:
            return True
        dist, _ = _hull_distance_free(rays, np.zeros(self.dim))
        return dist > tol


@dataclass(frozen=True)
class VPolyhedron:
    """conv(vertices) + cone(rays) in R^d; both parts empty means the empty set."""

    vertices: np.ndarray
    rays: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, float))
        r = np.atleast_2d(np.asarray(self.rays, float))
        d = v.shape[1] if v.size else (r.shape[1] if r.size else v.shape[1])
        v = v.reshape(-1, d) if v.size else v.reshape(0, d)
        r = r.reshape(-1, d) if r.size else r.reshape(0, d)
        v.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "rays", r)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def empty(self) -> bool:
        return len(self.vertices) == 0 and len(self.rays) == 0

    @property
    def bounded(self) -> bool:
        return len(self.rays) == 0


# ---------------------------------------------------------------------------
# Double description
# ---------------------------------------------------------------------------

class DoubleDescription:
    """Incremental double description of a pointed cone {u | H u >= 0}.

    The ambient dimension must equal the rank of the final constraint system;
    callers quotient out lineality first (see extreme_rays). Until enough
    independent rows have arrived the constraints are buffered; afterwards
    each insertion updates the extreme-ray list.
    """

    def __init__(self, dim: int, tol: float = ADJ_TOL,
                 degeneracy_band: float | None = DEGENERACY_BAND):
        self.dim = dim
        self.tol = tol
        self.band = degeneracy_band
        self._pending: list[np.ndarray] = []
        self._rays: list[np.ndarray] | None = None
        self._processed: list[np.ndarray] = []
        self._active: list[np.ndarray] = []   # bool mask per ray over processed rows

    @property
    def initialized(self) -> bool:
        return self._rays is not None

    def insert(self, normal: np.ndarray) -> None:
        h = np.asarray(normal, float)
        nrm = np.linalg.norm(h)
        if nrm < 1e-13:
            return
        h = h / nrm
        if self._rays is None:
            self._pending.append(h)
            self._try_initialize()
        else:
            self._insert_row(h)

    def _try_initialize(self) -> None:
        from scipy.linalg import qr

        stacked = np.array(self._pending)
        if np.linalg.matrix_rank(stacked, tol=1e-10) < self.dim:
            return
        # well-conditioned independent subset via pivoted QR on the rows
        _, _, piv = qr(stacked.T, pivoting=True, mode="economic")
        chosen = sorted(piv[:self.dim])
        B = np.array([self._pending[i] for i in chosen])
        R = np.linalg.inv(B)  # columns generate {u | B u >= 0}
        self._rays = []
        self._active = []
        self._processed = []
        cols = [R[:, j] / np.linalg.norm(R[:, j]) for j in range(self.dim)]
        # process the chosen rows first so activity bookkeeping is uniform
        for j, c in enumerate(cols):
            self._rays.append(c)
            self._active.append(np.zeros(0, dtype=bool))
        for i in chosen:
            self._append_processed(self._pending[i])
        for i, row in enumerate(self._pending):
            if i not in chosen:
                self._insert_row(row)
        self._pending = []

    def _append_processed(self, h: np.ndarray) -> None:
        """Record h as processed, extending activity masks (h must already be
        satisfied by all current rays)."""
        vals = np.array([abs(h @ r) for r in self._rays])
        self._check_band(vals)
        self._processed.append(h)
        for i, r in enumerate(self._rays):
            self._active[i] = np.append(self._active[i], abs(h @ r) <= self.tol)

    def _check_band(self, absvals: np.ndarray) -> None:
        if self.band is None or absvals.size == 0:
            return
        bad = (absvals > self.tol) & (absvals < self.band * self.tol)
        if bad.any():
            raise NumericalDegeneracy(
                f"activity margin {absvals[bad].min():.3e} inside the ambiguity band "
                f"({self.tol:.0e}..{self.band * self.tol:.0e})")

    def _insert_row(self, h: np.ndarray) -> None:
        rays = self._rays
        if not rays:
            self._processed.append(h)
            return
        s = np.array([h @ r for r in rays])
        self._check_band(np.abs(s))
        pos = np.flatnonzero(s > self.tol)
        neg = np.flatnonzero(s < -self.tol)
        zer = np.flatnonzero(np.abs(s) <= self.tol)
        if len(neg) == 0:
            self._append_processed(h)
            return
        new_rays: list[np.ndarray] = []
        if len(pos) and len(neg):
            act = np.array([self._active[i] for i in range(len(rays))])
            for p in pos:
                for n in neg:
                    common = act[p] & act[n]
                    if common.sum() < self.dim - 2:
                        continue
                    # combinatorial adjacency: no third ray's active set may
                    # contain the common active set
                    others = np.ones(len(rays), dtype=bool)
                    others[[p, n]] = False
                    if others.any():
                        idx = np.flatnonzero(common)
                        dominated = act[others][:, idx].all(axis=1).any() if idx.size else True
                        if dominated:
                            continue
                    combo = s[p] * rays[n] - s[n] * rays[p]
                    nrm = np.linalg.norm(combo)
                    if nrm < 1e-13:
                        continue
                    new_rays.append(combo / nrm)
        keep = list(pos) + list(zer)
        processed = self._processed + [h]
        kept_rays = [rays[i] for i in keep]
        kept_act = [np.append(self._active[i], abs(s[i]) <= self.tol) for i in keep]
        for r in new_rays:
            vals = np.abs(np.array([q @ r for q in processed]))
            self._check_band(vals)
            kept_rays.append(r)
            kept_act.append(vals <= self.tol)
        self._processed = processed
        self._rays = kept_rays
        self._active = kept_act

    def rays(self) -> np.ndarray:
        if self._rays is None:
            if self._pending:
                raise NumericalDegeneracy(
                    "constraint system never reached full rank; cone has "
                    "lineality the caller did not quotient out")
            raise RuntimeError("no constraints inserted")
        if not self._rays:
            return np.zeros((0, self.dim))
        return dedup_rows(np.array(self._rays))


def extreme_rays(halfspaces, dim: int | None = None, tol: float = ADJ_TOL,
                 degeneracy_band: float | None = DEGENERACY_BAND) -> np.ndarray:
    """Extreme rays of {x in R^d | H x >= 0}, as unit rows.

    For non-pointed cones the lineality space appears as +/- ray pairs and
    the remaining rays are extreme modulo lineality. Raises
    NumericalDegeneracy when an insertion margin is too close to `tol`.
    """
    H = np.atleast_2d(np.asarray(halfspaces, float))
    if H.size == 0:
        if dim is None:
            raise ValueError("dim required when no halfspaces are given")
        eye = np.eye(dim)
        return np.vstack([eye, -eye])
    d = H.shape[1]
    H = unit_rows(H)
    if len(H) == 0:
        eye = np.eye(d)
        return np.vstack([eye, -eye])
    # lineality = kernel of H
    _, sv, Vt = np.linalg.svd(H)
    rank_tol = max(H.shape) * 1e-12 * (sv[0] if len(sv) else 1.0)
    rank = int((sv > rank_tol).sum())
    lineality = Vt[rank:]
    Q = Vt[:rank].T  # orthonormal basis of the row space, d x rank
    out = []
    if rank > 0:
        Hq = H @ Q
        dd = DoubleDescription(rank, tol=tol, degeneracy_band=degeneracy_band)
        for row in _lex_sorted(unit_rows(Hq)):
            dd.insert(row)
        pointed = dd.rays()
        if len(pointed):
            out.append(pointed @ Q.T)
    if len(lineality):
        out.append(lineality)
        out.append(-lineality)
    if not out:
        return np.zeros((0, d))
    rays = dedup_rows(unit_rows(np.vstack(out)))
    return _lex_sorted(rays)


# ---------------------------------------------------------------------------
# Cone algebra
# ---------------------------------------------------------------------------

def cone_distance(rays: np.ndarray, x: np.ndarray) -> float:
    """Distance from x to cone(rays); exact via NNLS."""
    p = cone_project(rays, x)
    return float(np.linalg.norm(np.asarray(x, float) - p))


def cone_project(rays: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Euclidean projection of x onto cone(rays) ({0} if no rays)."""
    x = np.asarray(x, float)
    rays = np.atleast_2d(np.asarray(rays, float))
    if rays.size == 0:
        return np.zeros_like(x)
    coeff, _ = nnls(rays.T, x)
    return rays.T @ coeff


def irredundant_rays(rays: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Drop rays that are conic combinations of the remaining ones."""
    rays = np.atleast_2d(np.asarray(rays, float))
    keep = list(range(len(rays)))
    for i in range(len(rays)):
        if len(keep) == 1:
            break
        others = [j for j in keep if j != i]
        if i not in keep or not others:
            continue
        if cone_distance(rays[others], rays[i]) <= tol:
            keep.remove(i)
    return rays[keep]


def dual_cone(K: PolyhedralCone) -> PolyhedralCone:
    """Dual cone {w | w.a >= 0 for all a in K}.

    The V-form of K becomes the H-form of the dual directly; dual rays come
    from extreme-ray enumeration. (K+)+ recovers cl K.
    """
    rays = K.vform()
    dual_rays = extreme_rays(rays, dim=K.dim)
    return PolyhedralCone(K.dim, rays=dual_rays, halfspaces=rays.copy())


def project_cone(system) -> PolyhedralCone:
    """w-projection of a polyhedral lifted feasibility system.

    Runs extreme-ray enumeration on the lifted H-form cone (equalities as
    paired inequalities), drops the auxiliary coordinates, removes redundant
    projected rays and renormalizes. Raises EmptyProjection when only the
    zero ray remains.
    """
    if system.psd_blocks:
        raise ValueError("project_cone handles polyhedral systems only (no PSD blocks)")
    if system.base_cut is not None:
        raise ValueError("project_cone expects a cone, not a truncated system")
    q = system.weight_dim
    aux = sum(size for _, size in system.nonneg_blocks)
    rows = []
    member = np.atleast_2d(system.member_cone)
    if member.size:
        rows.append(np.hstack([member, np.zeros((len(member), aux))]))
    if aux:
        rows.append(np.hstack([np.zeros((aux, q)), np.eye(aux)]))
    if system.n_eq:
        E = np.hstack([system.eq_w, system.aux_matrix()])
        rows.append(E)
        rows.append(-E)
    H = np.vstack(rows) if rows else np.zeros((0, q + aux))
    lifted = extreme_rays(H, dim=q + aux)
    proj = lifted[:, :q]
    proj = unit_rows(proj, drop_tol=1e-12)
    proj = dedup_rows(proj)
    if len(proj) == 0:
        raise EmptyProjection("projection of the lifted cone is {0}")
    proj = _lex_sorted(irredundant_rays(proj))
    return PolyhedralCone(q, rays=proj)


def polytope_vertices(A: np.ndarray, b: np.ndarray,
                      degeneracy_band: float | None = DEGENERACY_BAND) -> VPolyhedron:
    """V-form of {w | A w <= b} via double description on the homogenization."""
    poly = IncrementalPolytope(np.atleast_2d(np.asarray(A, float)).shape[1],
                               degeneracy_band=degeneracy_band)
    for a, beta in zip(np.atleast_2d(np.asarray(A, float)), np.asarray(b, float).ravel()):
        poly.add_cut(a, beta)
    return poly.vpolyhedron()


class IncrementalPolytope:
    """Evolving H-polytope {w | A w <= b} with vertex enumeration.

    Wraps double description on the homogenized cone {(w,t) | Aw <= tb, t>=0}
    so that refinement loops can add cuts without rebuilding.
    """

    def __init__(self, dim: int, degeneracy_band: float | None = DEGENERACY_BAND):
        self.dim = dim
        self._dd = DoubleDescription(dim + 1, degeneracy_band=degeneracy_band)
        self._dd.insert(np.append(np.zeros(dim), 1.0))  # t >= 0

    def add_cut(self, normal: np.ndarray, offset: float) -> None:
        """Add the halfspace {w | normal.w <= offset}."""
        self._dd.insert(np.append(-np.asarray(normal, float), float(offset)))

    def vpolyhedron(self) -> VPolyhedron:
        rays = self._dd.rays()
        if len(rays) == 0:
            return VPolyhedron(np.zeros((0, self.dim)), np.zeros((0, self.dim)))
        verts = [r[:-1] / r[-1] for r in rays if r[-1] > 1e-10]
        dirs = [r[:-1] for r in rays if r[-1] <= 1e-10]
        verts = dedup_rows(np.array(verts), tol=1e-10) if verts else np.zeros((0, self.dim))
        dirs = unit_rows(np.array(dirs)) if dirs else np.zeros((0, self.dim))
        if len(verts):
            verts = verts[np.lexsort(np.round(verts.T[::-1], 12))]
        return VPolyhedron(verts, dirs)

    def vertices(self) -> np.ndarray:
        vp = self.vpolyhedron()
        if not vp.bounded:
            raise ValueError("polytope is unbounded")
        return vp.vertices


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def _hull_distance_free(points: np.ndarray, x: np.ndarray):
    """Hull projection without a backend (used by cheap internal checks)."""
    from .backend import _min_norm_point

    return _min_norm_point(points, x)


def point_to_hull_distance(x, points, backend: ConicSolverBackend | None = None):
    """Euclidean distance from x to conv(points) and the nearest point.

    Solved as the convex-combination quadratic subproblem on the solver
    backend; backend failures propagate.
    """
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[0] == 0:
        raise ValueError("points must be nonempty")
    be = resolve_backend(backend)
    return be.hull_project(points, np.asarray(x, float))


def section_distance(rays: np.ndarray, x: np.ndarray) -> float:
    """Distance from x to cone(rays) intersected with the unit ball.

    With p the projection of x onto the cone, the nearest point of the
    truncated cone is p scaled into the ball, so the distance equals
    sqrt(d(x, cone)^2 + max(||p|| - 1, 0)^2).
    """
    x = np.asarray(x, float)
    p = cone_project(rays, x)
    d_cone = np.linalg.norm(x - p)
    excess = max(np.linalg.norm(p) - 1.0, 0.0)
    return float(np.hypot(d_cone, excess))


def _section_samples(rays: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit samples of cone(rays): the rays themselves, dyadic
    arcs between ray pairs, then seeded random conic mixes. Prefixes are
    nested, so estimates grow monotonically with `count`."""
    rays = np.atleast_2d(rays)
    if rays.size == 0 or len(rays) == 0:
        return np.zeros((0, rays.shape[1] if rays.ndim == 2 else 0))
    samples = [r for r in rays]
    pairs = [(i, j) for i in range(len(rays)) for j in range(i + 1, len(rays))]
    level = 1
    while len(samples) < count and pairs and level <= 6:
        for i, j in pairs:
            for k in range(1, 2 ** level, 2):
                t = k / 2 ** level
                v = (1 - t) * rays[i] + t * rays[j]
                nrm = np.linalg.norm(v)
                if nrm > 1e-12:
                    samples.append(v / nrm)
            if len(samples) >= count:
                break
        level += 1
    rng = np.random.default_rng(seed)
    while len(samples) < count:
        w = rng.dirichlet(np.ones(len(rays)))
        v = w @ rays
        nrm = np.linalg.norm(v)
        if nrm > 1e-12:
            samples.append(v / nrm)
    return np.array(samples[:count])


def _as_rays(K) -> np.ndarray:
    if isinstance(K, PolyhedralCone):
        return K.vform()
    return unit_rows(np.atleast_2d(np.asarray(K, float)))


def hausdorff_section_estimate(K1, K2, samples: int = 2000) -> float:
    """Sampled Hausdorff distance between unit-ball sections of two cones.

    Accepts PolyhedralCone instances or raw generator arrays ("sampled
    cones"). Each sampled point is measured against the exact section of the
    other cone, so the estimate never exceeds the true distance; it is
    monotone in `samples`.
    """
    R1, R2 = _as_rays(K1), _as_rays(K2)
    if len(R1) == 0 and len(R2) == 0:
        return 0.0
    per_side = max(samples // 2, 1)
    best = 0.0
    for A, B in ((R1, R2), (R2, R1)):
        if len(A) == 0:
            continue  # section of {0} is {0}, contained in any section
        for a in _section_samples(A, per_side):
            best = max(best, section_distance(B, a))
    return best
