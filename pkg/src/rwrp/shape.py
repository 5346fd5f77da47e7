"""Monte Carlo estimates of limiting free energies and their convex-analytic structure.

Estimates are stored per direction of a one-parameter grid (directions of a
two-dimensional face), which is what every routine below differentiates,
extrapolates and compares along.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import nnls
from scipy.sparse import csgraph

from .busemann import derived_seed
from .energy import (
    NEG_INF,
    Region,
    _log_gain,
    _neg_potential,
    box_region,
    forward_region,
    level_groups,
    logsumexp_rows,
    unit_level,
    unrestricted_logZ,
)
from .errors import (
    ConcavityViolatedAtScale,
    DimUnsupported,
    DirectionOutsideCone,
    EmptyFacetAtTol,
    GridMismatch,
    InsufficientInteriorData,
    NegativePotentialWithLoops,
)
from .lattice import DIRECTED, Environment, Face, StepSet

log = logging.getLogger(__name__)

Z_CI = 3.0  # confidence half-widths are Z_CI standard errors
GRID_TOL = 1e-9


# ---------------------------------------------------------------------------
# lattice approximants
# ---------------------------------------------------------------------------


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    base = np.floor(raw + 1e-12).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def lattice_approximant(face: Face, xi: Sequence[float], n: int, mode: str) -> np.ndarray:
    """A lattice point x̂_n(ξ) reachable from 0 with x̂_n/n → ξ.

    ``restricted``: ξ ∈ U_A and the point is a sum of exactly n steps.
    ``unrestricted``: ξ in the cone and the step counts are rounded from nξ.
    """
    steps = face.steps.astype(float)
    xi = np.asarray(xi, dtype=float)
    if mode == "restricted":
        A = np.vstack([steps.T, np.ones(len(steps))])
        b = np.concatenate([xi, [1.0]])
        a, resid = nnls(A, b)
        if resid > 1e-9:
            raise DirectionOutsideCone(f"{tuple(xi)} is outside U_A")
        counts = _largest_remainder(a / a.sum(), n)
    elif mode == "unrestricted":
        a, resid = nnls(steps.T, xi)
        if resid > 1e-9:
            raise DirectionOutsideCone(f"{tuple(xi)} is outside the cone of the face")
        counts = np.rint(n * a).astype(np.int64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return (counts @ face.steps).astype(np.int64)


# ---------------------------------------------------------------------------
# forward fields: free energies from one source to every site
# ---------------------------------------------------------------------------


def _pred_gain(region: Region, face: Face, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = region.neighbours(-face.steps)
    pg = np.where(pred >= 0, gain[np.maximum(pred, 0), np.arange(len(face.steps))[None, :]], NEG_INF)
    return pred, pg


def _gain(env, face, sites, beta):
    return _neg_potential(env, face, sites) if math.isinf(beta) else _log_gain(env, face, sites, beta)


def _reduce(cand: np.ndarray, beta: float) -> np.ndarray:
    return np.max(cand, axis=1) if math.isinf(beta) else logsumexp_rows(cand)


def _directed_region(face: Face, x: np.ndarray, targets: np.ndarray) -> Region:
    u = np.asarray(face.positivity_certificate, dtype=np.int64)
    top = int((targets @ u).max())
    if np.all(face.steps >= 0):
        hi = targets.max(axis=0)
        axes = [np.arange(a, b + 1) for a, b in zip(x, hi)]
        sites = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(x))
        return Region(sites[sites @ u <= top])
    lv = face.steps @ u
    reg = forward_region(face, x, int(math.ceil((top - int(x @ u)) / lv.min())))
    return Region(reg.sites[reg.sites @ u <= top])


def forward_unrestricted(env: Environment, face: Face, x, targets, beta: float, box=None) -> np.ndarray:
    """F_{x,y} for every target y: (1/β) log Z or the passage value at β = ∞."""
    x = np.asarray(x, dtype=np.int64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    if face.origin_class == DIRECTED:
        region = _directed_region(face, x, targets)
        gain = _gain(env, face, region.sites, beta)
        pred, pg = _pred_gain(region, face, gain)
        groups = level_groups(region, face.positivity_certificate)[::-1]
        F = np.full(len(region) + 1, NEG_INF)
        ix = region.index(x)
        for g in groups:
            F[g] = _reduce(pg[g] + F[pred[g]], beta)
            F[ix] = 0.0  # the source; every group before its own stays at −inf
        vals = F[region.index_of(targets)]  # missing targets read the −inf padding
        return vals if math.isinf(beta) else vals / beta
    if box is None:
        lo = np.minimum(targets.min(axis=0), x) - 4
        hi = np.maximum(targets.max(axis=0), x) + 4
        box = (tuple(lo), tuple(hi))
    if math.isinf(beta):
        region = box_region(*box)
        nbr = region.neighbours(face.steps)
        V = env.values_all(region.sites)[:, list(face.member_indices)]
        if np.any(V < 0):
            raise NegativePotentialWithLoops("V must be non-negative when the face admits loops")
        S, k = nbr.shape
        rows = np.repeat(np.arange(S), k)
        cols = nbr.ravel()
        mask = cols >= 0
        G = sparse.csr_matrix((V.ravel()[mask] + 1e-300, (rows[mask], cols[mask])), shape=(S, S))
        d = csgraph.dijkstra(G, directed=True, indices=region.index(x))
        return -d[region.index_of(targets)]
    ss = env.step_set
    return np.array([unrestricted_logZ(env, ss, face, x, y, beta, box=box) for y in targets]) / beta


def forward_restricted(env: Environment, face: Face, x, targets_by_n: dict, beta: float) -> dict:
    """F_{x,y,n} for each n and each target of that n, by forward layers."""
    x = np.asarray(x, dtype=np.int64)
    nmax = max(targets_by_n)
    if unit_level(face):
        # n is fixed by the endpoint level, so the unrestricted sweep is exact
        return {n: forward_unrestricted(env, face, x, t, beta) for n, t in targets_by_n.items()}
    region = forward_region(face, x, nmax)
    gain = _gain(env, face, region.sites, beta)
    pred, pg = _pred_gain(region, face, gain)
    L = np.full(len(region) + 1, NEG_INF)
    L[region.index(x)] = 0.0
    out = {}
    for k in range(1, nmax + 1):
        nxt = np.full(len(region) + 1, NEG_INF)
        nxt[:-1] = _reduce(pg + L[pred], beta)
        L = nxt
        if k in targets_by_n:
            t = np.atleast_2d(np.asarray(targets_by_n[k], dtype=np.int64))
            idx = region.index_of(t)
            vals = np.where(idx >= 0, L[idx], NEG_INF)
            out[k] = vals if math.isinf(beta) else vals / beta
    return out


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


@dataclass
class ShapeEstimate:
    face: Face
    beta: float
    mode: str
    grid: np.ndarray  # (G, d)
    n_ladder: np.ndarray  # (L,)
    mean: np.ndarray  # (G, L)
    se: np.ndarray  # (G, L)
    extrap: np.ndarray  # (G,)
    extrap_ci: np.ndarray  # (G,)
    replicas: int
    samples: np.ndarray | None = None  # (G, L, R)
    note: str = "extrapolation a + b n^(-1/3) + c/n is a heuristic fit"
    meta: dict = field(default_factory=dict)

    # values at grid points -------------------------------------------------
    def column(self, which: str = "largest") -> tuple[np.ndarray, np.ndarray]:
        if which == "largest":
            return self.mean[:, -1], Z_CI * self.se[:, -1]
        if which == "extrap":
            return self.extrap, self.extrap_ci
        raise ValueError(f"unknown column {which!r}")

    def grid_index(self, xi, tol: float = GRID_TOL) -> int:
        d = np.abs(self.grid - np.asarray(xi, dtype=float)).max(axis=1)
        i = int(np.argmin(d))
        return i if d[i] <= tol else -1

    def _param(self) -> np.ndarray:
        if self.grid.shape[1] != 2:
            raise DimUnsupported("grid routines need two-dimensional directions")
        return self.grid[:, 0]

    def value(self, xi, which: str = "largest") -> float:
        return self.value_ci(xi, which)[0]

    def value_ci(self, xi, which: str = "largest") -> tuple[float, float]:
        """Estimate at ξ; unrestricted values scale by |ξ|_1, off-grid values interpolate linearly."""
        xi = np.asarray(xi, dtype=float)
        s = 1.0
        if self.mode == "unrestricted":
            s = float(np.abs(xi).sum())
            if s == 0:
                return 0.0, 0.0
            xi = xi / s
        vals, cis = self.column(which)
        i = self.grid_index(xi)
        if i >= 0:
            return s * float(vals[i]), s * float(cis[i])
        t = self._param()
        order = np.argsort(t)
        ts, vs, cs = t[order], vals[order], cis[order]
        if not ts[0] <= xi[0] <= ts[-1]:
            raise GridMismatch(f"{tuple(xi)} lies outside the probed grid")
        j = int(np.searchsorted(ts, xi[0]))
        j = min(max(j, 1), len(ts) - 1)
        w = (xi[0] - ts[j - 1]) / (ts[j] - ts[j - 1])
        return s * float((1 - w) * vs[j - 1] + w * vs[j]), s * float(max(cs[j - 1], cs[j]))

    def to_table(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        d = self.grid.shape[1]
        head = [f"xi{i + 1}" for i in range(d)] + ["n", "mean", "se", "extrapolate", "ci"]
        buf.write(delimiter.join(head) + "\n")
        for g in range(len(self.grid)):
            for j, n in enumerate(self.n_ladder):
                row = [repr(float(c)) for c in self.grid[g]] + [
                    str(int(n)),
                    repr(float(self.mean[g, j])),
                    repr(float(self.se[g, j])),
                    repr(float(self.extrap[g])),
                    repr(float(self.extrap_ci[g])),
                ]
                buf.write(delimiter.join(row) + "\n")
        return buf.getvalue()


def extrapolate(n_ladder, means, ses) -> tuple[float, float]:
    """Weighted fit of a + b n^{-1/3} + c n^{-1}; returns (a, Z_CI·se(a)), or the largest-n point with fewer than 3 rungs."""
    n = np.asarray(n_ladder, dtype=float)
    y = np.asarray(means, dtype=float)
    s = np.maximum(np.asarray(ses, dtype=float), 1e-12)
    if len(n) < 3:
        return float(y[-1]), float(Z_CI * s[-1])
    X = np.stack([np.ones_like(n), n ** (-1.0 / 3.0), 1.0 / n], axis=1)
    W = 1.0 / s**2
    XtW = X.T * W
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ y)
    return float(coef[0]), float(Z_CI * math.sqrt(cov[0, 0]))


def estimate_shape(
    env_family: Callable[[int], Environment],
    step_set: StepSet,
    face: Face,
    beta: float,
    mode: str,
    grid,
    n_ladder: Sequence[int],
    replicas: int,
    seed: int = 0,
    box_margin: int = 4,
) -> ShapeEstimate:
    """Replica means of n^{-1}F_{0,x̂_n(ξ)} over fresh environments for every (ξ, n)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if mode == "unrestricted":
        norms = np.abs(grid).sum(axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("unrestricted grids live on the unit ℓ1 sphere")
    n_ladder = np.asarray(sorted(int(n) for n in n_ladder))
    origin = np.zeros(step_set.dim, dtype=np.int64)
    targets = {int(n): np.stack([lattice_approximant(face, xi, int(n), mode) for xi in grid]) for n in n_ladder}
    samples = np.zeros((len(grid), len(n_ladder), replicas))
    box = None
    if mode == "unrestricted" and face.origin_class != DIRECTED:
        allt = np.concatenate(list(targets.values()))
        box = (tuple(np.minimum(allt.min(axis=0), 0) - box_margin), tuple(np.maximum(allt.max(axis=0), 0) + box_margin))
    for r in range(replicas):
        env = env_family(derived_seed(seed, r))
        if mode == "restricted":
            vals = forward_restricted(env, face, origin, targets, beta)
        elif face.origin_class == DIRECTED:
            allt = np.concatenate([targets[int(n)] for n in n_ladder])
            flat = forward_unrestricted(env, face, origin, allt, beta)
            vals = {int(n): flat[j * len(grid) : (j + 1) * len(grid)] for j, n in enumerate(n_ladder)}
        elif math.isinf(beta):
            allt = np.concatenate([targets[int(n)] for n in n_ladder])
            flat = forward_unrestricted(env, face, origin, allt, beta, box=box)
            vals = {int(n): flat[j * len(grid) : (j + 1) * len(grid)] for j, n in enumerate(n_ladder)}
        else:
            vals = {int(n): forward_unrestricted(env, face, origin, targets[int(n)], beta, box=box) for n in n_ladder}
        for j, n in enumerate(n_ladder):
            samples[:, j, r] = vals[int(n)] / n
    mean = samples.mean(axis=2)
    se = samples.std(axis=2, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros_like(mean)
    ext = np.zeros(len(grid))
    eci = np.zeros(len(grid))
    for g in range(len(grid)):
        ext[g], eci[g] = extrapolate(n_ladder, mean[g], se[g])
    return ShapeEstimate(face, beta, mode, grid, n_ladder, mean, se, ext, eci, replicas, samples, meta={"seed": seed})


def estimate_from_values(face: Face, beta: float, mode: str, grid, values, ci=None, n: int = 1) -> ShapeEstimate:
    """Wrap given values (a closed form, or externally computed data) as a one-rung estimate."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    values = np.asarray(values, dtype=float)
    ci = np.zeros_like(values) if ci is None else np.broadcast_to(np.asarray(ci, dtype=float), values.shape)
    se = (ci / Z_CI)[:, None]
    return ShapeEstimate(face, beta, mode, grid, np.array([n]), values[:, None].copy(), se.copy(), values.copy(), ci.copy(), 0)


# ---------------------------------------------------------------------------
# structure: extension, superdifferential, facets, duality
# ---------------------------------------------------------------------------


def usc_extend(estimate: ShapeEstimate, boundary_direction, which: str = "largest", scale: str = "sqrt") -> tuple[float, float]:
    """Extrapolate the three nearest collinear grid values to a boundary direction.

    Concave shapes typically have square-root or entropy-type behaviour at
    the boundary, so by default the quadratic extrapolation runs in the square
    root of the distance.  ``scale="linear"`` uses the distance itself.  The
    returned CI adds the gap to the two-point extrapolation as a truncation
    error estimate.
    """
    b = np.asarray(boundary_direction, dtype=float)
    vals, cis = estimate.column(which)
    dist = np.abs(estimate.grid - b).sum(axis=1)
    cand = np.flatnonzero(dist > GRID_TOL)
    if len(cand) < 3:
        raise InsufficientInteriorData("need three interior grid points")
    pick = cand[np.argsort(dist[cand], kind="stable")[:3]]
    diffs = estimate.grid[pick] - b
    if np.linalg.matrix_rank(diffs, tol=1e-9) > 1:
        raise InsufficientInteriorData("the nearest interior points do not lie on one segment")
    dirs = diffs / np.linalg.norm(diffs, axis=1, keepdims=True)
    if np.any(dirs @ dirs[0] < 0):
        raise InsufficientInteriorData("interior points lie on both sides of the direction")
    t = np.linalg.norm(diffs, axis=1)
    t = np.sqrt(t) if scale == "sqrt" else t
    # Lagrange weights at t = 0; the two-point value gauges the truncation error
    ell = np.array([np.prod([(0 - t[j]) / (t[i] - t[j]) for j in range(3) if j != i]) for i in range(3)])
    quad = float(ell @ vals[pick])
    lin = float((t[1] * vals[pick[0]] - t[0] * vals[pick[1]]) / (t[1] - t[0]))
    stat = float(ell**2 @ cis[pick] ** 2)
    return quad, float(math.sqrt(stat + (quad - lin) ** 2))


@dataclass
class Supergradient:
    m: np.ndarray
    ci: np.ndarray
    xi: np.ndarray
    directional: float
    curvature_gap: float


def _ordered_neighbours(estimate: ShapeEstimate, xi) -> tuple[int, int, int]:
    i = estimate.grid_index(xi)
    if i < 0:
        raise GridMismatch(f"{tuple(xi)} is not a grid direction")
    t = estimate._param()
    order = list(np.argsort(t, kind="stable"))
    k = order.index(i)
    if k == 0 or k == len(order) - 1:
        raise GridMismatch("ξ must be interior to the probed grid")
    return order[k - 1], i, order[k + 1]


def supergradient(estimate: ShapeEstimate, xi, which: str = "largest") -> Supergradient:
    """Central difference along the grid; unrestricted shapes add Euler's identity m·ξ = Λ(ξ).

    Restricted shapes return the component along the face's affine span (the
    normal component is not determined by Λ_res).
    """
    a, i, c = _ordered_neighbours(estimate, xi)
    vals, cis = estimate.column(which)
    ga, gi, gc = estimate.grid[a], estimate.grid[i], estimate.grid[c]
    span = float(np.linalg.norm(gc - ga))
    e = (gc - ga) / span
    lam = (float(np.linalg.norm(gc - gi)) * vals[a] + float(np.linalg.norm(gi - ga)) * vals[c]) / span
    gap = float(vals[i] - lam)
    mid_ci = math.sqrt(cis[a] ** 2 + cis[i] ** 2 + cis[c] ** 2)
    if gap < -mid_ci - 1e-12:
        raise ConcavityViolatedAtScale(f"midpoint deficit {gap:.3e} exceeds CI {mid_ci:.3e}")
    D = float((vals[c] - vals[a]) / span)
    D_ci = math.sqrt(cis[a] ** 2 + cis[c] ** 2) / span
    if estimate.mode == "unrestricted":
        M = np.vstack([gi, e])
        Minv = np.linalg.inv(M)
        m = Minv @ np.array([vals[i], D])
        ci = np.sqrt((Minv[:, 0] * cis[i]) ** 2 + (Minv[:, 1] * D_ci) ** 2)
    else:
        m = D * e
        ci = np.abs(e) * D_ci
    return Supergradient(m, ci, gi, D, gap)


def euler_identity_check(estimate: ShapeEstimate, xi, m, m_ci=None, which: str = "largest") -> tuple[float, float]:
    """|Λ(ξ) − m·ξ| and its CI."""
    val, ci = estimate.value_ci(xi, which)
    xi = np.asarray(xi, dtype=float)
    extra = 0.0 if m_ci is None else float(np.abs(xi) @ np.asarray(m_ci, dtype=float))
    return abs(val - float(np.dot(m, xi))), math.sqrt(ci**2 + extra**2)


def _facet(estimate: ShapeEstimate, m, tol, which) -> np.ndarray:
    vals, cis = estimate.column(which)
    gaps = np.abs(vals - estimate.grid @ np.asarray(m, dtype=float))
    thr = cis if tol is None else np.full_like(gaps, float(tol))
    keep = gaps <= thr + 1e-12
    if not np.any(keep):
        raise EmptyFacetAtTol(f"minimal gap {gaps.min():.3e} at {tuple(estimate.grid[int(np.argmin(gaps))])}")
    return estimate.grid[keep]


def facet_unr(estimate: ShapeEstimate, m, tol: float | None = None, which: str = "largest") -> np.ndarray:
    """Unit-sphere grid directions with |Λ_unr(ξ) − m·ξ| within tol (default: the point CI)."""
    if estimate.mode != "unrestricted":
        raise ValueError("facet_unr needs an unrestricted estimate")
    return _facet(estimate, m, tol, which)


def facet_res(estimate: ShapeEstimate, m, tol: float | None = None, which: str = "largest") -> np.ndarray:
    """U_A grid directions with |Λ_res(ξ) − m·ξ| within tol (default: the point CI)."""
    if estimate.mode != "restricted":
        raise ValueError("facet_res needs a restricted estimate")
    return _facet(estimate, m, tol, which)


@dataclass
class DualityReport:
    xi: np.ndarray
    lhs: float
    lhs_ci: float
    rhs: float
    rhs_ci: float
    s_star: float
    table: list  # (s, s·Λ_res(ξ/s), ci)

    @property
    def deviation(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def combined_ci(self) -> float:
        return math.sqrt(self.lhs_ci**2 + self.rhs_ci**2)

    @property
    def passed(self) -> bool:
        return self.deviation < self.combined_ci


def res_unr_duality_check(est_res: ShapeEstimate, est_unr: ShapeEstimate, xi, s_grid, which: str = "largest") -> DualityReport:
    """Λ_unr(ξ) against max_s s·Λ_res(ξ/s) over the s-grid."""
    xi = np.asarray(xi, dtype=float)
    lhs, lhs_ci = est_unr.value_ci(xi, which)
    vals, cis = est_res.column(which)
    rows = []
    for s in s_grid:
        i = est_res.grid_index(xi / s, tol=1e-7)
        if i < 0:
            raise GridMismatch(f"ξ/s = {tuple(xi / s)} is not on the restricted grid (s = {s})")
        rows.append((float(s), float(s * vals[i]), float(s * cis[i])))
    best = max(rows, key=lambda r: r[1])
    return DualityReport(xi, lhs, lhs_ci, best[1], best[2], best[0], rows)


def concavity_violations(estimate: ShapeEstimate, which: str = "largest") -> list:
    """Adjacent collinear triples whose middle value falls below the chord by more than the combined CI."""
    vals, cis = estimate.column(which)
    t = estimate._param()
    order = np.argsort(t, kind="stable")
    bad = []
    for a, i, c in zip(order[:-2], order[1:-1], order[2:]):
        ga, gi, gc = estimate.grid[a], estimate.grid[i], estimate.grid[c]
        u, v = gi - ga, gc - ga
        if abs(u[0] * v[1] - u[1] * v[0]) > 1e-9:
            continue
        span = float(np.linalg.norm(gc - ga))
        lam = (float(np.linalg.norm(gc - gi)) * vals[a] + float(np.linalg.norm(gi - ga)) * vals[c]) / span
        ci = math.sqrt(cis[a] ** 2 + cis[i] ** 2 + cis[c] ** 2)
        if vals[i] - lam < -ci - 1e-12:
            bad.append((tuple(gi), float(vals[i] - lam), ci))
    return bad


def upper_bound_violations(estimate: ShapeEstimate, m, which: str = "largest") -> list:
    """Grid directions where m·ξ < Λ̂(ξ) − CI."""
    vals, cis = estimate.column(which)
    lin = estimate.grid @ np.asarray(m, dtype=float)
    return [tuple(estimate.grid[i]) for i in np.flatnonzero(lin < vals - cis - 1e-12)]
