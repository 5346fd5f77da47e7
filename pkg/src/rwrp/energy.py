"""Finite-volume partition functions, passage times and Green's functions.

Positive temperature quantities are accumulated in the natural-log domain
with log-sum-exp; zero temperature uses the (max, +) semiring directly.
Directed faces are handled by a single sweep in decreasing height of the
positivity certificate.  Faces with loops (V >= 0 required) are solved on an
absorbing box with sparse LU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .errors import (
    BoxTooSmall,
    DivergentGreens,
    Explosion,
    NegativePotentialWithLoops,
    TerminalUnreachable,
)
from .lattice import DIRECTED, Environment, Face, StepSet, cone_normals, full_face

NEG_INF = -np.inf
PATH_LIMIT = 1_000_000


# ---------------------------------------------------------------------------
# site regions
# ---------------------------------------------------------------------------


class Region:
    """A finite set of lattice sites with vectorised neighbour lookup."""

    def __init__(self, sites: np.ndarray):
        sites = np.asarray(sites, dtype=np.int64)
        self.dim = sites.shape[1]
        self.lo = sites.min(axis=0) - 1
        self.ext = sites.max(axis=0) - self.lo + 2
        # keys order rows lexicographically, so a 1-D unique sorts and dedups
        self.keys, first = np.unique(self._encode(sites), return_index=True)
        self.sites = sites[first]

    def _encode(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.lo
        key = np.zeros(len(pts), dtype=np.int64)
        for j in range(self.dim):
            key = key * self.ext[j] + rel[:, j]
        return key

    def __len__(self) -> int:
        return len(self.sites)

    def index_of(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.int64).reshape(-1, self.dim)
        inside = np.all((pts > self.lo) & (pts < self.lo + self.ext - 1), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        if not np.any(inside):
            return out
        k = self._encode(pts[inside])
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos] == k
        sub = np.full(len(k), -1, dtype=np.int64)
        sub[hit] = pos[hit]
        out[inside] = sub
        return out

    def index(self, x: Sequence[int]) -> int:
        return int(self.index_of(np.asarray([x]))[0])

    def neighbours(self, steps: np.ndarray) -> np.ndarray:
        return np.stack([self.index_of(self.sites + z) for z in steps], axis=1)


def box_region(lo: Sequence[int], hi: Sequence[int]) -> Region:
    ranges = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.meshgrid(*ranges, indexing="ij")
    return Region(np.stack([g.ravel() for g in grid], axis=1))


def _between_region(face: Face, x: np.ndarray, y: np.ndarray) -> Region:
    """Sites v with v - x and y - v in cone(R_A), for a directed face."""
    steps = face.steps
    u = np.asarray(face.positivity_certificate, dtype=np.int64)
    normals = np.array(cone_normals(face), dtype=np.int64).reshape(-1, len(x))
    top = int(y @ u)
    frontier = x[None, :]
    layers = [frontier]
    while len(frontier):
        nxt = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, len(x))
        nxt = nxt[(nxt @ u) <= top]
        if len(normals):
            nxt = nxt[np.all((y - nxt) @ normals.T <= 0, axis=1)]
        frontier = np.unique(nxt, axis=0) if len(nxt) else nxt
        if len(frontier):
            layers.append(frontier)
    return Region(np.concatenate(layers))


def forward_region(face: Face, x: np.ndarray, n: int) -> Region:
    """Sites reachable from x in at most n steps of R_A."""
    steps = face.steps
    lo = x + n * np.minimum(steps.min(axis=0), 0)
    width = n * (np.maximum(steps.max(axis=0), 0) - np.minimum(steps.min(axis=0), 0)) + 1
    radix = np.cumprod(np.concatenate([[1], width[:-1]])).astype(np.int64)
    frontier = x[None, :]
    layers = [frontier]
    for _ in range(n):
        nxt = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, len(x))
        keys = (nxt - lo) @ radix  # integer row keys make the deduplication one-dimensional
        _, first = np.unique(keys, return_index=True)
        frontier = nxt[first]
        layers.append(frontier)
    return Region(np.concatenate(layers))


def level_groups(region: Region, u: Sequence[int]) -> list[np.ndarray]:
    """Site indices grouped by certificate height, highest first."""
    lv = region.sites @ np.asarray(u, dtype=np.int64)
    order = np.argsort(-lv, kind="stable")
    lv_sorted = lv[order]
    cuts = np.flatnonzero(np.diff(lv_sorted)) + 1
    return np.split(order, cuts)


# ---------------------------------------------------------------------------
# semiring kernels
# ---------------------------------------------------------------------------


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    fin = np.isfinite(m)
    out = np.full(a.shape[0], NEG_INF)
    if np.any(fin):
        sub = a[fin] - m[fin, None]
        out[fin] = m[fin] + np.log(np.sum(np.exp(sub), axis=1))
    return out


def _gather(vals: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    padded = np.append(vals, NEG_INF)
    return padded[nbr]  # index -1 hits the padding


def sweep(
    nbr: np.ndarray,
    gain: np.ndarray,
    init: np.ndarray,
    groups: list[np.ndarray],
    semiring: str = "log",
    absorb: np.ndarray | None = None,
) -> np.ndarray:
    """One backward pass L(u) = init(u) ⊕ ⊕_z (gain(u,z) ⊗ L(u+z)) in group order."""
    L = np.full(len(init) + 1, NEG_INF)
    for g in groups:
        cand = gain[g] + L[nbr[g]]
        if semiring == "log":
            cont = logsumexp_rows(cand)
            val = np.logaddexp(init[g], cont)
        else:
            cont = np.max(cand, axis=1)
            val = np.maximum(init[g], cont)
        if absorb is not None:
            a = absorb[g]
            val = np.where(a, init[g], val)
        L[g] = val
    return L[:-1]


def _log_gain(env: Environment, face: Face, sites: np.ndarray, beta: float) -> np.ndarray:
    V = env.values_all(sites)[:, list(face.member_indices)]
    return np.log(face.probs)[None, :] - beta * V


def _neg_potential(env: Environment, face: Face, sites: np.ndarray) -> np.ndarray:
    return -env.values_all(sites)[:, list(face.member_indices)]


def _as_face(step_set: StepSet, face: Face | None) -> Face:
    return face if face is not None else full_face(step_set)


def unit_level(face: Face) -> bool:
    """True when the certificate gives every step of R_A the same height."""
    if face.origin_class != DIRECTED:
        return False
    u = np.asarray(face.positivity_certificate)
    h = face.steps @ u
    return bool(np.all(h == h[0]))


# ---------------------------------------------------------------------------
# restricted-length quantities
# ---------------------------------------------------------------------------


def _restricted_layers(env, face, x, y, n, beta, semiring):
    steps = face.steps
    r = int(np.abs(steps).max())
    lo = np.maximum(x - n * r, y - n * r)
    hi = np.minimum(x + n * r, y + n * r)
    if np.any(lo > hi):
        return None, None, None
    region = forward_region(face, x, n)
    keep = np.all((region.sites >= lo) & (region.sites <= hi), axis=1)
    if not keep.any():
        return None, None, None
    region = Region(region.sites[keep])
    nbr = region.neighbours(steps)
    if semiring == "log":
        gain = _log_gain(env, face, region.sites, beta)
    else:
        gain = _neg_potential(env, face, region.sites)
    iy = region.index(y)
    layers = []
    L = np.full(len(region), NEG_INF)
    if iy >= 0:
        L[iy] = 0.0
    layers.append(L)
    for _ in range(n):
        cand = gain + _gather(L, nbr)
        L = logsumexp_rows(cand) if semiring == "log" else np.max(cand, axis=1)
        layers.append(L)
    return region, layers, nbr


def restricted_logZ(
    env: Environment, step_set: StepSet, x, y, n: int, beta: float, face: Face | None = None
) -> float:
    """log Z_{x,y,n}: paths of exactly n steps from x to y.  −inf when unreachable."""
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 0.0 if np.array_equal(x, y) else NEG_INF
    if unit_level(face):
        u = np.asarray(face.positivity_certificate)
        if int((y - x) @ u) != n * int(face.steps[0] @ u):
            return NEG_INF
        return _directed_logZ(env, face, x, y, beta)
    region, layers, _ = _restricted_layers(env, face, x, y, n, beta, "log")
    if region is None:
        return NEG_INF
    ix = region.index(x)
    return float(layers[n][ix]) if ix >= 0 else NEG_INF


def restricted_passage(env: Environment, step_set: StepSet, x, y, n: int, face: Face | None = None) -> float:
    """max over n-step paths x -> y of −ΣV; −inf when unreachable."""
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if n == 0:
        return 0.0 if np.array_equal(x, y) else NEG_INF
    if unit_level(face):
        u = np.asarray(face.positivity_certificate)
        if int((y - x) @ u) != n * int(face.steps[0] @ u):
            return NEG_INF
        return _directed_passage(env, face, x, y)
    region, layers, _ = _restricted_layers(env, face, x, y, n, math.inf, "max")
    if region is None:
        return NEG_INF
    ix = region.index(x)
    return float(layers[n][ix]) if ix >= 0 else NEG_INF


def nstep_tilted_logZ(
    env: Environment, step_set: StepSet, x, n: int, beta: float, h, face: Face | None = None
) -> float:
    """(1/β) log E_x[exp(−βΣV + βh·(X_n − x))] over n-step paths."""
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    h = np.asarray(h, dtype=float)
    if n == 0:
        return 0.0
    region = forward_region(face, x, n)
    nbr = region.neighbours(face.steps)
    gain = _log_gain(env, face, region.sites, beta)
    L = beta * (region.sites - x) @ h
    for _ in range(n):
        L = logsumexp_rows(gain + _gather(L, nbr))
    return float(L[region.index(x)]) / beta


# ---------------------------------------------------------------------------
# unrestricted-length quantities
# ---------------------------------------------------------------------------


def _directed_setup(env, face, x, y, beta, semiring):
    region = _between_region(face, x, y)
    nbr = region.neighbours(face.steps)
    groups = level_groups(region, face.positivity_certificate)
    if semiring == "log":
        gain = _log_gain(env, face, region.sites, beta)
    else:
        gain = _neg_potential(env, face, region.sites)
    init = np.full(len(region), NEG_INF)
    iy = region.index(y)
    if iy >= 0:
        init[iy] = 0.0
    return region, nbr, groups, gain, init


def _directed_logZ(env, face, x, y, beta) -> float:
    region, nbr, groups, gain, init = _directed_setup(env, face, x, y, beta, "log")
    if region.index(y) < 0:
        return NEG_INF
    L = sweep(nbr, gain, init, groups, "log")
    return float(L[region.index(x)])


def _directed_passage(env, face, x, y) -> float:
    region, nbr, groups, gain, init = _directed_setup(env, face, x, y, math.inf, "max")
    if region.index(y) < 0:
        return NEG_INF
    L = sweep(nbr, gain, init, groups, "max")
    return float(L[region.index(x)])


@dataclass
class BoxSystem:
    """Sparse transition structure of the walk killed on leaving a box."""

    region: Region
    nbr: np.ndarray
    weights: np.ndarray  # p(z) e^{−βV(v,z)} per (site, step); 0 when leaving the box

    def matrix(self, killed: Sequence[int] = ()) -> sparse.csc_matrix:
        S, k = self.nbr.shape
        rows = np.repeat(np.arange(S), k)
        cols = self.nbr.ravel()
        vals = self.weights.ravel().copy()
        mask = cols >= 0
        for i in killed:
            mask &= rows != i
        P = sparse.csr_matrix((vals[mask], (rows[mask], cols[mask])), shape=(S, S))
        return (sparse.identity(S, format="csr") - P).tocsc()


def box_system(env: Environment, face: Face, box, beta: float) -> BoxSystem:
    region = box_region(*box)
    nbr = region.neighbours(face.steps)
    V = env.values_all(region.sites)[:, list(face.member_indices)]
    if np.any(V < 0):
        raise NegativePotentialWithLoops("V must be non-negative when the face admits loops")
    w = face.probs[None, :] * np.exp(-beta * V)
    w = np.where(nbr >= 0, w, 0.0)
    return BoxSystem(region, nbr, w)


def positive_solve(A: sparse.csc_matrix, b: np.ndarray, scale: np.ndarray | None = None, rounds: int = 4) -> np.ndarray:
    """Solve A w = b for an M-matrix A = I − P with P, b >= 0.

    The solution is positive and may span many orders of magnitude, so the
    system is re-solved after diagonal rescaling by the current iterate until
    every component is accurate in the relative sense.
    """
    n = A.shape[0]
    d = np.ones(n) if scale is None else np.asarray(scale, dtype=float)
    w = None
    for _ in range(rounds):
        D = sparse.diags(d)
        Dinv = sparse.diags(1.0 / d)
        As = (Dinv @ A @ D).tocsc()
        y = splu(As).solve(b / d)
        w = d * y
        if np.all(np.abs(y - 1.0) < 1e-13):
            break
        pos = w > 0
        floor = np.min(w[pos]) if np.any(pos) else 1.0
        d = np.where(pos, w, floor)
    return w


def _log_scale_guess(system: BoxSystem, source_logs: dict[int, float]) -> np.ndarray:
    """Heaviest single-path weight to the sources, from multi-source Dijkstra."""
    S, k = system.nbr.shape
    rows = np.repeat(np.arange(S), k)
    cols = system.nbr.ravel()
    w = system.weights.ravel()
    mask = (cols >= 0) & (w > 0)
    cost = -np.log(w[mask]) + 1e-300
    top = max(source_logs.values())
    # reversed graph, super source S linked to each source with cost top − log c
    src_rows = np.full(len(source_logs), S)
    src_cols = np.array(list(source_logs.keys()))
    src_cost = np.array([top - v for v in source_logs.values()]) + 1e-300
    G = sparse.csr_matrix(
        (np.concatenate([cost, src_cost]), (np.concatenate([cols[mask], src_rows]), np.concatenate([rows[mask], src_cols]))),
        shape=(S + 1, S + 1),
    )
    dist = csgraph.dijkstra(G, directed=True, indices=S)[:S]
    logs = top - dist
    logs = np.where(np.isfinite(logs), logs, np.min(logs[np.isfinite(logs)]) - 50.0)
    return logs - top


def _check_box(region: Region, *pts) -> None:
    for p in pts:
        if region.index(p) < 0:
            raise BoxTooSmall(f"site {tuple(p)} is outside the box")


def _killed_solution(system: BoxSystem, iy: int) -> np.ndarray:
    A = system.matrix(killed=[iy])
    b = np.zeros(A.shape[0])
    b[iy] = 1.0
    guess = np.exp(_log_scale_guess(system, {iy: 0.0}))
    return positive_solve(A, b, scale=guess)


def unrestricted_logZ(
    env: Environment, step_set: StepSet, face: Face | None, x, y, beta: float, box=None
) -> float:
    """log Z_{x,y}: paths killed at their first visit to y.

    Directed faces are exact.  Otherwise V >= 0 is required and paths are
    also killed on leaving ``box`` (inclusive corners), which makes the value
    a lower bound increasing in the box.
    """
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.array_equal(x, y):
        return 0.0
    if face.origin_class == DIRECTED:
        return _directed_logZ(env, face, x, y, beta)
    if box is None:
        raise BoxTooSmall("a truncation box is required for faces with loops")
    system = box_system(env, face, box, beta)
    _check_box(system.region, x, y)
    W = _killed_solution(system, system.region.index(y))
    w = W[system.region.index(x)]
    return float(np.log(w)) if w > 0 else NEG_INF


@dataclass
class PassageResult:
    value: float
    stable: bool
    box: tuple | None = None

    def __float__(self) -> float:
        return self.value


def _dijkstra_passage(env, face, x, y, box) -> float:
    region = box_region(*box)
    _check_box(region, x, y)
    nbr = region.neighbours(face.steps)
    V = env.values_all(region.sites)[:, list(face.member_indices)]
    if np.any(V < 0):
        raise NegativePotentialWithLoops("V must be non-negative when the face admits loops")
    S, k = nbr.shape
    rows = np.repeat(np.arange(S), k)
    cols = nbr.ravel()
    mask = cols >= 0
    # zero costs are legitimate; shift them off the sparse-zero sentinel
    G = sparse.csr_matrix((V.ravel()[mask] + 1e-300, (rows[mask], cols[mask])), shape=(S, S))
    d = csgraph.dijkstra(G, directed=True, indices=region.index(x))
    return -float(d[region.index(y)])


def unrestricted_passage(
    env: Environment, step_set: StepSet, face: Face | None, x, y, box=None
) -> PassageResult:
    """sup over paths x -> y of −ΣV (a non-positive passage time when V >= 0)."""
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.array_equal(x, y):
        return PassageResult(0.0, True, box)
    if face.origin_class == DIRECTED:
        return PassageResult(_directed_passage(env, face, x, y), True, None)
    if box is None:
        raise BoxTooSmall("a truncation box is required for faces with loops")
    val = _dijkstra_passage(env, face, x, y, box)
    lo, hi = np.asarray(box[0]) - 1, np.asarray(box[1]) + 1
    grown = _dijkstra_passage(env, face, x, y, (lo, hi))
    return PassageResult(val, bool(grown == val), box)


# ---------------------------------------------------------------------------
# Green's function
# ---------------------------------------------------------------------------


@dataclass
class GreensResult:
    value: float
    return_weight: float
    hit_logZ: float
    box: tuple | None
    method: str

    def __float__(self) -> float:
        return self.value


def greens(
    env: Environment, step_set: StepSet, x, y, beta: float, box=None, face: Face | None = None, tol: float = 1e-12
) -> GreensResult:
    """g(x,y) = Σ_ℓ Z_{x,y,ℓ} = Z_{x,y} / (1 − r_y), r_y the weight of returning to y."""
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if face.origin_class == DIRECTED:
        lz = unrestricted_logZ(env, step_set, face, x, y, beta)
        return GreensResult(float(np.exp(lz)), 0.0, lz, None, "directed")
    if box is None:
        raise BoxTooSmall("a truncation box is required for faces with loops")
    system = box_system(env, face, box, beta)
    _check_box(system.region, x, y)
    iy = system.region.index(y)
    W = _killed_solution(system, iy)
    nb = system.nbr[iy]
    r = float(sum(system.weights[iy, j] * W[nb[j]] for j in range(len(nb)) if nb[j] >= 0))
    if r >= 1.0 - tol:
        raise DivergentGreens(f"return weight {r} is not below 1")
    zxy = W[system.region.index(x)]
    return GreensResult(float(zxy / (1.0 - r)), r, float(np.log(zxy)) if zxy > 0 else NEG_INF, box, "box")


def greens_series(env, step_set, x, y, beta, n_terms: int, face: Face | None = None) -> tuple[float, float]:
    """Truncated series Σ_{ℓ<=n_terms} Z_{x,y,ℓ} with a geometric tail bound.

    The bound uses the largest one-step total weight q = max_v Σ_z p e^{−βV}
    over the explored region; it is only informative when q < 1.
    """
    face = _as_face(step_set, face)
    total = 0.0
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    region = forward_region(face, x, n_terms)
    gain = _log_gain(env, face, region.sites, beta)
    q = float(np.exp(logsumexp_rows(gain)).max())
    for ell in range(n_terms + 1):
        lz = restricted_logZ(env, step_set, x, y, ell, beta, face)
        total += math.exp(lz) if lz > NEG_INF else 0.0
    tail = q ** (n_terms + 1) / (1.0 - q) if q < 1 else math.inf
    return total, tail


# ---------------------------------------------------------------------------
# quenched point-to-point kernels
# ---------------------------------------------------------------------------


@dataclass
class QuenchedKernel:
    """Transition probabilities keyed by (site, steps remaining); remaining is None when unrestricted."""

    steps: np.ndarray
    rows: dict = field(default_factory=dict)
    tol: float = 1e-10

    def row(self, site, remaining: int | None = None) -> np.ndarray:
        return self.rows[(tuple(int(c) for c in site), remaining)]

    def max_row_error(self) -> float:
        if not self.rows:
            return 0.0
        return max(abs(float(r.sum()) - 1.0) for r in self.rows.values())


def ptp_kernel(
    env: Environment,
    step_set: StepSet,
    x,
    y,
    mode: str | tuple = "unrestricted",
    beta: float = 1.0,
    face: Face | None = None,
    box=None,
) -> QuenchedKernel:
    """One-step law of the point-to-point polymer measure toward y.

    ``mode`` is "unrestricted" or ("restricted", n).
    """
    face = _as_face(step_set, face)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    kern = QuenchedKernel(face.steps)
    if isinstance(mode, tuple) and mode[0] == "restricted":
        n = int(mode[1])
        region, layers, nbr = _restricted_layers(env, face, x, y, n, beta, "log")
        if region is None or region.index(x) < 0 or not np.isfinite(layers[n][region.index(x)]):
            raise TerminalUnreachable(f"{tuple(y)} not reachable from {tuple(x)} in {n} steps")
        gain = _log_gain(env, face, region.sites, beta)
        live = {region.index(x)}
        for k in range(n, 0, -1):
            nxt = set()
            for i in live:
                logits = gain[i] + _gather(layers[k - 1], nbr[i]) - layers[k][i]
                probs = np.exp(logits)
                kern.rows[(tuple(int(c) for c in region.sites[i]), k)] = probs
                nxt.update(int(nbr[i, j]) for j in np.flatnonzero(probs > 0))
            live = nxt
        return kern
    if face.origin_class == DIRECTED:
        region, nbr, groups, gain, init = _directed_setup(env, face, x, y, beta, "log")
        if region.index(y) < 0:
            raise TerminalUnreachable(f"{tuple(y)} not reachable from {tuple(x)}")
        L = sweep(nbr, gain, init, groups, "log")
    else:
        system = box_system(env, face, box, beta)
        region, nbr = system.region, system.nbr
        _check_box(region, x, y)
        W = _killed_solution(system, region.index(y))
        with np.errstate(divide="ignore"):
            L = np.log(W)
        gain = np.log(face.probs)[None, :] - beta * env.values_all(region.sites)[:, list(face.member_indices)]
    iy = region.index(y)
    if not np.isfinite(L[region.index(x)]):
        raise TerminalUnreachable(f"{tuple(y)} not reachable from {tuple(x)}")
    for i in range(len(region)):
        if i == iy or not np.isfinite(L[i]):
            continue
        probs = np.exp(gain[i] + _gather(L, nbr[i]) - L[i])
        kern.rows[(tuple(int(c) for c in region.sites[i]), None)] = probs
    return kern


# ---------------------------------------------------------------------------
# brute-force enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnumeratedPath:
    sites: tuple[tuple[int, ...], ...]
    log_p: float
    energy: float  # Σ V along the path

    def log_weight(self, beta: float) -> float:
        return self.log_p - beta * self.energy


def enumerate_paths(
    step_set: StepSet,
    x,
    terminal: tuple,
    n_max: int,
    env: Environment | None = None,
    face: Face | None = None,
    box=None,
    limit: int = PATH_LIMIT,
) -> list[EnumeratedPath]:
    """Every admissible path from x to the terminal, by depth-first search.

    ``terminal`` is ("restricted", y, n) for exactly n steps ending at y, or
    ("unrestricted", y) for paths of length <= n_max stopped at their first
    visit to y.  ``box`` (inclusive corners) discards paths that leave it.
    """
    face = _as_face(step_set, face)
    steps = [tuple(int(c) for c in z) for z in face.member_steps]
    logp = [math.log(q) for q in face.probs]
    mode = terminal[0]
    y = tuple(int(c) for c in terminal[1])
    length = int(terminal[2]) if mode == "restricted" else n_max
    lo = hi = None
    if box is not None:
        lo, hi = tuple(box[0]), tuple(box[1])
    out: list[EnumeratedPath] = []
    cache: dict = {}

    def pot(site, j):
        key = (site, j)
        if key not in cache:
            cache[key] = 0.0 if env is None else float(env.values(np.asarray([site]), steps[j])[0])
        return cache[key]

    visited = [0]
    stack = [((tuple(int(c) for c in x),), 0.0, 0.0)]
    while stack:
        path, lp, en = stack.pop()
        visited[0] += 1
        if visited[0] > 20 * limit:
            raise Explosion("path enumeration exceeded its budget")
        cur = path[-1]
        n = len(path) - 1
        if mode == "restricted":
            if n == length:
                if cur == y:
                    out.append(EnumeratedPath(path, lp, en))
                continue
        else:
            if cur == y:
                out.append(EnumeratedPath(path, lp, en))
                continue
            if n == length:
                continue
        for j, z in enumerate(steps):
            nxt = tuple(a + b for a, b in zip(cur, z))
            if lo is not None and not all(a <= c <= b for a, c, b in zip(lo, nxt, hi)):
                continue
            stack.append((path + (nxt,), lp + logp[j], en + pot(cur, j)))
        if len(out) > limit:
            raise Explosion(f"more than {limit} paths")
    return out


def log_sum_paths(paths: Sequence[EnumeratedPath], beta: float) -> float:
    if not paths:
        return NEG_INF
    w = np.array([p.log_weight(beta) for p in paths])
    m = w.max()
    return float(m + math.log(math.fsum(np.exp(w - m))))


def max_paths(paths: Sequence[EnumeratedPath]) -> float:
    if not paths:
        return NEG_INF
    return max(-p.energy for p in paths)


# ---------------------------------------------------------------------------
# field dumps
# ---------------------------------------------------------------------------


@dataclass
class FreeEnergyField:
    """Values of a partition function or passage time over a set of sites."""

    beta: float
    sites: np.ndarray
    values: np.ndarray
    terminal: str
    meta: dict = field(default_factory=dict)

    def value_at(self, x) -> float:
        idx = np.flatnonzero(np.all(self.sites == np.asarray(x), axis=1))
        return float(self.values[idx[0]]) if len(idx) else NEG_INF

    def to_text(self, delimiter: str = ",") -> str:
        header = [f"# beta: {self.beta!r}", f"# terminal: {self.terminal}"]
        header += [f"# {k}: {v}" for k, v in self.meta.items()]
        cols = [f"x{j}" for j in range(self.sites.shape[1])] + ["value"]
        lines = header + [delimiter.join(cols)]
        for s, v in zip(self.sites, self.values):
            lines.append(delimiter.join([str(int(c)) for c in s] + [repr(float(v))]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, delimiter: str = ",") -> "FreeEnergyField":
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                meta[k.strip()] = v.strip()
            elif line and not line.startswith("x0"):
                rows.append(line.split(delimiter))
        beta = float(meta.pop("beta"))
        terminal = meta.pop("terminal")
        sites = np.array([[int(c) for c in r[:-1]] for r in rows], dtype=np.int64)
        values = np.array([float(r[-1]) for r in rows])
        return cls(beta, sites, values, terminal, meta)


def logZ_field_to(env: Environment, step_set: StepSet, face: Face | None, y, beta: float, region_sites) -> FreeEnergyField:
    """log Z_{v,y} for every v in ``region_sites`` (directed faces)."""
    face = _as_face(step_set, face)
    y = np.asarray(y, dtype=np.int64)
    region = Region(np.concatenate([np.asarray(region_sites, dtype=np.int64), y[None, :]]))
    nbr = region.neighbours(face.steps)
    groups = level_groups(region, face.positivity_certificate)
    gain = _log_gain(env, face, region.sites, beta)
    init = np.full(len(region), NEG_INF)
    init[region.index(y)] = 0.0
    L = sweep(nbr, gain, init, groups, "log")
    return FreeEnergyField(beta, region.sites, L, f"point {tuple(int(c) for c in y)}", {"seed": env.master_seed})
