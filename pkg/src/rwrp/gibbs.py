"""Semi-infinite polymer measures and geodesics driven by recovering cocycles.

Exact identities (consistency, Green's function, hitting probabilities) are
checked with absorbing-chain linear algebra or exhaustive enumeration; Monte
Carlo is reserved for asymptotic statements (directedness, transience, LDP).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .busemann import Cocycle
from .energy import (
    NEG_INF,
    _between_region,
    box_region,
    box_system,
    enumerate_paths,
    greens,
    restricted_logZ,
    unrestricted_logZ,
)
from .errors import (
    EmptyArgmin,
    Explosion,
    GridOutsideU,
    InfiniteClassInBox,
    LeftCocycleDomain,
    RecoveryViolated,
)
from .lattice import DIRECTED, Environment, Face, SiteWindow, StepSet, full_face, make_step_set

log = logging.getLogger(__name__)

KERNEL_TOL = 1e-8
TIE_TOL = 1e-9


def _env_cols(env: Environment, cocycle: Cocycle) -> list[int]:
    return [env.step_set.index(tuple(int(c) for c in z)) for z in cocycle.steps]


def _bv(cocycle: Cocycle, env: Environment, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.int64).reshape(1, -1)
    B = cocycle.increments(x)[0]
    if np.any(~np.isfinite(B)):
        raise LeftCocycleDomain(f"cocycle undefined at {tuple(int(c) for c in x[0])}")
    V = env.values_all(x)[0, _env_cols(env, cocycle)]
    return B, V


# ---------------------------------------------------------------------------
# kernels and samplers
# ---------------------------------------------------------------------------


def transition_kernel(cocycle: Cocycle, env: Environment, beta: float, x, tol: float = KERNEL_TOL) -> np.ndarray:
    """p(z) e^{−βB(x,x+z) − βV(x,z)}, renormalised after checking the recovery residual."""
    if math.isinf(beta):
        raise ValueError("zero temperature uses geodesic_path")
    B, V = _bv(cocycle, env, x)
    w = cocycle.probs * np.exp(-beta * (B + V))
    resid = abs(float(w.sum()) - 1.0)
    if resid > tol:
        raise RecoveryViolated(f"recovery residual {resid:.3e} at {tuple(np.ravel(x))}")
    if resid > 0:
        log.debug("kernel at %s renormalised by residual %.3e", tuple(np.ravel(x)), resid)
    return w / w.sum()


@dataclass
class SemiInfPath:
    root: tuple[int, ...]
    sites: np.ndarray  # (n+1, d)
    step_index: np.ndarray  # (n,)
    bv: np.ndarray  # B+V along the chosen steps
    hitting: dict = field(default_factory=dict)
    trapped: bool = False

    @property
    def n(self) -> int:
        return len(self.step_index)

    def to_text(self) -> str:
        lines = ["index,site,z,bv"]
        for i in range(self.n):
            site = " ".join(map(str, self.sites[i]))
            z = " ".join(map(str, self.sites[i + 1] - self.sites[i]))
            lines.append(f"{i},{site},{z},{self.bv[i]!r}")
        return "\n".join(lines) + "\n"


def _finish_path(root, sites, idx, bv, targets, trap_radius) -> SemiInfPath:
    sites = np.asarray(sites, dtype=np.int64)
    hitting = {}
    for t in targets:
        t = tuple(int(c) for c in t)
        hit = np.flatnonzero(np.all(sites == np.asarray(t), axis=1))
        hitting[t] = int(hit[0]) if len(hit) else math.inf
    excursion = int(np.abs(sites - sites[0]).max()) if len(sites) else 0
    trapped = excursion <= trap_radius
    return SemiInfPath(tuple(root), sites, np.asarray(idx, dtype=np.int64), np.asarray(bv), hitting, trapped)


def sample_semiinf(
    cocycle: Cocycle,
    env: Environment,
    beta: float,
    x,
    n_steps: int,
    rng: np.random.Generator,
    targets: Sequence = (),
    trap_radius: int = 10,
) -> SemiInfPath:
    """n_steps of the Markov chain with kernel p e^{−β(B+V)}; ``trapped`` when it never leaves the trap radius."""
    if math.isinf(beta):
        raise ValueError("zero temperature paths come from geodesic_path")
    cur = np.asarray(x, dtype=np.int64)
    sites = [cur]
    idx = []
    bvs = []
    for _ in range(n_steps):
        B, V = _bv(cocycle, env, cur)
        w = cocycle.probs * np.exp(-beta * (B + V))
        resid = abs(float(w.sum()) - 1.0)
        if resid > KERNEL_TOL:
            raise RecoveryViolated(f"recovery residual {resid:.3e} at {tuple(cur)}")
        k = int(rng.choice(len(w), p=w / w.sum()))
        idx.append(k)
        bvs.append(float(B[k] + V[k]))
        cur = cur + cocycle.steps[k]
        sites.append(cur)
    return _finish_path(x, sites, idx, bvs, targets, trap_radius)


# ---------------------------------------------------------------------------
# tie-breakers
# ---------------------------------------------------------------------------


@dataclass
class TieBreaker:
    """Rule choosing among argmin steps: ``ranking``, ``uniform`` or ``spanning_forest``."""

    kind: str
    ranking: tuple[int, ...] = ()
    forest: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def distribution(self, x, allowed: Sequence[int], n_steps: int) -> np.ndarray:
        allowed = sorted(int(a) for a in allowed)
        if not allowed:
            raise EmptyArgmin("no admissible step")
        out = np.zeros(n_steps)
        if self.kind == "uniform":
            out[allowed] = 1.0 / len(allowed)
            return out
        if self.kind == "spanning_forest":
            k = self.forest.get(tuple(int(c) for c in x))
            if k is not None and k in allowed:
                out[k] = 1.0
                return out
        rank = self.ranking or tuple(range(n_steps))
        best = min(allowed, key=lambda a: rank.index(a))
        out[best] = 1.0
        return out


def ranking_tiebreaker(order: Sequence[int] | None = None, n_steps: int | None = None) -> TieBreaker:
    order = tuple(order) if order is not None else tuple(range(n_steps or 0))
    return TieBreaker("ranking", order)


def geodesic_path(
    cocycle: Cocycle,
    env: Environment,
    x,
    n_steps: int,
    tiebreaker: TieBreaker | None = None,
    rng: np.random.Generator | None = None,
    targets: Sequence = (),
    tol: float = TIE_TOL,
    trap_radius: int = 10,
) -> SemiInfPath:
    """Follow argmin_z (B + V), breaking ties with ``tiebreaker``."""
    tb = tiebreaker or ranking_tiebreaker(n_steps=len(cocycle.steps))
    rng = rng or np.random.default_rng(0)
    cur = np.asarray(x, dtype=np.int64)
    sites = [cur]
    idx = []
    bvs = []
    for _ in range(n_steps):
        B, V = _bv(cocycle, env, cur)
        s = B + V
        allowed = np.flatnonzero(np.abs(s) <= tol * (1.0 + np.abs(V)))
        if len(allowed) == 0:
            raise EmptyArgmin(f"min(B+V) = {s.min():.3e} at {tuple(cur)} exceeds tolerance {tol}")
        probs = tb.distribution(cur, allowed, len(s))
        k = int(np.flatnonzero(probs)[0]) if np.count_nonzero(probs) == 1 else int(rng.choice(len(s), p=probs))
        idx.append(k)
        bvs.append(float(s[k]))
        cur = cur + cocycle.steps[k]
        sites.append(cur)
    return _finish_path(x, sites, idx, bvs, targets, trap_radius)


# ---------------------------------------------------------------------------
# zero-temperature structure: classes, forests, Condition B
# ---------------------------------------------------------------------------


@dataclass
class ClassPartition:
    sites: np.ndarray
    labels: np.ndarray  # class label per site; −1 for sites on no zero cycle
    classes: list  # list of (m, d) arrays
    essential: list  # bool per class

    def class_of(self, x) -> int:
        i = np.flatnonzero(np.all(self.sites == np.asarray(x), axis=1))
        return int(self.labels[i[0]]) if len(i) else -1


def _zero_graph(cocycle: Cocycle, env: Environment, box, tol: float):
    region = box_region(*box)
    nbr = region.neighbours(cocycle.steps)
    B = cocycle.increments(region.sites)
    V = env.values_all(region.sites)[:, _env_cols(env, cocycle)]
    zero = np.isfinite(B) & (np.abs(B + V) <= tol * (1.0 + np.abs(V))) & (nbr >= 0)
    return region, nbr, B, V, zero


def communicating_classes(cocycle: Cocycle, env: Environment, box, tol: float = TIE_TOL) -> ClassPartition:
    """Strong components of the zero-(B+V) graph that carry a cycle.

    A class is essential when every edge of it also has V = 0.  A zero-(B+V)
    cycle with positive total potential contradicts the cocycle property and
    raises RecoveryViolated.
    """
    region, nbr, B, V, zero = _zero_graph(cocycle, env, box, tol)
    S, k = nbr.shape
    rows = np.repeat(np.arange(S), k)[zero.ravel()]
    cols = nbr.ravel()[zero.ravel()]
    g = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(S, S))
    ncomp, lab = csgraph.connected_components(g, directed=True, connection="strong")
    sizes = np.bincount(lab, minlength=ncomp)
    labels = np.full(S, -1)
    classes, essential = [], []
    for c in np.flatnonzero(sizes > 1):
        members = np.flatnonzero(lab == c)
        inside = np.isin(nbr[members], members) & zero[members]
        vsum = float(np.sum(np.where(inside, V[members], 0.0)))
        bsum = float(np.sum(np.where(inside, B[members], 0.0)))
        if abs(vsum) > 1e-9 and abs(bsum + vsum) < 1e-9 * max(1.0, abs(vsum)):
            # every class edge has B = −V; a cocycle sums to zero on cycles
            raise RecoveryViolated(f"zero-(B+V) cycle with potential sum {vsum:.3e}")
        labels[members] = len(classes)
        classes.append(region.sites[members])
        essential.append(bool(np.all(np.abs(V[members][inside]) <= tol)))
    return ClassPartition(region.sites, labels, classes, essential)


def check_zero_cycle(cocycle: Cocycle, env: Environment, cycle: Sequence[Sequence[int]]) -> float:
    """Sum of B around a closed cycle whose edges all satisfy B+V = 0; raises when it is not zero."""
    pts = [np.asarray(p, dtype=np.int64) for p in cycle]
    total = 0.0
    vsum = 0.0
    for a, b in zip(pts, pts[1:] + pts[:1]):
        k = cocycle.step_index(b - a)
        total += float(cocycle.increment(a[None, :], k)[0])
        vsum += float(env.values(a[None, :], tuple(int(c) for c in b - a))[0])
    if abs(total) > 1e-9:
        raise RecoveryViolated(f"B sums to {total:.3e} around the loop (ΣV = {vsum:.3e})")
    return total


def spanning_forest_tiebreaker(cocycle: Cocycle, env: Environment, face: Face | None, box, tol: float = TIE_TOL) -> TieBreaker:
    """Covariant rule that walks every finite zero class to a chosen exit and leaves it.

    For each class the exit pair (y, z) is the one with the smallest
    class-relative coordinates and step index; a breadth-first tree toward y
    inside the class then fixes the move at every class site.
    """
    part = communicating_classes(cocycle, env, box, tol)
    region, nbr, B, V, zero = _zero_graph(cocycle, env, box, tol)
    lo = np.asarray(box[0])
    hi = np.asarray(box[1])
    forest: dict = {}
    warnings = []
    for members in part.classes:
        mset = {tuple(int(c) for c in s) for s in members}
        touches = np.any((members == lo) | (members == hi))
        exits = []
        base = members.min(axis=0)
        for s in members:
            i = region.index(s)
            for k in np.flatnonzero(zero[i]):
                tgt = tuple(int(c) for c in s + cocycle.steps[k])
                if tgt not in mset:
                    exits.append((tuple(int(c) for c in s - base), int(k), tuple(int(c) for c in s)))
        if touches or not exits:
            msg = f"class of size {len(members)} touches the box boundary or has no zero exit"
            if touches:
                warnings.append(msg)
                log.warning(msg)
                if not exits:
                    raise InfiniteClassInBox(msg)
            else:
                msg = f"class of size {len(members)} has no zero exit; Condition B fails on it"
                warnings.append(msg)
                log.warning(msg)
                continue
        _, kexit, yexit = min(exits)
        forest[yexit] = kexit
        # breadth-first tree toward the exit site using reversed zero edges
        frontier = [yexit]
        seen = {yexit}
        while frontier:
            nxt = []
            for t in frontier:
                for k, z in enumerate(cocycle.steps):
                    s = tuple(int(a - b) for a, b in zip(t, z))
                    if s in mset and s not in seen and zero[region.index(s), k]:
                        forest[s] = k
                        seen.add(s)
                        nxt.append(s)
            frontier = nxt
    order = tuple(range(len(cocycle.steps)))
    return TieBreaker("spanning_forest", order, forest, warnings)


@dataclass
class ConditionBReport:
    n_sets: int
    violating: list
    tol: float

    @property
    def passed(self) -> bool:
        return not self.violating


def check_condition_B(cocycle: Cocycle, env: Environment, sets: Iterable[Iterable[Sequence[int]]], tol: float = TIE_TOL) -> ConditionBReport:
    """Every finite set A needs an exit y ∈ A, y+z ∉ A with V(y,z) + B(y,y+z) = 0."""
    cols = _env_cols(env, cocycle)
    cache: dict = {}

    def zero_steps(y):
        if y not in cache:
            B, V = cocycle.increments(np.asarray([y]))[0], env.values_all(np.asarray([y]))[0, cols]
            cache[y] = [k for k in range(len(B)) if np.isfinite(B[k]) and abs(B[k] + V[k]) <= tol * (1 + abs(V[k]))]
        return cache[y]

    bad = []
    n = 0
    for A in sets:
        aset = {tuple(int(c) for c in s) for s in A}
        n += 1
        ok = False
        for y in aset:
            for k in zero_steps(y):
                if tuple(int(a + b) for a, b in zip(y, cocycle.steps[k])) not in aset:
                    ok = True
                    break
            if ok:
                break
        if not ok:
            bad.append(frozenset(aset))
    return ConditionBReport(n, bad, tol)


def subsets_of(window: SiteWindow, max_size: int) -> Iterable[tuple]:
    """All nonempty subsets of the window with at most ``max_size`` sites."""
    pts = [tuple(int(c) for c in s) for s in window.sites()]
    for r in range(1, max_size + 1):
        yield from itertools.combinations(pts, r)


def lattice_animals(step_set: StepSet, root, max_size: int, count: int, rng: np.random.Generator) -> list:
    """Random connected site sets (under ±R) grown from ``root``."""
    moves = np.concatenate([step_set.array, -step_set.array])
    out = []
    for _ in range(count):
        size = int(rng.integers(1, max_size + 1))
        cur = [tuple(int(c) for c in root)]
        sset = set(cur)
        while len(cur) < size:
            base = cur[int(rng.integers(len(cur)))]
            nxt = tuple(int(a + b) for a, b in zip(base, moves[int(rng.integers(len(moves)))]))
            if nxt not in sset:
                sset.add(nxt)
                cur.append(nxt)
        out.append(tuple(cur))
    return out


# ---------------------------------------------------------------------------
# exact consistency checks
# ---------------------------------------------------------------------------


def _path_kernel_logprob(cocycle, env, beta, path) -> float:
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        probs = transition_kernel(cocycle, env, beta, a)
        k = cocycle.step_index(np.subtract(b, a))
        total += math.log(probs[k])
    return total


def consistency_test_restricted(cocycle: Cocycle, env: Environment, beta: float, instance: tuple, face: Face | None = None) -> float:
    """max |Q∞(X_{0:n} = path | X_0 = x, X_n = y) − Q^res_{x,y,n}(path)| over every n-step path.

    ``instance`` is (x, y, n).
    """
    x, y, n = instance
    ss = env.step_set
    face = face or full_face(ss)
    paths = enumerate_paths(ss, x, ("restricted", y, n), n, env, face)
    if len(paths) > 100_000:
        raise Explosion("instance too large for exact comparison")
    if not paths:
        return 0.0
    lq = np.array([_path_kernel_logprob(cocycle, env, beta, p.sites) for p in paths])
    q = np.exp(lq - lq.max())
    q /= q.sum()
    lz = restricted_logZ(env, ss, x, y, n, beta, face)
    res = np.exp(np.array([p.log_weight(beta) for p in paths]) - lz)
    return float(np.max(np.abs(q - res)))


def _kernel_matrix(cocycle, env, beta, sites_region):
    """Sparse one-step matrix of the Q∞ chain restricted to a region (exits dropped)."""
    region = sites_region
    nbr = region.neighbours(cocycle.steps)
    B = cocycle.increments(region.sites)
    V = env.values_all(region.sites)[:, _env_cols(env, cocycle)]
    K = cocycle.probs[None, :] * np.exp(-beta * (B + V))
    K = np.where(np.isfinite(K), K, 0.0)
    S, k = nbr.shape
    rows = np.repeat(np.arange(S), k)
    cols = nbr.ravel()
    mask = cols >= 0
    return sparse.csr_matrix((K.ravel()[mask], (rows[mask], cols[mask])), shape=(S, S)), K


def _hit_region(face: Face, x, y, box):
    if face.origin_class == DIRECTED and box is None:
        return _between_region(face, np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64))
    if box is None:
        raise ValueError("a box is required for faces with loops")
    return box_region(*box)


def hitting_probability(cocycle: Cocycle, env: Environment, beta: float, x, y, box=None, face: Face | None = None) -> float:
    """Q∞_x(τ_y < τ_exit), the chain killed on leaving ``box``.

    For directed faces with no box the region is every site between x and y,
    which every path from x to y stays in.
    """
    face = face or full_face(env.step_set)
    region = _hit_region(face, x, y, box)
    P, _ = _kernel_matrix(cocycle, env, beta, region)
    iy = region.index(y)
    P = P.tolil()
    P[iy, :] = 0
    A = (sparse.identity(P.shape[0], format="csc") - P.tocsc()).tocsc()
    b = np.zeros(P.shape[0])
    b[iy] = 1.0
    h = splu(A).solve(b)
    return float(h[region.index(x)])


def consistency_test_unrestricted(
    cocycle: Cocycle, env: Environment, beta: float, instance: tuple, box=None, face: Face | None = None, max_len: int | None = None
) -> float:
    """max |Q∞(X_{0:τ_y} = path | τ_y < ∞) − Q^unr_{x,y}(path)| over enumerated paths.

    ``instance`` is (x, y).  Directed faces are exact over every path.  For
    faces with loops both sides are taken for the chain killed on leaving
    ``box`` (the window of the cocycle), which keeps the identity exact, and
    the comparison runs over all paths of length at most ``max_len``.
    """
    x, y = instance
    ss = env.step_set
    face = face or full_face(ss)
    if face.origin_class == DIRECTED:
        r = int(np.abs(face.steps).sum(axis=1).min())
        nmax = int(np.abs(np.asarray(y) - np.asarray(x)).sum()) // max(r, 1) + 1
        paths = enumerate_paths(ss, x, ("unrestricted", y), nmax, env, face)
        lz = unrestricted_logZ(env, ss, face, x, y, beta)
        hq = hitting_probability(cocycle, env, beta, x, y, None, face)
    else:
        if box is None:
            raise ValueError("a box is required for faces with loops")
        L = max_len or (int(np.abs(np.asarray(y) - np.asarray(x)).sum()) + 4)
        paths = enumerate_paths(ss, x, ("unrestricted", y), L, env, face, box=box)
        lz = unrestricted_logZ(env, ss, face, x, y, beta, box=box)
        hq = hitting_probability(cocycle, env, beta, x, y, box, face)
    if len(paths) > 100_000:
        raise Explosion("instance too large for exact comparison")
    dev = 0.0
    for p in paths:
        q = math.exp(_path_kernel_logprob(cocycle, env, beta, p.sites)) / hq
        r_ = math.exp(p.log_weight(beta) - lz)
        dev = max(dev, abs(q - r_))
    return dev


def inconsistency_factor(env: Environment, step_set: StepSet, x, y, v, beta: float, box, face: Face | None = None) -> float:
    """Z_{x,y}(τ_y <= τ_v) / Z_{x,y}: equals 1 for loop-free faces, tends to 1 as |v| grows."""
    face = face or full_face(step_set)
    if face.origin_class == DIRECTED:
        # a path reaching v after y would have to return to y, which a directed face forbids
        return 1.0
    system = box_system(env, face, box, beta)
    region = system.region
    iy, iv = region.index(y), region.index(v)
    A = system.matrix(killed=[iy, iv])
    b = np.zeros(A.shape[0])
    b[iy] = 1.0
    w = splu(A).solve(b)
    both = w[region.index(x)]
    full = math.exp(unrestricted_logZ(env, step_set, face, x, y, beta, box=box))
    return float(both / full)


# ---------------------------------------------------------------------------
# Green's function identity
# ---------------------------------------------------------------------------


@dataclass
class GreensIdentity:
    lhs: float
    rhs: float
    lhs_unconditioned: float
    rhs_unconditioned: float
    hit_lhs: float
    hit_rhs: float

    @property
    def max_error(self) -> float:
        return max(
            abs(self.lhs - self.rhs),
            abs(self.lhs_unconditioned - self.rhs_unconditioned),
            abs(self.hit_lhs - self.hit_rhs),
        )


def greens_identity(cocycle: Cocycle, env: Environment, beta: float, x, y, box=None, face: Face | None = None) -> GreensIdentity:
    """Expected visits of the Q∞ chain to y versus g(x,y).

    Both sides are killed on leaving ``box`` (for directed faces without a
    box, on leaving the sites between x and y), so the identities are exact.
    """
    if math.isinf(beta):
        raise ValueError("the Green's identity is stated at finite β")
    ss = env.step_set
    face = face or full_face(ss)
    region = _hit_region(face, x, y, box)
    P, _ = _kernel_matrix(cocycle, env, beta, region)
    A = (sparse.identity(P.shape[0], format="csc") - P.tocsc()).tocsc()
    ix, iy = region.index(x), region.index(y)
    e = np.zeros(P.shape[0])
    e[iy] = 1.0
    visits = float(splu(A).solve(e)[ix])  # E_x[Σ_n 1{X_n = y}]
    hit = 1.0 if ix == iy else hitting_probability(cocycle, env, beta, x, y, box, face)
    gr = greens(env, ss, x, y, beta, box=box, face=face)
    zxy = math.exp(gr.hit_logZ) if ix != iy else 1.0
    tilt = math.exp(-beta * cocycle.B(x, y))
    return GreensIdentity(visits / hit, gr.value / zxy, visits, gr.value * tilt, hit, zxy * tilt)


# ---------------------------------------------------------------------------
# exact marginals
# ---------------------------------------------------------------------------


def qinf_marginal(cocycle: Cocycle, env: Environment, beta: float, x, n: int) -> dict:
    """Law of X_n under Q∞_x by forward propagation of the kernel."""
    dist = {tuple(int(c) for c in x): 1.0}
    for _ in range(n):
        nxt: dict = {}
        for site, mass in dist.items():
            probs = transition_kernel(cocycle, env, beta, site)
            for k, z in enumerate(cocycle.steps):
                t = tuple(int(a + b) for a, b in zip(site, z))
                nxt[t] = nxt.get(t, 0.0) + mass * probs[k]
        dist = nxt
    return dist


def log_qinf_point(cocycle: Cocycle, env: Environment, beta: float, x, y, n: int, face: Face | None = None) -> float:
    """log Q∞_x(X_n = y) = −βB(x,y) + log Z_{x,y,n}."""
    lz = restricted_logZ(env, env.step_set, x, y, n, beta, face)
    if not np.isfinite(lz):
        return NEG_INF
    return -beta * cocycle.B(x, y) + lz


# ---------------------------------------------------------------------------
# transience and directedness
# ---------------------------------------------------------------------------


@dataclass
class TransienceReport:
    n_steps: int
    replicas: int
    escape_fraction: float  # no visit to the start during the second half
    excursion: np.ndarray  # max |X_k − x|_∞ per replica
    final_distance: np.ndarray
    recurrence_flag: bool


def transience_report(
    cocycle: Cocycle,
    env: Environment,
    beta: float,
    x,
    n_steps: int,
    replicas: int,
    seed: int = 0,
    escape_threshold: float = 0.9,
) -> TransienceReport:
    """Monte Carlo escape statistics; a low escape fraction flags recurrent behaviour."""
    x = np.asarray(x, dtype=np.int64)
    escapes = []
    exc = []
    fin = []
    for r in range(replicas):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), r])))
        p = sample_semiinf(cocycle, env, beta, x, n_steps, rng)
        second = p.sites[n_steps // 2 :]
        escapes.append(not np.any(np.all(second == x, axis=1)))
        exc.append(int(np.abs(p.sites - x).max()))
        fin.append(int(np.abs(p.sites[-1] - x).sum()))
    frac = float(np.mean(escapes))
    return TransienceReport(n_steps, replicas, frac, np.array(exc), np.array(fin), frac < escape_threshold)


@dataclass
class DirectednessReport:
    checkpoints: list
    distances: np.ndarray  # (paths, checkpoints)
    kappa: float
    fraction_within: float
    trapped: int
    passed: bool

    def summary(self) -> str:
        if self.trapped:
            return f"non-escape: {self.trapped} of {len(self.distances)} paths stayed trapped"
        return f"{self.fraction_within:.3f} of paths within {self.kappa} of the facet at n={self.checkpoints[-1]}"


def _dist_to_facet(v: np.ndarray, facet: np.ndarray) -> float:
    if len(facet) == 1:
        return float(np.abs(v - facet[0]).sum())
    # polyline through the facet points (two-dimensional facets are segments)
    best = math.inf
    for a, b in zip(facet[:-1], facet[1:]):
        d = b - a
        t = float(np.clip((v - a) @ d / max(d @ d, 1e-300), 0.0, 1.0))
        best = min(best, float(np.abs(v - (a + t * d)).sum()))
    return best


def directedness_stats(paths: Sequence, facet, checkpoints: Sequence[int] | None = None, kappa: float = 0.05, quantile: float = 0.95) -> DirectednessReport:
    """ℓ1 distance of X_n/|X_n|_1 to the facet at checkpoints; pass when enough paths end within κ."""
    facet = np.atleast_2d(np.asarray(facet, dtype=float))
    arrs = []
    trapped = 0
    for p in paths:
        if isinstance(p, SemiInfPath):
            trapped += int(p.trapped)
            arrs.append(p.sites)
        else:
            arrs.append(np.asarray(p))
    n = min(len(a) for a in arrs) - 1
    checkpoints = list(checkpoints) if checkpoints is not None else [max(1, n // 4), max(1, n // 2), n]
    D = np.full((len(arrs), len(checkpoints)), np.nan)
    for i, a in enumerate(arrs):
        for j, c in enumerate(checkpoints):
            v = a[c] - a[0]
            s = float(np.abs(v).sum())
            D[i, j] = _dist_to_facet(v / s, facet) if s > 0 else math.inf
    frac = float(np.mean(D[:, -1] < kappa))
    return DirectednessReport(checkpoints, D, kappa, frac, trapped, frac >= quantile and trapped == 0)


# ---------------------------------------------------------------------------
# large deviations
# ---------------------------------------------------------------------------


def in_hull(points: np.ndarray, xi: Sequence[float], tol: float = 1e-9) -> bool:
    """ξ in the convex hull of ``points`` (a feasibility linear program)."""
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    A_eq = np.vstack([pts.T, np.ones(k)])
    b_eq = np.concatenate([np.asarray(xi, dtype=float), [1.0]])
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * k, method="highs")
    return bool(res.status == 0)


@dataclass
class RateFunctionTable:
    grid: np.ndarray
    values: np.ndarray
    tol: float
    m: np.ndarray
    beta: float

    def zero_set(self) -> np.ndarray:
        return self.grid[self.values <= self.tol]


def rate_function(m: Sequence[float], shape_res: Callable | object, beta: float, grid, steps: np.ndarray | None = None, tol: float = 1e-6) -> RateFunctionTable:
    """I_B(ξ) = β m·ξ − β Λ_res^{usc}(ξ) on a grid inside U_A = conv(R_A)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if steps is not None:
        for xi in grid:
            if not in_hull(steps, xi):
                raise GridOutsideU(f"{tuple(xi)} lies outside conv(R_A)")
    lam = shape_res if callable(shape_res) else shape_res.value
    b = 1.0 if math.isinf(beta) else beta
    vals = np.array([b * (float(np.dot(m, xi)) - float(lam(xi))) for xi in grid])
    return RateFunctionTable(grid, vals, tol, np.asarray(m, dtype=float), beta)


@dataclass
class VelocityHistogram:
    grid: np.ndarray
    counts: np.ndarray
    n: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(1, self.counts.sum())

    def mass_near(self, facet, delta: float) -> float:
        facet = np.atleast_2d(np.asarray(facet, dtype=float))
        near = np.array([_dist_to_facet(g, facet) <= delta for g in self.grid])
        return float(self.frequencies[near].sum())


def velocity_histogram(paths: Sequence, n: int, grid) -> VelocityHistogram:
    """Counts of X_n/n snapped to the nearest grid point of U_A."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    counts = np.zeros(len(grid))
    for p in paths:
        sites = p.sites if isinstance(p, SemiInfPath) else np.asarray(p)
        v = (sites[n] - sites[0]) / n
        counts[int(np.argmin(np.abs(grid - v).sum(axis=1)))] += 1
    return VelocityHistogram(grid, counts, n)
