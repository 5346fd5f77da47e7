"""Tilted point-to-level free energies, pre-limit Busemann fields and cocycles.

Besides the pre-limit construction this module provides three exact
recovering cocycles used as independent oracles: the stationary exponential
last-passage cocycle, the stationary log-gamma polymer cocycle, and the
zero-loop trap cocycle.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import sparse, special
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .energy import (
    NEG_INF,
    Region,
    box_region,
    box_system,
    level_groups,
    positive_solve,
    sweep,
)
from .errors import (
    AlphaOutOfRange,
    DirectionOutsideCone,
    DisconnectedWindow,
    EmptySlab,
    LambdaSignViolation,
    LevelBelowAnchor,
    NegativePotential,
    NoZeroLoop,
    NotInRelativeInterior,
    ParamOutOfRange,
    PathDependence,
    RankDeficientProbes,
    RwrpError,
    WidthTooSmall,
)
from .lattice import (
    DIRECTED,
    Environment,
    Face,
    SiteWindow,
    StepSet,
    _parse_kv,
    _step_set_from_kv,
    _step_set_lines,
    enumerate_faces,
    exponential,
    face_of_direction,
    full_face,
    log_gamma,
    make_environment,
    make_step_set,
    table_environment,
)

INF = math.inf
DIRECTED_CASE = "directed"
NONNEG_CASE = "nonneg_V"
DEFAULT_EPSILON = 0.1


# ---------------------------------------------------------------------------
# tilt specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TiltSpec:
    face: Face
    beta: float
    xi: tuple[float, ...]
    m: tuple[float, ...]
    uhat: tuple[float, ...]
    h: tuple[float, ...]
    epsilon: float
    slab_width: float
    case: str
    lambda_xi: float | None = None

    @property
    def r0(self) -> float:
        return float(np.sum(np.abs(self.face.steps @ np.asarray(self.uhat))))

    def level(self, x) -> float:
        return float(np.asarray(x, dtype=float) @ np.asarray(self.uhat))

    def to_text(self) -> str:
        def vec(v):
            return " ".join(repr(float(c)) for c in v)

        lines = _step_set_lines(self.face.step_set)
        lines += [
            "face.members = " + " ".join(str(i) for i in self.face.member_indices),
            f"beta = {'inf' if math.isinf(self.beta) else repr(float(self.beta))}",
            f"xi = {vec(self.xi)}",
            f"m = {vec(self.m)}",
            f"uhat = {vec(self.uhat)}",
            f"h = {vec(self.h)}",
            f"epsilon = {self.epsilon!r}",
            f"slab_width = {self.slab_width!r}",
            f"case = {self.case}",
            f"lambda_xi = {'none' if self.lambda_xi is None else repr(self.lambda_xi)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TiltSpec":
        kv = _parse_kv(text)
        ss = _step_set_from_kv(kv)
        members = tuple(int(i) for i in kv["face.members"].split())
        face = _face_with_members(ss, members)

        def vec(key):
            return tuple(float(c) for c in kv[key].split())

        lam = kv.get("lambda_xi", "none")
        return cls(
            face=face,
            beta=float(kv["beta"]),
            xi=vec("xi"),
            m=vec("m"),
            uhat=vec("uhat"),
            h=vec("h"),
            epsilon=float(kv["epsilon"]),
            slab_width=float(kv["slab_width"]),
            case=kv["case"],
            lambda_xi=None if lam == "none" else float(lam),
        )


def _face_with_members(ss: StepSet, members: tuple[int, ...]) -> Face:
    for f in enumerate_faces(ss):
        if f.member_indices == members:
            return f
    raise ValueError(f"no face of the step set has members {members}")


def make_tilt_spec(
    face: Face,
    beta: float,
    xi: Sequence[float],
    m: Sequence[float],
    lambda_xi: float | None = None,
    slab_factor: float = 2.5,
    epsilon: float | None = None,
) -> TiltSpec:
    """Tilt data (û, h, ε, slab width) for direction ξ and supergradient m."""
    xi_a = np.asarray(xi, dtype=float)
    m_a = np.asarray(m, dtype=float)
    try:
        hit = face_of_direction(enumerate_faces(face.step_set), [Fraction(float(c)).limit_denominator(10**9) for c in xi])
    except DirectionOutsideCone as exc:
        raise NotInRelativeInterior(str(exc)) from exc
    if hit.member_indices != face.member_indices:
        raise NotInRelativeInterior(f"ξ={tuple(xi)} is interior to face {hit.member_indices}, not {face.member_indices}")
    if face.origin_class == DIRECTED:
        case = DIRECTED_CASE
        u = np.asarray(face.positivity_certificate, dtype=float)
        uhat = u / float(u @ xi_a)
        h = uhat - m_a
        eps = 0.0 if epsilon is None else float(epsilon)
    else:
        case = NONNEG_CASE
        if lambda_xi is None:
            raise LambdaSignViolation("the loop-allowing case needs Λ(ξ)")
        if not lambda_xi < 0:
            raise LambdaSignViolation(f"Λ(ξ)={lambda_xi} must be negative")
        if abs(float(m_a @ xi_a) - lambda_xi) > 1e-12 * max(1.0, abs(lambda_xi)):
            raise ValueError(f"m·ξ = {float(m_a @ xi_a)} differs from Λ(ξ) = {lambda_xi}")
        uhat = m_a / lambda_xi
        h = ((1.0 - lambda_xi) / lambda_xi) * m_a
        if epsilon is None:
            eps = 0.0 if math.isinf(beta) else DEFAULT_EPSILON
        else:
            eps = float(epsilon)
        if not math.isinf(beta) and not eps > 0:
            raise ValueError("ε must be positive at finite β when loops are allowed")
    if not slab_factor > 2:
        raise WidthTooSmall(f"slab factor {slab_factor} must exceed 2")
    r0 = float(np.sum(np.abs(face.steps @ uhat)))
    return TiltSpec(
        face=face,
        beta=float(beta),
        xi=tuple(float(c) for c in xi_a),
        m=tuple(float(c) for c in m_a),
        uhat=tuple(float(c) for c in uhat),
        h=tuple(float(c) for c in h),
        epsilon=eps,
        slab_width=slab_factor * r0,
        case=case,
        lambda_xi=None if lambda_xi is None else float(lambda_xi),
    )


# ---------------------------------------------------------------------------
# slab free energies
# ---------------------------------------------------------------------------


@dataclass
class SlabSolution:
    """log W(u) (β<∞) or G(u) (β=∞) over a region, W(u) = Σ_v Z_{u,v} e^{βh·v − ε|v|_1}."""

    region: Region
    values: np.ndarray
    spec: TiltSpec
    t: float
    box: tuple | None = None

    def value(self, x) -> float:
        i = self.region.index(x)
        return float(self.values[i]) if i >= 0 else NEG_INF

    def free_energy(self, x) -> float:
        """F_{x,t} = (1/β) log W(x) − h·x, or G(x) − h·x at β=∞."""
        lw = self.value(x)
        hx = float(np.asarray(x, dtype=float) @ np.asarray(self.spec.h))
        if math.isinf(self.spec.beta):
            return lw - hx
        return lw / self.spec.beta - hx


def _slab_init(spec: TiltSpec, sites: np.ndarray, t: float) -> np.ndarray:
    lv = sites @ np.asarray(spec.uhat)
    in_slab = (lv >= t) & (lv < t + spec.slab_width)
    hv = sites @ np.asarray(spec.h)
    if math.isinf(spec.beta):
        val = hv
    else:
        val = spec.beta * hv - spec.epsilon * np.abs(sites).sum(axis=1)
    return np.where(in_slab, val, NEG_INF)


def _directed_region(spec: TiltSpec, sources: np.ndarray, t: float) -> Region:
    steps = spec.face.steps
    uh = np.asarray(spec.uhat)
    top = t + spec.slab_width
    frontier = np.unique(sources, axis=0)
    layers = [frontier]
    seen = frontier
    while len(frontier):
        nxt = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, sources.shape[1])
        nxt = nxt[(nxt @ uh) < top]
        frontier = np.unique(nxt, axis=0) if len(nxt) else nxt
        if len(frontier):
            layers.append(frontier)
    del seen
    return Region(np.concatenate(layers))


def default_box(spec: TiltSpec, sources: np.ndarray, t: float, margin: int = 8) -> tuple:
    """Window bounding box grown by ``margin`` and stretched past the slab."""
    lo = sources.min(axis=0) - margin
    hi = sources.max(axis=0) + margin
    uh = np.asarray(spec.uhat)
    nz = np.flatnonzero(np.abs(uh) > 1e-12)
    gap = t + spec.slab_width - float((sources @ uh).min())
    for j in nz:
        reach = int(math.ceil(gap / (abs(uh[j]) * len(nz)))) + margin
        if uh[j] > 0:
            hi[j] = max(hi[j], sources[:, j].max() + reach)
        else:
            lo[j] = min(lo[j], sources[:, j].min() - reach)
    return tuple(int(c) for c in lo), tuple(int(c) for c in hi)


def solve_slab(env: Environment, spec: TiltSpec, sources, t: float, box=None) -> SlabSolution:
    """Shared slab pass: one solve serves every source site."""
    sources = np.asarray(sources, dtype=np.int64).reshape(-1, spec.face.step_set.dim)
    uh = np.asarray(spec.uhat)
    if np.any(sources @ uh >= t):
        raise LevelBelowAnchor(f"level {t} is not above every source height")
    face = spec.face
    cols = list(face.member_indices)
    if spec.case == DIRECTED_CASE:
        region = _directed_region(spec, sources, t)
        nbr = region.neighbours(face.steps)
        groups = level_groups(region, face.positivity_certificate)
        V = env.values_all(region.sites)[:, cols]
        init = _slab_init(spec, region.sites, t)
        if math.isinf(spec.beta):
            vals = sweep(nbr, -V, init, groups, "max")
        else:
            gain = np.log(face.probs)[None, :] - spec.beta * V
            vals = sweep(nbr, gain, init, groups, "log")
        return SlabSolution(region, vals, spec, t, None)
    if box is None:
        box = default_box(spec, sources, t)
    if math.isinf(spec.beta):
        return _undirected_passage_slab(env, spec, t, box)
    return _undirected_logW(env, spec, t, box)


def _undirected_passage_slab(env, spec, t, box) -> SlabSolution:
    region = box_region(*box)
    face = spec.face
    nbr = region.neighbours(face.steps)
    V = env.values_all(region.sites)[:, list(face.member_indices)]
    if np.any(V < 0):
        raise NegativePotential("V must be non-negative when the face admits loops")
    init = _slab_init(spec, region.sites, t)
    src = np.flatnonzero(np.isfinite(init))
    if len(src) == 0:
        raise EmptySlab("no slab site inside the box")
    S, k = nbr.shape
    rows = np.repeat(np.arange(S), k)
    cols = nbr.ravel()
    mask = cols >= 0
    top = float(init[src].max())
    # reversed edges u+z -> u, plus a super source feeding every slab site
    g = sparse.csr_matrix(
        (
            np.concatenate([V.ravel()[mask] + 1e-300, top - init[src] + 1e-300]),
            (np.concatenate([cols[mask], np.full(len(src), S)]), np.concatenate([rows[mask], src])),
        ),
        shape=(S + 1, S + 1),
    )
    dist = csgraph.dijkstra(g, directed=True, indices=S)[:S]
    return SlabSolution(region, top - dist, spec, t, box)


def _undirected_logW(env, spec, t, box) -> SlabSolution:
    system = box_system(env, spec.face, box, spec.beta)
    region = system.region
    init = _slab_init(spec, region.sites, t)
    src = np.flatnonzero(np.isfinite(init))
    if len(src) == 0:
        raise EmptySlab("no slab site inside the box")
    A = system.matrix()
    lu = splu(A)
    # g(v,v) for each slab site: W = G b with b_v = c_v / g(v,v)
    gdiag = np.empty(len(src))
    for j, v in enumerate(src):
        e = np.zeros(A.shape[0])
        e[v] = 1.0
        gdiag[j] = lu.solve(e)[v]
    logb = init[src] - np.log(gdiag)
    shift = float(logb.max())
    b = np.zeros(A.shape[0])
    b[src] = np.exp(logb - shift)
    from .energy import _log_scale_guess

    guess = np.exp(_log_scale_guess(system, {int(v): float(lb - shift) for v, lb in zip(src, logb)}))
    W = positive_solve(A, b, scale=guess)
    with np.errstate(divide="ignore"):
        vals = np.log(W) + shift
    return SlabSolution(region, vals, spec, t, box)


def p2l_free_energy(env: Environment, spec: TiltSpec, x, t: float, box=None) -> float:
    """Tilted point-to-level free energy F_{x,t}."""
    x = np.asarray(x, dtype=np.int64)
    if t <= spec.level(x):
        raise LevelBelowAnchor(f"level {t} is not above x·û = {spec.level(x)}")
    sol = solve_slab(env, spec, x[None, :], t, box)
    if not np.isfinite(sol.value(x)):
        raise EmptySlab(f"no slab site reachable from {tuple(x)}")
    return sol.free_energy(x)


# ---------------------------------------------------------------------------
# Busemann fields and cocycles
# ---------------------------------------------------------------------------


@dataclass
class BusemannField:
    window: SiteWindow
    sites: np.ndarray
    values: np.ndarray  # (S, |R_A|) B(x, x+z)
    free_energy: np.ndarray  # F_{x,t} at window sites
    level: float
    spec: TiltSpec
    admissible: np.ndarray  # (S, |R_A|) both ends reach the slab

    def value(self, x, z) -> float:
        i = int(np.flatnonzero(np.all(self.sites == np.asarray(x), axis=1))[0])
        k = self.spec.face.member_steps.index(tuple(int(c) for c in z))
        return float(self.values[i, k])


def approx_busemann(env: Environment, spec: TiltSpec, window: SiteWindow, t: float, box=None) -> BusemannField:
    """B^{t,ε}(x, x+z) = F_{x,t} − F_{x+z,t} − h·z over a window, from one slab pass."""
    sites = window.sites()
    steps = spec.face.steps
    ends = (sites[:, None, :] + steps[None, :, :]).reshape(-1, sites.shape[1])
    allpts = np.concatenate([sites, ends])
    if float((allpts @ np.asarray(spec.uhat)).max()) >= t:
        raise LevelBelowAnchor(f"level {t} must exceed every (x+z)·û in the window")
    sol = solve_slab(env, spec, allpts, t, box)
    idx_x = sol.region.index_of(sites)
    if np.any(idx_x < 0):
        from .errors import BoxTooSmall

        raise BoxTooSmall("window is not inside the truncation box")
    lx = sol.values[idx_x]
    B = np.zeros((len(sites), len(steps)))
    ok = np.zeros_like(B, dtype=bool)
    for k, z in enumerate(steps):
        idx = sol.region.index_of(sites + z)
        lz = np.where(idx >= 0, sol.values[np.maximum(idx, 0)], NEG_INF)
        good = np.isfinite(lx) & np.isfinite(lz)
        diff = lx - lz
        if not math.isinf(spec.beta):
            diff = diff / spec.beta
        B[:, k] = np.where(good, diff, 0.0)
        ok[:, k] = good
    F = np.array([sol.free_energy(x) for x in sites])
    return BusemannField(window, sites, B, F, t, spec, ok)


@dataclass
class Cocycle:
    """Increments B(x, x+z) for z in R_A on an inclusive box; NaN where undefined."""

    steps: np.ndarray
    probs: np.ndarray
    lo: np.ndarray
    inc: np.ndarray  # shape (|R_A|, *box_shape)
    provenance: str
    params: dict = field(default_factory=dict)
    trap: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.steps.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.inc.shape[1:]

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.asarray(self.shape) - 1

    def _local(self, sites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = np.asarray(sites, dtype=np.int64).reshape(-1, self.dim) - self.lo
        inside = np.all((rel >= 0) & (rel < np.asarray(self.shape)), axis=1)
        return rel, inside

    def increment(self, sites, k: int) -> np.ndarray:
        rel, inside = self._local(sites)
        out = np.full(len(rel), np.nan)
        r = rel[inside]
        out[inside] = self.inc[(k, *r.T)]
        return out

    def increments(self, sites) -> np.ndarray:
        return np.stack([self.increment(sites, k) for k in range(len(self.steps))], axis=1)

    def defined_sites(self) -> np.ndarray:
        ok = np.all(np.isfinite(self.inc), axis=0)
        return np.argwhere(ok) + self.lo

    def step_index(self, z) -> int:
        z = tuple(int(c) for c in z)
        for k, s in enumerate(self.steps):
            if tuple(int(c) for c in s) == z:
                return k
        raise KeyError(z)

    def B(self, x, y) -> float:
        """Sum of increments along a connecting path (backward steps use antisymmetry)."""
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if np.array_equal(x, y):
            return 0.0
        r = int(np.abs(self.steps).max())
        lo = np.maximum(np.minimum(x, y) - r, self.lo)
        hi = np.minimum(np.maximum(x, y) + r, self.hi + np.abs(self.steps).max(axis=0))
        moves = [(k, +1) for k in range(len(self.steps))] + [(k, -1) for k in range(len(self.steps))]
        start, goal = tuple(x), tuple(y)
        prev = {start: None}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            if cur == goal:
                break
            for k, sgn in moves:
                nxt = tuple(int(a + sgn * b) for a, b in zip(cur, self.steps[k]))
                if nxt in prev or any(c < a or c > b for c, a, b in zip(nxt, lo, hi)):
                    continue
                base = cur if sgn > 0 else nxt
                if not np.isfinite(self.increment(np.asarray([base]), k)[0]):
                    continue
                prev[nxt] = (cur, k, sgn)
                queue.append(nxt)
        if goal not in prev:
            raise DisconnectedWindow(f"no path of defined increments from {start} to {goal}")
        total = 0.0
        cur = goal
        while prev[cur] is not None:
            p, k, sgn = prev[cur]
            base = p if sgn > 0 else cur
            total += sgn * float(self.increment(np.asarray([base]), k)[0])
            cur = p
        return total

    def to_text(self) -> str:
        head = [f"# provenance: {self.provenance}", f"# trap: {self.trap}"]
        head += [f"# {k}: {v}" for k, v in self.params.items()]
        dcols = ",".join(f"x{j}" for j in range(self.dim))
        zcols = ",".join(f"z{j}" for j in range(self.dim))
        lines = head + [f"{dcols},{zcols},B"]
        for site in self.defined_sites():
            vals = self.increments(site[None, :])[0]
            for k, z in enumerate(self.steps):
                lines.append(",".join([*map(str, site), *map(str, z), repr(float(vals[k]))]))
        return "\n".join(lines) + "\n"


def telescope_to_cocycle(fld: BusemannField, tol: float = 1e-10) -> Cocycle:
    """Turn a window field into a cocycle, checking path independence."""
    steps = fld.spec.face.steps
    sites = [tuple(int(c) for c in s) for s in fld.sites]
    index = {s: i for i, s in enumerate(sites)}
    anchor = tuple(int(c) for c in fld.window.anchor)
    if anchor not in index:
        anchor = sites[0]
    phi = {anchor: 0.0}
    queue = deque([anchor])
    while queue:
        cur = queue.popleft()
        i = index[cur]
        for k, z in enumerate(steps):
            fwd = tuple(int(a + b) for a, b in zip(cur, z))
            if fwd in index and fwd not in phi:
                phi[fwd] = phi[cur] + fld.values[i, k]
                queue.append(fwd)
            back = tuple(int(a - b) for a, b in zip(cur, z))
            if back in index and back not in phi:
                phi[back] = phi[cur] - fld.values[index[back], k]
                queue.append(back)
    if len(phi) != len(sites):
        raise DisconnectedWindow(f"{len(sites) - len(phi)} window sites are not connected to the anchor")
    worst = 0.0
    for s, i in index.items():
        for k, z in enumerate(steps):
            nxt = tuple(int(a + b) for a, b in zip(s, z))
            if nxt in phi:
                err = abs(phi[nxt] - phi[s] - fld.values[i, k])
                worst = max(worst, err / max(1.0, abs(phi[nxt]), abs(phi[s])))
    if worst > tol:
        raise PathDependence(f"loop sums reach {worst:.3e}")
    lo = fld.sites.min(axis=0)
    shape = tuple(fld.sites.max(axis=0) - lo + 1)
    inc = np.full((len(steps), *shape), np.nan)
    rel = fld.sites - lo
    for k in range(len(steps)):
        inc[(k, *rel.T)] = fld.values[:, k]
    # increments leaving the window stay NaN so that B(x,y) only uses window paths
    for k, z in enumerate(steps):
        out = ~np.array([tuple(int(c) for c in s + z) in index for s in fld.sites])
        inc[(k, *rel[out].T)] = np.nan
    spec = fld.spec
    params = {"t": fld.level, "epsilon": spec.epsilon, "beta": spec.beta, "xi": spec.xi, "m": spec.m, "max_loop_error": worst}
    coc = Cocycle(steps.copy(), spec.face.probs.copy(), lo, inc, "prelimit", params)
    coc.meta["edge_values"] = fld  # the full field keeps boundary increments
    return coc


def field_cocycle(fld: BusemannField) -> Cocycle:
    """All window increments, including those whose endpoint leaves the window."""
    steps = fld.spec.face.steps
    lo = fld.sites.min(axis=0)
    shape = tuple(fld.sites.max(axis=0) - lo + 1)
    inc = np.full((len(steps), *shape), np.nan)
    rel = fld.sites - lo
    for k in range(len(steps)):
        inc[(k, *rel.T)] = np.where(fld.admissible[:, k], fld.values[:, k], np.nan)
    spec = fld.spec
    return Cocycle(steps.copy(), spec.face.probs.copy(), lo, inc, "prelimit", {"t": fld.level, "epsilon": spec.epsilon})


def user_cocycle(step_set: StepSet, box, fn: Callable[[np.ndarray, int], np.ndarray] | float = 0.0, face: Face | None = None) -> Cocycle:
    """A cocycle given by a callable (sites, step index) -> increments, or a constant."""
    face = face or full_face(step_set)
    region = box_region(*box)
    lo = np.asarray(box[0], dtype=np.int64)
    shape = tuple(np.asarray(box[1]) - lo + 1)
    inc = np.empty((len(face.steps), *shape))
    rel = region.sites - lo
    for k in range(len(face.steps)):
        vals = np.full(len(region), float(fn)) if not callable(fn) else np.asarray(fn(region.sites, k), dtype=float)
        inc[(k, *rel.T)] = vals
    return Cocycle(face.steps.copy(), face.probs.copy(), lo, inc, "user")


def recovery_residual(cocycle: Cocycle, env: Environment, window: SiteWindow, beta: float) -> float:
    """max |Σ_z p e^{−β(B+V)} − 1| (β<∞) or max |min_z (B+V)| (β=∞) over the window."""
    sites = window.sites()
    B = cocycle.increments(sites)
    if np.any(~np.isfinite(B)):
        raise RwrpError("the cocycle is undefined at some window increments")
    cols = [env.step_set.index(tuple(int(c) for c in z)) for z in cocycle.steps]
    V = env.values_all(sites)[:, cols]
    if math.isinf(beta):
        return float(np.max(np.abs(np.min(B + V, axis=1))))
    s = np.sum(cocycle.probs[None, :] * np.exp(-beta * (B + V)), axis=1)
    return float(np.max(np.abs(s - 1.0)))


# ---------------------------------------------------------------------------
# Cesàro averaging and mean vectors
# ---------------------------------------------------------------------------


@dataclass
class CesaroResult:
    probes: list
    mean: np.ndarray
    se: np.ndarray
    n: int
    n_samples: int
    lower_bound_ok: bool
    min_lower_margin: float
    samples: np.ndarray
    levels: np.ndarray


def derived_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def cesaro_mean(
    env_family: Callable[[int], Environment],
    spec: TiltSpec,
    n: float,
    n_samples: int,
    probes: Sequence[tuple],
    seed: int = 0,
    box=None,
) -> CesaroResult:
    """Average B^{U,ε}(x, x+z) over U ~ Unif[0,n] and fresh environments."""
    if n_samples < 100:
        raise ValueError("at least 100 samples are required")
    probes = [(tuple(int(c) for c in x), tuple(int(c) for c in z)) for x, z in probes]
    uh = np.asarray(spec.uhat)
    t0 = max(max(float(np.asarray(x) @ uh), float((np.asarray(x) + np.asarray(z)) @ uh)) for x, z in probes)
    steps = [tuple(int(c) for c in s) for s in spec.face.member_steps]
    pts = np.array(sorted({x for x, _ in probes} | {tuple(np.add(x, z)) for x, z in probes}), dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xCE5A])))
    levels = rng.uniform(0.0, n, size=n_samples)
    samples = np.zeros((n_samples, len(probes)))
    ok = True
    margin = INF
    for i in range(n_samples):
        t = float(levels[i])
        if t <= t0:
            continue  # B = 0 by convention below the probes
        env = env_family(derived_seed(seed, i))
        sol = solve_slab(env, spec, pts, t, box)
        for j, (x, z) in enumerate(probes):
            lx, lz = sol.value(x), sol.value(tuple(np.add(x, z)))
            if not (np.isfinite(lx) and np.isfinite(lz)):
                continue
            b = lx - lz if math.isinf(spec.beta) else (lx - lz) / spec.beta
            samples[i, j] = b
            col = env.step_set.index(z)
            v = float(env.values(np.asarray([x]), env.step_set.steps[col])[0])
            lower = -max(v, 0.0)
            if not math.isinf(spec.beta):
                lower += math.log(spec.face.probs[steps.index(z)]) / spec.beta
            margin = min(margin, b - lower)
            if b < lower - 1e-9:
                ok = False
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return CesaroResult(probes, mean, se, int(n), n_samples, ok, margin, samples, levels)


def fatou_bound(spec: TiltSpec, x, z) -> float:
    """m·z + (ε/β)(|x|_1 + |x+z|_1): the limiting upper bound on E[B(x,x+z)]."""
    x = np.asarray(x)
    z = np.asarray(z)
    extra = 0.0 if math.isinf(spec.beta) else spec.epsilon / spec.beta * (np.abs(x).sum() + np.abs(x + z).sum())
    return float(np.asarray(spec.m) @ z + extra)


@dataclass
class MeanVector:
    m: np.ndarray
    se: np.ndarray
    per_step_mean: np.ndarray
    per_step_se: np.ndarray
    n_obs: int


def mean_vector(cocycles: Cocycle | Sequence[Cocycle], window: SiteWindow | None = None, batches: int = 10) -> MeanVector:
    """Least-squares m with m·z ≈ E[B(x, x+z)], averaging over the window and replicas.

    Standard errors come from the spread of replica means when several
    cocycles are given, otherwise from batch means over window rows.
    """
    cocs = [cocycles] if isinstance(cocycles, Cocycle) else list(cocycles)
    steps = cocs[0].steps.astype(float)
    if np.linalg.matrix_rank(steps) < steps.shape[1]:
        raise RankDeficientProbes("the step displacements do not span the lattice")
    per = []
    for c in cocs:
        sites = window.sites() if window is not None else c.defined_sites()
        per.append(c.increments(sites))
    if len(cocs) > 1:
        means = np.array([np.nanmean(p, axis=0) for p in per])
        mu = means.mean(axis=0)
        se = means.std(axis=0, ddof=1) / math.sqrt(len(cocs))
    else:
        p = per[0]
        chunks = np.array_split(p, batches)
        bm = np.array([np.nanmean(ch, axis=0) for ch in chunks])
        mu = np.nanmean(p, axis=0)
        se = bm.std(axis=0, ddof=1) / math.sqrt(batches)
    sol, *_ = np.linalg.lstsq(steps, mu, rcond=None)
    pinv = np.linalg.pinv(steps)
    m_se = np.sqrt((pinv**2) @ (se**2))
    return MeanVector(sol, m_se, mu, se, int(sum(len(p) for p in per)))


# ---------------------------------------------------------------------------
# stationary solvable cocycles
# ---------------------------------------------------------------------------

LPP_STEPS = ((1, 0), (0, 1))


def lpp_step_set() -> StepSet:
    return make_step_set(2, LPP_STEPS, (0.5, 0.5))


def lpp_environment(seed: int) -> Environment:
    """Exponential(1) vertex weights ω with V(x,z) = −ω_x."""
    return make_environment("vertex_iid", lpp_step_set(), seed, exponential(1.0), sign=-1.0)


def loggamma_environment(mu: float, seed: int) -> Environment:
    """V(x,z) = log G_x with G_x ~ Gamma(μ), so e^{−V} is inverse-gamma(μ)."""
    return make_environment("vertex_iid", lpp_step_set(), seed, log_gamma(mu, 1.0))


def _diag_sites(d: int, n1: int, n2: int) -> np.ndarray:
    i = np.arange(max(0, d - n2 + 1), min(n1 - 1, d) + 1)
    return np.stack([i, d - i], axis=1)


def _ne_sweep(n1: int, n2: int, top: np.ndarray, right: np.ndarray, cell, bulk, store: bool = True, on_diag=None):
    """Anti-diagonal sweep from the north-east corner of [0,n1)x[0,n2).

    ``top[i]`` is the horizontal boundary increment at (i, n2) and
    ``right[j]`` the vertical one at (n1, j).  ``cell(w, up, rt)`` returns
    the (horizontal, vertical) increments at a site from its bulk value w,
    the horizontal increment above it and the vertical increment to its right.
    """
    hcur = np.full(n1 + 1, np.nan)
    vcur = np.full(n1 + 1, np.nan)
    H = np.full((n1, n2), np.nan) if store else None
    Vv = np.full((n1, n2), np.nan) if store else None
    for d in range(n1 + n2 - 2, -1, -1):
        # inject boundary values living on diagonal d+1
        ib = d + 1 - n2
        if 0 <= ib < n1:
            hcur[ib] = top[ib]
        jb = d + 1 - n1
        if 0 <= jb < n2:
            vcur[n1] = right[jb]
        sites = _diag_sites(d, n1, n2)
        i = sites[:, 0]
        up = hcur[i]
        rt = vcur[i + 1]
        w = bulk(sites)
        hn, vn = cell(w, up, rt)
        if on_diag is not None:
            on_diag(d, sites, up, rt)
        hcur[i] = hn
        vcur[i] = vn
        if store:
            H[i, sites[:, 1]] = hn
            Vv[i, sites[:, 1]] = vn
    return H, Vv


def _lpp_cell(w, up, rt):
    return w + np.maximum(up - rt, 0.0), w + np.maximum(rt - up, 0.0)


def stationary_lpp_cocycle(alpha: float, quadrant_size: int | tuple[int, int], seed: int) -> tuple[Cocycle, Environment]:
    """Exact ∞-recovering cocycle for exponential last-passage percolation.

    Horizontal boundary increments are Exp with mean 1/α on the top edge,
    vertical ones Exp with mean 1/(1−α) on the right edge; the quadrant is
    filled by I = ω + (I_up − J_right)^+, J = ω + (J_right − I_up)^+.
    """
    if not 0 < alpha < 1:
        raise AlphaOutOfRange(f"α={alpha} must lie in (0,1)")
    n1, n2 = (quadrant_size, quadrant_size) if np.isscalar(quadrant_size) else quadrant_size
    env = lpp_environment(seed)
    top, right = _lpp_boundary(alpha, n1, n2, seed)

    def bulk(sites):
        return -env.values_all(sites)[:, 0]

    H, Vv = _ne_sweep(n1, n2, top, right, _lpp_cell, bulk)
    inc = np.stack([H, Vv])
    ss = lpp_step_set()
    coc = Cocycle(
        ss.array.copy(),
        ss.prob_array.copy(),
        np.zeros(2, dtype=np.int64),
        inc,
        "stationary_lpp",
        {"alpha": alpha, "seed": seed},
        meta={"top": top, "right": right, "mean": lpp_mean_vector(alpha)},
    )
    return coc, env


def _lpp_boundary(alpha, n1, n2, seed):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xB0DA])))
    top = rng.exponential(1.0 / alpha, size=n1)
    right = rng.exponential(1.0 / (1.0 - alpha), size=n2)
    return top, right


def lpp_mean_vector(alpha: float) -> np.ndarray:
    """m(B) = (1/α, 1/(1−α)) under V = −ω, so that m·ξ is the passage-time shape."""
    return np.array([1.0 / alpha, 1.0 / (1.0 - alpha)])


def lpp_characteristic_alpha(xi: Sequence[float]) -> float:
    """α minimising ξ1/α + ξ2/(1−α)."""
    a, b = math.sqrt(xi[0]), math.sqrt(xi[1])
    return a / (a + b)


def stationary_lpp_geodesic(alpha: float, n_steps: int, seed: int, size: int | None = None) -> np.ndarray:
    """Geodesic from the origin following argmin_z (B + V) for the stationary cocycle.

    Equivalent to stepping through ``stationary_lpp_cocycle`` but only one
    decision bit per site is kept, so boxes of side 10^4 fit in memory.
    Raises LeftCocycleDomain when the path reaches the box boundary first.
    """
    from .errors import LeftCocycleDomain

    if not 0 < alpha < 1:
        raise AlphaOutOfRange(f"α={alpha} must lie in (0,1)")
    if size is None:
        # the characteristic direction plus room for n^{2/3} transversal wandering
        lead = max(1 / alpha**2, 1 / (1 - alpha) ** 2) / (1 / alpha**2 + 1 / (1 - alpha) ** 2)
        size = int(lead * n_steps + 3 * n_steps ** (2 / 3)) + 2
    n = size
    env = lpp_environment(seed)
    top, right = _lpp_boundary(alpha, n, n, seed)
    decisions: dict[int, np.ndarray] = {}

    def on_diag(d, sites, up, rt):
        if d <= n_steps:
            # e1 attains min(B+V) when I_up <= J_right
            decisions[d] = up <= rt

    def bulk(sites):
        return -env.values_all(sites)[:, 0]

    _ne_sweep(n, n, top, right, _lpp_cell, bulk, store=False, on_diag=on_diag)
    path = np.zeros((n_steps + 1, 2), dtype=np.int64)
    x = np.zeros(2, dtype=np.int64)
    for s in range(n_steps):
        d = int(x.sum())
        if x[0] >= n - 1 or x[1] >= n - 1:
            raise LeftCocycleDomain(f"geodesic reached the box edge at step {s}")
        lo = max(0, d - n + 1)
        go_e1 = bool(decisions[d][x[0] - lo])
        x = x + (np.array([1, 0]) if go_e1 else np.array([0, 1]))
        path[s + 1] = x
    return path


def loggamma_mean_vector(mu: float, theta: float) -> np.ndarray:
    """m(B) for the stationary log-gamma cocycle with p = (½,½)."""
    return np.array([-special.digamma(mu - theta) - math.log(2.0), -special.digamma(theta) - math.log(2.0)])


def loggamma_characteristic_theta(mu: float, xi: Sequence[float]) -> float:
    """θ solving ξ1 ψ1(μ−θ) = ξ2 ψ1(θ): the tilt dual to direction ξ."""
    from scipy.optimize import brentq

    def f(th):
        return xi[0] * special.polygamma(1, mu - th) - xi[1] * special.polygamma(1, th)

    return float(brentq(f, 1e-12, mu - 1e-12))


def loggamma_shape(mu: float, xi: Sequence[float]) -> float:
    """Λ(ξ) = inf_θ [−ξ1 ψ0(μ−θ) − ξ2 ψ0(θ)] − (ξ1+ξ2) log 2 for the p=(½,½) polymer."""
    xi = np.asarray(xi, dtype=float)
    s = float(xi.sum())
    if xi[0] == 0 or xi[1] == 0:
        # a straight path: each step contributes E[log Y] − log 2
        return float(s * (-special.digamma(mu) - math.log(2.0)))
    th = loggamma_characteristic_theta(mu, xi)
    return float(-xi[0] * special.digamma(mu - th) - xi[1] * special.digamma(th) - s * math.log(2.0))


def _loggamma_cell(w, up, rt):
    # w = log Y with Y the inverse-gamma weight; up, rt are log standard ratios
    return w + np.logaddexp(0.0, up - rt), w + np.logaddexp(0.0, rt - up)


def stationary_loggamma_cocycle(
    mu: float, quadrant_size: int | tuple[int, int], seed: int, beta: float = 1.0, theta: float | None = None
) -> tuple[Cocycle, Environment]:
    """Exact 1-recovering cocycle for the log-gamma polymer with p = (½,½).

    Standard ratios satisfy U = Y(1 + U'/V'), V = Y(1 + V'/U') with U' the
    horizontal ratio above and V' the vertical ratio to the right; the
    cocycle is B = log(ratio) − log 2.
    """
    if not mu > 0:
        raise ParamOutOfRange(f"μ={mu} must be positive")
    if beta != 1.0:
        raise ParamOutOfRange("the log-gamma oracle is exact at β = 1 only")
    theta = mu / 2.0 if theta is None else float(theta)
    if not 0 < theta < mu:
        raise ParamOutOfRange(f"θ={theta} must lie in (0, μ)")
    n1, n2 = (quadrant_size, quadrant_size) if np.isscalar(quadrant_size) else quadrant_size
    env = loggamma_environment(mu, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x106A])))
    # log of inverse-gamma(a) = −log Gamma(a)
    top = -np.log(rng.gamma(mu - theta, 1.0, size=n1))
    right = -np.log(rng.gamma(theta, 1.0, size=n2))

    def bulk(sites):
        return -env.values_all(sites)[:, 0]

    H, Vv = _ne_sweep(n1, n2, top, right, _loggamma_cell, bulk)
    inc = np.stack([H, Vv]) - math.log(2.0)
    ss = lpp_step_set()
    coc = Cocycle(
        ss.array.copy(),
        ss.prob_array.copy(),
        np.zeros(2, dtype=np.int64),
        inc,
        "stationary_loggamma",
        {"mu": mu, "theta": theta, "beta": beta, "seed": seed},
        meta={"top": top - math.log(2.0), "right": right - math.log(2.0), "mean": loggamma_mean_vector(mu, theta)},
    )
    return coc, env


def staircase_increments(coc: Cocycle, corner: Sequence[int], length: int) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical increments along a down-right staircase from ``corner``.

    The staircase alternates e1 and −e2 moves; along it the increments of a
    stationary cocycle are independent with the boundary laws.
    """
    x = np.asarray(corner, dtype=np.int64).copy()
    hs, vs = [], []
    for _ in range(length):
        hs.append(float(coc.increment(x[None, :], 0)[0]))
        x = x + np.array([1, 0])
        x = x - np.array([0, 1])
        vs.append(float(coc.increment(x[None, :], 1)[0]))
    return np.array(hs), np.array(vs)


# ---------------------------------------------------------------------------
# trap cocycle
# ---------------------------------------------------------------------------


def trap_environment(step_set: StepSet, loop: Sequence[Sequence[int]], default: float = 1.0, extra: dict | None = None) -> Environment:
    """Table environment with V = 0 along the closed loop of sites and ``default`` elsewhere."""
    pts = [tuple(int(c) for c in p) for p in loop]
    table = {}
    for a, b in zip(pts, pts[1:] + pts[:1]):
        z = tuple(bb - aa for aa, bb in zip(a, b))
        step_set.index(z)
        table[(a, z)] = 0.0
    if extra:
        table.update({(tuple(x), tuple(z)): float(v) for (x, z), v in extra.items()})
    return table_environment(step_set, table, default)


def _zero_loop_through_origin(env: Environment, face: Face, origin, box) -> bool:
    region = box_region(*box)
    nbr = region.neighbours(face.steps)
    V = env.values_all(region.sites)[:, list(face.member_indices)]
    zero = (V == 0) & (nbr >= 0)
    o = region.index(origin)
    seen = set()
    stack = [int(nbr[o, k]) for k in np.flatnonzero(zero[o])]
    while stack:
        u = stack.pop()
        if u == o:
            return True
        if u in seen:
            continue
        seen.add(u)
        stack.extend(int(nbr[u, k]) for k in np.flatnonzero(zero[u]))
    return False


def trap_cocycle(env: Environment, face: Face | None, box, origin=None) -> Cocycle:
    """B(x,y) = F^∞_{x,0} − F^∞_{y,0}: an ∞-recovering cocycle pinned to a zero loop."""
    face = face or full_face(env.step_set)
    dim = env.step_set.dim
    origin = np.zeros(dim, dtype=np.int64) if origin is None else np.asarray(origin, dtype=np.int64)
    region = box_region(*box)
    nbr = region.neighbours(face.steps)
    V = env.values_all(region.sites)[:, list(face.member_indices)]
    if np.any(V < 0):
        raise NegativePotential("the trap construction needs V >= 0")
    if not _zero_loop_through_origin(env, face, origin, box):
        raise NoZeroLoop("no zero-potential loop passes through the origin")
    S, k = nbr.shape
    rows = np.repeat(np.arange(S), k)
    cols = nbr.ravel()
    mask = cols >= 0
    # distances to the origin: run Dijkstra on reversed edges
    g = sparse.csr_matrix((V.ravel()[mask] + 1e-300, (cols[mask], rows[mask])), shape=(S, S))
    dist = csgraph.dijkstra(g, directed=True, indices=region.index(origin))
    dist = np.where(np.abs(dist) < 1e-200, 0.0, dist)
    # F^∞_{x,0} = −dist(x); B(x,x+z) = dist(x+z) − dist(x)
    lo = np.asarray(box[0], dtype=np.int64)
    shape = tuple(np.asarray(box[1]) - lo + 1)
    inc = np.full((k, *shape), np.nan)
    rel = region.sites - lo
    for j in range(k):
        nb = nbr[:, j]
        vals = np.where(nb >= 0, dist[np.maximum(nb, 0)] - dist, np.nan)
        inc[(j, *rel.T)] = vals
    # drop exits of the box: their increment would need distances outside it
    return Cocycle(face.steps.copy(), face.probs.copy(), lo, inc, "trap", {"origin": tuple(origin)}, trap=True)
