"""Step-set geometry, lattice reachability and seeded random environments.

The geometric routines (origin classification, faces of the step cone,
face lookup) run in exact rational arithmetic.  Environments are defined on
all of Z^d through a counter-based hash keyed by the master seed, the site
coordinates and the step, so any site can be evaluated in any order and a
re-rooted environment is obtained by shifting the key coordinates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import sympy
from scipy import special

from .errors import (
    BudgetExceeded,
    DimUnsupported,
    DirectionOutsideCone,
    DuplicateStep,
    LevelBelowAnchor,
    ProbsNotNormalized,
    RwrpError,
    StepNotInR,
    TooFewSteps,
    WidthTooSmall,
)

MAX_DIM = 4
PROB_TOL = 1e-12
LAYER_BUDGET = 2_000_000

DIRECTED = "directed"
ON_BOUNDARY = "origin_on_boundary"
IN_RELINT = "origin_in_relint"


# ---------------------------------------------------------------------------
# step sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSet:
    """Admissible steps R with reference kernel p."""

    dim: int
    steps: tuple[tuple[int, ...], ...]
    probs: tuple[float, ...]

    @property
    def array(self) -> np.ndarray:
        return np.array(self.steps, dtype=np.int64).reshape(len(self.steps), self.dim)

    @property
    def prob_array(self) -> np.ndarray:
        return np.array(self.probs, dtype=float)

    def __len__(self) -> int:
        return len(self.steps)

    def index(self, z: Sequence[int]) -> int:
        key = tuple(int(c) for c in z)
        try:
            return self.steps.index(key)
        except ValueError:
            raise StepNotInR(f"step {key} is not in R = {self.steps}") from None

    def to_text(self) -> str:
        return "\n".join(_step_set_lines(self)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StepSet":
        kv = _parse_kv(text)
        return _step_set_from_kv(kv)


def make_step_set(dim: int, steps: Iterable[Sequence[int]], probs: Sequence[float] | None = None) -> StepSet:
    """Validate and build a step set.  ``probs=None`` means the uniform kernel."""
    if dim < 1 or dim > MAX_DIM:
        raise DimUnsupported(f"dimension {dim} outside 1..{MAX_DIM}")
    steps_t = tuple(tuple(int(c) for c in z) for z in steps)
    for z in steps_t:
        if len(z) != dim:
            raise ValueError(f"step {z} does not have dimension {dim}")
    if len(steps_t) < 2:
        raise TooFewSteps(f"need at least two steps, got {len(steps_t)}")
    if len(set(steps_t)) != len(steps_t):
        raise DuplicateStep(f"repeated step in {steps_t}")
    if probs is None:
        probs_t = tuple(1.0 / len(steps_t) for _ in steps_t)
    else:
        probs_t = tuple(float(q) for q in probs)
    if len(probs_t) != len(steps_t):
        raise ValueError("probs and steps differ in length")
    if any(not (q > 0.0) for q in probs_t) or abs(math.fsum(probs_t) - 1.0) > PROB_TOL:
        raise ProbsNotNormalized(f"probs {probs_t} must be positive and sum to 1")
    return StepSet(dim, steps_t, probs_t)


def _step_set_lines(ss: StepSet) -> list[str]:
    return [
        f"dim = {ss.dim}",
        "steps = " + "; ".join(" ".join(str(c) for c in z) for z in ss.steps),
        "probs = " + "; ".join(repr(q) for q in ss.probs),
    ]


def _step_set_from_kv(kv: Mapping[str, str]) -> StepSet:
    dim = int(kv["dim"])
    steps = [tuple(int(c) for c in chunk.split()) for chunk in kv["steps"].split(";")]
    probs = [float(q) for q in kv["probs"].split(";")]
    return make_step_set(dim, steps, probs)


def _parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line: {raw!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# exact cone geometry
# ---------------------------------------------------------------------------


def _rank(vectors: Sequence[Sequence[int]]) -> int:
    if len(vectors) == 0:
        return 0
    return sympy.Matrix([list(v) for v in vectors]).rank()


def _basis(vectors: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    basis: list[tuple[int, ...]] = []
    for v in vectors:
        if any(v) and _rank(basis + [tuple(v)]) > len(basis):
            basis.append(tuple(v))
    return basis


def _primitive(vec: Sequence) -> tuple[int, ...]:
    fr = [Fraction(int(sympy.Rational(c).p), int(sympy.Rational(c).q)) for c in vec]
    den = 1
    for c in fr:
        den = den * c.denominator // math.gcd(den, c.denominator)
    ints = [int(c * den) for c in fr]
    g = 0
    for c in ints:
        g = math.gcd(g, abs(c))
    return tuple(c // g for c in ints) if g else tuple(ints)


def _dot(u: Sequence, v: Sequence):
    return sum(a * b for a, b in zip(u, v))


def _span_coords(vectors: Sequence[Sequence[int]]):
    """Integer coordinates z' = B z of each vector, B the rows of a span basis."""
    basis = _basis(vectors)
    coords = [tuple(_dot(b, v) for b in basis) for v in vectors]
    return basis, coords


def _lift(c: Sequence, basis: Sequence[Sequence[int]], dim: int) -> tuple[int, ...]:
    u = [sympy.Integer(0)] * dim
    for ci, b in zip(c, basis):
        for j in range(dim):
            u[j] += ci * b[j]
    return _primitive(u)


def _supporting_normals(coords: Sequence[Sequence[int]], k: int) -> list[tuple]:
    """Functionals c on R^k with c.z' <= 0 for all z' and c.z' < 0 for some z'.

    Candidates are the one-dimensional null spaces of subsets of size k - 1,
    which is where every facet normal lives.
    """
    if k == 0:
        return []
    if k == 1:
        candidates = [(sympy.Integer(1),), (sympy.Integer(-1),)]
    else:
        candidates = []
        seen = set()
        for subset in itertools.combinations(range(len(coords)), k - 1):
            rows = [list(coords[i]) for i in subset]
            ns = sympy.Matrix(rows).nullspace()
            if len(ns) != 1:
                continue
            c = tuple(ns[0])
            for sgn in (1, -1):
                cand = tuple(sgn * ci for ci in c)
                key = _primitive(cand)
                if key not in seen:
                    seen.add(key)
                    candidates.append(tuple(sympy.Integer(x) for x in key))
    out = []
    for c in candidates:
        vals = [_dot(c, zp) for zp in coords]
        if all(v <= 0 for v in vals) and any(v < 0 for v in vals):
            out.append(c)
    return out


def _positivity_certificate(vectors: Sequence[Sequence[int]], dim: int) -> tuple[int, ...] | None:
    """A u with u.z >= 1 for every vector, or None when 0 lies in the convex hull."""
    if any(not any(v) for v in vectors):
        return None
    basis, coords = _span_coords(vectors)
    k = len(basis)
    for subset in itertools.combinations(range(len(coords)), k):
        mat = sympy.Matrix([list(coords[i]) for i in subset])
        if mat.rank() < k:
            continue
        c = mat.LUsolve(sympy.Matrix([1] * k))
        if all(_dot(c, zp) >= 1 for zp in coords):
            u = _lift(list(c), basis, dim)
            return u
    return None


def _origin_class_of(vectors: Sequence[Sequence[int]], dim: int) -> tuple[str, tuple[int, ...] | None]:
    cert = _positivity_certificate(vectors, dim)
    if cert is not None:
        return DIRECTED, cert
    basis, coords = _span_coords(vectors)
    if _supporting_normals(coords, len(basis)):
        return ON_BOUNDARY, None
    return IN_RELINT, None


def classify_origin(step_set: StepSet) -> str:
    """Position of the origin relative to conv(R): directed, boundary or relative interior."""
    return _origin_class_of(step_set.steps, step_set.dim)[0]


def positivity_certificate(step_set: StepSet) -> tuple[int, ...] | None:
    """Integer u with u.z > 0 for every step, when one exists."""
    return _positivity_certificate(step_set.steps, step_set.dim)


@dataclass(frozen=True)
class Face:
    """A face A of cone(R) described by the steps R_A = R ∩ A."""

    step_set: StepSet
    member_indices: tuple[int, ...]
    normal_certificate: tuple[int, ...] | None
    span_dim: int
    origin_class: str
    positivity_certificate: tuple[int, ...] | None = None

    @property
    def steps(self) -> np.ndarray:
        return self.step_set.array[list(self.member_indices)]

    @property
    def probs(self) -> np.ndarray:
        return self.step_set.prob_array[list(self.member_indices)]

    @property
    def member_steps(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.step_set.steps[i] for i in self.member_indices)

    @property
    def is_full(self) -> bool:
        return self.normal_certificate is None

    def verify_certificate(self) -> bool:
        if self.normal_certificate is None:
            return True
        u = self.normal_certificate
        for i, z in enumerate(self.step_set.steps):
            val = _dot(u, z)
            if i in self.member_indices and val != 0:
                return False
            if i not in self.member_indices and not val < 0:
                return False
        return True


def _make_face(ss: StepSet, members: Sequence[int], cert) -> Face:
    vecs = [ss.steps[i] for i in members]
    oc, pos = _origin_class_of(vecs, ss.dim)
    return Face(
        step_set=ss,
        member_indices=tuple(sorted(members)),
        normal_certificate=cert,
        span_dim=_rank(vecs),
        origin_class=oc,
        positivity_certificate=pos,
    )


def full_face(step_set: StepSet) -> Face:
    return _make_face(step_set, range(len(step_set)), None)


def enumerate_faces(step_set: StepSet) -> list[Face]:
    """All faces of cone(R) with R_A not in {∅, {0}}; the full cone comes first."""
    ss = step_set
    basis, coords = _span_coords(ss.steps)
    k = len(basis)
    zero_sets: dict[frozenset, tuple] = {}
    for c in _supporting_normals(coords, k):
        zs = frozenset(i for i, zp in enumerate(coords) if _dot(c, zp) == 0)
        zero_sets.setdefault(zs, c)
    # faces are closed under intersection; certificates add up
    changed = True
    while changed:
        changed = False
        items = list(zero_sets.items())
        for (s1, c1), (s2, c2) in itertools.combinations(items, 2):
            s = s1 & s2
            if s not in zero_sets:
                zero_sets[s] = tuple(a + b for a, b in zip(c1, c2))
                changed = True
    faces = [full_face(ss)]
    full = frozenset(range(len(ss)))
    ordered = sorted(zero_sets.items(), key=lambda kv: (-len(kv[0]), sorted(kv[0])))
    for members, c in ordered:
        if members == full:
            continue
        if all(not any(ss.steps[i]) for i in members):
            continue  # empty or {0}
        faces.append(_make_face(ss, sorted(members), _lift(c, basis, ss.dim)))
    return faces


def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(float(x))


def face_of_direction(faces: Sequence[Face], xi: Sequence) -> Face:
    """The face whose relative interior contains ξ.

    ξ lies in cone(R) exactly when it lies in span(R) and every supporting
    certificate is non-positive on it; the minimal face with u.ξ = 0 is the
    one with ξ in its relative interior, i.e. ξ is a strictly positive
    combination of its steps.
    """
    if not faces:
        raise DirectionOutsideCone("no faces supplied")
    ss = faces[0].step_set
    xf = [_to_fraction(c) for c in xi]
    if len(xf) != ss.dim:
        raise ValueError("direction has the wrong dimension")
    xs = [sympy.Rational(c.numerator, c.denominator) for c in xf]
    if _rank(list(ss.steps) + [xs]) > _rank(ss.steps):
        raise DirectionOutsideCone(f"{xi} is not in span(R)")
    containing = []
    for f in faces:
        if f.normal_certificate is None:
            containing.append(f)
            continue
        val = _dot(f.normal_certificate, xf)
        if val > 0:
            raise DirectionOutsideCone(f"{xi} violates the certificate of face {f.member_indices}")
        if val == 0:
            containing.append(f)
    if not any(xf):
        containing = [f for f in containing if f.origin_class == IN_RELINT]
        if not containing:
            raise DirectionOutsideCone("the zero direction is not interior to any face")
    best = min(containing, key=lambda f: len(f.member_indices))
    return best


def cone_normals(face: Face) -> list[tuple[int, ...]]:
    """Integer normals u with u.z <= 0 on R_A, cutting out cone(R_A) inside its span."""
    basis, coords = _span_coords(face.member_steps)
    return [_lift(c, basis, face.step_set.dim) for c in _supporting_normals(coords, len(basis))]


# ---------------------------------------------------------------------------
# reachability and slabs
# ---------------------------------------------------------------------------


def _unique_rows(a: np.ndarray) -> np.ndarray:
    if len(a) == 0:
        return a
    return np.unique(a, axis=0)


def reachability(
    step_set: StepSet,
    face: Face | None,
    x: Sequence[int],
    y: Sequence[int],
    max_steps: int,
    box: tuple[Sequence[int], Sequence[int]] | None = None,
) -> set[int]:
    """All n <= max_steps with y - x in D_n(R_A), by forward dynamic programming.

    Directed faces are pruned to the sites that can still reach y.  For other
    faces each layer is confined to ``box`` (inclusive corners) when given, and
    a layer larger than the budget raises BudgetExceeded.
    """
    face = face if face is not None else full_face(step_set)
    steps = face.steps
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    directed = face.origin_class == DIRECTED
    if directed and max_steps > 10_000:
        raise BudgetExceeded("directed reachability is limited to 10^4 steps")
    normals = np.array(cone_normals(face), dtype=np.int64).reshape(-1, step_set.dim)
    u = np.array(face.positivity_certificate, dtype=np.int64) if directed else None
    lo = hi = None
    if box is not None:
        lo = np.asarray(box[0], dtype=np.int64)
        hi = np.asarray(box[1], dtype=np.int64)
    frontier = x[None, :]
    out: set[int] = set()
    for n in range(max_steps + 1):
        if np.any(np.all(frontier == y, axis=1)):
            out.add(n)
        if n == max_steps:
            break
        nxt = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, step_set.dim)
        if directed:
            nxt = nxt[(nxt @ u) <= int(y @ u)]
            if len(normals):
                nxt = nxt[np.all((y - nxt) @ normals.T <= 0, axis=1)]
        if lo is not None:
            nxt = nxt[np.all((nxt >= lo) & (nxt <= hi), axis=1)]
        frontier = _unique_rows(nxt)
        if len(frontier) == 0:
            break
        if len(frontier) > LAYER_BUDGET:
            raise BudgetExceeded(f"layer {n + 1} has {len(frontier)} sites")
    return out


def slab_sites(
    step_set: StepSet,
    face: Face | None,
    uhat: Sequence[float],
    x: Sequence[int],
    t: float,
    width: float,
    horizon: int | None = None,
) -> np.ndarray:
    """Sites v reachable from x with t <= v.û < t + width, sorted lexicographically.

    Directed faces are explored exactly (levels strictly increase along a
    path); otherwise the search is confined to the l-infinity box of radius
    ``horizon`` around x.
    """
    face = face if face is not None else full_face(step_set)
    steps = face.steps
    uh = np.asarray(uhat, dtype=float)
    x = np.asarray(x, dtype=np.int64)
    heights = np.abs(steps @ uh)
    if not width > 0 or width < heights.max():
        raise WidthTooSmall(f"width {width} is below the largest step height {heights.max()}")
    if t <= float(x @ uh):
        raise LevelBelowAnchor(f"level {t} is not above the anchor height {float(x @ uh)}")
    directed = face.origin_class == DIRECTED
    if not directed and horizon is None:
        raise BudgetExceeded("a horizon is required when the face is not directed")
    seen = {tuple(x)}
    frontier = x[None, :]
    found = []
    n = 0
    while len(frontier):
        lv = frontier @ uh
        keep = (lv >= t) & (lv < t + width)
        found.extend(map(tuple, frontier[keep]))
        if horizon is not None and directed and n >= horizon:
            break
        nxt = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, step_set.dim)
        if directed:
            nxt = nxt[(nxt @ uh) < t + width]
        else:
            nxt = nxt[np.all(np.abs(nxt - x) <= horizon, axis=1)]
        nxt = _unique_rows(nxt)
        fresh = [tuple(v) for v in nxt if tuple(v) not in seen]
        seen.update(fresh)
        frontier = np.array(fresh, dtype=np.int64).reshape(-1, step_set.dim)
        n += 1
    if not found:
        return np.zeros((0, step_set.dim), dtype=np.int64)
    return _unique_rows(np.array(found, dtype=np.int64))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SiteWindow:
    """A finite set of sites: an inclusive box or an explicit list."""

    anchor: tuple[int, ...]
    lower: tuple[int, ...] | None = None
    upper: tuple[int, ...] | None = None
    explicit: tuple[tuple[int, ...], ...] | None = None

    @classmethod
    def box(cls, lower: Sequence[int], upper: Sequence[int], anchor: Sequence[int] | None = None) -> "SiteWindow":
        lower_t = tuple(int(c) for c in lower)
        upper_t = tuple(int(c) for c in upper)
        return cls(tuple(anchor) if anchor is not None else lower_t, lower_t, upper_t)

    @classmethod
    def from_sites(cls, sites: Iterable[Sequence[int]], anchor: Sequence[int] | None = None) -> "SiteWindow":
        pts = tuple(tuple(int(c) for c in s) for s in sites)
        if not pts:
            raise ValueError("empty window")
        return cls(tuple(anchor) if anchor is not None else pts[0], explicit=pts)

    def sites(self) -> np.ndarray:
        if self.explicit is not None:
            return np.array(self.explicit, dtype=np.int64)
        ranges = [np.arange(a, b + 1) for a, b in zip(self.lower, self.upper)]
        grid = np.meshgrid(*ranges, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)

    def contains(self, x: Sequence[int]) -> bool:
        if self.explicit is not None:
            return tuple(int(c) for c in x) in set(self.explicit)
        return all(a <= c <= b for a, c, b in zip(self.lower, x, self.upper))


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_TAGS = {"vertex_iid": 1, "directed_edge_iid": 2, "undirected_edge_iid": 3, "rwre": 4}
KINDS = ("vertex_iid", "directed_edge_iid", "undirected_edge_iid", "rwre", "table")


def _mix64(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(30))
    h = h * _M1
    h = h ^ (h >> np.uint64(27))
    h = h * _M2
    return h ^ (h >> np.uint64(31))


def _hash_uniform(keys: tuple[np.uint64, np.uint64], cols: Sequence[np.ndarray]) -> np.ndarray:
    """Counter-based uniforms in (0, 1): one independent value per key row."""
    k0, k1 = keys
    n = len(cols[0])
    with np.errstate(over="ignore"):
        h = np.full(n, k0, dtype=np.uint64)
        for i, c in enumerate(cols):
            cu = np.ascontiguousarray(c, dtype=np.int64).view(np.uint64)
            h = _mix64(h ^ _mix64(cu + k1 + _GOLD * np.uint64(i + 1)))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class Marginal:
    """One-dimensional law of the raw draws, sampled by inverse transform."""

    name: str
    params: tuple[float, ...] = ()

    def transform(self, u: np.ndarray) -> np.ndarray:
        p = self.params
        if self.name == "constant":
            return np.full(u.shape, p[0])
        if self.name == "uniform":
            return p[0] + (p[1] - p[0]) * u
        if self.name == "exponential":
            return -np.log(u) / p[0]
        if self.name == "gamma":
            return p[1] * special.gammaincinv(p[0], u)
        if self.name == "log_gamma":
            return np.log(p[1] * special.gammaincinv(p[0], u))
        if self.name == "bernoulli_mix":
            return np.where(u < p[0], p[2], p[1])
        raise ValueError(f"unknown marginal {self.name!r}")

    def mean(self) -> float:
        p = self.params
        if self.name == "constant":
            return p[0]
        if self.name == "uniform":
            return 0.5 * (p[0] + p[1])
        if self.name == "exponential":
            return 1.0 / p[0]
        if self.name == "gamma":
            return p[0] * p[1]
        if self.name == "log_gamma":
            return float(special.digamma(p[0]) + math.log(p[1]))
        if self.name == "bernoulli_mix":
            return (1 - p[0]) * p[1] + p[0] * p[2]
        raise ValueError(f"unknown marginal {self.name!r}")


_MARGINAL_ARITY = {"constant": 1, "uniform": 2, "exponential": 1, "gamma": 2, "log_gamma": 2, "bernoulli_mix": 3}


def constant(c: float) -> Marginal:
    return Marginal("constant", (float(c),))


def uniform(a: float, b: float) -> Marginal:
    return Marginal("uniform", (float(a), float(b)))


def exponential(rate: float = 1.0) -> Marginal:
    return Marginal("exponential", (float(rate),))


def gamma(shape: float, scale: float = 1.0) -> Marginal:
    return Marginal("gamma", (float(shape), float(scale)))


def log_gamma(shape: float, scale: float = 1.0) -> Marginal:
    return Marginal("log_gamma", (float(shape), float(scale)))


def bernoulli_mix(p: float, v0: float, v1: float) -> Marginal:
    return Marginal("bernoulli_mix", (float(p), float(v0), float(v1)))


@dataclass(frozen=True, eq=False)
class Environment:
    """Seeded potential V(T_x ω, z) on all of Z^d.

    Draws are ``sign * marginal + sign_shift``.  ``offset`` re-roots the
    environment: the re-rooted potential at x is the original one at
    x + offset.
    """

    kind: str
    step_set: StepSet
    master_seed: int = 0
    marginal: Marginal = field(default_factory=lambda: constant(0.0))
    sign_shift: float = 0.0
    sign: float = 1.0
    table: Mapping[tuple[tuple[int, ...], tuple[int, ...]], float] | None = None
    table_default: float | None = None
    offset: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.offset is None:
            object.__setattr__(self, "offset", (0,) * self.step_set.dim)
        if self.kind == "table" and self.table is None:
            object.__setattr__(self, "table", {})
        seq = np.random.SeedSequence(int(self.master_seed) & ((1 << 64) - 1))
        k = seq.generate_state(2, dtype=np.uint64)
        object.__setattr__(self, "_keys", (np.uint64(k[0]), np.uint64(k[1])))

    @property
    def dim(self) -> int:
        return self.step_set.dim

    def rerooted(self, v: Sequence[int]) -> "Environment":
        new_off = tuple(int(a) + int(b) for a, b in zip(self.offset, v))
        return replace(self, offset=new_off)

    def _draws(self, tag: int, cols: Sequence[np.ndarray]) -> np.ndarray:
        tagcol = np.full(len(cols[0]), tag, dtype=np.int64)
        u = _hash_uniform(self._keys, [tagcol, *cols])
        return self.sign * self.marginal.transform(u) + self.sign_shift

    def values(self, sites: np.ndarray, z: Sequence[int]) -> np.ndarray:
        """V(x, z) for every row x of ``sites``."""
        k = self.step_set.index(z)
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, self.dim)
        if self.kind == "rwre":
            return self.values_all(sites)[:, k]
        return self._values_k(sites, k)

    def _values_k(self, sites: np.ndarray, k: int) -> np.ndarray:
        absx = sites + np.asarray(self.offset, dtype=np.int64)
        cols = [absx[:, j] for j in range(self.dim)]
        n = len(sites)
        if self.kind == "vertex_iid":
            return self._draws(1, cols)
        if self.kind == "directed_edge_iid":
            return self._draws(2, cols + [np.full(n, k, dtype=np.int64)])
        if self.kind == "undirected_edge_iid":
            z = np.asarray(self.step_set.steps[k], dtype=np.int64)
            nz = np.flatnonzero(z)
            positive = z[nz[0]] > 0
            w = z if positive else -z
            a = absx if positive else absx + z
            return self._draws(3, [a[:, j] for j in range(self.dim)] + [np.full(n, int(c), dtype=np.int64) for c in w])
        if self.kind == "table":
            out = np.empty(n)
            zt = self.step_set.steps[k]
            for i, row in enumerate(absx):
                key = (tuple(int(c) for c in row), zt)
                if key in self.table:
                    out[i] = self.table[key]
                elif self.table_default is not None:
                    out[i] = self.table_default
                else:
                    raise RwrpError(f"table environment has no entry for {key}")
            return out
        raise AssertionError(self.kind)

    def values_all(self, sites: np.ndarray) -> np.ndarray:
        """Matrix of V(x, z) with one column per step of the step set."""
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, self.dim)
        nst = len(self.step_set)
        if self.kind == "rwre":
            absx = sites + np.asarray(self.offset, dtype=np.int64)
            cols = [absx[:, j] for j in range(self.dim)]
            w = np.stack(
                [self._draws(4, cols + [np.full(len(sites), k, dtype=np.int64)]) for k in range(nst)], axis=1
            )
            if np.any(w <= 0):
                raise RwrpError("rwre draws must be positive")
            pi = w / w.sum(axis=1, keepdims=True)
            return -np.log(pi) + np.log(self.step_set.prob_array)[None, :]
        if self.kind == "vertex_iid":
            v = self._values_k(sites, 0)
            return np.repeat(v[:, None], nst, axis=1)
        return np.stack([self._values_k(sites, k) for k in range(nst)], axis=1)

    def to_text(self) -> str:
        lines = [f"kind = {self.kind}", f"seed = {int(self.master_seed)}"]
        lines += _step_set_lines(self.step_set)
        lines += [
            f"marginal = {self.marginal.name}",
            "marginal.params = " + "; ".join(repr(p) for p in self.marginal.params),
            f"sign = {self.sign!r}",
            f"sign_shift = {self.sign_shift!r}",
            "offset = " + " ".join(str(c) for c in self.offset),
            "table_default = " + ("none" if self.table_default is None else repr(self.table_default)),
        ]
        if self.kind == "table":
            for (xs, zs), val in sorted(self.table.items()):
                key = " ".join(map(str, xs)) + " | " + " ".join(map(str, zs))
                lines.append(f"table[{key}] = {val!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Environment":
        kv = _parse_kv(text)
        ss = _step_set_from_kv(kv)
        name = kv["marginal"]
        params = tuple(float(p) for p in kv["marginal.params"].split(";")) if kv["marginal.params"] else ()
        if _MARGINAL_ARITY.get(name) != len(params):
            raise ValueError(f"marginal {name!r} takes {_MARGINAL_ARITY.get(name)} parameters")
        table = {}
        for key, val in kv.items():
            if key.startswith("table[") and key.endswith("]"):
                xs, _, zs = key[6:-1].partition("|")
                table[(tuple(int(c) for c in xs.split()), tuple(int(c) for c in zs.split()))] = float(val)
        td = kv.get("table_default", "none")
        return cls(
            kind=kv["kind"],
            step_set=ss,
            master_seed=int(kv["seed"]),
            marginal=Marginal(name, params),
            sign_shift=float(kv["sign_shift"]),
            sign=float(kv.get("sign", "1.0")),
            table=table if kv["kind"] == "table" else None,
            table_default=None if td == "none" else float(td),
            offset=tuple(int(c) for c in kv["offset"].split()),
        )


def make_environment(kind: str, step_set: StepSet, seed: int = 0, marginal: Marginal | None = None, **kw) -> Environment:
    return Environment(kind=kind, step_set=step_set, master_seed=seed, marginal=marginal or constant(0.0), **kw)


def table_environment(step_set: StepSet, table: Mapping, default: float | None = None) -> Environment:
    clean = {(tuple(int(c) for c in x), tuple(int(c) for c in z)): float(v) for (x, z), v in table.items()}
    return Environment(kind="table", step_set=step_set, table=clean, table_default=default)


def potential(env: Environment, x: Sequence[int], z: Sequence[int]) -> float:
    """V(T_x ω, z) for a single site and step."""
    return float(env.values(np.asarray([x], dtype=np.int64), z)[0])
