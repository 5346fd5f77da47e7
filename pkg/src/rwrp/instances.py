"""Small fixed instances shared by the harness, the tests and the acceptance run."""

from __future__ import annotations

import math

import numpy as np

from .busemann import Cocycle, approx_busemann, field_cocycle, make_tilt_spec, user_cocycle
from .lattice import Environment, SiteWindow, StepSet, exponential, full_face, make_environment, make_step_set, table_environment

# vertex potentials V(x, ·) on the sites (i, j), 0 <= i, j <= 4
BUNDLED_5X5 = (
    (0.2901, 0.4662, 2.9684, 1.1930, 1.4242),
    (0.5054, 1.9503, 1.3969, 1.6347, 1.0331),
    (0.9920, 0.7765, 0.0927, 1.0619, 1.0341),
    (0.8382, 2.0019, 3.4334, 1.2574, 0.8966),
    (1.4145, 1.2287, 0.5867, 0.4694, 0.9963),
)
BUNDLED_DEFAULT = 1.0


def bundled_directed_instance() -> tuple[StepSet, Environment]:
    """R = {e1, e2} with p = (½,½); the 5×5 table above and V = 1 elsewhere."""
    ss = make_step_set(2, [(1, 0), (0, 1)], (0.5, 0.5))
    table = {}
    for i, row in enumerate(BUNDLED_5X5):
        for j, v in enumerate(row):
            for z in ss.steps:
                table[((i, j), z)] = v
    return ss, table_environment(ss, table, BUNDLED_DEFAULT)


def bundled_directed_cocycle(beta: float = 1.0, m=(-0.5, -0.5), window: int = 6, seed: int = 0) -> tuple[Cocycle, Environment]:
    """Prelimit cocycle on the window [0, window]^2 of the bundled instance."""
    ss, env = bundled_directed_instance()
    spec = make_tilt_spec(full_face(ss), beta, (0.5, 0.5), m)
    win = SiteWindow.box((0, 0), (window, window))
    t = 2 * window + 3 * spec.slab_width + 1.0
    return field_cocycle(approx_busemann(env, spec, win, t)), env


def loop_box_instance(seed: int = 3, size: int = 10, shift: float = 0.2) -> tuple[StepSet, Environment, tuple]:
    """Nearest-neighbour walk on Z^2 with undirected edge weights Exp(1) + shift."""
    ss = make_step_set(2, [(1, 0), (-1, 0), (0, 1), (0, -1)])
    env = make_environment("undirected_edge_iid", ss, seed, exponential(1.0), sign_shift=shift)
    return ss, env, ((0, 0), (size, size))


def loop_box_cocycle(beta: float = 1.0, seed: int = 3, size: int = 10, lam: float = -1.2) -> tuple[Cocycle, Environment, tuple]:
    """Prelimit cocycle of the loop box instance tilted toward e1, defined on the whole box."""
    ss, env, box = loop_box_instance(seed, size)
    spec = make_tilt_spec(full_face(ss), beta, (1, 0), (lam, 0.0), lambda_xi=lam)
    win = SiteWindow.box(*box)
    t = size + 2 * spec.slab_width + 1.0
    return field_cocycle(approx_busemann(env, spec, win, t)), env, box


def walk_1d(c: float) -> tuple[StepSet, Environment]:
    """Simple random walk on Z with constant potential c."""
    ss = make_step_set(1, [(1,), (-1,)])
    return ss, make_environment("vertex_iid", ss, 0, None, sign_shift=float(c))


def walk_1d_cocycle(c: float, beta: float = 1.0, half_width: int = 200) -> tuple[Cocycle, Environment]:
    """B(x, x+z) = μz with cosh(βμ) = e^{βc}: the linear recovering cocycle of the 1D walk."""
    ss, env = walk_1d(c)
    mu = math.acosh(math.exp(beta * c)) / beta
    box = ((-half_width,), (half_width,))
    steps = ss.array[:, 0]
    coc = user_cocycle(ss, box, lambda sites, k: np.full(len(sites), mu * steps[k]))
    return coc, env


def greens_1d_closed_form(c: float) -> float:
    """g(0,0) = Σ_n P(S_n = 0) e^{−cn} = 1/√(1 − e^{−2c})."""
    return 1.0 / math.sqrt(1.0 - math.exp(-2.0 * c))
