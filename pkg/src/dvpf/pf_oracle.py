"""Exact Privacy Funnel on small finite alphabets.

The release mechanism is a row-stochastic channel ``W[x, z] = P(z | x)``. The
solver maximizes ``I(X;Z) - alpha * I(S;Z)`` by projected gradient ascent on
the product of row simplices, started from every deterministic map X -> Z
when there are at most 4096 of them and from random channels otherwise.
Curves are assembled from an alpha sweep plus a direct per-budget refinement.

Internally everything is in nats; the public functions return bits.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ParseError, ValidationError
from .info_measures import NATS_TO_BITS, check_joint

MAX_X = 12
MAX_DETERMINISTIC_SEEDS = 4096
DEFAULT_ALPHA_GRID = tuple(np.logspace(-2, 2, 25))
_LOG_FLOOR = 1e-12
_FEAS_TOL = 1e-9


@dataclass
class PFPoint:
    leakage_budget: float
    utility: float
    achieving_channel: np.ndarray
    leakage: float
    alpha: float


@dataclass
class PFCurve:
    points: list = field(default_factory=list)

    @property
    def budgets(self):
        return np.array([p.leakage_budget for p in self.points])

    @property
    def utilities(self):
        return np.array([p.utility for p in self.points])

    def utility_at(self, budget):
        """Best utility among the curve's points whose leakage fits ``budget``."""
        ok = [p.utility for p in self.points if p.leakage <= budget + _FEAS_TOL]
        return max(ok) if ok else 0.0


def check_channel(channel, n_x=None):
    w = np.asarray(channel, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] < 1:
        raise ValidationError(f"channel must be a 2-D |X| x |Z| matrix, got shape {w.shape}")
    if n_x is not None and w.shape[0] != n_x:
        raise ValidationError(f"channel has {w.shape[0]} rows but |X| = {n_x}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("channel entries must be finite and non-negative")
    bad = np.abs(w.sum(axis=1) - 1.0) > 1e-9
    if bad.any():
        raise ValidationError(f"channel row {int(np.argmax(bad))} does not sum to 1")
    return w


class _Problem:
    """Cached marginals of a joint for batched information evaluation."""

    def __init__(self, joint):
        t = check_joint(joint)
        self.joint = t
        self.ps = t.sum(axis=1)
        self.px = t.sum(axis=0)
        self.n_s, self.n_x = t.shape

    def informations(self, w):
        """(I(X;Z), I(S;Z)) in nats for a batch of channels ``w`` of shape (R, X, Z)."""
        q = np.einsum("x,rxz->rz", self.px, w)
        psz = np.einsum("sx,rxz->rsz", self.joint, w)  # P(s, z)
        ixz = _xlogx_ratio(self.px[None, :, None] * w, w, q[:, None, :])
        isz = _xlogx_ratio(psz, psz / np.where(self.ps > 0, self.ps, 1.0)[None, :, None], q[:, None, :])
        return np.maximum(ixz, 0.0), np.maximum(isz, 0.0)

    def gradients(self, w):
        """Gradients of I(X;Z) and I(S;Z) (nats) with respect to each channel entry."""
        q = np.einsum("x,rxz->rz", self.px, w)
        logq = np.log(np.maximum(q, _LOG_FLOOR))
        ps_safe = np.where(self.ps > 0, self.ps, 1.0)
        r = np.einsum("sx,rxz->rsz", self.joint, w) / ps_safe[None, :, None]  # P(z | s)
        logr = np.log(np.maximum(r, _LOG_FLOOR))
        logw = np.log(np.maximum(w, _LOG_FLOOR))
        g_x = self.px[None, :, None] * (logw - logq[:, None, :])
        g_s = np.einsum("sx,rsz->rxz", self.joint, logr) - self.px[None, :, None] * logq[:, None, :]
        return g_x, g_s


def _xlogx_ratio(weight, num, den):
    """sum(weight * log(num / den)) over all but the first axis, with 0 log 0 = 0."""
    m = weight > 0
    ratio = np.where(m, num, 1.0) / np.where(m, den, 1.0)
    terms = np.where(m, weight * np.log(np.where(m, ratio, 1.0)), 0.0)
    return terms.reshape(terms.shape[0], -1).sum(axis=1)


def project_rows_to_simplex(v):
    """Euclidean projection of each last-axis row of ``v`` onto the probability simplex."""
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    return np.maximum(v - theta, 0.0)


def _ascend(prob, w0, alpha, iters=300, step0=0.5):
    """Batched projected gradient ascent of I(X;Z) - alpha I(S;Z).

    Each restart keeps its own step size: grown on improvement, halved and
    rejected otherwise. Returns final channels and their objectives (nats).
    """
    w = w0.copy()
    ix, is_ = prob.informations(w)
    obj = ix - alpha * is_
    step = np.full(w.shape[0], step0)
    # row preconditioning: each row's gradient carries a factor p(x)
    scale = 1.0 / np.maximum(prob.px, 1e-300)
    scale = np.where(prob.px > 0, scale, 0.0)[None, :, None]
    for _ in range(iters):
        gx, gs = prob.gradients(w)
        g = (gx - alpha * gs) * scale
        g = g - g.mean(axis=2, keepdims=True)
        cand = project_rows_to_simplex(w + step[:, None, None] * g)
        cix, cis = prob.informations(cand)
        cobj = cix - alpha * cis
        better = cobj > obj + 1e-15
        w[better] = cand[better]
        obj[better] = cobj[better]
        step = np.where(better, np.minimum(step * 1.5, 1e3), step * 0.5)
        if np.all(step < 1e-10):
            break
    return w, obj


def _budget_ascent(prob, w0, budget, iters=200, penalties=(10.0, 100.0, 1e3, 1e4), margin=1e-6):
    """Maximize I(X;Z) subject to I(S;Z) <= budget (nats) by penalty continuation.

    Every iterate that satisfies the budget is a candidate; the best feasible
    channel per restart is returned with its informations (nats). Restarts that
    never become feasible report utility -inf.
    """
    w = w0.copy()
    target = max(budget - margin, 0.0)
    best_w = w.copy()
    ix, is_ = prob.informations(w)
    best_ix = np.where(is_ <= budget, ix, -np.inf)
    best_is = is_.copy()
    scale = np.where(prob.px > 0, 1.0 / np.maximum(prob.px, 1e-300), 0.0)[None, :, None]

    def merit(ix, is_, rho):
        return ix - rho * np.maximum(is_ - target, 0.0) ** 2

    for rho in penalties:
        step = np.full(w.shape[0], 0.5)
        ix, is_ = prob.informations(w)
        obj = merit(ix, is_, rho)
        for _ in range(iters):
            gx, gs = prob.gradients(w)
            viol = np.maximum(is_ - target, 0.0)[:, None, None]
            g = (gx - 2.0 * rho * viol * gs) * scale
            g = g - g.mean(axis=2, keepdims=True)
            cand = project_rows_to_simplex(w + step[:, None, None] * g)
            cix, cis = prob.informations(cand)
            cobj = merit(cix, cis, rho)
            better = cobj > obj + 1e-15
            w[better], obj[better] = cand[better], cobj[better]
            ix, is_ = np.where(better, cix, ix), np.where(better, cis, is_)
            step = np.where(better, np.minimum(step * 1.5, 1e3), step * 0.5)
            imp = (is_ <= budget) & (ix > best_ix)
            best_w[imp], best_ix[imp], best_is[imp] = w[imp], ix[imp], is_[imp]
            if np.all(step < 1e-10):
                break
    return best_w, best_ix, best_is


def deterministic_channels(n_x, n_z):
    """All |Z|^|X| deterministic maps as an array of shape (n_z**n_x, n_x, n_z)."""
    maps = np.array(list(itertools.product(range(n_z), repeat=n_x)), dtype=np.int64)
    w = np.zeros((maps.shape[0], n_x, n_z))
    rows = np.arange(n_x)
    for i, m in enumerate(maps):
        w[i, rows, m] = 1.0
    return w


def _seed_channels(n_x, n_z, seeding, restarts, rng):
    if seeding == "auto":
        seeding = "deterministic" if n_z ** n_x <= MAX_DETERMINISTIC_SEEDS else "random"
    if seeding == "deterministic":
        if n_z ** n_x > MAX_DETERMINISTIC_SEEDS:
            raise CapacityError(f"{n_z}^{n_x} deterministic seeds exceed {MAX_DETERMINISTIC_SEEDS}")
        verts = deterministic_channels(n_x, n_z)
    elif seeding == "random":
        half = restarts // 2
        picks = rng.integers(0, n_z, size=(half, n_x))
        verts = np.zeros((half, n_x, n_z))
        verts[np.arange(half)[:, None], np.arange(n_x)[None, :], picks] = 1.0
        dirichlet = rng.dirichlet(np.ones(n_z), size=(restarts - half, n_x))
        verts = np.concatenate([verts, dirichlet], axis=0)
    else:
        raise ValidationError(f"unknown seeding {seeding!r}")
    ident = np.zeros((1, n_x, n_z))
    ident[0, np.arange(n_x), np.arange(n_x) % n_z] = 1.0
    const = np.full((1, n_x, n_z), 1.0 / n_z)
    return np.concatenate([verts, ident, const], axis=0)


def _check_sizes(prob, z_cardinality):
    if z_cardinality is None:
        z_cardinality = prob.n_x
    z_cardinality = int(z_cardinality)
    if z_cardinality < 1:
        raise ValidationError("z_cardinality must be >= 1")
    if prob.n_x > MAX_X:
        raise CapacityError(
            f"|X| = {prob.n_x} exceeds the exact solver's cap of {MAX_X}; "
            "use the variational trainer for larger alphabets"
        )
    return z_cardinality


def _solve_batch(prob, alpha, n_z, seeding="auto", restarts=64, seed=0, iters=300):
    """All refined restarts (and the raw seeds) for one alpha, as (channels, ix, is)."""
    rng = np.random.default_rng(seed)
    seeds = _seed_channels(prob.n_x, n_z, seeding, restarts, rng)
    # vertices are where the unconstrained optimum lives; start slightly inside
    # so the ascent can also leave them
    smooth = 0.9 * seeds + 0.1 / n_z
    refined, _ = _ascend(prob, smooth, alpha, iters=iters)
    chans = np.concatenate([seeds, refined], axis=0)
    ix, is_ = prob.informations(chans)
    return chans, ix, is_


def induced_informations(joint, channel):
    """Exact (I(X;Z), I(S;Z)) in bits under the chain S - X - Z."""
    prob = _Problem(joint)
    w = check_channel(channel, prob.n_x)
    ix, is_ = prob.informations(w[None])
    return float(ix[0] * NATS_TO_BITS), float(is_[0] * NATS_TO_BITS)


def solve_lagrangian(joint, alpha, z_cardinality=None, *, seeding="auto", restarts=64, seed=0, iters=300):
    """Channel maximizing I(X;Z) - alpha I(S;Z).

    Returns ``(channel, I(X;Z) bits, I(S;Z) bits)`` for the best restart.
    """
    if not alpha >= 0:
        raise ValidationError("alpha must be >= 0")
    prob = _Problem(joint)
    n_z = _check_sizes(prob, z_cardinality)
    chans, ix, is_ = _solve_batch(prob, alpha, n_z, seeding, restarts, seed, iters)
    best = int(np.argmax(ix - alpha * is_))
    return chans[best], float(ix[best] * NATS_TO_BITS), float(is_[best] * NATS_TO_BITS)


class _Pool:
    """Candidate (channel, I_X, I_S, alpha) tuples gathered while sweeping."""

    def __init__(self):
        self.chans, self.ix, self.is_, self.alpha = [], [], [], []

    def add(self, chans, ix, is_, alpha):
        self.chans.append(chans)
        self.ix.append(ix)
        self.is_.append(is_)
        self.alpha.append(np.full(ix.shape, float(alpha)))

    def freeze(self):
        return (np.concatenate(self.chans), np.concatenate(self.ix),
                np.concatenate(self.is_), np.concatenate(self.alpha))


def _split_candidates(prob, vertices, budget, n_z, bisect=48):
    """Feasible channels on segments 'vertex -> vertex with one row moved'.

    Leakage is convex along each segment, so starting from a feasible vertex
    the feasible part is an interval [0, t*]; utility is convex too, so the
    interesting point is the far end t*, located by bisection.
    """
    _, is_v = prob.informations(vertices)
    feas = vertices[is_v <= budget]
    if feas.shape[0] == 0:
        return feas
    cols = feas.argmax(axis=2)
    starts, dirs = [], []
    for x in range(prob.n_x):
        if prob.px[x] == 0:
            continue
        for z in range(n_z):
            move = cols[:, x] != z
            if not move.any():
                continue
            a = feas[move]
            d = np.zeros_like(a)
            d[:, x, :] = -a[:, x, :]
            d[:, x, z] += 1.0
            starts.append(a)
            dirs.append(d)
    if not starts:
        return feas
    a = np.concatenate(starts)
    d = np.concatenate(dirs)
    lo = np.zeros(a.shape[0])
    hi = np.ones(a.shape[0])
    _, is_end = prob.informations(a + d)
    full = is_end <= budget
    lo[full] = 1.0
    for _ in range(bisect):
        mid = 0.5 * (lo + hi)
        _, is_mid = prob.informations(a + mid[:, None, None] * d)
        ok = is_mid <= budget
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return np.concatenate([feas, a + lo[:, None, None] * d])


def _top_unique(chans, scores, k):
    order = np.argsort(-scores)
    keep, seen = [], set()
    for j in order:
        if not np.isfinite(scores[j]):
            break
        key = np.round(chans[j], 6).tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(j)
        if len(keep) == k:
            break
    return chans[keep]


def pf_curve(joint, budgets, z_cardinality=None, *, alpha_grid=DEFAULT_ALPHA_GRID,
             seeding="auto", restarts=64, seed=0, iters=300, refine_top=64):
    """Privacy Funnel curve PF(R, P_SX) at each leakage budget ``R`` (bits).

    Candidates come from the alpha sweep of the Lagrangian; each budget is
    then attacked directly (split-row segments, then penalty ascent from the
    best candidates). A point's ``alpha`` is NaN when it came from the direct
    refinement rather than from a Lagrangian solve.
    """
    budgets = [float(b) for b in budgets]
    if not budgets:
        raise ValidationError("budget list is empty")
    if any(b < 0 for b in budgets) or any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValidationError("budgets must be non-negative and sorted ascending")
    prob = _Problem(joint)
    n_z = _check_sizes(prob, z_cardinality)

    pool = _Pool()
    grid = sorted({0.0, *map(float, alpha_grid)})
    for k, a in enumerate(grid):
        pool.add(*_solve_batch(prob, a, n_z, seeding, restarts, seed + k, iters), a)

    rng = np.random.default_rng(seed + len(grid))
    vertices = _seed_channels(prob.n_x, n_z, seeding, restarts, rng)
    vertices = vertices[vertices.max(axis=2).min(axis=1) == 1.0]
    for b in budgets:
        r = b / NATS_TO_BITS
        chans, ix, is_, _ = pool.freeze()
        seeds = [_top_unique(chans, np.where(is_ <= r, ix, -np.inf), refine_top)]
        split = _split_candidates(prob, vertices, r, n_z)
        if split.shape[0]:
            s_ix, _ = prob.informations(split)
            seeds.append(_top_unique(split, s_ix, refine_top))
        seeds.append(_top_unique(chans, ix - 1e3 * np.maximum(is_ - r, 0.0), refine_top // 4))
        w, bix, bis = _budget_ascent(prob, np.concatenate(seeds), r, iters=iters // 2)
        ok = np.isfinite(bix)
        pool.add(w[ok], bix[ok], bis[ok], np.nan)
        if split.shape[0]:
            s_ix, s_is = prob.informations(split)
            pool.add(split, s_ix, s_is, np.nan)

    chans, ix, is_, alphas = pool.freeze()
    points = []
    for b in budgets:
        ok = np.flatnonzero(is_ * NATS_TO_BITS <= b + _FEAS_TOL)
        j = ok[np.argmax(ix[ok])]
        points.append(PFPoint(
            leakage_budget=b,
            utility=float(ix[j] * NATS_TO_BITS),
            achieving_channel=chans[j].copy(),
            leakage=float(is_[j] * NATS_TO_BITS),
            alpha=float(alphas[j]),
        ))
    return PFCurve(points)


def read_joint(path):
    """Parse a joint pmf text file: one row per s, whitespace-separated, ``#`` comments."""
    rows, width = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                vals = [float(tok) for tok in line.split()]
            except ValueError as exc:
                raise ParseError(f"not a number: {exc}", line=lineno) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"expected {width} columns, found {len(vals)}", line=lineno)
            rows.append(vals)
    if not rows:
        raise ParseError("no probability rows found")
    return check_joint(np.array(rows))


def write_joint(table, path, comment=None):
    t = check_joint(table)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            for c in comment.splitlines():
                fh.write(f"# {c}\n")
        for row in t:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
