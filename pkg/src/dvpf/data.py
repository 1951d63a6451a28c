"""Synthetic datasets with known information content, and embedding files.

Embedding file format ``dvpf-emb-1`` (UTF-8, whitespace separated)::

    dvpf-emb-1 <n> <d_x> <N> <has_identity>
    <identity> <s> <x_0> ... <x_{d_x-1}>      # n records

``identity`` is -1 on every record when ``has_identity`` is 0. Floats are
written with ``repr`` so a save/load round trip is bit-exact.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import ParseError, ValidationError
from .info_measures import NATS_TO_BITS, check_distribution, check_joint

FORMAT_TAG = "dvpf-emb-1"


@dataclass
class SampleBatch:
    x: np.ndarray
    s: np.ndarray
    n_classes: int
    identity: np.ndarray = None
    split: str = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.int64)
        if self.identity is not None:
            self.identity = np.asarray(self.identity, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.x.ndim != 2:
            raise ValidationError(f"x must be an n x d_x matrix, got shape {self.x.shape}")
        n = self.x.shape[0]
        if self.s.shape != (n,):
            raise ValidationError(f"{self.s.shape[0]} labels for {n} rows")
        if self.identity is not None and self.identity.shape != (n,):
            raise ValidationError(f"{self.identity.shape[0]} identities for {n} rows")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        if n and (self.s.min() < 0 or self.s.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("x has non-finite entries")
        if self.split not in (None, "train", "test"):
            raise ValidationError(f"unknown split {self.split!r}")

    def __len__(self):
        return self.x.shape[0]

    @property
    def d_x(self):
        return self.x.shape[1]

    def take(self, idx, split=None):
        return SampleBatch(
            x=self.x[idx],
            s=self.s[idx],
            n_classes=self.n_classes,
            identity=None if self.identity is None else self.identity[idx],
            split=split if split is not None else self.split,
            meta=dict(self.meta),
        )


def train_test_split(batch, seed=0, test_fraction=0.2):
    """Deterministic split by a seed-derived permutation."""
    n = len(batch)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return batch.take(np.sort(perm[n_test:]), "train"), batch.take(np.sort(perm[:n_test]), "test")


# ---------------------------------------------------------------- discrete


def gen_discrete(joint, embed_dim, n, seed=0, noise=0.01, codebook=None):
    """Sample (s, x-index) from ``joint`` and embed x-index via a random codebook.

    Returns ``(batch, codebook, index)``. ``batch.meta['true_mi_bits']`` is
    I(X;S) of the joint.
    """
    from .info_measures import mutual_information

    t = check_joint(joint)
    if n < 1:
        raise ValidationError("n must be >= 1")
    n_s, n_x = t.shape
    rng = np.random.default_rng(seed)
    if codebook is None:
        codebook = rng.standard_normal((n_x, embed_dim))
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.shape != (n_x, embed_dim):
        raise ValidationError(f"codebook must be {n_x} x {embed_dim}")
    cell = rng.choice(n_s * n_x, size=n, p=t.ravel())
    s, index = np.divmod(cell, n_x)
    x = codebook[index]
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    batch = SampleBatch(x=x, s=s, n_classes=n_s,
                        meta={"true_mi_bits": mutual_information(t), "kind": "discrete"})
    return batch, codebook, index


def empirical_joint(s, index, n_s, n_x):
    counts = np.zeros((n_s, n_x))
    np.add.at(counts, (s, index), 1.0)
    return counts / counts.sum()


# ----------------------------------------------------------------- mixture


@dataclass
class MixtureSpec:
    """Class-conditional diagonal Gaussians: s ~ weights, x | s ~ N(means[s], diag(covs[s]))."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = check_distribution(self.weights, "weights")
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.atleast_2d(np.asarray(self.covs, dtype=np.float64))
        n = self.weights.size
        if self.means.shape[0] != n or self.covs.shape != self.means.shape:
            raise ValidationError("means and covs must both be N x d_x with N = len(weights)")
        if not np.all(np.isfinite(self.means)) or not np.all(self.covs > 0):
            raise ValidationError("means must be finite and covariances strictly positive")

    @property
    def n_classes(self):
        return self.weights.size

    @property
    def d_x(self):
        return self.means.shape[1]

    def log_conditionals(self, x):
        """log p(x | s) for every row of ``x`` and every class: shape (n, N)."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[:, None, :] - self.means[None, :, :]
        return -0.5 * (np.sum(diff ** 2 / self.covs[None], axis=2)
                       + np.sum(np.log(2 * np.pi * self.covs), axis=1)[None])

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}


def binary_mixture(d_x=8, separation=1.5, informative_dims=2, weight=0.5):
    """Two balanced classes whose means differ on the first ``informative_dims`` coordinates."""
    means = np.zeros((2, d_x))
    means[0, :informative_dims] = separation
    means[1, :informative_dims] = -separation
    return MixtureSpec(weights=[weight, 1.0 - weight], means=means, covs=np.ones((2, d_x)))


def gen_mixture(spec, n, seed=0, n_identities=0, identity_share=0.5):
    """Draw a labelled batch from ``spec``.

    With ``n_identities > 0`` each class gets its own identities. An identity
    owns a centre drawn from N(mean_s, identity_share * cov_s) and its samples
    add N(0, (1 - identity_share) * cov_s), so x | s keeps exactly the spec's
    distribution while same-identity samples are correlated.
    """
    if not isinstance(spec, MixtureSpec):
        raise ValidationError("spec must be a MixtureSpec")
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s = rng.choice(spec.n_classes, size=n, p=spec.weights)
    eps = rng.standard_normal((n, spec.d_x))
    identity = None
    if n_identities:
        if n_identities < spec.n_classes:
            raise ValidationError("need at least one identity per class")
        if not 0.0 < identity_share < 1.0:
            raise ValidationError("identity_share must lie in (0, 1)")
        owner = np.arange(n_identities) % spec.n_classes
        centres = spec.means[owner] + np.sqrt(identity_share * spec.covs[owner]) * rng.standard_normal(
            (n_identities, spec.d_x))
        identity = np.empty(n, dtype=np.int64)
        for c in range(spec.n_classes):
            rows = np.flatnonzero(s == c)
            mine = np.flatnonzero(owner == c)
            identity[rows] = rng.choice(mine, size=rows.size)
        x = centres[identity] + np.sqrt((1.0 - identity_share) * spec.covs[s]) * eps
    else:
        x = spec.means[s] + np.sqrt(spec.covs[s]) * eps
    gt, method = mixture_mutual_information(spec)
    return SampleBatch(x=x, s=s, n_classes=spec.n_classes, identity=identity,
                       meta={"true_mi_bits": gt, "true_mi_method": method, "kind": "mixture"})


def _mi_from_logcond(spec, logc, cell):
    """I(X;S) in bits from log p(x|s) evaluated on a grid with cell volume ``cell``."""
    logw = np.log(spec.weights)
    log_joint = logc + logw[None]
    log_px = logsumexp(log_joint, axis=1)
    pj = np.exp(log_joint)
    integrand = np.sum(pj * (logc - log_px[:, None]), axis=1)
    return float(integrand.sum() * cell * NATS_TO_BITS)


def mixture_mutual_information(spec, nodes=10_000, mc_samples=200_000, seed=12345):
    """Ground-truth I(X;S) in bits.

    Quadrature on a uniform grid for d_x <= 2 (``nodes`` points in 1-D, the
    same total in 2-D); exact-density Monte Carlo for higher dimensions.
    Returns ``(bits, method)``.
    """
    sd = np.sqrt(spec.covs)
    lo = (spec.means - 12 * sd).min(axis=0)
    hi = (spec.means + 12 * sd).max(axis=0)
    if spec.d_x == 1:
        g = np.linspace(lo[0], hi[0], nodes)
        val = _mi_from_logcond(spec, spec.log_conditionals(g[:, None]), g[1] - g[0])
        return max(val, 0.0), "quadrature"
    if spec.d_x == 2:
        m = int(math.sqrt(nodes)) * 4
        g0 = np.linspace(lo[0], hi[0], m)
        g1 = np.linspace(lo[1], hi[1], m)
        pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
        val = _mi_from_logcond(spec, spec.log_conditionals(pts), (g0[1] - g0[0]) * (g1[1] - g1[0]))
        return max(val, 0.0), "quadrature"
    rng = np.random.default_rng(seed)
    s = rng.choice(spec.n_classes, size=mc_samples, p=spec.weights)
    x = spec.means[s] + sd[s] * rng.standard_normal((mc_samples, spec.d_x))
    logc = spec.log_conditionals(x)
    log_px = logsumexp(logc + np.log(spec.weights)[None], axis=1)
    val = float(np.mean(logc[np.arange(mc_samples), s] - log_px) * NATS_TO_BITS)
    return max(val, 0.0), "monte-carlo"


# ------------------------------------------------------------------ files


def save_embeddings(batch, path):
    has_id = batch.identity is not None
    ident = batch.identity if has_id else np.full(len(batch), -1, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{FORMAT_TAG} {len(batch)} {batch.d_x} {batch.n_classes} {int(has_id)}\n")
        for i in range(len(batch)):
            vals = " ".join(repr(float(v)) for v in batch.x[i])
            fh.write(f"{int(ident[i])} {int(batch.s[i])} {vals}\n")


def _parse_int(tok, what, lineno):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not an integer", line=lineno) from None


def load_embeddings(path):
    """Parse a ``dvpf-emb-1`` file; errors carry the 1-based line number."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", line=1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != FORMAT_TAG:
        raise ParseError(f"header must be '{FORMAT_TAG} n d_x N has_identity'", line=1)
    n, d_x, n_cls, has_id = (_parse_int(t, name, 1) for t, name in
                             zip(head[1:], ("n", "d_x", "N", "has_identity")))
    if n < 0 or d_x < 1 or n_cls < 1 or has_id not in (0, 1):
        raise ParseError("header values out of range", line=1)
    if len(lines) - 1 != n:
        # point at the first missing record, or the first surplus one
        where = len(lines) + 1 if len(lines) - 1 < n else n + 2
        raise ParseError(f"header declares {n} records, file has {len(lines) - 1}", line=where)
    x = np.empty((n, d_x))
    s = np.empty(n, dtype=np.int64)
    ident = np.empty(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        toks = line.split()
        if len(toks) != d_x + 2:
            raise ParseError(f"expected {d_x + 2} fields, found {len(toks)}", line=lineno)
        ident[i] = _parse_int(toks[0], "identity", lineno)
        s[i] = _parse_int(toks[1], "label", lineno)
        if not 0 <= s[i] < n_cls:
            raise ParseError(f"label {s[i]} outside [0, {n_cls})", line=lineno)
        try:
            x[i] = [float(t) for t in toks[2:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno) from None
        if not np.all(np.isfinite(x[i])):
            raise ParseError("non-finite value", line=lineno)
    return SampleBatch(x=x, s=s, n_classes=n_cls, identity=ident if has_id else None)


def with_meta(batch, **meta):
    return replace(batch, meta={**batch.meta, **meta})
