"""Post-hoc auditing of a trained representation: attacks, leakage in bits, verification."""

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from .errors import ValidationError
from .info_measures import NATS_TO_BITS, check_joint, classifier_mi_bound, entropy
from .model import DTYPE
from .objectives import LOG_2PI, gaussian_nll

ATTACKERS = ("margin-classifier", "logistic")
MAX_PAIRS = 10_000


@dataclass
class AttackReport:
    accuracy: float
    leakage_bits: float
    n_train: int
    n_test: int
    attacker: str

    def to_dict(self):
        return asdict(self)


@dataclass
class VerificationReport:
    tmr: float
    fmr_target: float
    threshold: float
    n_genuine: int
    n_impostor: int
    fmr: float = None

    def to_dict(self):
        return asdict(self)


@dataclass
class TradeoffPoint:
    alpha: float
    utility_bits: float
    leakage_bits: float
    attack_acc: float
    tmr_at_fmr: float
    recon_nll: float
    status: str = "ok"

    @classmethod
    def failed(cls, alpha, reason):
        nan = float("nan")
        return cls(float(alpha), nan, nan, nan, nan, nan, status=f"failed: {reason}")

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ encoding


def posterior_moments(bundle, x, batch_size=4096):
    """Posterior means and log-variances as numpy arrays, without gradients."""
    x = np.asarray(x, dtype=np.float64)
    means, logvars = [], []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            post = bundle.posterior(torch.as_tensor(x[i: i + batch_size], dtype=DTYPE))
            means.append(post.mean.numpy())
            logvars.append(post.log_variance.numpy())
    if not means:
        return np.zeros((0, bundle.d_z)), np.zeros((0, bundle.d_z))
    return np.concatenate(means), np.concatenate(logvars)


def encode_means(bundle, x):
    return posterior_moments(bundle, x)[0]


# ------------------------------------------------------------------- attack


def _calibrated_svc(z_tr, s_tr, seed):
    svc = LinearSVC(loss="squared_hinge", C=1.0, dual="auto", max_iter=20_000, random_state=seed)
    svc.fit(z_tr, s_tr)

    def scores(z):
        d = svc.decision_function(z)
        return d[:, None] if d.ndim == 1 else d

    # Platt-style logistic calibration of the margins, fit on the train split
    cal = LogisticRegression(C=1e4, max_iter=10_000)
    cal.fit(scores(z_tr), s_tr)
    return svc, cal, scores


def attack(z_train, s_train, z_test, s_test, attacker="margin-classifier", n_classes=None, seed=0):
    """Train a fresh linear attacker on frozen representations and audit the test split."""
    if attacker not in ATTACKERS:
        raise ValidationError(f"unknown attacker {attacker!r}; expected one of {ATTACKERS}")
    z_train, z_test = np.asarray(z_train, dtype=np.float64), np.asarray(z_test, dtype=np.float64)
    s_train, s_test = np.asarray(s_train, dtype=np.int64), np.asarray(s_test, dtype=np.int64)
    if z_train.ndim != 2 or z_test.ndim != 2 or z_train.shape[1] != z_test.shape[1]:
        raise ValidationError("train and test representations must be matrices of equal width")
    if z_train.shape[0] != s_train.shape[0] or z_test.shape[0] != s_test.shape[0]:
        raise ValidationError("one label per representation required")
    if z_test.shape[0] == 0:
        raise ValidationError("empty test split")
    classes = np.unique(s_train)
    if classes.size < 2:
        raise ValidationError("attack needs at least two classes in the train split")
    k = int(max(s_train.max(), s_test.max()) + 1) if n_classes is None else int(n_classes)

    scaler = StandardScaler().fit(z_train)
    ztr, zte = scaler.transform(z_train), scaler.transform(z_test)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        if attacker == "logistic":
            clf = LogisticRegression(max_iter=10_000).fit(ztr, s_train)
            pred = clf.predict(zte)
            p_known, known = clf.predict_proba(zte), clf.classes_
        else:
            svc, cal, scores = _calibrated_svc(ztr, s_train, seed)
            pred = svc.predict(zte)
            p_known, known = cal.predict_proba(scores(zte)), cal.classes_
    probs = np.zeros((zte.shape[0], k))
    probs[:, known] = p_known
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        leak = classifier_mi_bound(s_test, probs, n_classes=k)
    return AttackReport(accuracy=float(np.mean(pred == s_test)), leakage_bits=float(leak),
                        n_train=int(z_train.shape[0]), n_test=int(z_test.shape[0]), attacker=attacker)


# ------------------------------------------------------------- verification


def tmr_at_fmr(genuine_scores, impostor_scores, fmr_target=0.1):
    """True-match rate at the smallest threshold whose impostor acceptance is <= the target.

    A pair is accepted when its score is >= the threshold. Candidate
    thresholds are the observed scores plus one value above all of them, so
    ties are resolved toward the lower false-match rate.
    """
    gen = np.asarray(genuine_scores, dtype=np.float64).ravel()
    imp = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if gen.size == 0 or imp.size == 0:
        raise ValidationError("genuine and impostor score lists must be nonempty")
    if not 0.0 < fmr_target < 1.0:
        raise ValidationError("fmr_target must lie in (0, 1)")
    if not (np.all(np.isfinite(gen)) and np.all(np.isfinite(imp))):
        raise ValidationError("scores must be finite")
    imp_sorted = np.sort(imp)
    cands = np.unique(np.concatenate([gen, imp]))
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))
    # impostor acceptance at each candidate: fraction of imp >= t
    fmr = (imp.size - np.searchsorted(imp_sorted, cands, side="left")) / imp.size
    ok = np.flatnonzero(fmr <= fmr_target)
    t = cands[ok[0]]
    return VerificationReport(tmr=float(np.mean(gen >= t)), fmr_target=float(fmr_target),
                              threshold=float(t), n_genuine=int(gen.size), n_impostor=int(imp.size),
                              fmr=float(fmr[ok[0]]))


def _cosine(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    den = na * nb
    num = np.sum(a * b, axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def pair_scores(emb, identity, pairing_seed=0, max_pairs=MAX_PAIRS):
    """Cosine scores of sampled same-identity and different-identity pairs.

    Rows are first put in a canonical order (by identity, then by content),
    so the result does not depend on the input order.
    """
    emb = np.asarray(emb, dtype=np.float64)
    identity = np.asarray(identity, dtype=np.int64)
    if emb.shape[0] != identity.shape[0]:
        raise ValidationError("one identity per row required")
    order = np.lexsort(tuple(emb.T[::-1]) + (identity,))
    emb, identity = emb[order], identity[order]
    n = identity.size
    if np.unique(identity).size < 2:
        raise ValidationError("verification needs at least two identities")

    # all genuine pairs (i < j, same identity) via run boundaries
    _, starts, counts = np.unique(identity, return_index=True, return_counts=True)
    gen_i, gen_j = [], []
    for st, c in zip(starts, counts):
        if c >= 2:
            a, b = np.triu_indices(c, k=1)
            gen_i.append(st + a)
            gen_j.append(st + b)
    if not gen_i:
        raise ValidationError("no identity has two samples; no genuine pair available")
    gen_i, gen_j = np.concatenate(gen_i), np.concatenate(gen_j)

    rng = np.random.default_rng(pairing_seed)
    if gen_i.size > max_pairs:
        pick = np.sort(rng.choice(gen_i.size, size=max_pairs, replace=False))
        gen_i, gen_j = gen_i[pick], gen_j[pick]

    n_impostor_total = (n * n - np.sum(counts.astype(np.int64) ** 2)) // 2
    if n_impostor_total <= max_pairs:
        a, b = np.triu_indices(n, k=1)
        keep = identity[a] != identity[b]
        imp_i, imp_j = a[keep], b[keep]
    else:
        imp_i, imp_j = [], []
        seen = set()
        while len(imp_i) < max_pairs:
            a = rng.integers(0, n, size=2 * max_pairs)
            b = rng.integers(0, n, size=2 * max_pairs)
            for u, v in zip(a, b):
                if identity[u] == identity[v]:
                    continue
                key = (min(u, v), max(u, v))
                if key in seen:
                    continue
                seen.add(key)
                imp_i.append(key[0])
                imp_j.append(key[1])
                if len(imp_i) == max_pairs:
                    break
        imp_i, imp_j = np.array(imp_i), np.array(imp_j)
    return _cosine(emb[gen_i], emb[gen_j]), _cosine(emb[imp_i], emb[imp_j])


def verification_scores(bundle, batch, pairing_seed=0, max_pairs=MAX_PAIRS):
    """Genuine and impostor cosine scores of posterior means for a batch with identities."""
    if batch.identity is None:
        raise ValidationError("batch has no identity labels")
    return pair_scores(encode_means(bundle, batch.x), batch.identity, pairing_seed, max_pairs)


# ---------------------------------------------------------------- utility


def recon_nll(bundle, x):
    """Mean -log P_theta(x | z) at z = posterior mean, in nats."""
    with torch.no_grad():
        xt = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
        return float(gaussian_nll(xt, bundle.decode_utility(bundle.posterior(xt).mean)).mean())


def _diag_logpdf(z, mean, logvar):
    """log N(z_a; mean_b, diag exp(logvar_b)) for every pair (a, b)."""
    diff = z[:, None, :] - mean[None, :, :]
    return -0.5 * np.sum(diff ** 2 * np.exp(-logvar)[None] + logvar[None] + LOG_2PI, axis=-1)


def utility_bits(bundle, x, seed=0, max_samples=2000):
    """Batch-mixture estimate of I(X;Z) in bits over the rows of ``x``.

    For z_i drawn from the posterior of x_i this averages
    log q(z_i|x_i) - log mean_j q(z_i|x_j). It cannot exceed log2 of the
    number of rows used.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if x.shape[0] > max_samples:
        x = x[np.sort(rng.choice(x.shape[0], size=max_samples, replace=False))]
    mean, logvar = posterior_moments(bundle, x)
    z = mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)
    pair = _diag_logpdf(z, mean, logvar)
    own = np.diagonal(pair)
    agg = logsumexp(pair, axis=1) - math.log(x.shape[0])
    return float(max(np.mean(own - agg), 0.0) * NATS_TO_BITS)


# ---------------------------------------------------------------- bundles


def tradeoff_point(bundle, train, test, alpha, fmr_target=0.1, attacker="margin-classifier", seed=0):
    """Attack, verification (when identities exist) and utility of one trained bundle."""
    z_tr, z_te = encode_means(bundle, train.x), encode_means(bundle, test.x)
    rep = attack(z_tr, train.s, z_te, test.s, attacker=attacker, n_classes=test.n_classes, seed=seed)
    tmr = float("nan")
    if test.identity is not None:
        try:
            g, i = pair_scores(z_te, test.identity, pairing_seed=seed)
            tmr = tmr_at_fmr(g, i, fmr_target).tmr
        except ValidationError:
            pass
    return TradeoffPoint(alpha=float(alpha), utility_bits=utility_bits(bundle, test.x, seed=seed),
                         leakage_bits=rep.leakage_bits, attack_acc=rep.accuracy, tmr_at_fmr=tmr,
                         recon_nll=recon_nll(bundle, test.x))


def snapshot_metrics(bundle, train, test, seed=0):
    p = tradeoff_point(bundle, train, test, alpha=float("nan"), seed=seed)
    return {"leakage_bits": p.leakage_bits, "attack_acc": p.attack_acc, "utility_bits": p.utility_bits,
            "recon_nll": p.recon_nll}


# ---------------------------------------------- exact-density channel audit


def channel_informations(bundle, codebook, joint, n_mc=2000, seed=0):
    """(I(X;Z), I(S;Z)) in bits for codebook data, with Monte Carlo standard errors.

    Each codeword's posterior is Gaussian, so p(z|x) is known exactly and
    p(z) is a finite mixture. Expectations over z are Monte Carlo with
    ``n_mc`` draws per codeword. Returns ``(ix, is_, se_ix, se_is)``.
    """
    t = check_joint(joint)
    codebook = np.asarray(codebook, dtype=np.float64)
    n_s, n_x = t.shape
    if codebook.shape[0] != n_x:
        raise ValidationError(f"codebook has {codebook.shape[0]} rows, joint has {n_x} columns")
    px = t.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_px = np.log(px)
        p_s_given_x = np.where(px > 0, t / np.where(px > 0, px, 1.0), 0.0)  # n_s x n_x
        log_px_given_s = np.log(t / t.sum(axis=1, keepdims=True))  # n_s x n_x
    mean, logvar = posterior_moments(bundle, codebook)
    rng = np.random.default_rng(seed)
    ix_terms, is_terms = np.zeros(n_x), np.zeros(n_x)
    ix_var, is_var = np.zeros(n_x), np.zeros(n_x)
    for x in range(n_x):
        if px[x] == 0:
            continue
        z = mean[x] + np.exp(0.5 * logvar[x]) * rng.standard_normal((n_mc, mean.shape[1]))
        lc = _diag_logpdf(z, mean, logvar)  # n_mc x n_x : log p(z | x')
        log_pz = logsumexp(lc + log_px[None], axis=1)
        log_pz_s = logsumexp(lc[:, None, :] + log_px_given_s[None], axis=2)  # n_mc x n_s
        f_ix = lc[:, x] - log_pz
        f_is = log_pz_s @ p_s_given_x[:, x] - log_pz
        ix_terms[x], is_terms[x] = f_ix.mean(), f_is.mean()
        ix_var[x], is_var[x] = f_ix.var(ddof=1) / n_mc, f_is.var(ddof=1) / n_mc
    ix = float(px @ ix_terms) * NATS_TO_BITS
    is_ = float(px @ is_terms) * NATS_TO_BITS
    se_ix = math.sqrt(float(px ** 2 @ ix_var)) * NATS_TO_BITS
    se_is = math.sqrt(float(px ** 2 @ is_var)) * NATS_TO_BITS
    return max(ix, 0.0), max(is_, 0.0), se_ix, se_is


def density_leakage_bits(bundle, batch, reference, seed=0):
    """I(S;Z) in bits for continuous X, using a disjoint reference sample.

    p(z|s) and p(z) are the mixtures of the Gaussian posteriors of the
    reference rows (per class, and overall). For every row of ``batch`` one z
    is drawn from its posterior and log p(z|s) - log p(z) is averaged.
    """
    rng = np.random.default_rng(seed)
    mean, logvar = posterior_moments(bundle, batch.x)
    rmean, rlogvar = posterior_moments(bundle, reference.x)
    z = mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)
    lc = _diag_logpdf(z, rmean, rlogvar)  # n x n_ref
    log_pz = logsumexp(lc, axis=1) - math.log(lc.shape[1])
    log_pzs = np.empty(len(batch))
    for c in range(batch.n_classes):
        rows = batch.s == c
        refs = reference.s == c
        if not rows.any():
            continue
        if not refs.any():
            raise ValidationError(f"class {c} missing from the reference sample")
        log_pzs[rows] = logsumexp(lc[np.ix_(rows, refs)], axis=1) - math.log(refs.sum())
    return float(max(np.mean(log_pzs - log_pz), 0.0) * NATS_TO_BITS)


def codebook_conditional_entropy(joint, codebook, noise, n_mc=20_000, seed=0):
    """Differential entropy h(X|S) in nats of codebook data with isotropic noise ``noise``."""
    t = check_joint(joint)
    codebook = np.asarray(codebook, dtype=np.float64)
    n_s, n_x = t.shape
    d = codebook.shape[1]
    if noise <= 0:
        raise ValidationError("conditional differential entropy needs noise > 0")
    rng = np.random.default_rng(seed)
    ps = t.sum(axis=1)
    total = 0.0
    for s in range(n_s):
        if ps[s] == 0:
            continue
        w = t[s] / ps[s]
        idx = rng.choice(n_x, size=n_mc, p=w)
        x = codebook[idx] + noise * rng.standard_normal((n_mc, d))
        sq = np.sum((x[:, None, :] - codebook[None]) ** 2, axis=-1)
        with np.errstate(divide="ignore"):
            logp = logsumexp(-0.5 * sq / noise ** 2 + np.log(w)[None], axis=1) \
                - 0.5 * d * (LOG_2PI + 2 * math.log(noise))
        total += ps[s] * -np.mean(logp)
    return float(total)


def empirical_label_entropy(s, n_classes):
    counts = np.bincount(np.asarray(s, dtype=np.int64), minlength=n_classes)
    return entropy(counts / counts.sum())
