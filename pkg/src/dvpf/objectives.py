"""Variational utility and leakage terms and the two Lagrangians built from them.

All terms are in nats. ``total`` is the quantity the encoder side maximizes:

    P1: (-recon_nll - marginal_kl_x) - alpha * (leakage_pred_fidelity - leakage_dist_discrepancy)
    P2: (-recon_nll - marginal_kl_x) - alpha * (complexity + uncertainty)

KLs against implicit distributions use the discriminator logit
log(D / (1 - D)) as a log density ratio. The additive constant of the P2
leakage bound (an H(X|S)-type term) does not depend on any parameter and is
left out.
"""

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ValidationError
from .model import DTYPE, _as_tensor

VARIANTS = ("P1", "P2")
LOG_2PI = math.log(2.0 * math.pi)


class UntrainedDiscriminatorWarning(UserWarning):
    """A ratio estimate came from a discriminator that outputs ~0.5 everywhere."""


@dataclass
class Noise:
    """Injected randomness for one objective evaluation."""

    encoder: torch.Tensor  # batch x d_z, standard normal
    prior: torch.Tensor  # n_prior x d_noise, standard normal

    @classmethod
    def draw(cls, bundle, batch_size, n_prior=None, generator=None):
        n_prior = batch_size if n_prior is None else n_prior
        enc = torch.randn(batch_size, bundle.d_z, generator=generator, dtype=DTYPE)
        pri = torch.randn(n_prior, bundle.d_noise, generator=generator, dtype=DTYPE)
        return cls(enc, pri)

    @classmethod
    def zeros(cls, bundle, batch_size, n_prior=None):
        n_prior = batch_size if n_prior is None else n_prior
        return cls(torch.zeros(batch_size, bundle.d_z, dtype=DTYPE),
                   torch.zeros(n_prior, bundle.d_noise, dtype=DTYPE))


@dataclass
class LossBreakdown:
    recon_nll: float
    marginal_kl_x: float
    leakage_pred_fidelity: float
    leakage_dist_discrepancy: float
    complexity: float
    uncertainty: float
    alpha: float
    total: float
    variant: str

    @property
    def utility(self):
        return -self.recon_nll - self.marginal_kl_x

    @property
    def leakage(self):
        return leakage_of(self.variant, self.leakage_pred_fidelity, self.leakage_dist_discrepancy,
                          self.complexity, self.uncertainty)

    def recomposed_total(self):
        return compose_total(self.variant, self.alpha, self.recon_nll, self.marginal_kl_x,
                             self.leakage_pred_fidelity, self.leakage_dist_discrepancy,
                             self.complexity, self.uncertainty)

    def to_record(self, step=None):
        rec = asdict(self)
        if step is not None:
            rec = {"step": int(step), **rec}
        return rec


def leakage_of(variant, fidelity, discrepancy, complexity, uncertainty):
    if variant == "P1":
        return fidelity - discrepancy
    if variant == "P2":
        return complexity + uncertainty
    raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def compose_total(variant, alpha, recon_nll, marginal_kl_x, leakage_pred_fidelity,
                  leakage_dist_discrepancy, complexity, uncertainty):
    """Works on floats and on tensors alike."""
    leak = leakage_of(variant, leakage_pred_fidelity, leakage_dist_discrepancy, complexity, uncertainty)
    return (-recon_nll - marginal_kl_x) - alpha * leak


def gaussian_nll(x, mean):
    """Per-sample -log N(x; mean, I)."""
    d = x.shape[-1]
    return 0.5 * ((x - mean) ** 2).sum(dim=-1) + 0.5 * d * LOG_2PI


def diag_gaussian_logpdf(z, mean, log_variance):
    return -0.5 * (((z - mean) ** 2) * torch.exp(-log_variance) + log_variance + LOG_2PI).sum(dim=-1)


def kl_to_standard_normal(post):
    """Per-sample analytic KL(N(mean, diag exp(logvar)) || N(0, I))."""
    lv = post.log_variance
    return 0.5 * (torch.exp(lv) + post.mean ** 2 - 1.0 - lv).sum(dim=-1)


def aggregate_log_density(z, post):
    """log of the batch mixture (1/B) sum_j N(z_i; mean_j, var_j), for every z_i."""
    pair = diag_gaussian_logpdf(z[:, None, :], post.mean[None, :, :], post.log_variance[None, :, :])
    return torch.logsumexp(pair, dim=1) - math.log(z.shape[0])


def _warn_if_flat(logits, name):
    if logits.numel() and bool((torch.sigmoid(logits.detach()) - 0.5).abs().max() < 1e-3):
        warnings.warn(f"{name} discriminator outputs ~0.5 everywhere; ratio estimate is ~0",
                      UntrainedDiscriminatorWarning, stacklevel=3)


def _prep(x, s=None):
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("batch must be a non-empty n x d_x matrix")
    if s is not None:
        s = torch.as_tensor(np.asarray(s), dtype=torch.long)
        if s.shape != (x.shape[0],):
            raise ValidationError("one label per sample required")
    return x, s


def utility_lower_bound(x, bundle, noise, *, z=None):
    """(recon_nll, marginal_kl_x) as tensors.

    recon_nll is mean -log P_theta(x | z) with z ~ P_phi(Z | x); the KL from
    the data distribution to the decoder's output distribution is the mean
    output-discriminator logit over real x.
    """
    x, _ = _prep(x)
    if z is None:
        _, z = bundle.encode(x, noise.encoder)
    recon = gaussian_nll(x, bundle.decode_utility(z)).mean()
    logit = bundle.discriminator_logit("output", x)
    _warn_if_flat(logit, "output")
    return recon, logit.mean()


def leakage_p1(x, s, bundle, noise, *, z=None):
    """(prediction fidelity, distribution discrepancy) as tensors.

    fidelity = mean log P_xi(s | z) + mean -log P_xi(s); discrepancy is the
    mean sensitive-discriminator logit at the one-hot real labels.
    """
    x, s = _prep(x, s)
    if z is None:
        _, z = bundle.encode(x, noise.encoder)
    log_post = F.log_softmax(bundle.sensitive_logits(z), dim=-1)
    log_marg = F.log_softmax(bundle.marginal_logits(), dim=-1)
    fidelity = log_post.gather(1, s[:, None]).mean() - log_marg[s].mean()
    logit = bundle.discriminator_logit("sensitive", bundle.one_hot(s))
    _warn_if_flat(logit, "sensitive")
    return fidelity, logit.mean()


def leakage_p2_upper(x, s, bundle, noise, *, z=None, post=None):
    """(complexity, uncertainty) as tensors.

    With the explicit N(0, I) prior, complexity is the mean analytic KL of the
    posterior to the prior. With the generator prior it is the difference of
    two ratio-estimated KLs: KL(P(Z|X) || Q | P_D) - KL(P(Z) || Q). Both route
    log q_psi(z) through the latent-discriminator logit, and the aggregate
    posterior is the batch mixture, so the logit terms cancel and what is left
    is the batch estimate of I(X;Z).
    """
    x, s = _prep(x, s)
    if z is None:
        post, z = bundle.encode(x, noise.encoder)
    if bundle.explicit_prior:
        complexity = kl_to_standard_normal(post).mean()
    else:
        log_cond = diag_gaussian_logpdf(z, post.mean, post.log_variance)
        log_agg = aggregate_log_density(z, post)
        ratio = bundle.discriminator_logit("latent", z)  # log p_phi(z) / q_psi(z)
        conditional_kl = (log_cond - log_agg + ratio).mean()
        marginal_kl = ratio.mean()
        complexity = conditional_kl - marginal_kl
    uncertainty = gaussian_nll(x, bundle.decode_uncertainty(s, z)).mean()
    return complexity, uncertainty


def objective_terms(x, s, bundle, noise):
    """All six terms (tensors) from one shared encoder draw."""
    x, s = _prep(x, s)
    post, z = bundle.encode(x, noise.encoder)
    recon, mkl = utility_lower_bound(x, bundle, noise, z=z)
    fid, disc = leakage_p1(x, s, bundle, noise, z=z)
    comp, unc = leakage_p2_upper(x, s, bundle, noise, z=z, post=post)
    return {"recon_nll": recon, "marginal_kl_x": mkl, "leakage_pred_fidelity": fid,
            "leakage_dist_discrepancy": disc, "complexity": comp, "uncertainty": unc}


def total_objective_tensor(variant, x, s, bundle, alpha, noise):
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not alpha >= 0:
        raise ValidationError("alpha must be >= 0")
    t = objective_terms(x, s, bundle, noise)
    return compose_total(variant, alpha, **t), t


def total_objective(variant, x, s, bundle, alpha, noise):
    """Evaluate the chosen Lagrangian and return its :class:`LossBreakdown`."""
    _, t = total_objective_tensor(variant, x, s, bundle, alpha, noise)
    vals = {k: float(v.detach()) for k, v in t.items()}
    return LossBreakdown(**vals, alpha=float(alpha),
                         total=float(compose_total(variant, float(alpha), **vals)),
                         variant=variant)


# ------------------------------------------------- closed-form Gaussian helpers


def gaussian_kl(mu0, cov0, mu1, cov1):
    """KL(N(mu0, cov0) || N(mu1, cov1)) in nats, full covariances."""
    mu0, mu1 = np.atleast_1d(mu0), np.atleast_1d(mu1)
    cov0, cov1 = np.atleast_2d(cov0), np.atleast_2d(cov1)
    k = mu0.size
    inv1 = np.linalg.inv(cov1)
    d = mu1 - mu0
    _, ld0 = np.linalg.slogdet(cov0)
    _, ld1 = np.linalg.slogdet(cov1)
    return 0.5 * (np.trace(inv1 @ cov0) + d @ inv1 @ d - k + ld1 - ld0)


def linear_gaussian_decomposition(A, cov_x, cov_noise, q_mean, q_cov):
    """Both KLs of I(X;Z) = KL(P(Z|X) || Q | P_X) - KL(P(Z) || Q) for Z = A X + N.

    X ~ N(0, cov_x), N ~ N(0, cov_noise), Q = N(q_mean, q_cov). Returns
    ``(conditional_kl, marginal_kl, mutual_information)`` in nats, the last one
    from the log-determinant formula.
    """
    A = np.atleast_2d(A)
    cov_x, cov_noise, q_cov = map(np.atleast_2d, (cov_x, cov_noise, q_cov))
    q_mean = np.atleast_1d(q_mean)
    k = A.shape[0]
    inv_q = np.linalg.inv(q_cov)
    _, ld_q = np.linalg.slogdet(q_cov)
    _, ld_n = np.linalg.slogdet(cov_noise)
    # E_x of the Mahalanobis term (q_mean - A x)^T inv_q (q_mean - A x)
    maha = q_mean @ inv_q @ q_mean + np.trace(inv_q @ A @ cov_x @ A.T)
    conditional = 0.5 * (np.trace(inv_q @ cov_noise) + maha - k + ld_q - ld_n)
    cov_z = A @ cov_x @ A.T + cov_noise
    marginal = gaussian_kl(np.zeros(k), cov_z, q_mean, q_cov)
    _, ld_z = np.linalg.slogdet(cov_z)
    return conditional, marginal, 0.5 * (ld_z - ld_n)
