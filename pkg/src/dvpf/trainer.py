"""Alternating block-coordinate training of the funnel model.

One round runs, in order:

    (0) sensitive decoder best response       xi         (P1, unless xi_printed_sign)
    (1) encoder + utility/uncertainty decoder  phi, theta (+ varphi for P2, + xi if printed sign)
    (2) latent discriminator                   eta
    (3) encoder + prior generator, adversarial phi, psi
    (4) output discriminator                   omega
    (5) sensitive-class discriminator          tau        (P1 only)
    (6) prior generator + utility decoder      psi, theta

Discriminators and the best-response step take ``adversary_inner_steps``
updates per round; the others take one. Every block has its own Adam
optimizer and only the blocks named for a step are updated in that step.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from .errors import DivergenceError, NumericError, ValidationError
from .model import DTYPE, ModelBundle
from .objectives import (
    VARIANTS,
    Noise,
    gaussian_nll,
    leakage_p2_upper,
    total_objective,
)

log = logging.getLogger(__name__)

GENERATOR_BLOCKS = ("phi", "theta", "xi", "varphi", "psi")
DISCRIMINATOR_BLOCKS = ("eta", "omega", "tau")


def trained_blocks(variant, explicit_prior=False):
    if variant == "P1":
        blocks = ["phi", "theta", "xi", "psi", "eta", "omega", "tau"]
    elif variant == "P2":
        blocks = ["phi", "theta", "varphi", "psi", "eta", "omega"]
    else:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if explicit_prior:
        blocks.remove("psi")
    return tuple(blocks)


LR_SCHEDULES = ("constant", "cosine")


def lr_factor(schedule, round_index, total):
    """Multiplier on every step size at ``round_index`` of ``total`` rounds."""
    if schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(round_index, total - 1) / (total - 1)))


@dataclass
class TrainConfig:
    variant: str = "P1"
    alpha: float = 1.0
    steps: int = 1000
    batch_size: int = 128
    step_sizes: dict = field(default_factory=dict)
    adversary_inner_steps: int = 5
    seed: int = 0
    d_z: int = 256
    explicit_prior: bool = False
    hidden: tuple = (256, 256)
    disc_hidden: tuple = None
    xi_hidden: tuple = None
    activation: str = "relu"
    regularizer_weight: float = 1.0
    betas: tuple = (0.9, 0.999)
    lr_schedule: str = "constant"
    xi_printed_sign: bool = False
    snapshot_every: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.alpha >= 0:
            raise ValidationError("alpha must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.adversary_inner_steps < 1:
            raise ValidationError("adversary_inner_steps must be >= 1")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.betas = tuple(float(b) for b in self.betas)
        if self.disc_hidden is not None:
            self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if self.xi_hidden is not None:
            self.xi_hidden = tuple(int(h) for h in self.xi_hidden)
        blocks = trained_blocks(self.variant, self.explicit_prior)
        extra = set(self.step_sizes) - set(blocks)
        if extra:
            raise ValidationError(f"step sizes given for blocks not trained by {self.variant}: {sorted(extra)}")
        sizes = {b: (1e-4 if b in DISCRIMINATOR_BLOCKS else 1e-3) for b in blocks}
        sizes.update({k: float(v) for k, v in self.step_sizes.items()})
        self.step_sizes = sizes

    @property
    def blocks(self):
        return trained_blocks(self.variant, self.explicit_prior)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["betas"] = list(self.betas)
        d["disc_hidden"] = None if self.disc_hidden is None else list(self.disc_hidden)
        d["xi_hidden"] = None if self.xi_hidden is None else list(self.xi_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def build_bundle(config, d_x, n_classes):
    return ModelBundle(d_x=d_x, n_classes=n_classes, d_z=config.d_z, hidden=config.hidden,
                       disc_hidden=config.disc_hidden, xi_hidden=config.xi_hidden, activation=config.activation,
                       explicit_prior=config.explicit_prior, seed=config.seed)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    stopped: str = None

    def write(self, path):
        """Newline-delimited JSON, one loss record per round; timings are kept out."""
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_timings(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for step, t in self.timings:
                fh.write(json.dumps({"step": step, "wall_clock": t}) + "\n")

    @staticmethod
    def read(path):
        with open(path, encoding="utf-8") as fh:
            return TrainHistory(records=[json.loads(line) for line in fh if line.strip()])


def _bce_real(logit):
    """-log D from a logit."""
    return -F.logsigmoid(logit)


def _bce_fake(logit):
    """-log(1 - D) from a logit."""
    return -F.logsigmoid(-logit)


class Trainer:
    """Holds the bundle, per-block optimizers and the noise stream."""

    def __init__(self, bundle, config):
        self.bundle = bundle
        self.config = config
        self.generator = torch.Generator().manual_seed(config.seed)
        self.optimizers = {
            b: torch.optim.Adam(bundle.block_parameters(b), lr=config.step_sizes[b], betas=config.betas)
            for b in config.blocks
        }
        self.round_index = 0

    # -- helpers -----------------------------------------------------------

    def _noise(self, n):
        return Noise.draw(self.bundle, n, generator=self.generator)

    def _update(self, blocks, loss, step, component):
        blocks = [b for b in blocks if b in self.optimizers]
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss in step {step} ({component})", step=step, component=component)
        params = [p for b in blocks for p in self.bundle.block_parameters(b)]
        if not params:
            return
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        for p, g in zip(params, grads):
            p.grad = g
        factor = lr_factor(self.config.lr_schedule, self.round_index, self.config.steps)
        for b in blocks:
            for group in self.optimizers[b].param_groups:
                group["lr"] = self.config.step_sizes[b] * factor
            if self.config.step_sizes[b] != 0.0:
                self.optimizers[b].step()
        for p in params:
            p.grad = None

    # -- the steps ---------------------------------------------------------

    def step_best_response(self, x, s):
        bundle = self.bundle
        for _ in range(self.config.adversary_inner_steps):
            noise = self._noise(x.shape[0])
            with torch.no_grad():
                _, z = bundle.encode(x, noise.encoder)
            log_post = F.log_softmax(bundle.sensitive_logits(z), dim=-1).gather(1, s[:, None]).mean()
            log_marg = F.log_softmax(bundle.marginal_logits(), dim=-1)[s].mean()
            self._update(["xi"], -(log_post + log_marg), 0, "sensitive best response")

    def step_encoder_decoders(self, x, s):
        cfg, bundle = self.config, self.bundle
        noise = self._noise(x.shape[0])
        post, z = bundle.encode(x, noise.encoder)
        recon = gaussian_nll(x, bundle.decode_utility(z)).mean()
        if cfg.variant == "P1":
            log_post = F.log_softmax(bundle.sensitive_logits(z), dim=-1).gather(1, s[:, None]).mean()
            loss = recon + cfg.alpha * log_post
            blocks = ["phi", "theta"]
            if cfg.xi_printed_sign:
                log_marg = F.log_softmax(bundle.marginal_logits(), dim=-1)[s].mean()
                loss = loss + cfg.alpha * log_marg
                blocks.append("xi")
        else:
            comp, unc = leakage_p2_upper(x, s, bundle, noise, z=z, post=post)
            loss = recon + cfg.alpha * (comp + unc)
            blocks = ["phi", "theta", "varphi"]
        self._update(blocks, loss, 1, "encoder/decoders")

    def step_latent_discriminator(self, x):
        bundle = self.bundle
        for _ in range(self.config.adversary_inner_steps):
            noise = self._noise(x.shape[0])
            with torch.no_grad():
                _, z = bundle.encode(x, noise.encoder)
                zp = bundle.sample_prior(noise.prior)
            loss = _bce_real(bundle.discriminator_logit("latent", z)).mean() + \
                _bce_fake(bundle.discriminator_logit("latent", zp)).mean()
            self._update(["eta"], loss, 2, "latent discriminator")

    def step_encoder_prior_adversarial(self, x):
        bundle = self.bundle
        noise = self._noise(x.shape[0])
        _, z = bundle.encode(x, noise.encoder)
        zp = bundle.sample_prior(noise.prior)
        gain = _bce_real(bundle.discriminator_logit("latent", z)).mean() + \
            _bce_fake(bundle.discriminator_logit("latent", zp)).mean()
        self._update(["phi", "psi"], -self.config.regularizer_weight * gain, 3, "encoder/prior adversarial")

    def step_output_discriminator(self, x):
        bundle = self.bundle
        for _ in range(self.config.adversary_inner_steps):
            noise = self._noise(x.shape[0])
            with torch.no_grad():
                fake = bundle.decode_utility(bundle.sample_prior(noise.prior))
            loss = _bce_real(bundle.discriminator_logit("output", x)).mean() + \
                _bce_fake(bundle.discriminator_logit("output", fake)).mean()
            self._update(["omega"], loss, 4, "output discriminator")

    def step_sensitive_discriminator(self, s):
        bundle = self.bundle
        real = bundle.one_hot(s)
        for _ in range(self.config.adversary_inner_steps):
            noise = self._noise(s.shape[0])
            with torch.no_grad():
                fake = bundle.decode_sensitive(bundle.sample_prior(noise.prior))
            loss = _bce_real(bundle.discriminator_logit("sensitive", real)).mean() + \
                _bce_fake(bundle.discriminator_logit("sensitive", fake)).mean()
            self._update(["tau"], loss, 5, "sensitive discriminator")

    def step_prior_decoder_adversarial(self, x):
        bundle = self.bundle
        noise = self._noise(x.shape[0])
        fake = bundle.decode_utility(bundle.sample_prior(noise.prior))
        gain = _bce_fake(bundle.discriminator_logit("output", fake)).mean()
        self._update(["psi", "theta"], -self.config.regularizer_weight * gain, 6, "prior/decoder adversarial")

    def steps(self):
        """The round's steps in order, as (number, callable taking (x, s))."""
        cfg = self.config
        out = []
        if cfg.variant == "P1" and not cfg.xi_printed_sign:
            out.append((0, lambda x, s: self.step_best_response(x, s)))
        out += [
            (1, lambda x, s: self.step_encoder_decoders(x, s)),
            (2, lambda x, s: self.step_latent_discriminator(x)),
            (3, lambda x, s: self.step_encoder_prior_adversarial(x)),
            (4, lambda x, s: self.step_output_discriminator(x)),
        ]
        if cfg.variant == "P1":
            out.append((5, lambda x, s: self.step_sensitive_discriminator(s)))
        out.append((6, lambda x, s: self.step_prior_decoder_adversarial(x)))
        return out

    def round(self, x, s):
        """One full round on a batch; returns the post-round :class:`LossBreakdown`."""
        x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
        s = torch.as_tensor(np.asarray(s), dtype=torch.long)
        for _, fn in self.steps():
            fn(x, s)
        self.round_index += 1
        noise = self._noise(x.shape[0])
        bd = total_objective(self.config.variant, x, s, self.bundle, self.config.alpha, noise)
        for name in ("recon_nll", "marginal_kl_x", "leakage_pred_fidelity",
                     "leakage_dist_discrepancy", "complexity", "uncertainty"):
            if not np.isfinite(getattr(bd, name)):
                raise NumericError(f"non-finite {name} after round", step="eval", component=name)
        return bd


def train_round(batch_x, batch_s, trainer):
    """Functional alias for :meth:`Trainer.round`."""
    return trainer.round(batch_x, batch_s)


def fit(dataset, config, eval_data=None, bundle=None, evaluate=None):
    """Train for ``config.steps`` rounds on shuffled mini-batches of ``dataset``.

    ``evaluate(bundle, step) -> dict`` is called every ``config.snapshot_every``
    rounds when given; by default snapshots use the attack/utility audit on
    ``eval_data``. Raises :class:`DivergenceError` (carrying the history)
    when recon_nll stays above ``divergence_factor`` times its first value
    for ``divergence_patience`` consecutive rounds.
    """
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if bundle is None:
        bundle = build_bundle(config, dataset.d_x, dataset.n_classes)
    trainer = Trainer(bundle, config)
    history = TrainHistory()
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    bs = min(config.batch_size, n)
    if evaluate is None and eval_data is not None and config.snapshot_every:
        from .evaluation import snapshot_metrics

        def evaluate(b, step):
            return snapshot_metrics(b, dataset, eval_data, seed=config.seed)

    order = rng.permutation(n)
    cursor = 0
    first = None
    over = 0
    t0 = time.perf_counter()
    for step in range(config.steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + bs]
        cursor += bs
        bd = trainer.round(dataset.x[idx], dataset.s[idx])
        history.records.append(bd.to_record(step))
        history.timings.append((step, time.perf_counter() - t0))
        if first is None:
            first = bd.recon_nll
        over = over + 1 if bd.recon_nll > config.divergence_factor * first else 0
        if over >= config.divergence_patience:
            history.stopped = f"divergence at round {step}"
            raise DivergenceError(
                f"recon_nll above {config.divergence_factor}x its initial value "
                f"{first:.4g} for {over} rounds (now {bd.recon_nll:.4g})", history=history)
        if evaluate is not None and config.snapshot_every and (step + 1) % config.snapshot_every == 0:
            history.snapshots.append({"step": step, **evaluate(bundle, step)})
    return bundle, history


def _fit_point(args):
    dataset, test, config = args
    from .evaluation import TradeoffPoint, tradeoff_point

    try:
        bundle, _ = fit(dataset, config)
        return tradeoff_point(bundle, dataset, test, config.alpha, seed=config.seed)
    except (DivergenceError, NumericError) as exc:
        log.warning("alpha=%g failed: %s", config.alpha, exc)
        return TradeoffPoint.failed(config.alpha, str(exc))


def sweep_alpha(dataset, config, alphas, test=None, jobs=1):
    """Independent fit per alpha (same seed-derived init), evaluated on ``test``.

    A failed fit yields a point with ``status`` set to the error instead of
    aborting the sweep. Points come back sorted by alpha.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValidationError("alpha list is empty")
    if any(not a >= 0 for a in alphas):
        raise ValidationError("every alpha must be >= 0")
    test = dataset if test is None else test
    jobs_in = [(dataset, test, replace(config, alpha=a)) for a in sorted(alphas)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_fit_point, jobs_in))
    return [_fit_point(j) for j in jobs_in]
