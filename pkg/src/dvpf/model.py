"""The parameterized family: encoder, three decoders, prior generator, three discriminators.

Parameter blocks and their networks:

    phi     encoder f_phi            x -> (mean, log-variance) of P_phi(Z|X)
    theta   utility decoder g_theta  z -> mean of P_theta(X|Z)
    xi      sensitive decoder g_xi   z -> logits of P_xi(S|Z), plus free logits of P_xi(S)
    varphi  uncertainty decoder      (one-hot s, z) -> mean of P_varphi(X|S,Z)
    psi     prior generator          noise -> z ~ Q_psi(Z)
    eta     latent discriminator     z -> D_eta
    omega   output discriminator     x -> D_omega
    tau     sensitive discriminator  class-probability vector -> D_tau

The encoder only ever sees x (and injected noise); nothing feeds s into it.
"""

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NumericError, ParseError, ValidationError

BLOCKS = ("phi", "theta", "xi", "varphi", "psi", "eta", "omega", "tau")
CKPT_FORMAT = "dvpf-ckpt-1"
LOGVAR_CLAMP = 10.0
LOGIT_CLAMP = 30.0
DISC_EPS = 1e-6
_DISC_LOGIT_CLAMP = math.log((1.0 - DISC_EPS) / DISC_EPS)
DTYPE = torch.float64

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


@dataclass
class NetworkSpec:
    input_dim: int
    hidden_widths: list = field(default_factory=list)
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_widths = [int(w) for w in self.hidden_widths]
        if min([self.input_dim, self.output_dim, *self.hidden_widths]) < 1:
            raise ValidationError(f"all network dims must be >= 1: {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(_ACTIVATIONS)}")


class MLP(nn.Module):
    """Plain fully connected stack that reports the first non-finite layer."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden_widths, spec.output_dim]
        self.linears = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims, dims[1:]))
        self.act = _ACTIVATIONS[spec.activation]()

    def _layers(self, h):
        last = len(self.linears) - 1
        for i, lin in enumerate(self.linears):
            h = lin(h)
            if i < last:
                h = self.act(h)
            yield i, h

    def forward(self, h):
        out = h
        for _, out in self._layers(h):
            pass
        if not torch.isfinite(out).all():
            # rescan to name the first offending layer
            with torch.no_grad():
                for i, a in self._layers(h):
                    if not torch.isfinite(a).all():
                        raise NumericError(f"non-finite activation at layer {i}", layer=i)
            raise NumericError("non-finite input", layer=-1)
        return out


class SensitiveDecoder(nn.Module):
    def __init__(self, spec, n_classes):
        super().__init__()
        self.net = MLP(spec)
        self.marginal_logits = nn.Parameter(torch.zeros(n_classes, dtype=DTYPE))

    def forward(self, z):
        return self.net(z)


@dataclass
class EncoderPosterior:
    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def std(self):
        return torch.exp(0.5 * self.log_variance)


def _fan_in_init(module, generator):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()


class ModelBundle(nn.Module):
    """All eight parameter blocks with their forward operations."""

    def __init__(self, d_x, n_classes, d_z=256, hidden=(256, 256), disc_hidden=None,
                 d_noise=None, activation="relu", explicit_prior=False, seed=0, prior_hidden=None,
                 xi_hidden=None):
        super().__init__()
        hidden = list(hidden)
        disc_hidden = hidden if disc_hidden is None else list(disc_hidden)
        prior_hidden = hidden if prior_hidden is None else list(prior_hidden)
        xi_hidden = hidden if xi_hidden is None else list(xi_hidden)
        d_noise = d_z if d_noise is None else d_noise
        self.d_x, self.d_z, self.n_classes, self.d_noise = int(d_x), int(d_z), int(n_classes), int(d_noise)
        self.explicit_prior = bool(explicit_prior)
        self.seed = int(seed)
        self.specs = {
            "phi": NetworkSpec(d_x, hidden, 2 * d_z, activation),
            "theta": NetworkSpec(d_z, hidden, d_x, activation),
            "xi": NetworkSpec(d_z, xi_hidden, n_classes, activation),
            "varphi": NetworkSpec(n_classes + d_z, hidden, d_x, activation),
            "psi": NetworkSpec(d_noise, prior_hidden, d_z, activation),
            "eta": NetworkSpec(d_z, disc_hidden, 1, activation),
            "omega": NetworkSpec(d_x, disc_hidden, 1, activation),
            "tau": NetworkSpec(n_classes, disc_hidden, 1, activation),
        }
        self.phi = MLP(self.specs["phi"])
        self.theta = MLP(self.specs["theta"])
        self.xi = SensitiveDecoder(self.specs["xi"], n_classes)
        self.varphi = MLP(self.specs["varphi"])
        self.psi = MLP(self.specs["psi"])
        self.eta = MLP(self.specs["eta"])
        self.omega = MLP(self.specs["omega"])
        self.tau = MLP(self.specs["tau"])
        for k, name in enumerate(BLOCKS):
            _fan_in_init(self.block(name), torch.Generator().manual_seed(self.seed * 1009 + k))

    def identity_prior(self):
        """Set a single-layer generator to the identity map (needs d_noise == d_z)."""
        if len(self.psi.linears) != 1 or self.d_noise != self.d_z:
            raise ValidationError("identity init needs a linear generator with d_noise == d_z")
        with torch.no_grad():
            self.psi.linears[0].weight.copy_(torch.eye(self.d_z, dtype=DTYPE))
            self.psi.linears[0].bias.zero_()
        return self

    def block(self, name):
        if name not in BLOCKS:
            raise ValidationError(f"unknown parameter block {name!r}")
        return getattr(self, name)

    def block_parameters(self, name):
        return list(self.block(name).parameters())

    # ------------------------------------------------------------ forward ops

    def posterior(self, x):
        out = self.phi(_as_tensor(x))
        mean, logvar = out[..., : self.d_z], out[..., self.d_z:]
        return EncoderPosterior(mean, torch.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP))

    def encode(self, x, noise):
        """Reparameterized draw z = mean + exp(log_variance / 2) * noise."""
        post = self.posterior(x)
        noise = _as_tensor(noise)
        if noise.shape != post.mean.shape:
            raise ValidationError(f"noise shape {tuple(noise.shape)} != {tuple(post.mean.shape)}")
        return post, post.mean + post.std * noise

    def decode_utility(self, z):
        return self.theta(_as_tensor(z))

    def sensitive_logits(self, z):
        return torch.clamp(self.xi(_as_tensor(z)), -LOGIT_CLAMP, LOGIT_CLAMP)

    def decode_sensitive(self, z):
        return torch.softmax(self.sensitive_logits(z), dim=-1)

    def marginal_logits(self):
        return torch.clamp(self.xi.marginal_logits, -LOGIT_CLAMP, LOGIT_CLAMP)

    def marginal_sensitive(self):
        return torch.softmax(self.marginal_logits(), dim=-1)

    def one_hot(self, s):
        s = torch.as_tensor(s, dtype=torch.long)
        if s.numel() and (int(s.min()) < 0 or int(s.max()) >= self.n_classes):
            raise ValidationError(f"class index outside [0, {self.n_classes})")
        return F.one_hot(s, self.n_classes).to(DTYPE)

    def decode_uncertainty(self, s, z):
        z = _as_tensor(z)
        return self.varphi(torch.cat([self.one_hot(s), z], dim=-1))

    def sample_prior(self, noise):
        noise = _as_tensor(noise)
        if noise.ndim != 2 or noise.shape[1] != self.d_noise or noise.shape[0] < 1:
            raise ValidationError(f"prior noise must be n x {self.d_noise} with n >= 1")
        if self.explicit_prior:
            if self.d_noise != self.d_z:
                raise ValidationError("explicit prior needs d_noise == d_z")
            return noise
        return self.psi(noise)

    _DISC = {"latent": ("eta", "d_z"), "output": ("omega", "d_x"), "sensitive": ("tau", "n_classes")}

    def discriminator_logit(self, kind, inp):
        """Clamped logit log(D / (1 - D)); D then lies in [1e-6, 1 - 1e-6]."""
        if kind not in self._DISC:
            raise ValidationError(f"unknown discriminator kind {kind!r}")
        block, dim = self._DISC[kind]
        inp = _as_tensor(inp)
        if inp.shape[-1] != getattr(self, dim):
            raise ValidationError(f"{kind} discriminator expects last dim {getattr(self, dim)}, got {inp.shape[-1]}")
        raw = self.block(block)(inp).squeeze(-1)
        return torch.clamp(raw, -_DISC_LOGIT_CLAMP, _DISC_LOGIT_CLAMP)

    def discriminate(self, kind, inp):
        return torch.sigmoid(self.discriminator_logit(kind, inp))

    # ----------------------------------------------------------- persistence

    def config(self):
        return {
            "d_x": self.d_x, "d_z": self.d_z, "n_classes": self.n_classes, "d_noise": self.d_noise,
            "explicit_prior": self.explicit_prior, "seed": self.seed,
            "specs": {k: asdict(v) for k, v in self.specs.items()},
        }

    def flat_block(self, name):
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.block_parameters(name)])

    def load_flat_block(self, name, flat):
        flat = np.asarray(flat, dtype=np.float64)
        params = self.block_parameters(name)
        total = sum(p.numel() for p in params)
        if flat.size != total:
            raise ValidationError(f"block {name} expects {total} values, got {flat.size}")
        off = 0
        with torch.no_grad():
            for p in params:
                p.copy_(torch.from_numpy(flat[off: off + p.numel()].reshape(p.shape)))
                off += p.numel()

    def state_snapshot(self):
        return {name: self.flat_block(name) for name in BLOCKS}

    @classmethod
    def from_config(cls, cfg):
        specs = cfg["specs"]
        return cls(
            d_x=cfg["d_x"], n_classes=cfg["n_classes"], d_z=cfg["d_z"],
            hidden=specs["phi"]["hidden_widths"], disc_hidden=specs["eta"]["hidden_widths"],
            d_noise=cfg["d_noise"], activation=specs["phi"]["activation"],
            explicit_prior=cfg["explicit_prior"], seed=cfg["seed"],
            prior_hidden=specs["psi"]["hidden_widths"], xi_hidden=specs["xi"]["hidden_widths"],
        )


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def save_checkpoint(bundle, path, extra=None):
    """Single zip archive: one flat .npy per block plus ``manifest.json``.

    Entries carry a fixed timestamp so identical bundles give identical bytes.
    """
    manifest = {"format": CKPT_FORMAT, "model": bundle.config(), "blocks": list(BLOCKS)}
    if extra:
        manifest["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in BLOCKS:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, bundle.flat_block(name), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(path):
    """Rebuild a bundle from :func:`save_checkpoint` output; returns ``(bundle, manifest)``."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CKPT_FORMAT:
                raise ParseError(f"unsupported checkpoint format {manifest.get('format')!r}")
            bundle = ModelBundle.from_config(manifest["model"])
            for name in BLOCKS:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                bundle.load_flat_block(name, arr)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ParseError(f"not a {CKPT_FORMAT} archive: {exc}") from None
    return bundle, manifest
