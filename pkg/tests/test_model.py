import inspect
import math

import numpy as np
import pytest
import torch
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from dvpf.errors import NumericError, ParseError, ValidationError
from dvpf.model import BLOCKS, DTYPE, ModelBundle, NetworkSpec, load_checkpoint, save_checkpoint
from dvpf.objectives import gaussian_nll


def small(**kw):
    args = dict(d_x=3, n_classes=2, d_z=2, hidden=(5,), seed=0)
    args.update(kw)
    return ModelBundle(**args)


def zero_block(bundle, name):
    with torch.no_grad():
        for p in bundle.block_parameters(name):
            p.zero_()


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestNetworkSpec:
    def test_rejects_zero_dim(self):
        with pytest.raises(ValidationError):
            NetworkSpec(0, [4], 2)

    def test_rejects_activation(self):
        with pytest.raises(ValidationError):
            NetworkSpec(2, [4], 2, activation="gelu")


class TestEncode:
    def test_zero_weights_zero_noise(self):
        b = small()
        zero_block(b, "phi")
        post, z = b.encode(t([[1.0, -2.0, 3.0]]), torch.zeros(1, 2, dtype=DTYPE))
        assert torch.equal(z, torch.zeros(1, 2, dtype=DTYPE))
        assert torch.equal(post.log_variance, torch.zeros(1, 2, dtype=DTYPE))

    def test_same_seed_same_z(self):
        x = t(np.random.default_rng(0).normal(size=(4, 3)))
        noise = torch.randn(4, 2, generator=torch.Generator().manual_seed(3), dtype=DTYPE)
        _, z1 = small(seed=7).encode(x, noise)
        _, z2 = small(seed=7).encode(x, noise)
        assert torch.equal(z1, z2)

    def test_finite_difference_jacobian(self):
        b = small()
        x = t([[0.3, -0.7, 1.1]])
        noise = t([[0.5, -1.2]])
        w = b.phi.linears[0].weight
        _, z = b.encode(x, noise)
        grads = torch.autograd.grad(z.sum(), w)[0]
        h = 1e-5
        for i, j in [(0, 0), (2, 1), (4, 2)]:
            with torch.no_grad():
                w[i, j] += h
                zp = b.encode(x, noise)[1].sum().item()
                w[i, j] -= 2 * h
                zm = b.encode(x, noise)[1].sum().item()
                w[i, j] += h
            fd = (zp - zm) / (2 * h)
            assert fd == pytest.approx(grads[i, j].item(), rel=1e-3, abs=1e-9)

    def test_log_variance_clamped(self):
        b = small()
        with torch.no_grad():
            b.phi.linears[-1].bias[2:] = 50.0
        post = b.posterior(t([[0.0, 0.0, 0.0]]))
        assert float(post.log_variance.max().detach()) == 10.0

    def test_noise_shape_checked(self):
        with pytest.raises(ValidationError):
            small().encode(t([[0.0, 0.0, 0.0]]), torch.zeros(1, 3, dtype=DTYPE))

    def test_non_finite_reports_layer(self):
        b = small()
        with torch.no_grad():
            b.phi.linears[1].weight[0, 0] = float("inf")
        with pytest.raises(NumericError) as err:
            b.posterior(t([[1.0, 1.0, 1.0]]))
        assert err.value.layer == 1

    def test_encoder_never_sees_s(self):
        for fn in (ModelBundle.posterior, ModelBundle.encode):
            assert "s" not in inspect.signature(fn).parameters
        assert ModelBundle(d_x=3, n_classes=4, d_z=2).specs["phi"].input_dim == 3

    def test_reparameterization_moments(self):
        b = small()
        x = t([[0.2, 0.1, -0.4]]).expand(100_000, 3)
        noise = torch.randn(100_000, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        with torch.no_grad():
            post, z = b.encode(x, noise)
        mu, var = post.mean[0].numpy(), torch.exp(post.log_variance[0]).numpy()
        n = z.shape[0]
        zs = z.numpy()
        assert np.all(np.abs(zs.mean(0) - mu) <= 3 * np.sqrt(var / n))
        assert np.all(np.abs(zs.var(0) - var) <= 3 * var * math.sqrt(2 / (n - 1)))


class TestDecoders:
    def test_zero_residual_constant(self):
        x = t([[1.0, 2.0, 3.0]])
        assert float(gaussian_nll(x, x)) == pytest.approx(1.5 * math.log(2 * math.pi))

    def test_offset_quadratic(self):
        x = t([[1.0, 2.0, 3.0]])
        m = x.clone()
        m[0, 1] += 0.3
        assert float(gaussian_nll(x, m) - gaussian_nll(x, x)) == pytest.approx(0.045, abs=1e-12)

    def test_nll_matches_density_formula(self):
        b = small()
        rng = np.random.default_rng(1)
        z = t(rng.normal(size=(6, 2)))
        x = rng.normal(size=(6, 3))
        with torch.no_grad():
            mean = b.decode_utility(z).numpy()
        ref = [-multivariate_normal(mean[i], np.eye(3)).logpdf(x[i]) for i in range(6)]
        np.testing.assert_allclose(gaussian_nll(t(x), t(mean)).numpy(), ref, rtol=1e-12)

    def test_zero_logits_uniform(self):
        b = small(n_classes=4)
        zero_block(b, "xi")
        p = b.decode_sensitive(t([[0.3, 0.1]]))
        np.testing.assert_allclose(p.detach().numpy(), 0.25)
        np.testing.assert_allclose(b.marginal_sensitive().detach().numpy(), 0.25)

    def test_logit_saturation_clamped(self):
        b = small(n_classes=3)
        zero_block(b, "xi")
        with torch.no_grad():
            b.xi.net.linears[-1].bias[1] = 1e6
        logits = b.sensitive_logits(t([[0.0, 0.0]])).detach()
        assert float(logits[0, 1]) == 30.0
        assert float(b.decode_sensitive(t([[0.0, 0.0]])).detach()[0, 1]) > 1 - 1e-12

    def test_cross_entropy_matches_logsumexp(self):
        b = small(n_classes=3)
        rng = np.random.default_rng(2)
        z = rng.normal(size=(8, 2))
        s = rng.integers(0, 3, size=8)
        with torch.no_grad():
            logits = b.sensitive_logits(t(z)).numpy()
            p = b.decode_sensitive(t(z)).numpy()
        ref = np.mean([logsumexp(logits[i]) - logits[i, s[i]] for i in range(8)])
        assert -np.mean(np.log(p[np.arange(8), s])) == pytest.approx(ref, rel=1e-12)

    def test_uncertainty_single_class_is_unconditioned(self):
        b = small(n_classes=1)
        lin = b.varphi.linears[0]
        # fold the constant one-hot column into the bias of a z-only decoder
        from dvpf.model import MLP
        plain = MLP(NetworkSpec(2, [5], 3))
        with torch.no_grad():
            plain.linears[0].weight.copy_(lin.weight[:, 1:])
            plain.linears[0].bias.copy_(lin.bias + lin.weight[:, 0])
            plain.linears[1].load_state_dict(b.varphi.linears[1].state_dict())
        z = t(np.random.default_rng(3).normal(size=(5, 2)))
        s = torch.zeros(5, dtype=torch.long)
        torch.testing.assert_close(b.decode_uncertainty(s, z), plain(z))

    def test_uncertainty_symmetric_under_tied_weights(self):
        b = small(n_classes=3)
        with torch.no_grad():
            w = b.varphi.linears[0].weight
            w[:, 1] = w[:, 0]
        z = t([[0.4, -0.2]])
        out0 = b.decode_uncertainty(torch.tensor([0]), z)
        out1 = b.decode_uncertainty(torch.tensor([1]), z)
        assert torch.equal(out0, out1)

    def test_uncertainty_class_range(self):
        with pytest.raises(ValidationError):
            small().decode_uncertainty(torch.tensor([2]), t([[0.0, 0.0]]))

    def test_uncertainty_gradient_finite_difference(self):
        b = small()
        x = t([[0.5, -0.1, 0.9]])
        z = t([[0.2, 0.7]])
        s = torch.tensor([1])
        w = b.varphi.linears[1].weight

        def f():
            return gaussian_nll(x, b.decode_uncertainty(s, z)).sum()

        g = torch.autograd.grad(f(), w)[0]
        h = 1e-6
        for i, j in [(0, 0), (1, 3), (2, 4)]:
            with torch.no_grad():
                w[i, j] += h
                fp = f().item()
                w[i, j] -= 2 * h
                fm = f().item()
                w[i, j] += h
            assert (fp - fm) / (2 * h) == pytest.approx(g[i, j].item(), rel=1e-3)


class TestPrior:
    def test_identity_generator(self):
        b = small(prior_hidden=()).identity_prior()
        noise = t(np.random.default_rng(0).normal(size=(7, 2)))
        torch.testing.assert_close(b.sample_prior(noise), noise, rtol=0, atol=0)

    def test_identity_needs_linear_generator(self):
        with pytest.raises(ValidationError):
            small().identity_prior()

    def test_reproducible(self):
        b = small()
        n1 = torch.randn(5, 2, generator=torch.Generator().manual_seed(9), dtype=DTYPE)
        n2 = torch.randn(5, 2, generator=torch.Generator().manual_seed(9), dtype=DTYPE)
        assert torch.equal(b.sample_prior(n1), b.sample_prior(n2))

    def test_linear_pushforward(self):
        b = small(prior_hidden=())
        A = b.psi.linears[0].weight.detach().numpy()
        c = b.psi.linears[0].bias.detach().numpy()
        with torch.no_grad():
            b.psi.linears[0].bias.copy_(t([0.5, -1.0]))
        c = np.array([0.5, -1.0])
        n = 100_000
        noise = torch.randn(n, 2, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        with torch.no_grad():
            zs = b.sample_prior(noise).numpy()
        cov = A @ A.T
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(zs.mean(0) - c) <= 3 * sd / math.sqrt(n))
        emp = np.cov(zs.T)
        # var of a sample covariance entry: (cov_ij^2 + cov_ii cov_jj) / n
        se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / n)
        assert np.all(np.abs(emp - cov) <= 3 * se)

    def test_explicit_prior_passes_noise(self):
        b = small(explicit_prior=True)
        noise = t([[0.1, 0.2]])
        assert torch.equal(b.sample_prior(noise), noise)

    def test_bad_noise_shape(self):
        with pytest.raises(ValidationError):
            small().sample_prior(t([[0.1, 0.2, 0.3]]))


class TestDiscriminators:
    def test_zero_weights_half(self):
        b = small()
        for name in ("eta", "omega", "tau"):
            zero_block(b, name)
        assert float(b.discriminate("latent", t([[1.0, 2.0]])).detach()) == 0.5
        assert float(b.discriminate("output", t([[1.0, 2.0, 3.0]])).detach()) == 0.5
        assert float(b.discriminate("sensitive", t([[0.0, 1.0]])).detach()) == 0.5

    def test_clamped(self):
        b = small()
        with torch.no_grad():
            b.eta.linears[-1].bias.fill_(1e4)
        d = float(b.discriminate("latent", t([[0.0, 0.0]])).detach())
        assert d == pytest.approx(1 - 1e-6, abs=1e-15)
        with torch.no_grad():
            b.eta.linears[-1].bias.fill_(-1e4)
        assert float(b.discriminate("latent", t([[0.0, 0.0]])).detach()) == pytest.approx(1e-6, rel=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            small().discriminate("output", t([[1.0, 2.0]]))
        with pytest.raises(ValidationError):
            small().discriminate("bogus", t([[1.0, 2.0]]))

    def test_density_ratio_identity(self):
        # D_eta trained to separate N(0,1) (real) from N(1,1) (fake): the
        # optimal logit is log N(x;0,1) - log N(x;1,1) = 0.5 - x.
        b = ModelBundle(d_x=1, n_classes=2, d_z=1, hidden=(16,), activation="tanh", seed=0)
        opt = torch.optim.Adam(b.block_parameters("eta"), lr=1e-2)
        g = torch.Generator().manual_seed(0)
        real = torch.randn(20_000, 1, generator=g, dtype=DTYPE)
        fake = torch.randn(20_000, 1, generator=g, dtype=DTYPE) + 1.0
        for _ in range(1000):
            lr_ = b.discriminator_logit("latent", real)
            lf = b.discriminator_logit("latent", fake)
            loss = -torch.nn.functional.logsigmoid(lr_).mean() - torch.nn.functional.logsigmoid(-lf).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        grid = torch.linspace(-1.0, 2.0, 31, dtype=DTYPE)[:, None]
        with torch.no_grad():
            logit = b.discriminator_logit("latent", grid).numpy()
        np.testing.assert_allclose(logit, 0.5 - grid[:, 0].numpy(), atol=0.1)


class TestOwnership:
    def _grads(self, b, out):
        names = [n for n in BLOCKS if any(p.requires_grad for p in b.block_parameters(n))]
        params = [p for n in names for p in b.block_parameters(n)]
        gs = torch.autograd.grad(out, params, allow_unused=True)
        touched, i = set(), 0
        for n in names:
            for p in b.block_parameters(n):
                if gs[i] is not None and bool(gs[i].abs().sum() > 0):
                    touched.add(n)
                i += 1
        return touched

    def test_each_op_touches_its_block(self):
        b = small(n_classes=3)
        x = t(np.random.default_rng(0).normal(size=(4, 3)))
        z = t(np.random.default_rng(1).normal(size=(4, 2)))
        s = torch.tensor([0, 1, 2, 1])
        noise = t(np.random.default_rng(2).normal(size=(4, 2)))
        assert self._grads(b, b.encode(x, noise)[1].sum()) == {"phi"}
        assert self._grads(b, b.decode_utility(z).sum()) == {"theta"}
        assert self._grads(b, (b.decode_sensitive(z)[:, 0]).sum()) == {"xi"}
        assert self._grads(b, b.marginal_sensitive()[0]) == {"xi"}
        assert self._grads(b, b.decode_uncertainty(s, z).sum()) == {"varphi"}
        assert self._grads(b, b.sample_prior(noise).sum()) == {"psi"}
        assert self._grads(b, b.discriminate("latent", z).sum()) == {"eta"}
        assert self._grads(b, b.discriminate("output", x).sum()) == {"omega"}
        assert self._grads(b, b.discriminate("sensitive", b.one_hot(s)).sum()) == {"tau"}

    def test_blocks_disjoint(self):
        b = small()
        ids = [id(p) for n in BLOCKS for p in b.block_parameters(n)]
        assert len(ids) == len(set(ids)) == len(list(b.parameters()))


class TestCheckpoint:
    @pytest.mark.parametrize("kw", [{}, {"xi_hidden": (3,), "disc_hidden": (4, 2)}, {"xi_hidden": ()}])
    def test_round_trip(self, tmp_path, kw):
        b = small(seed=4, explicit_prior=False, **kw)
        p = tmp_path / "m.dvpf"
        save_checkpoint(b, p, extra={"note": 1})
        c, manifest = load_checkpoint(p)
        assert manifest["format"] == "dvpf-ckpt-1"
        assert manifest["extra"] == {"note": 1}
        for n in BLOCKS:
            np.testing.assert_array_equal(c.flat_block(n), b.flat_block(n))
        assert c.config() == b.config()

    def test_bytes_identical(self, tmp_path):
        save_checkpoint(small(), tmp_path / "a")
        save_checkpoint(small(), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_not_an_archive(self, tmp_path):
        p = tmp_path / "junk"
        p.write_text("hello")
        with pytest.raises(ParseError):
            load_checkpoint(p)

    def test_flat_block_size_checked(self):
        with pytest.raises(ValidationError):
            small().load_flat_block("eta", np.zeros(3))
