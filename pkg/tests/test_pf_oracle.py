import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvpf.errors import CapacityError, ParseError, ValidationError
from dvpf.info_measures import entropy, marginals, mutual_information
from dvpf.pf_oracle import (
    check_channel,
    deterministic_channels,
    induced_informations,
    pf_curve,
    project_rows_to_simplex,
    read_joint,
    solve_lagrangian,
    write_joint,
)

J22 = np.array([[0.4, 0.1], [0.1, 0.4]])
J24 = np.array([[0.3, 0.1, 0.05, 0.05], [0.05, 0.1, 0.15, 0.2]])

# random 4x3 channel; reference values from a brute-force enumeration of
# p(s, x, z) written independently of the library
W43 = np.array([
    [0.28769371291950846, 0.13401472503728692, 0.5782915620432046],
    [0.07436935382100383, 0.5501827912232045, 0.37544785495579175],
    [0.09619507129848956, 0.8416158872456332, 0.062189041455877246],
    [0.7297801729088473, 0.11755934629478723, 0.15266048079636543],
])
W43_IXZ = 0.4158388548163626
W43_ISZ = 0.04456566975521961


def random_channels(n, n_x, n_z, rng):
    out = []
    for conc in (1.0, 0.1, 0.03):
        out.append(rng.dirichlet(np.full(n_z, conc), size=(n // 3, n_x)))
    return np.concatenate(out)


def batched_informations(joint, w):
    """(I(X;Z), I(S;Z)) in bits for a stack of channels, straight from the definitions."""
    ps, px = joint.sum(1), joint.sum(0)
    pxz = px[None, :, None] * w
    pz = pxz.sum(1)
    psz = np.einsum("sx,nxz->nsz", joint, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        ix = np.nansum(pxz * np.log2(pxz / (px[None, :, None] * pz[:, None, :])), axis=(1, 2))
        is_ = np.nansum(psz * np.log2(psz / (ps[None, :, None] * pz[:, None, :])), axis=(1, 2))
    return ix, is_


class TestInducedInformations:
    def test_identity(self):
        ix, is_ = induced_informations(J24, np.eye(4))
        assert ix == pytest.approx(entropy(J24.sum(0)), abs=1e-12)
        assert is_ == pytest.approx(mutual_information(J24), abs=1e-12)

    def test_constant(self):
        ix, is_ = induced_informations(J24, np.full((4, 3), 1 / 3))
        assert ix == pytest.approx(0.0, abs=1e-12)
        assert is_ == pytest.approx(0.0, abs=1e-12)

    def test_random_channel_brute_force(self):
        ix, is_ = induced_informations(J24, W43)
        assert ix == pytest.approx(W43_IXZ, abs=1e-12)
        assert is_ == pytest.approx(W43_ISZ, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            induced_informations(J24, np.eye(3))

    def test_bad_rows(self):
        with pytest.raises(ValidationError):
            check_channel([[0.5, 0.6], [1.0, 0.0]])

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_data_processing(self, seed, n_z):
        rng = np.random.default_rng(seed)
        joint = rng.dirichlet(np.ones(12)).reshape(3, 4)
        w = rng.dirichlet(np.full(n_z, 0.5), size=4)
        ix, is_ = induced_informations(joint, w)
        assert is_ <= mutual_information(joint) + 1e-9
        assert is_ <= ix + 1e-9


class TestProjection:
    @given(st.integers(0, 1000))
    def test_rows_on_simplex(self, seed):
        v = np.random.default_rng(seed).normal(size=(5, 4)) * 3
        p = project_rows_to_simplex(v)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)

    def test_fixed_point(self):
        w = np.array([[0.2, 0.8], [1.0, 0.0]])
        np.testing.assert_allclose(project_rows_to_simplex(w), w, atol=1e-15)


class TestSolveLagrangian:
    def test_alpha_zero_copies(self):
        _, ix, _ = solve_lagrangian(J24, 0.0)
        assert ix == pytest.approx(entropy(J24.sum(0)), abs=1e-6)

    def test_independent_joint(self):
        joint = np.outer([0.3, 0.7], [0.1, 0.2, 0.3, 0.4])
        for alpha in (0.5, 5.0):
            _, ix, is_ = solve_lagrangian(joint, alpha)
            assert is_ == pytest.approx(0.0, abs=1e-9)
            assert ix == pytest.approx(entropy(joint.sum(0)), abs=1e-6)

    def test_small_joint_matches_exhaustive(self):
        # best of all deterministic maps plus a 2001 x 201 grid over the 2x2
        # channel simplex, computed separately: 0.44385618977472463
        w, ix, is_ = solve_lagrangian(J22, 2.0, 2)
        assert ix - 2.0 * is_ == pytest.approx(0.44385618977472463, abs=1e-6)
        check_channel(w, 2)

    def test_beats_every_deterministic_map(self):
        alpha = 1.5
        maps = deterministic_channels(4, 4)
        ix, is_ = batched_informations(J24, maps)
        _, bix, bis = solve_lagrangian(J24, alpha, 4)
        assert bix - alpha * bis >= np.max(ix - alpha * is_) - 1e-9

    def test_capacity(self):
        joint = np.full((2, 13), 1 / 26)
        with pytest.raises(CapacityError, match="variational"):
            solve_lagrangian(joint, 1.0)

    def test_negative_alpha(self):
        with pytest.raises(ValidationError):
            solve_lagrangian(J22, -1.0)

    def test_restart_count_stable(self):
        a = solve_lagrangian(J24, 1.5, 4, seeding="random", restarts=64, seed=3)
        b = solve_lagrangian(J24, 1.5, 4, seeding="random", restarts=128, seed=3)
        assert a[1] - 1.5 * a[2] == pytest.approx(b[1] - 1.5 * b[2], abs=1e-3)

    def test_random_seeding_mode(self):
        _, ix, _ = solve_lagrangian(J24, 0.0, seeding="random", restarts=16)
        assert ix == pytest.approx(entropy(J24.sum(0)), abs=1e-6)


@pytest.fixture(scope="module")
def curve24():
    return pf_curve(J24, [0.0, 0.1, 0.3, 0.5], 4)


class TestCurve:
    def test_inactive_budget(self, curve24):
        # I(S;X) of J24 is ~0.2502 bits, so budget 0.3 and 0.5 are inactive
        assert mutual_information(J24) < 0.3
        for p in curve24.points[2:]:
            assert p.utility == pytest.approx(entropy(J24.sum(0)), abs=1e-6)

    def test_s_equals_x(self):
        c = pf_curve(np.diag([0.25, 0.75]), [0.0], 2)
        assert c.points[0].utility == pytest.approx(0.0, abs=1e-9)

    def test_monotone_and_feasible(self, curve24):
        u = curve24.utilities
        assert np.all(np.diff(u) >= -1e-12)
        for p in curve24.points:
            ix, is_ = induced_informations(J24, p.achieving_channel)
            assert is_ <= p.leakage_budget + 1e-6
            assert ix == pytest.approx(p.utility, abs=1e-9)
            assert 0.0 <= p.utility <= entropy(J24.sum(0)) + 1e-9

    def test_random_channel_dominance(self, curve24):
        rng = np.random.default_rng(2024)
        w = random_channels(100_002, 4, 4, rng)
        ix, is_ = batched_informations(J24, w)
        for p in curve24.points:
            ok = is_ <= p.leakage_budget
            assert np.max(ix[ok], initial=0.0) <= p.utility + 1e-3

    def test_empty_budgets(self):
        with pytest.raises(ValidationError):
            pf_curve(J24, [])

    def test_unsorted_budgets(self):
        with pytest.raises(ValidationError):
            pf_curve(J24, [0.3, 0.1])

    def test_utility_at(self, curve24):
        assert curve24.utility_at(0.3) == pytest.approx(curve24.points[2].utility)


class TestJointFiles:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "j.txt"
        write_joint(J24, p, comment="two by four")
        np.testing.assert_array_equal(read_joint(p), J24)

    def test_comments_and_blank_lines(self, tmp_path):
        p = tmp_path / "j.txt"
        p.write_text("# header\n\n0.25 0.25   # row one\n0.25 0.25\n")
        np.testing.assert_array_equal(read_joint(p), np.full((2, 2), 0.25))

    def test_ragged(self, tmp_path):
        p = tmp_path / "j.txt"
        p.write_text("0.25 0.25\n# c\n0.5\n")
        with pytest.raises(ParseError, match="line 3") as err:
            read_joint(p)
        assert err.value.line == 3

    def test_not_a_number(self, tmp_path):
        p = tmp_path / "j.txt"
        p.write_text("0.5 abc\n")
        with pytest.raises(ParseError, match="line 1"):
            read_joint(p)

    def test_not_normalized(self, tmp_path):
        p = tmp_path / "j.txt"
        p.write_text("0.5 0.6\n")
        with pytest.raises(ValidationError):
            read_joint(p)


def test_marginals_helper():
    ps, px = marginals(J24)
    np.testing.assert_allclose(ps, [0.5, 0.5])
    np.testing.assert_allclose(px, [0.35, 0.2, 0.2, 0.25])
