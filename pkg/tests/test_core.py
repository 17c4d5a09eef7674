import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bulkdiff._accel import backend_as
from bulkdiff.core import (CoefficientModel, Configuration, Domain, RandomStream, ValidationError,
                           ellipticity_audit, eval_a, mesoscopic_grid, palm_sample, read_snapshot,
                           sample_poisson, sample_with_collar, translate_restrict, write_snapshot)
from bulkdiff.kernels.coefficients import coefficient_field

CI = CoefficientModel("count-indicator", 2.0)


# --- domains -----------------------------------------------------------------

def test_cube_side_and_bounds():
    U = Domain.cube(2, 2)
    assert U.side == 9.0
    assert np.allclose(U.lower, -4.5) and np.allclose(U.upper, 4.5)
    assert U.volume == 81.0


def test_cube_is_open():
    U = Domain.cube(0, 1)
    assert not U.contains([[0.5]])[0]
    assert U.contains([[0.4999]])[0]


def test_domain_rejects_bad_input():
    with pytest.raises(ValidationError):
        Domain(3)
    with pytest.raises(ValidationError):
        Domain.torus(1.5, 1)
    with pytest.raises(ValidationError):
        Domain(1, "sphere")


def test_torus_wrap_and_displacement():
    T = Domain.torus(10.0, 1)
    assert np.isclose(T.wrap(np.array([6.0]))[0], -4.0)
    assert np.isclose(T.displacement(np.array([4.5]), np.array([-4.5]))[0], 1.0)


def test_mesoscopic_grid_tiles_cube():
    Z = mesoscopic_grid(2, 1, 1)
    assert np.allclose(np.sort(Z[:, 0]), [-3, 0, 3])
    assert mesoscopic_grid(2, 0, 2).shape == (81, 2)
    with pytest.raises(ValidationError):
        mesoscopic_grid(1, 2, 1)


# --- configurations ----------------------------------------------------------

def test_configuration_is_immutable():
    mu = Configuration(np.array([[0.1], [0.2]]), Domain.cube(1, 1))
    with pytest.raises(ValueError):
        mu.points[0, 0] = 1.0


def test_configuration_rejects_outside_points():
    with pytest.raises(ValidationError):
        Configuration(np.array([[2.0]]), Domain.cube(1, 1))


def test_translate_restrict_on_torus_wraps():
    T = Domain.torus(10.0, 1)
    mu = Configuration(np.array([[4.8], [-4.9]]), T)
    loc = translate_restrict(mu, [4.8], Domain(1, "box", 1.0))
    assert loc.n == 2
    assert np.allclose(np.sort(loc.points[:, 0]), [0.0, 0.3])


# --- coefficients ------------------------------------------------------------

def test_identity_model_is_identity():
    m = CoefficientModel()
    assert np.allclose(m.a0(np.array([[0.3, 0.1]])), np.eye(2))


def test_count_indicator_counts_center():
    # an atom at the origin plus one neighbour reaches the threshold 2
    mu = Configuration(np.array([[0.0], [0.5]]))
    assert eval_a(CI, mu, [0.0])[0, 0] == 2.0
    lone = Configuration(np.array([[0.0], [1.5]]))
    assert eval_a(CI, lone, [0.0])[0, 0] == 1.0


def test_anisotropic_needs_both_half_balls():
    m = CoefficientModel("anisotropic-count", 3.0)
    a = m.a0(np.array([[0.5, 0.0], [-0.5, 0.0]]))
    assert np.allclose(np.diag(a), [3.0, 1.0])


def test_smooth_count_is_between_bounds():
    m = CoefficientModel("smooth-count", 2.0, width=0.5)
    vals = [m.a0(np.array([[r]]))[0, 0] for r in np.linspace(0, 1.2, 25)]
    assert min(vals) >= 1.0 and max(vals) <= 2.0
    assert np.all(np.diff(vals) <= 1e-12)


def test_model_validation():
    with pytest.raises(ValidationError):
        CoefficientModel("count-indicator", 0.5)
    with pytest.raises(ValidationError):
        CoefficientModel("nope")


def test_ellipticity_audit_passes_catalog():
    rng = np.random.default_rng(0)
    for kind in ("identity", "count-indicator", "smooth-count", "anisotropic-count"):
        ok, bad = ellipticity_audit(CoefficientModel(kind, 2.0), 1000, 2, rng)
        assert ok, (kind, bad)


def test_ellipticity_audit_flags_corrupted_lambda():
    ok, bad = ellipticity_audit(CoefficientModel.unchecked(kind="count-indicator", Lambda=0.5), 1000, 1)
    assert not ok and bad


@pytest.mark.parametrize("kind", ["identity", "count-indicator", "smooth-count", "anisotropic-count"])
@pytest.mark.parametrize("d", [1, 2])
def test_coefficient_backends_agree(kind, d):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-3, 3, size=(40, d))
    X = rng.uniform(-3, 3, size=(30, d))
    m = CoefficientModel(kind, 2.5, width=0.3)
    skip = rng.integers(-1, 40, size=30)
    with backend_as("numpy"):
        a = coefficient_field(pts, X, m.code, m.params, 6.0, skip, True)
    with backend_as("numba"):
        b = coefficient_field(pts, X, m.code, m.params, 6.0, skip, True)
    assert np.allclose(a, b, rtol=0, atol=1e-13)


# --- sampling ----------------------------------------------------------------

def test_poisson_counts_chi_square():
    rng = RandomStream(7).generator()
    U = Domain.cube(1, 1)
    counts = np.array([sample_poisson(U, 1.0, rng).n for _ in range(4000)])
    k = np.arange(0, 8)
    obs = np.array([np.sum(counts == i) for i in k[:-1]] + [np.sum(counts >= k[-1])])
    p = stats.poisson.pmf(k[:-1], 3.0)
    exp = 4000 * np.append(p, 1 - p.sum())
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_poisson_positions_uniform():
    rng = RandomStream(8).generator()
    U = Domain.cube(1, 1)
    xs = np.concatenate([sample_poisson(U, 1.0, rng).points[:, 0] for _ in range(1000)])
    assert stats.kstest((xs + 1.5) / 3, "uniform").pvalue > 0.01


def test_max_count_truncation():
    rng = RandomStream(9).generator()
    U = Domain.cube(1, 1)
    assert max(sample_poisson(U, 1.0, rng, max_count=2).n for _ in range(500)) <= 2


def test_palm_sample_has_origin():
    mu = palm_sample(Domain(1, "box", 2.5), 1.0, 0)
    assert np.allclose(mu.points[0], 0.0)


def test_collar_sample_marks_inside():
    U = Domain.cube(0, 1)
    mu, ins = sample_with_collar(U, 2.0, RandomStream(3).generator())
    assert np.all(U.contains(mu.points[ins]))
    assert not np.any(U.contains(mu.points[~ins]))


def test_streams_reproducible_and_distinct():
    a = RandomStream(5, (1,)).generator().random(5)
    b = RandomStream(5, (1,)).generator().random(5)
    c = RandomStream(5, (2,)).generator().random(5)
    assert np.array_equal(a, b) and not np.allclose(a, c)


def test_snapshot_roundtrip(tmp_path):
    T = Domain.torus(9.0, 2)
    mu = sample_poisson(T, 1.0, 4)
    write_snapshot(tmp_path / "s.txt", mu, time=1.25)
    nu, t = read_snapshot(tmp_path / "s.txt")
    assert t == 1.25 and nu.domain == T and np.array_equal(nu.points, mu.points)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=0, max_size=12), st.floats(-4, 4))
def test_count_indicator_property(xs, x):
    pts = np.array(xs, dtype=float).reshape(-1, 1)
    a = CI.field(pts, np.array([[x]]))[0, 0, 0]
    n_near = int(np.sum(np.abs(pts[:, 0] - x) < 1.0)) if len(xs) else 0
    assert a == (2.0 if n_near >= 2 else 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), max_size=10), st.floats(0, 2 * math.pi))
def test_isotropic_models_rotation_invariant(pts, th):
    P = np.array(pts, dtype=float).reshape(-1, 2)
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    m = CoefficientModel("smooth-count", 2.0, width=0.4)
    a = m.a0(P)
    b = m.a0(P @ R.T)
    assert np.allclose(a, b, atol=1e-9)
