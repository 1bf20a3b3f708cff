import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FD_TOL, central_diff, rel_err
from diffstein import ConfigError, SingularDiffusionError
from diffstein.diffusion import (
    DIFFUSION_IDS,
    Decay,
    Identity,
    builtin_diffusion,
    dsm_theta_independence_check,
)

CASES = [
    ("identity", {}, 3, 0),
    ("student_loc", {}, 1, 2),
    ("student_loc", {}, 2, 3),
    ("student_scale", {"nu": 5.0}, 1, 2),
    ("nonneg", {}, 2, 0),
    ("decay", {"alpha": 2.0}, 1, 0),
    ("decay", {"alpha": 2.0}, 3, 0),
    ("decay", {"alpha": 3.5}, 2, 0),
    ("recip_diag", {}, 2, 0),
]


def _draw(name, d, p, rng):
    x = rng.normal(size=d)
    if name == "recip_diag":
        x = rng.uniform(-0.5, 3.0, size=d)
    th = rng.normal(size=p)
    if p:
        th[-1] = rng.uniform(0.5, 3.0)
    return x, th


@pytest.mark.parametrize("name,hyper,d,p", CASES, ids=[f"{c[0]}-d{c[2]}-{c[1]}" for c in CASES])
@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_derivative_slots_match_fd(name, hyper, d, p, seed):
    m = builtin_diffusion(name, hyper, dim=d)
    rng = np.random.default_rng(seed)
    x, th = _draw(name, d, p, rng)
    J_fd = central_diff(lambda v: m.eval(v, th), x)                 # [i, j, k]
    assert rel_err(m.jac_x(x, th), J_fd) < FD_TOL
    assert rel_err(m.div_x(x, th), np.einsum("iji->j", J_fd)) < FD_TOL
    S_fd = central_diff(lambda v: m.mmT(v, th), x)
    assert rel_err(m.div_mmT(x, th), np.einsum("iji->j", S_fd)) < FD_TOL
    if p:
        assert rel_err(m.grad_theta(x, th), np.moveaxis(central_diff(lambda t: m.eval(x, t), th), -1, 0)) < FD_TOL
        dJ = np.moveaxis(central_diff(lambda t: m.jac_x(x, t), th), -1, 0)
        assert rel_err(m.grad_theta_jac_x(x, th), dJ) < FD_TOL
        dd = np.moveaxis(central_diff(lambda t: m.div_x(x, t), th), -1, 0)
        assert rel_err(m.grad_theta_div_x(x, th), dd) < FD_TOL
    M = m.eval(x, th)
    S = m.mmT(x, th)
    np.testing.assert_allclose(S, M @ M.T, rtol=1e-14, atol=1e-14)
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * max(1.0, np.trace(S))


@pytest.mark.parametrize("name,hyper,d,p", [c for c in CASES if c[0] in ("student_loc", "student_scale", "decay")])
def test_scalar_form_div_mmT_is_grad_h_squared(name, hyper, d, p):
    m = builtin_diffusion(name, hyper, dim=d)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, th = _draw(name, d, p, rng)
        h = lambda v: m.eval(v, th)[0, 0]  # noqa: E731
        fd = central_diff(lambda v: h(v) ** 2, x)
        assert rel_err(m.div_mmT(x, th), fd) < FD_TOL


def test_identity_slots_are_zero():
    m = Identity(2)
    X = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(m.eval(X), np.broadcast_to(np.eye(2), (3, 2, 2)))
    assert not np.any(m.div_x(X))
    assert not np.any(m.jac_x(X))
    assert not np.any(m.grad_theta(X, [1.0, 2.0]))
    assert not np.any(m.grad_theta_div_x(X, [1.0, 2.0]))


def test_examples_at_special_points():
    np.testing.assert_array_equal(Decay(2, 2.0).eval(np.zeros(2)), np.eye(2))
    m = builtin_diffusion("student_loc", dim=2)
    np.testing.assert_array_equal(m.eval(np.array([0.5, -1.0]), [0.5, -1.0, 3.0]), np.eye(2))
    assert Decay(1, 2.0).div_x(np.array([1.0]))[0] == pytest.approx(-0.5, rel=1e-15)


def test_theta_independence_check():
    assert dsm_theta_independence_check(Identity(1))
    assert not dsm_theta_independence_check(builtin_diffusion("student_loc"))
    assert dsm_theta_independence_check(builtin_diffusion("decay", {"alpha": 2}))
    assert dsm_theta_independence_check(builtin_diffusion("recip_diag", dim=2))


def test_recip_diag_singularity_raises():
    m = builtin_diffusion("recip_diag", dim=2)
    with pytest.raises(SingularDiffusionError):
        m.eval(np.array([0.3, -1.0]))
    with pytest.raises(SingularDiffusionError):
        m.eval(np.array([-1.0 + 5e-9, 2.0]))
    assert np.isfinite(m.eval(np.array([-1.0 + 1e-6, 2.0]))).all()


def test_student_scale_restricted_to_one_dimension():
    with pytest.raises(ConfigError):
        builtin_diffusion("student_scale", dim=2)


@pytest.mark.parametrize("name,hyper", [("nope", {}), ("decay", {"alpha": -1}), ("decay", {"beta": 1})])
def test_bad_diffusion_config(name, hyper):
    with pytest.raises(ConfigError):
        builtin_diffusion(name, hyper)


def test_all_ids_construct():
    for name in DIFFUSION_IDS:
        assert builtin_diffusion(name).dim == 1


def test_pinned_diffusion_matches_full():
    m = builtin_diffusion("student_loc")
    p = m.pinned([25.0, 10.0], [0])
    X = np.array([[20.0], [31.0]])
    np.testing.assert_array_equal(p.eval(X, [24.0]), m.eval(X, [24.0, 10.0]))
    np.testing.assert_array_equal(p.grad_theta(X, [24.0]), m.grad_theta(X, [24.0, 10.0])[:, :1])
