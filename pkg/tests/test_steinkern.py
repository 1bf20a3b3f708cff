import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FD_TOL, central_diff, langevin_ksd_kernel, random_stein_setup, rel_err
from diffstein import DomainError
from diffstein.diffusion import Decay, Identity, builtin_diffusion
from diffstein.expfam import dksd_quadratic, gaussian_natural
from diffstein.kernel import DiagonalKernel, gaussian_kernel, identity_kernel, imq_kernel
from diffstein.model import builtin_model
from diffstein.steinkern import (
    KnownDensity,
    SteinKernelCtx,
    dsm_limit_check,
    gaussian_density,
    stein_kernel,
    stein_kernel_dense,
    stein_kernel_grad_theta,
)


def test_standard_normal_at_origin():
    model = builtin_model("gaussian_meancov")
    ctx = SteinKernelCtx(model, identity_kernel(1, gaussian_kernel(1.0)), Identity(1), [0.0, 1.0])
    assert stein_kernel(ctx, [0.0], [0.0]) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_fast_path_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    model, K, m, th, pts = random_stein_setup(rng)
    ctx = SteinKernelCtx(model, K, m, th)
    x, y = pts(2)
    fast, dense = stein_kernel(ctx, x, y), stein_kernel_dense(ctx, x, y)
    assert abs(fast - dense) <= 1e-12 * (1 + abs(dense))


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_grad_theta_matches_fd(seed):
    rng = np.random.default_rng(seed)
    model, K, m, th, pts = random_stein_setup(rng)
    x, y = pts(2)
    g = stein_kernel_grad_theta(SteinKernelCtx(model, K, m, th), x, y)
    fd = central_diff(lambda t: stein_kernel(SteinKernelCtx(model, K, m, t), x, y), th)
    assert rel_err(g, fd) < FD_TOL


def test_grad_theta_fd_fallback_flag():
    rng = np.random.default_rng(11)
    model, K, m, th, pts = random_stein_setup(rng, index=2)
    X = pts(6)
    a = SteinKernelCtx(model, K, m, th, X).grad_row_sums()
    b = SteinKernelCtx(model, K, m, th, X, fd_theta=True).grad_row_sums()
    assert rel_err(a, b) < 1e-6


def test_student_t_grad_fd_tight():
    model = builtin_model("student_t", {"nu": 5})
    K = identity_kernel(1, imq_kernel(1.0, -0.5))
    m = builtin_diffusion("student_loc")
    rng = np.random.default_rng(3)
    for _ in range(20):
        th = np.array([rng.normal(25, 2), rng.uniform(5, 15)])
        x, y = rng.normal(25, 10, size=(2, 1))
        g = stein_kernel_grad_theta(SteinKernelCtx(model, K, m, th), x, y)
        fd = central_diff(lambda t: stein_kernel(SteinKernelCtx(model, K, m, t), x, y), th)
        assert rel_err(g, fd) < FD_TOL


def test_symmetry_over_1000_pairs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        model, K, m, th, pts = random_stein_setup(rng)
        ctx = SteinKernelCtx(model, K, m, th)
        X, Y = pts(20), pts(20)
        A = ctx.matrix(X, Y)
        B = ctx.matrix(Y, X)
        worst = max(worst, float(np.max(np.abs(A - B.T) / (1 + np.abs(A)))))
    assert worst < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_stein_gram_psd(seed):
    rng = np.random.default_rng(100 + seed)
    model, K, m, th, pts = random_stein_setup(rng)
    X = pts(30)
    G = SteinKernelCtx(model, K, m, th).matrix(X, X)
    assert np.max(np.abs(G - G.T)) <= 1e-10 * (1 + np.max(np.abs(G)))
    assert np.linalg.eigvalsh(0.5 * (G + G.T)).min() >= -1e-8 * np.trace(G) / 30


@pytest.mark.parametrize("kern", [gaussian_kernel(0.8), imq_kernel(1.5, -0.5)])
@pytest.mark.parametrize("name,hyper,theta", [
    ("gaussian_location", {"d": 2}, [0.3, -0.2]),
    ("student_t", {"nu": 5.0, "d": 2}, [1.0, 0.5, 2.0]),
])
def test_identity_diffusion_is_langevin_ksd(kern, name, hyper, theta):
    model = builtin_model(name, hyper)
    d = model.dim_x
    ctx = SteinKernelCtx(model, identity_kernel(d, kern), Identity(d), theta)
    u = lambda v: model.score_x(v, theta)  # noqa: E731
    rng = np.random.default_rng(8)
    for _ in range(50):
        x, y = rng.normal(size=(2, d)) * 2
        ref = langevin_ksd_kernel(kern, u, x, y)
        assert abs(stein_kernel(ctx, x, y) - ref) <= 1e-12 * (1 + abs(ref))


@pytest.mark.parametrize("m", [Decay(2, 2.0), Decay(2, 3.0), builtin_diffusion("student_loc", dim=2)])
def test_scalar_diffusion_is_weighted_ksd(m):
    model = builtin_model("student_t", {"nu": 5.0, "d": 2})
    th = np.array([0.5, -0.3, 1.7])
    kern = gaussian_kernel(1.2)
    ctx = SteinKernelCtx(model, identity_kernel(2, kern), m, th)
    u = lambda v: model.score_x(v, th)  # noqa: E731
    h = lambda v: m.eval(v, th)[0, 0]  # noqa: E731
    gh = lambda v: m.div_x(v, th)  # noqa: E731
    rng = np.random.default_rng(9)
    for _ in range(50):
        x, y = rng.normal(size=(2, 2)) * 2
        ref = langevin_ksd_kernel(kern, u, x, y, h, gh)
        assert abs(stein_kernel(ctx, x, y) - ref) <= 1e-12 * (1 + abs(ref))


def test_exponential_family_gradient_is_affine():
    spec = gaussian_natural()
    K = identity_kernel(1, gaussian_kernel(1.0))
    rng = np.random.default_rng(4)
    for _ in range(10):
        X = rng.normal(size=(2, 1))
        q = dksd_quadratic(spec, K, Identity(1), X)
        th = np.array([rng.normal(), -rng.uniform(0.2, 2.0)])
        g = stein_kernel_grad_theta(SteinKernelCtx(spec, K, Identity(1), th), X[0], X[1])
        ref = 2 * q.A @ th + q.v
        assert np.max(np.abs(g - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))


def test_theta_free_direction_has_zero_gradient():
    # T = (x, 1): the second coordinate never touches the score
    from diffstein.expfam import ExpFamSpec

    spec = ExpFamSpec(
        1, 2,
        T=lambda X: np.concatenate([X, np.ones_like(X)], axis=1),
        grad_T=lambda X: np.stack([np.ones_like(X), np.zeros_like(X)], axis=1),
        hess_T=lambda X: np.zeros((X.shape[0], 2, 1, 1)),
        b=lambda X: -0.5 * X[:, 0] ** 2,
        grad_b=lambda X: -X,
        hess_b=lambda X: -np.ones((X.shape[0], 1, 1)),
    )
    ctx = SteinKernelCtx(spec, identity_kernel(1, gaussian_kernel(1.0)), Decay(1), [0.3, 0.7])
    g = stein_kernel_grad_theta(ctx, [0.4], [-1.3])
    assert g[1] == 0.0 and g[0] != 0.0


def test_single_point_api_rejects_batches():
    model = builtin_model("gaussian_location")
    ctx = SteinKernelCtx(model, identity_kernel(1, gaussian_kernel(1.0)), None, [0.0])
    with pytest.raises(DomainError):
        stein_kernel(ctx, np.zeros((2, 1)), np.zeros((1, 1)))


# ----------------------------------------------------------------------
# DSM as the small-bandwidth limit

GAMMAS = (1.0, 0.3, 0.1, 0.03)


def _quadrature_nodes(q_var=1.0, half_width=8.0, num=2000):
    z = np.linspace(-half_width, half_width, num)
    w = np.exp(-0.5 * z**2 / q_var)
    return z.reshape(-1, 1), w


@pytest.mark.parametrize("model_theta", [[1.0, 1.0], [0.0, 1.5]])
def test_dsm_limit_gap_strictly_decreasing_quadrature(model_theta):
    model = builtin_model("gaussian_meancov")
    X, w = _quadrature_nodes()
    gaps = dsm_limit_check(model, model_theta, gaussian_density(0.0, 1.0), X, GAMMAS, weights=w)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-2 * gaps[0]


def test_dsm_limit_with_decay_diffusion():
    model = builtin_model("gaussian_meancov")
    X, w = _quadrature_nodes()
    gaps = dsm_limit_check(model, [0.5, 1.0], gaussian_density(0.0, 1.0), X, GAMMAS,
                           diffusion=Decay(1, 2.0), weights=w)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_dsm_limit_well_specified_is_small():
    # Q = P: both population discrepancies vanish; the U-statistic values are noise
    model = builtin_model("gaussian_meancov")
    rng = np.random.default_rng(0)
    vals = {}
    for n in (200, 1600):
        X = rng.normal(size=(n, 1))
        vals[n] = dsm_limit_check(model, [0.0, 1.0], gaussian_density(0.0, 1.0), X, [1.0])[0]
    assert vals[1600] < 0.05
    assert vals[1600] < vals[200]


def test_dsm_limit_rejects_zero_density():
    model = builtin_model("gaussian_meancov")
    q = KnownDensity(lambda X: np.where(np.atleast_2d(X)[:, 0] > 0, 0.0, -np.inf),
                     lambda X: np.zeros_like(np.atleast_2d(X)))
    with pytest.raises(DomainError):
        dsm_limit_check(model, [0.0, 1.0], q, np.array([[1.0], [-1.0]]), [1.0])


def test_diagonal_kernel_fast_path_three_dims():
    model = builtin_model("student_t", {"nu": 5.0, "d": 3})
    K = DiagonalKernel([1.0, 2.0, 0.5], [gaussian_kernel(1.0), imq_kernel(1.0, -0.5), gaussian_kernel(2.0)])
    m = builtin_diffusion("student_loc", dim=3)
    th = np.array([0.1, 0.2, -0.3, 1.5])
    ctx = SteinKernelCtx(model, K, m, th)
    rng = np.random.default_rng(2)
    for _ in range(20):
        x, y = rng.normal(size=(2, 3))
        assert abs(stein_kernel(ctx, x, y) - stein_kernel_dense(ctx, x, y)) <= 1e-12 * (1 + abs(stein_kernel_dense(ctx, x, y)))
