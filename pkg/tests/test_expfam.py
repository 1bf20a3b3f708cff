import numpy as np
import pytest

from conftest import random_matrix_kernel
from diffstein import ConfigError, SingularMatrixError
from diffstein.diffusion import Decay, Identity, builtin_diffusion
from diffstein.estimators import dksd_loss, dsm_loss, sandwich_covariance
from diffstein.expfam import (
    EXPFAM_IDS,
    ExpFamSpec,
    QuadraticForm,
    builtin_expfam,
    dksd_quadratic,
    dsm_quadratic,
    expfam_asymptotic_cov,
    gaussian_location_expfam,
    gaussian_natural,
    intractable_expfam,
    solve_quadratic,
)
from diffstein.harness.samplers import sample_from
from diffstein.kernel import gaussian_kernel, identity_kernel, imq_kernel
from diffstein.steinkern import SteinKernelCtx


def _linear_family():
    """``T(x) = x``, ``b(x) = -x^2 / 2``: unit-variance Gaussian with mean theta."""
    return ExpFamSpec(
        1, 1,
        T=lambda X: X.copy(),
        grad_T=lambda X: np.ones((X.shape[0], 1, 1)),
        hess_T=lambda X: np.zeros((X.shape[0], 1, 1, 1)),
        b=lambda X: -0.5 * X[:, 0] ** 2,
        grad_b=lambda X: -X,
        hess_b=lambda X: -np.ones((X.shape[0], 1, 1)),
    )


def _families(rng):
    return [
        (gaussian_natural(), rng.normal(0.5, 1.3, size=(40, 1)),
         lambda: np.array([rng.normal(), -rng.uniform(0.1, 2.0)])),
        (gaussian_location_expfam(2), rng.normal(size=(40, 2)), lambda: rng.normal(size=2)),
        (intractable_expfam(6), sample_from("intractable_expfam", [-1.0], 40, 3), lambda: rng.normal(size=1)),
    ]


@pytest.mark.parametrize("diff", ["identity", "decay"])
def test_quadratic_equals_generic_loss(diff):
    rng = np.random.default_rng(0)
    for spec, X, draw in _families(rng):
        d = spec.dim_x
        m = builtin_diffusion(diff, dim=d)
        K = random_matrix_kernel(rng, d)
        qk = dksd_quadratic(spec, K, m, X)
        qd = dsm_quadratic(spec, m, X)
        for _ in range(10):
            th = draw()
            ref = dksd_loss(SteinKernelCtx(spec, K, m, th, X))
            assert abs(qk(th) - ref) <= 1e-10 * (1 + abs(ref))
            ref = dsm_loss(spec, m, th, X)
            assert abs(qd(th) - ref) <= 1e-10 * (1 + abs(ref))


def test_gaussian_natural_A_psd():
    X = np.random.default_rng(1).normal(size=(50, 1))
    for K in (identity_kernel(1, gaussian_kernel(1.0)), identity_kernel(1, imq_kernel(1.0, -0.5))):
        q = dksd_quadratic(gaussian_natural(), K, Identity(1), X)
        assert np.array_equal(q.A, q.A.T)
        assert np.linalg.eigvalsh(q.A).min() > 0


def test_two_point_hand_case():
    X = np.array([[0.3], [1.1]])
    k = gaussian_kernel(1.0)
    q = dksd_quadratic(_linear_family(), identity_kernel(1, k), Identity(1), X)
    assert q.A[0, 0] == pytest.approx(k.eval(X[0], X[1]), rel=1e-15)


def test_dsm_closed_form_examples():
    X = np.random.default_rng(2).normal(0.7, 0.4, size=(30, 1))
    q = dsm_quadratic(_linear_family(), Identity(1), X)
    assert q.A[0, 0] == 1.0
    th = solve_quadratic(dsm_quadratic(gaussian_location_expfam(1), Identity(1), X))
    assert th[0] == pytest.approx(X.mean(), rel=1e-12)


def test_solve_quadratic_examples():
    q = QuadraticForm(np.eye(2), np.array([-2.0, 0.0]), 0.0)
    np.testing.assert_allclose(solve_quadratic(q), [1.0, 0.0], atol=1e-15)
    rng = np.random.default_rng(3)
    L = rng.normal(size=(3, 3))
    q = QuadraticForm(L @ L.T + np.eye(3), rng.normal(size=3), 0.5)
    th = solve_quadratic(q)
    assert np.max(np.abs(q.grad(th))) < 1e-10
    for _ in range(50):
        assert q(th) <= q(th + 0.1 * rng.normal(size=3))


def test_singular_quadratic_reports_eigenvalue():
    q = QuadraticForm(np.array([[1.0, 0.0], [0.0, -1e-3]]), np.zeros(2), 0.0)
    with pytest.raises(SingularMatrixError, match="min eigenvalue"):
        solve_quadratic(q)


def test_closed_form_is_global_minimum_of_generic_loss():
    rng = np.random.default_rng(4)
    spec = gaussian_natural()
    X = rng.normal(1.0, 0.5, size=(100, 1))
    K = identity_kernel(1, gaussian_kernel(1.0))
    th = solve_quadratic(dksd_quadratic(spec, K, Identity(1), X))
    best = dksd_loss(SteinKernelCtx(spec, K, None, th, X))
    for _ in range(50):
        t = th + rng.normal(scale=0.2, size=2)
        if t[1] >= 0:
            continue
        assert best <= dksd_loss(SteinKernelCtx(spec, K, None, t, X))


def test_theta_dependent_diffusion_rejected():
    spec = gaussian_location_expfam(1)
    m = builtin_diffusion("student_loc")
    with pytest.raises(ConfigError):
        dsm_quadratic(spec, m, np.zeros((3, 1)))
    with pytest.raises(ConfigError):
        dksd_quadratic(spec, identity_kernel(1, gaussian_kernel(1.0)), m, np.zeros((3, 1)))


def test_asymptotic_cov_agrees_with_sandwich():
    rng = np.random.default_rng(5)
    spec = gaussian_natural()
    X = rng.normal(0.0, 1.0, size=(1000, 1))
    K = identity_kernel(1, gaussian_kernel(1.0))
    for kind in ("dsm", "dksd"):
        cov = expfam_asymptotic_cov(kind, spec, K if kind == "dksd" else None, Identity(1), X)
        assert np.array_equal(cov, cov.T) and np.linalg.eigvalsh(cov).min() > 0
        if kind == "dsm":
            th = solve_quadratic(dsm_quadratic(spec, Identity(1), X))
            sw = sandwich_covariance("dsm", spec, Identity(1), th, X)
        else:
            th = solve_quadratic(dksd_quadratic(spec, K, Identity(1), X))
            sw = sandwich_covariance("dksd", SteinKernelCtx(spec, K, None, th, X))
        np.testing.assert_allclose(np.diag(cov), np.diag(sw), rtol=0.10)


def test_asymptotic_cov_shrinks_like_one_over_n():
    rng = np.random.default_rng(6)
    spec = gaussian_natural()
    vals = {}
    for n in (1000, 4000):
        X = rng.normal(0.0, 1.0, size=(n, 1))
        vals[n] = np.diag(expfam_asymptotic_cov("dsm", spec, None, Decay(1), X)) / n
    np.testing.assert_allclose(vals[4000], vals[1000] / 4, rtol=0.30)


def test_asymptotic_cov_matches_replications():
    rng = np.random.default_rng(7)
    spec = gaussian_natural()
    n, R = 500, 300
    est = []
    for _ in range(R):
        X = rng.normal(0.0, 1.0, size=(n, 1))
        est.append(solve_quadratic(dsm_quadratic(spec, Identity(1), X)))
    emp = n * np.cov(np.array(est).T)
    cov = expfam_asymptotic_cov("dsm", spec, None, Identity(1), rng.normal(size=(20000, 1)))
    np.testing.assert_allclose(np.diag(emp), np.diag(cov), rtol=0.25)


@pytest.mark.parametrize("kind", ["dsm", "dksd"])
def test_strong_consistency_smoke(kind):
    rng = np.random.default_rng(8)
    spec = gaussian_natural()
    truth = np.array([0.0, -0.5])
    K = identity_kernel(1, gaussian_kernel(1.0))
    sizes = (100, 400, 1600) if kind == "dsm" else (50, 200, 800)
    med = []
    for n in sizes:
        errs = []
        for _ in range(50):
            X = rng.normal(0.0, 1.0, size=(n, 1))
            q = dsm_quadratic(spec, Identity(1), X) if kind == "dsm" else dksd_quadratic(spec, K, Identity(1), X)
            errs.append(np.linalg.norm(solve_quadratic(q) - truth))
        med.append(np.median(errs))
    assert med[0] > med[1] > med[2]


def test_builtin_expfam_ids():
    for name in EXPFAM_IDS:
        assert builtin_expfam(name).dim_theta >= 1
    with pytest.raises(ConfigError):
        builtin_expfam("poisson")
