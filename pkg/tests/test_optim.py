import numpy as np
import pytest

from diffstein import ConfigError
from diffstein.diffusion import Identity
from diffstein.estimators import DKSDBundle, DSMBundle
from diffstein.expfam import dksd_quadratic, gaussian_natural, solve_quadratic
from diffstein.kernel import gaussian_kernel, identity_kernel, imq_kernel
from diffstein.model import builtin_model
from diffstein.optim import (
    FunctionBundle,
    OptimConfig,
    OptimizationAborted,
    Reparam,
    grid_refine,
    grid_scan,
    sgd_run,
)


def _student(n=200, seed=0):
    model = builtin_model("student_t")
    X = 25 + 10 * np.random.default_rng(seed).standard_t(5, size=(n, 1))
    return model, X


def test_quadratic_one_step_to_zero():
    model = builtin_model("gaussian_location", {"d": 2})
    b = FunctionBundle(model, lambda th, X: float(th @ th), lambda th, X: 2 * th)
    cfg = OptimConfig(gamma=0.5, preconditioner="none", minibatch_size=10, max_iters=1)
    th, traj = sgd_run(b, np.zeros((5, 2)), [3.0, -7.5], cfg)
    np.testing.assert_array_equal(th, [0.0, 0.0])
    assert len(traj) == 1


def test_identity_preconditioner_is_plain_sgd():
    model, X = _student()
    b = DKSDBundle(model, identity_kernel(1, imq_kernel(1.0, -0.5)))
    runs = []
    for pre in ("none", "identity"):
        cfg = OptimConfig(gamma=5.0, preconditioner=pre, minibatch_size=20, max_iters=15, seed=3)
        runs.append(sgd_run(b, X, [20.0, 8.0], cfg))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(np.array(runs[0][1].theta), np.array(runs[1][1].theta))


@pytest.mark.parametrize("threads", ["1", "4"])
def test_trajectory_independent_of_threads(threads, monkeypatch):
    model, X = _student(300)
    b = DKSDBundle(model, identity_kernel(1, imq_kernel(1.0, -0.5)))
    cfg = OptimConfig(gamma=0.1, minibatch_size=100, max_iters=10, seed=7)
    monkeypatch.setenv("STEIN_ESTIM_THREADS", "1")
    ref = sgd_run(b, X, [20.0, 8.0], cfg)[1]
    monkeypatch.setenv("STEIN_ESTIM_THREADS", threads)
    got = sgd_run(b, X, [20.0, 8.0], cfg)[1]
    np.testing.assert_array_equal(np.array(ref.theta), np.array(got.theta))
    assert ref.loss == got.loss and ref.grad_norm == got.grad_norm


def test_full_batch_descent_on_convex_quadratic():
    spec = gaussian_natural()
    X = np.random.default_rng(1).normal(0.5, 1.0, size=(80, 1))
    K = identity_kernel(1, gaussian_kernel(1.0))
    q = dksd_quadratic(spec, K, Identity(1), X)
    lam = np.linalg.eigvalsh(2 * q.A).max()
    cfg = OptimConfig(gamma=0.9 / lam, preconditioner="none", minibatch_size=80, max_iters=50, reparam="none")
    _, traj = sgd_run(DKSDBundle(spec, K), X, [0.0, -1.0], cfg)
    losses = np.array(traj.loss)
    assert np.all(np.diff(losses) <= 1e-15 * np.abs(losses[:-1]).max())


def test_newton_step_lands_on_closed_form():
    spec = gaussian_natural()
    X = np.random.default_rng(2).normal(-0.3, 0.8, size=(60, 1))
    K = identity_kernel(1, gaussian_kernel(1.0))
    q = dksd_quadratic(spec, K, Identity(1), X)
    th_star = solve_quadratic(q)
    # the DKSD information matrix of an exponential family equals A and the Hessian is 2A
    cfg = OptimConfig(gamma=0.5, minibatch_size=60, max_iters=1, reparam="none")
    th, _ = sgd_run(DKSDBundle(spec, K), X, [0.4, -1.0], cfg)
    np.testing.assert_allclose(th, th_star, atol=1e-6)


def test_log_reparameterization_keeps_scale_positive():
    model, X = _student()
    b = DKSDBundle(model, identity_kernel(1, imq_kernel(1.0, -0.5)))
    seen = []
    cfg = OptimConfig(gamma=50.0, preconditioner="none", minibatch_size=30, max_iters=30)
    sgd_run(b, X, [25.0, 0.5], cfg, on_step=lambda t, th: seen.append(th[1]))
    assert min(seen) > 0
    rp = Reparam(model.theta_domain)
    th = np.array([3.0, 2.0])
    np.testing.assert_allclose(rp.to_theta(rp.to_eta(th)), th, rtol=1e-15)
    np.testing.assert_allclose(rp.to_eta(th), [3.0, np.log(2.0)])


def test_one_over_t_schedule():
    cfg = OptimConfig(gamma=1.0, schedule="one_over_t")
    assert [cfg.step(t) for t in range(3)] == [1.0, 0.5, 1.0 / 3]


@pytest.mark.parametrize("kw", [
    {"schedule": "cosine"}, {"preconditioner": "adam"}, {"gamma": 0.0},
    {"minibatch_size": 1}, {"max_iters": -1},
])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        OptimConfig(**kw).validate()


def test_non_finite_gradient_aborts_with_trajectory():
    model = builtin_model("gaussian_location")
    calls = []

    def grad(th, X):
        calls.append(1)
        return np.array([np.nan]) if len(calls) > 3 else 2 * th

    b = FunctionBundle(model, lambda th, X: float(th @ th), grad)
    with pytest.raises(OptimizationAborted) as info:
        sgd_run(b, np.zeros((4, 1)), [1.0], OptimConfig(preconditioner="none", max_iters=10, minibatch_size=4))
    assert len(info.value.trajectory) == 4


def test_grid_scan_single_point_and_failures():
    model, X = _student()
    b = DKSDBundle(model, identity_kernel(1, imq_kernel(1.0, -0.5)))
    scan = grid_scan(b, X, [[25.0, 10.0]])
    assert scan.losses[0] == b.loss([25.0, 10.0], X)
    scan = grid_scan(b, X, [[25.0, 10.0], [25.0, -1.0]])
    assert np.isnan(scan.losses[1]) and scan.errors[1] is not None and scan.errors[0] is None


def test_grid_argmin_matches_optimizer():
    model = builtin_model("gaussian_location")
    X = np.random.default_rng(3).normal(0.4, np.sqrt(0.5), size=(200, 1))
    b = DSMBundle(model)
    grid = np.linspace(-1, 1, 201)
    best = grid_scan(b, X, grid).best()[0]
    th, _ = sgd_run(b, X, [-0.8], OptimConfig(gamma=0.5, minibatch_size=200, max_iters=50))
    assert abs(th[0] - best) <= grid[1] - grid[0]
    th_ref, _, _ = grid_refine(b, X, -1, 1, 41)
    assert th_ref[0] == pytest.approx(X.mean(), abs=1e-5)


def test_grid_refine_needs_one_parameter():
    model, X = _student()
    with pytest.raises(ConfigError):
        grid_refine(DKSDBundle(model, identity_kernel(1, gaussian_kernel(1.0))), X, 0, 1)


def test_trajectory_csv(tmp_path):
    model = builtin_model("gaussian_location")
    b = FunctionBundle(model, lambda th, X: float(th @ th), lambda th, X: 2 * th)
    _, traj = sgd_run(b, np.zeros((4, 1)), [1.0], OptimConfig(preconditioner="none", max_iters=3, minibatch_size=4))
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,theta_0,loss,grad_norm" and len(lines) == 4
    traj.to_csv(tmp_path / "t2.csv", timing=True)
    assert (tmp_path / "t2.csv").read_text().splitlines()[0].endswith(",millis")
