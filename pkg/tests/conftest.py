import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.differing_executors],
)
settings.load_profile("default")

FD_TOL = 1e-5


def central_diff(f, v, h=1e-5):
    """Jacobian of ``f`` at ``v`` by central differences; new axis is last."""
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        step = h * max(1.0, abs(v.flat[i]))
        vp, vm = v.copy(), v.copy()
        vp.flat[i] += step
        vm.flat[i] -= step
        cols.append((np.asarray(f(vp)) - np.asarray(f(vm))) / (vp.flat[i] - vm.flat[i]))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(a))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


MODEL_CASES = (
    ("gaussian_location", {"d": 1}),
    ("gaussian_location", {"d": 3}),
    ("gaussian_meancov", {"d": 2}),
    ("laplace", {"d": 1}),
    ("laplace", {"d": 3}),
    ("symmetric_bessel", {"s": 1.0}),
    ("symmetric_bessel", {"s": 2.0}),
    ("symmetric_bessel", {"s": 3.5, "d": 2}),
    ("student_t", {"nu": 5.0}),
    ("student_t", {"nu": 3.0, "d": 3}),
    ("generalized_gamma", {"d": 1}),
    ("generalized_gamma", {"d": 2}),
    ("intractable_expfam", {"d": 6}),
)


def random_theta(model, rng):
    """A parameter well inside the domain, with scales and shapes in moderate ranges."""
    th = rng.normal(size=model.dim_theta)
    for i, (lo, hi) in enumerate(model.theta_domain):
        if np.isfinite(lo):
            th[i] = lo + rng.uniform(0.5, 3.0)
    return th


def random_point(model, theta, rng, min_dist=0.2):
    """A point at least ``min_dist`` from the location, avoiding radial kinks."""
    d = model.dim_x
    loc = np.asarray(theta[:d]) if model.dim_theta >= d else np.zeros(d)
    while True:
        x = loc + rng.normal(scale=1.5, size=d)
        if np.linalg.norm(x - loc) > min_dist:
            return x


def random_scalar_kernel(rng):
    from diffstein.kernel import gaussian_kernel, imq_kernel

    if rng.uniform() < 0.5:
        return gaussian_kernel(rng.uniform(0.5, 3.0))
    return imq_kernel(rng.uniform(0.5, 3.0), -rng.uniform(0.2, 1.5))


def random_matrix_kernel(rng, d):
    from diffstein.kernel import DiagonalKernel, ScaledKernel

    if rng.uniform() < 0.5:
        L = rng.normal(size=(d, d))
        return ScaledKernel(L @ L.T + 0.5 * np.eye(d), random_scalar_kernel(rng))
    return DiagonalKernel(rng.uniform(0.5, 3.0, size=d), [random_scalar_kernel(rng) for _ in range(d)])


STEIN_SETUPS = (
    ("gaussian_location", {"d": 2}, ("identity", "decay", "nonneg")),
    ("gaussian_meancov", {"d": 2}, ("identity", "decay", "recip_diag")),
    ("student_t", {"nu": 5.0}, ("identity", "student_loc", "decay")),
    ("student_t", {"nu": 4.0, "d": 2}, ("student_loc", "nonneg", "identity")),
    ("generalized_gamma", {"d": 1}, ("identity", "decay")),
)


def random_stein_setup(rng, index=None):
    """``(model, kernel, diffusion, theta, points_fn)`` for a random configuration."""
    from diffstein.diffusion import builtin_diffusion
    from diffstein.model import builtin_model

    k = rng.integers(len(STEIN_SETUPS)) if index is None else index
    name, hyper, diffs = STEIN_SETUPS[k]
    model = builtin_model(name, hyper)
    d = model.dim_x
    dname = diffs[rng.integers(len(diffs))]
    m = builtin_diffusion(dname, {"alpha": float(rng.choice([2.0, 3.0]))} if dname == "decay" else None, dim=d)
    theta = random_theta(model, rng)

    def points(n):
        if dname == "recip_diag":
            return rng.uniform(-0.5, 2.5, size=(n, d))
        return np.array([random_point(model, theta, rng) for _ in range(n)])

    return model, random_matrix_kernel(rng, d), m, theta, points


def langevin_ksd_kernel(k, u, x, y, h=None, gh=None):
    """Plain KSD Stein kernel for the scalar kernel ``h(x) k(x, y) h(y)``.

    ``h`` and ``gh`` are the weight and its gradient; both default to the
    constant 1.
    """
    ux, uy = u(x), u(y)
    hx, hy = (1.0, 1.0) if h is None else (h(x), h(y))
    gx, gy = (np.zeros_like(x), np.zeros_like(y)) if gh is None else (gh(x), gh(y))
    kv, kx, ky, kxy = k.eval(x, y), k.grad_x(x, y), k.grad_y(x, y), k.grad_xy(x, y)
    kt = hx * kv * hy
    kt_x = gx * kv * hy + hx * kx * hy
    kt_y = hx * ky * hy + hx * kv * gy
    tr = (gx @ gy * kv + hy * gx @ ky + hx * kx @ gy + hx * hy * np.trace(kxy))
    return kt * ux @ uy + ux @ kt_y + uy @ kt_x + tr


@pytest.fixture(scope="session")
def preset_run(tmp_path_factory):
    """Run a preset with default parameters once per session.

    Returns ``(dir, summary, seconds)``; the timing is that of the first run.
    """
    import time

    from diffstein.harness.presets import run_preset

    cache = {}

    def get(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(name)
            start = time.perf_counter()
            summary = run_preset(name, str(out))
            cache[name] = (out, summary, time.perf_counter() - start)
        return cache[name]

    return get


ACCEPTANCE = {}


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
