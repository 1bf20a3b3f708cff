import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import STEIN_SETUPS, random_stein_setup
from diffstein import _backend
from diffstein.estimators import dksd_grad, dksd_info_matrix, dksd_loss
from diffstein.steinkern import SteinKernelCtx

compiled = pytest.mark.skipif(not _backend.compiled_available(), reason="extension not built")


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / (1 + np.max(np.abs(b))))


@compiled
@pytest.mark.parametrize("index", range(len(STEIN_SETUPS)))
def test_python_and_compiled_agree(index):
    rng = np.random.default_rng(50 + index)
    model, K, m, th, pts = random_stein_setup(rng, index=index)
    X = pts(70)
    py = SteinKernelCtx(model, K, m, th, X, backend="python")
    cc = SteinKernelCtx(model, K, m, th, X, backend="compiled")
    assert _rel(dksd_loss(cc), dksd_loss(py)) <= 1e-12
    assert _rel(dksd_grad(cc), dksd_grad(py)) <= 1e-12
    assert _rel(dksd_info_matrix(cc), dksd_info_matrix(py)) <= 1e-12
    assert _rel(cc.matrix(X[:10], X[5:20]), py.matrix(X[:10], X[5:20])) <= 1e-12


@pytest.mark.parametrize("threads", ["1", "3", "8"])
def test_reductions_independent_of_workers(threads, monkeypatch):
    rng = np.random.default_rng(7)
    model, K, m, th, pts = random_stein_setup(rng, index=0)
    X = pts(150)
    monkeypatch.setenv("STEIN_ESTIM_THREADS", "1")
    ref = (dksd_loss(SteinKernelCtx(model, K, m, th, X)), dksd_grad(SteinKernelCtx(model, K, m, th, X)))
    monkeypatch.setenv("STEIN_ESTIM_THREADS", threads)
    got = (dksd_loss(SteinKernelCtx(model, K, m, th, X)), dksd_grad(SteinKernelCtx(model, K, m, th, X)))
    assert ref[0] == got[0]
    np.testing.assert_array_equal(ref[1], got[1])


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("STEIN_ESTIM_THREADS", "5")
    assert _backend.worker_count() == 5
    monkeypatch.setenv("STEIN_ESTIM_THREADS", "junk")
    assert _backend.worker_count() == 1
    monkeypatch.delenv("STEIN_ESTIM_THREADS")
    assert _backend.worker_count() >= 1


def test_parallel_map_keeps_order(monkeypatch):
    monkeypatch.setenv("STEIN_ESTIM_THREADS", "4")
    assert _backend.parallel_map(lambda v: v * v, range(20)) == [v * v for v in range(20)]


def test_fsum_rows_is_exact():
    rows = np.array([1e16, 1.0, -1e16, 1.0])
    assert _backend.fsum_rows(rows) == 2.0
    np.testing.assert_array_equal(_backend.fsum_rows(np.stack([rows, 2 * rows], axis=1)), [2.0, 4.0])


def test_get_pairs_names():
    assert _backend.get_pairs("python") is not None
    with pytest.raises(ValueError):
        _backend.get_pairs("fortran")


@pytest.mark.parametrize("env,expect", [("python", "python"), ("", None)])
def test_backend_env_selection(env, expect):
    code = "import diffstein; print(diffstein.BACKEND_NAME)"
    r = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                       env=dict(os.environ, DIFFSTEIN_BACKEND=env))
    want = expect or ("compiled" if _backend.compiled_available() else "python")
    assert r.returncode == 0 and r.stdout.strip() == want
