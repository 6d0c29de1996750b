import os
import pathlib
import subprocess
import sys

import numpy as np
import pytest

from xvdistill import kernels


@pytest.fixture
def points():
    rng = np.random.default_rng(3)
    return np.concatenate([np.geomspace(1e-3, 1e6, 500), rng.uniform(0.01, 50, (4, 25)).ravel()])


def test_lgamma_paths_agree(points):
    a, b = kernels.lgamma_numba(points), kernels.lgamma_numpy(points)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-13)


def test_digamma_paths_agree(points):
    np.testing.assert_allclose(kernels.digamma_numba(points), kernels.digamma_numpy(points),
                               rtol=1e-14, atol=1e-13)


def test_kernels_keep_shape():
    x = np.arange(1, 13, dtype=float).reshape(3, 4)
    assert kernels.lgamma_numba(x).shape == (3, 4)
    assert kernels.lgamma_numpy(x).shape == (3, 4)


def test_numpy_path_does_not_mutate_input():
    x = np.array([0.5, 2.0])
    kernels.lgamma_numpy(x)
    kernels.digamma_numpy(x)
    np.testing.assert_array_equal(x, [0.5, 2.0])


def test_maxpool_paths_agree():
    rng = np.random.default_rng(0)
    r, c = rng.integers(0, 7, 300), rng.integers(0, 5, 300)
    v = rng.normal(size=300)
    a = kernels.maxpool_numba(r, c, v, (7, 5), -10.0)
    b = kernels.maxpool_numpy(r, c, v, (7, 5), -10.0)
    np.testing.assert_array_equal(a, b)
    assert a[r[0], c[0]] >= v[0]


@pytest.mark.parametrize("flag, expected", [("0", "False"), ("1", "True")])
def test_env_flag_selects_path(flag, expected):
    env = dict(os.environ, XVDISTILL_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c",
         "from xvdistill import kernels, USE_NUMBA; "
         "print(USE_NUMBA, kernels.lgamma is kernels.lgamma_numba)"],
        env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == [expected, expected]


def test_benchmark_script_runs():
    script = pathlib.Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    res = subprocess.run([sys.executable, str(script), "--n", "1000", "--repeat", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert all(k in res.stdout for k in ("lgamma", "digamma", "maxpool"))
