"""The compiled and pure-Python kernels must agree to rounding."""
import os
import subprocess
import sys

import numpy as np
import pytest

from fedsimclr import _kernels_py, kernels

compiled = pytest.importorskip("fedsimclr._kernels")


@pytest.mark.parametrize("k,d,tau", [(1, 3, 0.5), (2, 2, 1.0), (7, 5, 0.3), (32, 16, 0.5)])
def test_cosine_infonce_backends_agree(k, d, tau):
    rng = np.random.default_rng(k * 100 + d)
    z1, z2 = rng.standard_normal((k, d)), rng.standard_normal((k, d))
    a = compiled.cosine_infonce(z1, z2, tau, 1e-12)
    b = _kernels_py.cosine_infonce(z1, z2, tau, 1e-12)
    assert abs(a[0] - b[0]) <= 1e-13
    np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-13)
    np.testing.assert_allclose(a[2], b[2], rtol=0, atol=1e-13)


def test_table_terms_backends_agree():
    rng = np.random.default_rng(0)
    critic = rng.standard_normal((3, 4, 5))
    s = rng.integers(0, 3, size=200)
    i1 = rng.integers(0, 4, size=(200, 6))
    i2 = rng.integers(0, 5, size=(200, 6))
    np.testing.assert_allclose(compiled.infonce_table_terms(critic, s, i1, i2),
                               _kernels_py.infonce_table_terms(critic, s, i1, i2),
                               rtol=0, atol=1e-12)


def test_zero_rows_agree():
    z = np.zeros((3, 4))
    z[1, 0] = 1.0
    a = compiled.cosine_infonce(z, z, 0.5, 1e-12)
    b = _kernels_py.cosine_infonce(z, z, 0.5, 1e-12)
    assert abs(a[0] - b[0]) <= 1e-13
    np.testing.assert_allclose(a[1], b[1], atol=1e-13)


def test_backend_selected_at_import():
    assert kernels.BACKEND == "cython"
    env = dict(os.environ, FEDSIMCLR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fedsimclr; print(fedsimclr.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
