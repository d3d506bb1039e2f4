import math

import numpy as np
import pytest

from klq.relaxation import Basis, degenerate_basis, fourier_basis, parse_basis, transform_reference


def test_degenerate_is_identity():
    b = degenerate_basis(4)
    assert np.array_equal(b.weights, np.eye(4))
    r = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(transform_reference(b, r), r)
    assert np.array_equal(b.expand([1, 2, 3, 4]), [1, 2, 3, 4])


def test_fourier_rows():
    K, N = 12, 5
    b = fourier_basis(K, N)
    k = np.arange(1, K + 1)
    w = 2 * math.pi / K
    assert np.allclose(b.weights[0], 1.0)
    assert np.allclose(b.weights[1], np.sin(w * k))
    assert np.allclose(b.weights[4], np.cos(2 * w * k))
    # full-period harmonics are orthogonal at the sample points
    G = b.weights @ b.weights.T
    assert np.allclose(G - np.diag(np.diag(G)), 0, atol=1e-12)


def test_fourier_custom_omega_and_errors():
    b = fourier_basis(10, 3, omega=0.1)
    assert np.allclose(b.weights[1], np.sin(0.1 * np.arange(1, 11)))
    with pytest.raises(ValueError, match="odd"):
        fourier_basis(10, 4)
    with pytest.raises(ValueError):
        fourier_basis(3, 5)
    with pytest.raises(ValueError):
        fourier_basis(10, 3, omega=-1.0)


def test_transform_reference_constant():
    b = fourier_basis(8, 3)
    r_hat = transform_reference(b, np.full(8, 0.5))
    assert r_hat[0] == pytest.approx(4.0)
    assert np.allclose(r_hat[1:], 0, atol=1e-12)
    with pytest.raises(ValueError):
        transform_reference(b, np.zeros(7))


def test_basis_validation():
    with pytest.raises(ValueError, match="zero row"):
        Basis(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        Basis(np.ones((3, 2)))
    with pytest.raises(ValueError):
        Basis(np.ones(3))


def test_column_norms():
    b = Basis(np.array([[3.0, 0.0], [4.0, 1.0]]))
    assert np.allclose(b.column_norms(), [5.0, 1.0])


def test_parse_basis():
    assert parse_basis("degenerate", 5).size == 5
    assert parse_basis("fourier:3", 10).size == 3
    b = parse_basis("fourier:3:0.2", 10)
    assert np.allclose(b.weights[1], np.sin(0.2 * np.arange(1, 11)))
    for bad in ("wavelet", "fourier", "fourier:x", "degenerate:2"):
        with pytest.raises(ValueError):
            parse_basis(bad, 10)
