import math

import numpy as np
import pytest

from ldpmean.transforms import DimensionError, fwht


def test_first_basis_vector_d2():
    out = fwht(np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-12)


def test_all_ones_d4():
    np.testing.assert_allclose(fwht(np.ones(4)), [2.0, 0.0, 0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 4, 8, 64, 1024])
def test_involution_and_norm(d):
    rng = np.random.default_rng(d)
    x = rng.standard_normal(d)
    y = fwht(x)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-9
    np.testing.assert_allclose(fwht(y), x, atol=1e-9)


def test_matches_explicit_hadamard_matrix():
    d = 16
    H = np.array([[(-1) ** bin(i & j).count("1") for j in range(d)] for i in range(d)])
    H = H / math.sqrt(d)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(d)
    np.testing.assert_allclose(fwht(x), H @ x, atol=1e-12)


def test_input_not_modified():
    x = np.arange(8.0)
    fwht(x)
    np.testing.assert_array_equal(x, np.arange(8.0))


@pytest.mark.parametrize("bad", [0, 3, 6, 12])
def test_non_power_of_two_rejected(bad):
    with pytest.raises(DimensionError):
        fwht(np.zeros(bad) if bad else np.zeros(0))


def test_deterministic():
    x = np.random.default_rng(7).standard_normal(256)
    np.testing.assert_array_equal(fwht(x), fwht(x))
