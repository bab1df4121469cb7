import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from alphagfn.eigen import EigenNonConvergence, eigvals, hessenberg


def multiset_gap(a, b):
    """Largest distance under the best one-to-one matching of two spectra."""
    cost = np.abs(np.asarray(a)[:, None] - np.asarray(b)[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


def test_known_spectra():
    assert multiset_gap(eigvals(np.array([[0.0, 1.0], [1.0, 0.0]])), [1, -1]) <= 1e-12
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert multiset_gap(eigvals(rot), [1j, -1j]) <= 1e-12
    tri = np.triu(np.arange(1.0, 17.0).reshape(4, 4))
    assert multiset_gap(eigvals(tri), [1, 6, 11, 16]) <= 1e-10
    assert eigvals(np.array([[3.5]]))[0] == 3.5
    assert multiset_gap(eigvals(np.zeros((3, 3))), [0, 0, 0]) == 0.0


def test_cyclic_permutation_roots_of_unity():
    n = 7
    P = np.roll(np.eye(n), 1, axis=1)
    want = np.exp(2j * np.pi * np.arange(n) / n)
    assert multiset_gap(eigvals(P), want) <= 1e-9


def test_hessenberg_is_similar():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    h = hessenberg(a)
    assert np.allclose(np.tril(h, -2), 0.0)
    assert np.trace(h) == pytest.approx(np.trace(a))
    assert np.linalg.norm(h) == pytest.approx(np.linalg.norm(a))


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        eigvals(np.zeros((2, 3)))


def test_iteration_cap_raises():
    rng = np.random.default_rng(3)
    with pytest.raises(EigenNonConvergence):
        eigvals(rng.normal(size=(30, 30)), max_iter_factor=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 40), stochastic=st.booleans())
def test_matches_numpy(seed, n, stochastic):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n)) if stochastic else rng.normal(size=(n, n))
    if stochastic:
        a /= a.sum(axis=1, keepdims=True)
    scale = max(1.0, float(np.max(np.abs(np.linalg.eigvals(a)))))
    assert multiset_gap(eigvals(a), np.linalg.eigvals(a)) <= 1e-7 * scale


def test_near_nilpotent_block():
    # trace and determinant are both rounding noise here; both roots are ~0
    a, b = 0.26146575645134235, 0.3697684188696289
    c, d = -0.18488420943481454, -0.2614657564513425
    got = eigvals(np.array([[a, b], [c, d]]))
    assert np.max(np.abs(got)) <= 1e-7
