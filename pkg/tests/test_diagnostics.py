import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2d.diagnostics import (
    audit_layer,
    decompose_activation,
    pcdr_activation,
    pcdr_spectral,
    verify_bound,
)
from s2d.linalg import svd


def hand_svd_2x2():
    """SVD of [[2,1],[0,1]] from the eigen-decomposition of W^T W = [[4,2],[2,2]]."""
    w = np.array([[2.0, 1.0], [0.0, 1.0]])
    lam = np.array([3 + np.sqrt(5), 3 - np.sqrt(5)])
    v = np.array([[2.0, l - 4.0] for l in lam]).T  # (W^T W - l I) v = 0 -> v = (2, l - 4)
    v /= np.linalg.norm(v, axis=0)
    sigma = np.sqrt(lam)
    u = w @ v / sigma
    return w, u, sigma, v


def test_decompose_worked_example():
    w, u, sigma, v = hand_svd_2x2()
    x = np.array([1.0, 1.0])
    oracle = sigma * u[0] * (v.T @ x)
    d = decompose_activation(svd(w), x, 0)
    np.testing.assert_allclose(d.terms, oracle, atol=1e-12)
    # the leading term is 3.0652; 3.0656 - 0.0652 would not sum to 3
    np.testing.assert_allclose(d.terms, [3.0656, -0.0652], atol=1e-3)
    assert d.total == pytest.approx(3.0, abs=1e-12)


def test_decompose_trivial_cases():
    rank1 = 2.5 * np.outer([0.6, 0.8], [1.0, 0.0, 0.0])
    terms = decompose_activation(svd(rank1), [1.0, 2.0, 3.0], 1).terms
    assert np.count_nonzero(np.abs(terms) > 1e-12) == 1
    np.testing.assert_allclose(decompose_activation(svd(np.diag([3.0, 1.0])), [1.0, 1.0], 0).terms, [3.0, 0.0], atol=1e-15)


def test_decompose_index_errors():
    f = svd(np.eye(3))
    with pytest.raises(IndexError):
        decompose_activation(f, np.ones(3), 3)
    with pytest.raises(ValueError):
        decompose_activation(f, np.ones(2), 0)


def test_decomposition_consistency_500():
    rng = np.random.default_rng(0)
    for _ in range(500):
        m, n = rng.integers(1, 10, size=2)
        w = rng.normal(size=(m, n))
        x = rng.normal(size=n)
        i = int(rng.integers(m))
        direct = (w @ x)[i]
        total = decompose_activation(svd(w), x, i).total
        assert abs(total - direct) <= 1e-9 * max(1.0, abs(direct))


def test_pcdr_activation_examples():
    w, u, sigma, v = hand_svd_2x2()
    oracle_terms = np.abs(sigma * u[0] * (v.T @ np.ones(2)))
    oracle = oracle_terms[0] / oracle_terms.sum()
    got = pcdr_activation(svd(w), [1.0, 1.0], 0, 1)
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(0.9792, abs=1e-3)
    assert pcdr_activation(svd(np.diag([3.0, 1.0])), [1.0, 1.0], 0, 1) == 1.0
    rank1 = np.outer([1.0, -2.0, 0.5], [0.3, 0.4])
    assert pcdr_activation(svd(rank1), [1.0, 1.0], 1, 1) == pytest.approx(1.0, abs=1e-12)


def test_pcdr_undefined():
    f = svd(np.diag([2.0, 1.0]))
    assert pcdr_activation(f, [0.0, 0.0], 0, 1) is None
    assert pcdr_spectral([0.0, 0.0], 1) is None


def test_pcdr_spectral_examples():
    assert pcdr_spectral([5.0, 0.0, 0.0], 1) == 1.0
    assert pcdr_spectral([1.0, 1.0, 1.0, 1.0], 2) == 0.5
    assert pcdr_spectral([10.8, 0.6, 0.6], 1) == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(ValueError):
        pcdr_spectral([1.0, 2.0], 3)


def test_pcdr_properties_500():
    rng = np.random.default_rng(1)
    for _ in range(500):
        m, n = rng.integers(1, 9, size=2)
        w = rng.normal(size=(m, n))
        x = rng.normal(size=n)
        i = int(rng.integers(m))
        f = svd(w)
        big_n = f.rank_bound
        curve = [pcdr_activation(f, x, i, k) for k in range(1, big_n + 1)]
        if curve[0] is None:
            continue
        assert all(0.0 <= c <= 1.0 for c in curve)
        assert all(a <= b for a, b in zip(curve, curve[1:]))
        assert abs(curve[-1] - 1.0) <= 1e-12
        spec = [pcdr_spectral(f.sigma, k) for k in range(1, big_n + 1)]
        assert all(a <= b for a, b in zip(spec, spec[1:]))
        assert abs(spec[-1] - 1.0) <= 1e-12
        c = float(rng.uniform(0.1, 10.0))
        k = int(rng.integers(1, big_n + 1))
        assert abs(pcdr_activation(svd(c * w), x, i, k) - curve[k - 1]) <= 1e-12
        assert abs(pcdr_activation(f, c * x, i, k) - curve[k - 1]) <= 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_rank_one_pcdr_is_one(m, n, seed):
    rng = np.random.default_rng(seed)
    w = np.outer(rng.normal(size=m), rng.normal(size=n))
    x = rng.normal(size=(3, n))
    rep = audit_layer(w, x, 3)
    assert rep.pcdr[1] == pytest.approx(1.0, abs=1e-9)


def test_audit_identity_example():
    rep = audit_layer(np.eye(2), [[1.0, 0.0], [0.0, 2.0]], 2)
    assert rep.max_abs_activation == 2.0
    assert rep.argmax_sample == 1
    assert rep.argmax_neuron == 1
    assert rep.sigma_max == pytest.approx(1.0)


def test_audit_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(8, 8))
    batch = rng.normal(size=(16, 8))
    rep = audit_layer(w, batch, 3)
    best, where = -1.0, None
    for j in range(16):
        for i in range(8):
            a = abs(sum(w[i, c] * batch[j, c] for c in range(8)))
            if a > best:
                best, where = a, (i, j)
    assert (rep.argmax_neuron, rep.argmax_sample) == where
    assert rep.max_abs_activation == pytest.approx(best, rel=1e-12)
    f = svd(w)
    for k in (1, 2, 3):
        assert rep.pcdr[k] == pytest.approx(pcdr_activation(f, batch[where[1]], where[0], k), abs=1e-12)
    d = rep.to_json_dict()
    assert set(d) == {"layer", "pcdr", "sigma_max", "max_abs_activation", "argmax_neuron", "argmax_sample"}
    assert set(d["pcdr"]) == {"1", "2", "3"}


def test_audit_top_fraction():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(6, 5))
    rep = audit_layer(w, rng.normal(size=(40, 5)), 2, top_fraction=1 / 240)
    # one activation out of 240: the top set is just the argmax
    assert rep.top_fraction_pcdr[1] == pytest.approx(rep.pcdr[1], abs=1e-12)
    assert "pcdr_top_mean" in rep.to_json_dict()


def test_audit_errors():
    with pytest.raises(ValueError):
        audit_layer(np.eye(2), np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        audit_layer(np.eye(2), np.ones((3, 3)), 1)
    with pytest.raises(ValueError):
        audit_layer(np.eye(2), np.ones((3, 2)), 0)


def test_verify_bound_examples():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(5, 4))
    b = verify_bound(w, np.zeros(4))
    assert b.lhs == 0.0 and b.rhs == 0.0 and b.holds
    v1 = svd(w).v[:, 0]
    b = verify_bound(w, v1)
    assert abs(b.lhs - b.rhs) <= 1e-9 and b.holds
    for _ in range(1000):
        assert verify_bound(w, rng.normal(size=4)).holds
