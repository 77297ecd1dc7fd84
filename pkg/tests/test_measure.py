import math

import numpy as np
import pytest

from atshuffle.errors import CapExceeded, ContractError, NotReversible
from atshuffle.measure import (DistributionTable, build_transition_matrix,
                               check_detailed_balance, enumerate_stationary,
                               exact_mixing_time, log_weight, spectral_gap,
                               tv_distance)
from atshuffle.perms import (BiasMatrix, LocalizationVector, Permutation,
                             random_admissible_localization)


def test_log_weight_examples():
    p = BiasMatrix.constant(3, 0.6)
    assert math.exp(log_weight(Permutation((1, 2, 3)), p)) == pytest.approx(0.216, abs=1e-15)
    assert math.exp(log_weight(Permutation((2, 1, 3)), p)) == pytest.approx(0.144, abs=1e-15)
    pta = BiasMatrix.totally_asymmetric(2)
    assert log_weight(Permutation((2, 1)), pta) == -math.inf


def test_enumerate_stationary_examples():
    p2 = BiasMatrix.constant(2, 0.7)
    mu = enumerate_stationary(2, p2)
    assert mu.prob_of((1, 2)) == pytest.approx(0.7)
    assert mu.prob_of((2, 1)) == pytest.approx(0.3)
    assert math.exp(mu.logZ) == pytest.approx(1.0)

    p3 = BiasMatrix.constant(3, 0.6)
    mu3 = enumerate_stationary(3, p3)
    assert math.exp(mu3.logZ) == pytest.approx(0.76, abs=1e-12)
    assert mu3.prob_of((1, 2, 3)) == pytest.approx(0.216 / 0.76, abs=1e-12)

    only = enumerate_stationary(3, p3, LocalizationVector.constant(3, 0))
    assert only.support == [(1, 2, 3)]
    assert only.probs[0] == 1.0


def test_enumeration_cap():
    p = BiasMatrix.constant(11, 0.6)
    with pytest.raises(CapExceeded):
        enumerate_stationary(11, p)
    with pytest.warns(UserWarning):
        enumerate_stationary(9, BiasMatrix.constant(9, 0.6))


def test_transition_matrix_n2():
    p = BiasMatrix.constant(2, 0.6)
    mu = enumerate_stationary(2, p)
    P = build_transition_matrix(2, p, mu=mu)
    assert P.reversible
    i12, i21 = P.index_of((1, 2)), P.index_of((2, 1))
    assert P.matrix[i12, i21] == pytest.approx(0.4)
    assert P.matrix[i21, i12] == pytest.approx(0.6)
    assert spectral_gap(P, mu) == pytest.approx(1.0, abs=1e-9)


def test_rejection_mass_goes_to_diagonal():
    # n=3, ell=1: from (2,1,3) the move at edge 2 would displace particle 1 by 2
    p = BiasMatrix.constant(3, 0.6)
    ell = LocalizationVector.constant(3, 1)
    mu = enumerate_stationary(3, p, ell)
    P = build_transition_matrix(3, p, ell, mu=mu)
    s = P.index_of((2, 1, 3))
    assert (2, 3, 1) not in [tuple(x) for x in mu.support]
    # edge 1: stay with p[2][1] = 0.4; edge 2: the swap is rejected entirely
    row = P.matrix[s].toarray().ravel()
    assert row[s] == pytest.approx(0.5 * 0.4 + 0.5 * 1.0)


def test_detailed_balance_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        p = BiasMatrix.random_biased(n, 0.5, rng)
        ell = random_admissible_localization(n, rng, max_ell=2) \
            if rng.random() < 0.5 else None
        mu = enumerate_stationary(n, p, ell)
        P = build_transition_matrix(n, p, ell, mu=mu)
        assert P.reversible


def test_detailed_balance_failure_names_pair():
    states = [(1, 2), (2, 1)]
    import scipy.sparse as sp
    bad = sp.csr_matrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
    from atshuffle.measure import TransitionMatrix
    P = TransitionMatrix(states, bad)
    mu = DistributionTable(states, np.array([0.7, 0.3]), 0.0)
    with pytest.raises(NotReversible, match=r"\(1, 2\)|\(2, 1\)"):
        check_detailed_balance(P, mu)


def test_spectral_gap_range_and_singleton():
    rng = np.random.default_rng(1)
    p = BiasMatrix.random_biased(5, 0.2, rng)
    mu = enumerate_stationary(5, p)
    P = build_transition_matrix(5, p, mu=mu)
    g = spectral_gap(P, mu)
    assert 0.0 < g < 2.0
    # singleton restricted chain has gap 1 by convention
    ell0 = LocalizationVector.constant(4, 0)
    p4 = BiasMatrix.constant(4, 0.8)
    mu0 = enumerate_stationary(4, p4, ell0)
    P0 = build_transition_matrix(4, p4, ell0, mu=mu0)
    assert spectral_gap(P0, mu0) == 1.0


def test_spectral_gap_iterative_matches_dense():
    p = BiasMatrix.constant(5, 0.7)
    mu = enumerate_stationary(5, p)
    P = build_transition_matrix(5, p, mu=mu)
    dense = spectral_gap(P, mu)
    iterative = spectral_gap(P, mu, dense_cutoff=1)
    assert iterative == pytest.approx(dense, abs=1e-7)


def test_tv_distance():
    p = BiasMatrix.constant(2, 0.6)
    mu = enumerate_stationary(2, p)
    assert tv_distance(mu, mu) == 0.0
    a = DistributionTable([(1, 2)], np.array([1.0]), 0.0)
    b = DistributionTable([(2, 1)], np.array([1.0]), 0.0)
    assert tv_distance(a, b) == 1.0
    assert tv_distance(b, mu) == pytest.approx(0.6)


def test_exact_mixing_time():
    p = BiasMatrix.constant(2, 0.6)
    mu = enumerate_stationary(2, p)
    P = build_transition_matrix(2, p, mu=mu)
    t, curve = exact_mixing_time(P, mu, 0.25)
    assert t == 1
    assert curve[0] == pytest.approx(0.6)
    assert curve[1] == pytest.approx(0.0, abs=1e-15)
    # delta = 0.5: worst start TV is 0.6 > 0.5, so one step is still needed
    t5, _ = exact_mixing_time(P, mu, 0.5)
    assert t5 == 1
    # singleton
    ell0 = LocalizationVector.constant(3, 0)
    p3 = BiasMatrix.constant(3, 0.9)
    mu0 = enumerate_stationary(3, p3, ell0)
    P0 = build_transition_matrix(3, p3, ell0, mu=mu0)
    assert exact_mixing_time(P0, mu0, 0.25)[0] == 0
    with pytest.raises(ContractError):
        exact_mixing_time(P, mu, 0.7)


def test_exact_mixing_time_monotone_in_delta():
    rng = np.random.default_rng(2)
    p = BiasMatrix.random_biased(4, 0.3, rng)
    mu = enumerate_stationary(4, p)
    P = build_transition_matrix(4, p, mu=mu)
    times = [exact_mixing_time(P, mu, d)[0] for d in (0.05, 0.1, 0.25, 0.5)]
    assert times == sorted(times, reverse=True)


def test_exact_mixing_time_batched_matches_unbatched():
    p = BiasMatrix.constant(4, 0.65)
    mu = enumerate_stationary(4, p)
    P = build_transition_matrix(4, p, mu=mu)
    t_full, curve_full = exact_mixing_time(P, mu, 0.25)
    t_batch, curve_batch = exact_mixing_time(P, mu, 0.25, batch_bytes=24 * 7)
    assert t_full == t_batch
    assert np.allclose(curve_full, curve_batch)
