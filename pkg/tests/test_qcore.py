from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohwork import qcore
from cohwork.errors import ContractViolation, ResourceLimitError
from cohwork.qcore import DensityOperator, PureQubit


def test_density_validation_rejects_bad_input():
    e = qcore.qubit_energies()
    with pytest.raises(ContractViolation):
        DensityOperator(np.diag([0.7, 0.7]).astype(complex), e)
    with pytest.raises(ContractViolation):
        DensityOperator(np.array([[0.5, 0.6], [0.6, 0.5]], dtype=complex), e)
    with pytest.raises(ContractViolation):
        DensityOperator(np.array([[0.5, 0.1], [0.2, 0.5]], dtype=complex), e)


def test_tensor_and_partial_trace_roundtrip(rng):
    a = qcore.random_density(qcore.qubit_energies(), rng)
    b = qcore.random_density(np.arange(3.0), rng)
    joint = qcore.tensor(a, b)
    assert joint.dims == (2, 3)
    np.testing.assert_allclose(qcore.partial_trace(joint, 0).matrix, a.matrix, atol=1e-14)
    np.testing.assert_allclose(qcore.partial_trace(joint, 1).matrix, b.matrix, atol=1e-14)
    np.testing.assert_allclose(joint.basis_energies, [0, 1, 2, 1, 2, 3])


def test_partial_trace_needs_factorization():
    with pytest.raises(ContractViolation):
        qcore.partial_trace(qcore.maximally_mixed(np.arange(4.0)), 0)


def test_dephase_keeps_degenerate_blocks():
    # levels 1 and 1 are degenerate, so their coherence survives
    e = np.array([0.0, 1.0, 1.0])
    ket = np.ones(3) / math.sqrt(3)
    rho = DensityOperator.from_ket(ket, e)
    d = qcore.dephase(rho).matrix
    assert abs(d[1, 2]) == pytest.approx(1 / 3)
    assert d[0, 1] == 0 and d[0, 2] == 0


def test_entropies_known_values():
    assert qcore.binary_entropy(0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert qcore.binary_entropy(0.0) == 0.0
    plus = DensityOperator.from_ket([1, 1], qcore.qubit_energies())
    assert qcore.von_neumann_entropy(plus) == pytest.approx(0.0, abs=1e-12)
    assert qcore.energy_measurement_entropy(plus) == pytest.approx(math.log(2))
    assert qcore.coherence_measure(plus) == pytest.approx(math.log(2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 6))
def test_coherence_decomposition(seed, d):
    """H(rho) = S(rho) + A(rho) for non-degenerate spectra."""
    rho = qcore.random_density(np.arange(float(d)), np.random.default_rng(seed))
    lhs = qcore.energy_measurement_entropy(rho)
    assert lhs == pytest.approx(qcore.von_neumann_entropy(rho) + qcore.coherence_measure(rho), abs=1e-10)
    assert qcore.coherence_measure(rho) >= -1e-12


def test_trace_distance_conventions():
    e = qcore.qubit_energies()
    a, b = qcore.basis_state(0, e), qcore.basis_state(1, e)
    assert qcore.trace_distance(a, b) == pytest.approx(1.0)
    assert qcore.trace_norm_distance(a, b) == pytest.approx(2.0)


def test_random_conserving_unitary(rng):
    e = np.add.outer([0.0, 1.0], np.arange(4.0)).ravel()
    u = qcore.random_conserving_unitary(e, rng)
    np.testing.assert_allclose(u @ u.conj().T, np.eye(e.size), atol=1e-12)
    assert qcore.commutes_with_energy(u, e)


def test_conserving_channel_rejects_non_conserving(rng):
    anc = qcore.basis_state(0, np.arange(2.0))
    x = np.kron(np.array([[0, 1], [1, 0]]), np.eye(2)).astype(complex)
    with pytest.raises(ContractViolation):
        qcore.conserving_channel(x, anc, qcore.qubit_energies())


def test_apply_kraus_amplitude_damping():
    g = 0.3
    k0 = np.array([[1, 0], [0, math.sqrt(1 - g)]])
    k1 = np.array([[0, math.sqrt(g)], [0, 0]])
    out = qcore.apply_kraus(np.diag([0.0, 1.0]).astype(complex), [k0, k1])
    np.testing.assert_allclose(np.diag(out).real, [g, 1 - g])


def test_pure_qubit():
    q = PureQubit(0.25, 0.7)
    np.testing.assert_allclose(np.abs(q.ket()) ** 2, [0.75, 0.25])
    assert q.canonical().phi == 0.0
    assert q.density().populations()[1] == pytest.approx(0.25)
    with pytest.raises(ContractViolation):
        PureQubit(1.2)


def test_max_dim_env(monkeypatch):
    monkeypatch.setenv("COHWORK_MAX_DIM", "8")
    assert qcore.max_dim() == 8
    with pytest.raises(ResourceLimitError):
        qcore.check_dim(9)
    monkeypatch.setenv("COHWORK_MAX_DIM", "lots")
    with pytest.raises(ContractViolation):
        qcore.max_dim()
