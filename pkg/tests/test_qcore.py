import numpy as np
import pytest
import scipy.linalg as sla

from qdc.qcore import (
    DensityMatrix,
    NoiseMatrix,
    OperatorMatrix,
    OperatorSet,
    QuantumState,
    basis_state,
    dissipator_apply,
    fidelity,
    integrate_lindblad,
    pauli_operator,
    tensor_chain,
    trace_distance,
)
from qdc.sse import TimeGrid

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def plus():
    return QuantumState(np.array([1, 1]) / np.sqrt(2))


def ystate():
    return QuantumState(np.array([1, 1j]) / np.sqrt(2))


class TestPauli:
    def test_x_single_qubit(self):
        np.testing.assert_array_equal(pauli_operator("x", 0, 1).mat, SX)

    def test_z_padded(self):
        np.testing.assert_array_equal(
            pauli_operator("z", 0, 2).mat, np.diag([1, 1, -1, -1]).astype(complex))

    def test_ladder_definition(self):
        np.testing.assert_allclose(pauli_operator("plus", 0, 1).mat, 0.5 * (SX + 1j * SY))
        np.testing.assert_allclose(pauli_operator("minus", 0, 1).mat, 0.5 * (SX - 1j * SY))

    def test_algebra_exact(self):
        # integer-exact identities
        assert np.array_equal(SX @ SY, 1j * SZ)
        for s in (SX, SY, SZ):
            assert np.array_equal(s @ s, np.eye(2).astype(complex))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            pauli_operator("x", 2, 2)


class TestTensorChain:
    def test_zz_pair(self):
        got = tensor_chain([(SZ, 0), (SZ, 1)], 2).mat
        np.testing.assert_array_equal(got, np.diag([1, -1, -1, 1]).astype(complex))

    def test_empty_is_identity(self):
        np.testing.assert_array_equal(tensor_chain([], 1).mat, np.eye(2).astype(complex))

    def test_padding(self):
        np.testing.assert_array_equal(tensor_chain([(SX, 0)], 2).mat, np.kron(SX, np.eye(2)))

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            tensor_chain([(SX, 0), (SY, 0)], 2)


class TestFidelity:
    def test_identical(self):
        psi = QuantumState.normalized(np.array([1, 2j, 0, 0.5]))
        assert fidelity(psi, psi) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert fidelity(basis_state(1, 0), basis_state(1, 1)) == 0.0

    def test_equator_pair(self):
        # |<Y|X>|^2 evaluates to |(1 - i)/2|^2 = 1/2
        assert fidelity(plus(), ystate()) == pytest.approx(0.5, abs=1e-12)

    def test_symmetric_and_phase_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = QuantumState.normalized(rng.standard_normal(4) + 1j * rng.standard_normal(4))
            b = QuantumState.normalized(rng.standard_normal(4) + 1j * rng.standard_normal(4))
            f = fidelity(a, b)
            assert f == pytest.approx(fidelity(b, a), abs=1e-12)
            rotated = QuantumState(np.exp(1.3j) * a.amplitudes)
            assert fidelity(rotated, b) == pytest.approx(f, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fidelity(basis_state(1, 0), basis_state(2, 0))


class TestDissipator:
    def test_identity_operator_is_silent(self):
        rho = np.array([[0.7, 0.2j], [-0.2j, 0.3]])
        out = dissipator_apply(NoiseMatrix(np.eye(1)), [np.eye(2)], rho)
        np.testing.assert_allclose(out, 0, atol=1e-14)

    def test_ladder_pair_on_mixed_state(self):
        # sigma+ sigma- + sigma- sigma+ = identity, so rho = I/2 is stationary
        sp, sm = pauli_operator("plus", 0, 1), pauli_operator("minus", 0, 1)
        out = dissipator_apply(NoiseMatrix(0.3 * np.eye(2)), [sp, sm], 0.5 * np.eye(2))
        np.testing.assert_allclose(out, 0, atol=1e-14)

    def test_traceless_hermitian(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            cs = [rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
                  for _ in range(3)]
            m = rng.standard_normal((3, 3))
            d = NoiseMatrix(m @ m.T)
            h = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            rho = h @ h.conj().T
            rho /= np.trace(rho).real
            out = dissipator_apply(d, cs, rho)
            assert abs(np.trace(out)) <= 1e-12
            assert np.abs(out - out.conj().T).max() <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dissipator_apply(NoiseMatrix(np.eye(2)), [np.eye(2)], np.eye(2))


def noisy_qubit_ops(rate=0.005):
    return OperatorSet(
        h0=np.zeros((2, 2)), controls=(SX, SY),
        c_ops=(pauli_operator("plus", 0, 1), pauli_operator("minus", 0, 1)),
        noise=NoiseMatrix.scaled_identity(rate, 2),
    )


class TestIntegrateLindblad:
    def test_unitary_limit(self):
        h0 = 0.7 * SX + 0.2 * SZ
        ops = OperatorSet(h0=h0, controls=(), c_ops=(SX,), noise=NoiseMatrix(np.zeros((1, 1))))
        grid = TimeGrid(1.0, 256, 1)
        rho0 = plus().density()
        rhos = integrate_lindblad(ops, np.zeros((0, 1)), grid, rho0)
        u = sla.expm(-1j * h0 * grid.horizon)
        np.testing.assert_allclose(rhos[-1], u @ rho0 @ u.conj().T, atol=1e-8)

    def test_relaxation_to_maximally_mixed(self):
        ops = noisy_qubit_ops(rate=0.8)
        grid = TimeGrid(4.0, 512, 1)
        rhos = integrate_lindblad(ops, np.zeros((2, 1)), grid, basis_state(1, 0).density())
        dists = [trace_distance(r, 0.5 * np.eye(2)) for r in rhos]
        assert dists[-1] < 0.05
        assert all(d2 <= d1 + 1e-12 for d1, d2 in zip(dists, dists[1:]))
        fine = integrate_lindblad(ops, np.zeros((2, 1)), TimeGrid(4.0, 1024, 1),
                                  basis_state(1, 0).density())
        np.testing.assert_allclose(rhos[-1], fine[-1], atol=1e-8)

    def test_trace_preserved(self):
        ops = noisy_qubit_ops()
        grid = TimeGrid(1.0, 128, 8)
        rng = np.random.default_rng(3)
        rhos = integrate_lindblad(ops, rng.standard_normal((2, 8)), grid, plus().density())
        traces = np.trace(rhos, axis1=1, axis2=2).real
        np.testing.assert_allclose(traces, 1.0, atol=1e-8)

    def test_step_halving_order(self):
        ops = noisy_qubit_ops()
        rng = np.random.default_rng(4)
        pulses = rng.standard_normal((2, 8))
        rho0 = plus().density()
        # reference on a very fine grid
        ref = integrate_lindblad(ops, pulses, TimeGrid(1.0, 4096, 8), rho0)[-1]
        errs = []
        for nt in (64, 128):
            rho = integrate_lindblad(ops, pulses, TimeGrid(1.0, nt, 8), rho0)[-1]
            errs.append(trace_distance(rho, ref))
        order = np.log2(errs[0] / errs[1])
        assert order >= 3.5

    def test_misaligned_schedule_rejected(self):
        ops = noisy_qubit_ops()
        with pytest.raises(ValueError):
            integrate_lindblad(ops, np.zeros((2, 5)), TimeGrid(1.0, 128, 8), plus().density())

    def test_grid_misalignment_rejected(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 100, 8)


class TestDomainTypes:
    def test_state_norm_enforced(self):
        with pytest.raises(ValueError):
            QuantumState(np.array([1.0, 1.0]))

    def test_state_length_power_of_two(self):
        with pytest.raises(ValueError):
            QuantumState(np.array([1.0, 0.0, 0.0]))

    def test_density_invariants(self):
        DensityMatrix(0.5 * np.eye(2))
        with pytest.raises(ValueError):
            DensityMatrix(np.array([[0.5, 0.5], [0.4, 0.5]]))
        with pytest.raises(ValueError):
            DensityMatrix(np.diag([0.8, 0.8]))
        with pytest.raises(ValueError):
            DensityMatrix(np.diag([1.5, -0.5]))

    def test_operator_tag(self):
        assert OperatorMatrix(SX).tag == "hermitian"
        assert OperatorMatrix(-1j * SX).tag == "anti_hermitian"
        assert OperatorMatrix(pauli_operator("plus", 0, 1).mat).tag == "general"
        with pytest.raises(ValueError):
            OperatorMatrix(SX, tag="anti_hermitian")

    def test_noise_matrix_checks(self):
        with pytest.raises(ValueError):
            NoiseMatrix(np.array([[1.0, 0.2], [0.1, 1.0]]))
        with pytest.raises(ValueError):
            NoiseMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
