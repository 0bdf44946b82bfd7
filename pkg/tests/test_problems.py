import json

import numpy as np
import pytest

from qdc.gauge import dissipator_invariance_gap
from qdc.picontrol import ControlSchedule
from qdc.problems import (
    NmrParams,
    build_nmr,
    build_noisy_qubit,
    build_spin_chain,
    ghz_state,
    ghz_target_rotating,
    haar_random_state,
    nmr_coupling_hamiltonian,
    nmr_shift_hamiltonian,
    plus_state,
    rotating_frame_controls,
    unitary_transfer_eval,
    y_state,
)
from qdc.qcore import fidelity, integrate_lindblad
from qdc.sse import TimeGrid


@pytest.fixture
def two_spin_params():
    return NmrParams(n_qubits=2, shifts=(0.3, -0.2),
                     couplings=np.array([[0.0, 0.4], [0.4, 0.0]]), t1=5.0)


class TestNoisyQubit:
    def test_lambda_from_reference_setting(self):
        bundle = build_noisy_qubit(0.005, 1.0, 10.0)
        assert bundle.lam == pytest.approx(0.0025, abs=1e-15)

    def test_decay_term(self):
        bundle = build_noisy_qubit(0.01, 1.0, 10.0)
        ops = bundle.linear_sse()
        np.testing.assert_allclose(ops.drift, -0.005 * np.eye(2), atol=1e-14)

    def test_unraveling_gap_delegated(self):
        bundle = build_noisy_qubit(0.005, 1.0, 10.0)
        gap = dissipator_invariance_gap(
            bundle.lindblad.c_ops, bundle.lindblad.noise,
            [c.mat for c in bundle.unraveling.c_tilde], bundle.unraveling.d_tilde,
            probe_count=25, rng=0)
        assert gap <= 1e-12

    def test_default_transfer_pair(self):
        bundle = build_noisy_qubit(0.005, 1.0, 10.0)
        assert fidelity(bundle.psi0, plus_state()) == pytest.approx(1.0)
        assert fidelity(bundle.cost.target, y_state()) == pytest.approx(1.0)


class TestNmr:
    def test_single_spin_reduces_to_qubit(self):
        params = NmrParams(n_qubits=1, shifts=(0.0,), couplings=np.zeros((1, 1)), t1=1.0)
        bundle = build_nmr(params, 0.02, 1.0, 10.0, horizon=1.0)
        np.testing.assert_allclose(bundle.h0, 0.0, atol=1e-15)
        ref = build_noisy_qubit(0.02, 0.5, 10.0)
        for got, want in zip(bundle.unraveling.c_tilde, ref.unraveling.c_tilde):
            np.testing.assert_allclose(got.mat, want.mat, atol=1e-14)
        np.testing.assert_allclose(bundle.unraveling.d_tilde.mat,
                                   ref.unraveling.d_tilde.mat, atol=1e-14)

    def test_decay_scales_with_spin_count(self, two_spin_params):
        bundle = build_nmr(two_spin_params, 0.04, 1.0, 10.0, horizon=1.0)
        ops = bundle.linear_sse()
        # coupling drift is diagonal; subtract it to isolate the decay
        decay = ops.drift + 1j * bundle.h0
        np.testing.assert_allclose(decay, -2 * 0.02 * np.eye(4), atol=1e-13)

    def test_per_channel_weight_and_lambda(self, two_spin_params):
        bundle = build_nmr(two_spin_params, 0.04, 1.0, 10.0, horizon=1.0)
        np.testing.assert_allclose(bundle.cost.r_matrix, np.eye(4) / 4)
        assert bundle.lam == pytest.approx((1.0 / 4) * 0.02)

    def test_coupling_hamiltonian_structure(self, two_spin_params):
        h = nmr_coupling_hamiltonian(two_spin_params)
        want = (np.pi / 2) * 0.4 * np.diag([1.0, -1.0, -1.0, 1.0])
        np.testing.assert_allclose(h, want, atol=1e-14)

    def test_lab_frame_includes_shifts(self, two_spin_params):
        lab = build_nmr(two_spin_params, 0.04, 1.0, 10.0, horizon=1.0, frame="lab")
        rot = build_nmr(two_spin_params, 0.04, 1.0, 10.0, horizon=1.0)
        np.testing.assert_allclose(lab.h0 - rot.h0,
                                   nmr_shift_hamiltonian(two_spin_params), atol=1e-14)

    def test_params_file_round_trip(self, tmp_path, two_spin_params):
        path = tmp_path / "params.json"
        path.write_text(json.dumps({
            "n_qubits": 2, "shifts": [0.3, -0.2],
            "couplings": [[0.0, 0.4], [0.4, 0.0]], "T1": 5.0,
        }))
        loaded = NmrParams.from_json(path)
        assert loaded.n_qubits == two_spin_params.n_qubits
        assert loaded.shifts == two_spin_params.shifts
        np.testing.assert_array_equal(loaded.couplings, two_spin_params.couplings)
        assert loaded.t1 == two_spin_params.t1

    def test_params_validation(self):
        with pytest.raises(ValueError):
            NmrParams(n_qubits=2, shifts=(0.1, 0.2),
                      couplings=np.array([[0.0, 1.0], [0.5, 0.0]]), t1=1.0)
        with pytest.raises(ValueError):
            NmrParams(n_qubits=1, shifts=(0.1,), couplings=np.zeros((1, 1)), t1=0.0)


class TestRotatingFrameControls:
    def test_zero_shifts_identity(self):
        grid = TimeGrid(1.0, 16, 4)
        rng = np.random.default_rng(1)
        sched = ControlSchedule(rng.normal(0, 1, (4, 4)), grid)
        out = rotating_frame_controls(sched, (0.0, 0.0), "to_rot")
        np.testing.assert_allclose(out.pulses, sched.pulses, atol=1e-15)

    def test_round_trip_exact(self):
        grid = TimeGrid(1.0, 32, 8)
        rng = np.random.default_rng(2)
        sched = ControlSchedule(rng.normal(0, 2, (4, 8)), grid)
        shifts = (0.37, -1.21)
        back = rotating_frame_controls(
            rotating_frame_controls(sched, shifts, "to_rot"), shifts, "to_lab")
        np.testing.assert_allclose(back.pulses, sched.pulses, atol=1e-12)

    def test_quarter_turn_swaps_channels(self):
        # single bin, midpoint T/2 = 0.5, shift 0.5: angle 2 pi nu t = pi / 2
        grid = TimeGrid(1.0, 4, 1)
        sched = ControlSchedule(np.array([[1.0], [2.0]]), grid)
        out = rotating_frame_controls(sched, (0.5,), "to_rot")
        np.testing.assert_allclose(out.pulses, [[2.0], [-1.0]], atol=1e-12)

    def test_channel_pairing_enforced(self):
        grid = TimeGrid(1.0, 4, 1)
        sched = ControlSchedule(np.zeros((3, 1)), grid)
        with pytest.raises(ValueError):
            rotating_frame_controls(sched, (0.1, 0.2), "to_rot")


class TestGhzTargets:
    def test_integer_phase_gives_plain_ghz(self):
        phi = ghz_target_rotating(3, (0.5, 1.0, 0.5), horizon=2.0)  # omega T = 2
        assert fidelity(phi, ghz_state(3)) == pytest.approx(1.0, abs=1e-12)

    def test_overlap_with_plain_ghz(self):
        for omega_t in (0.1, 0.25, 0.4):
            phi = ghz_target_rotating(2, (2 * omega_t,), horizon=1.0)
            want = np.cos(2 * np.pi * omega_t) ** 2
            assert fidelity(phi, ghz_state(2)) == pytest.approx(want, abs=1e-12)

    def test_zero_shifts(self):
        phi = ghz_target_rotating(2, (0.0, 0.0), horizon=3.0)
        np.testing.assert_allclose(phi.amplitudes,
                                   np.array([1, 0, 0, 1]) / np.sqrt(2), atol=1e-15)


class TestSpinChain:
    def test_channel_count_ten_qubits(self):
        # counted, not built: 2n + 4(n-1)
        assert 2 * 10 + 4 * 9 == 56

    def test_two_qubit_chain(self):
        bundle = build_spin_chain(2, 0.05, 1.0, 10.0)
        assert bundle.n_channels == 8
        diag = np.diagonal(bundle.unraveling.d_tilde.mat)
        np.testing.assert_allclose(diag, 0.025)  # pair rate is twice the site rate
        assert bundle.lam == pytest.approx((1.0 / 8) * 0.025)

    def test_three_qubit_chain_gap(self):
        bundle = build_spin_chain(3, 0.1, 1.0, 10.0)
        gap = dissipator_invariance_gap(
            bundle.lindblad.c_ops, bundle.lindblad.noise,
            [c.mat for c in bundle.unraveling.c_tilde], bundle.unraveling.d_tilde,
            probe_count=5, rng=1)
        assert gap <= 1e-10


class TestHaar:
    def test_normalized_and_deterministic(self):
        a = haar_random_state(3, seed=5)
        b = haar_random_state(3, seed=5)
        assert abs(np.linalg.norm(a.amplitudes) - 1.0) <= 1e-12
        assert np.array_equal(a.amplitudes, b.amplitudes)

    def test_first_amplitude_moment(self):
        n, draws = 2, 10_000
        vals = np.array([abs(haar_random_state(n, seed=s).amplitudes[0]) ** 2
                         for s in range(draws)])
        dim = 2 ** n
        var = (dim - 1) / (dim ** 2 * (dim + 1))
        assert abs(vals.mean() - 1 / dim) < 5 * np.sqrt(var / draws)


class TestUnitaryTransfer:
    def test_zero_schedule_equator_pair(self):
        bundle = build_noisy_qubit(0.005, 1.0, 10.0)
        grid = TimeGrid(1.0, 16, 4)
        f = unitary_transfer_eval(ControlSchedule(np.zeros((2, 4)), grid), bundle)
        assert f == pytest.approx(0.5, abs=1e-12)

    def test_matches_closed_lindblad_limit(self):
        # with the coupling off, the master equation and the pure propagation agree
        bundle = build_noisy_qubit(0.005, 1.0, 10.0)
        grid = TimeGrid(1.0, 256, 8)
        rng = np.random.default_rng(6)
        pulses = rng.normal(0, 1, (2, 8))
        f_closed = unitary_transfer_eval(ControlSchedule(pulses, grid), bundle)
        closed = bundle.lindblad
        from qdc.qcore import NoiseMatrix, OperatorSet
        closed0 = OperatorSet(h0=closed.h0, controls=closed.controls,
                              c_ops=closed.c_ops,
                              noise=NoiseMatrix(np.zeros((2, 2))))
        rhos = integrate_lindblad(closed0, pulses, grid, bundle.psi0.density())
        f_lind = float(np.real(np.trace(rhos[-1] @ bundle.cost.target.density())))
        assert f_closed == pytest.approx(f_lind, abs=1e-6)
