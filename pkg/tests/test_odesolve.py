"""Tests for the fixed-step integration module."""

import numpy as np
import pytest

from physrec.dynamics import Factor, SensingMask, SpecError, SystemSpec, Term, builtin_system
from physrec.odesolve import (
    DivergenceError,
    InputSignal,
    SolverConfig,
    solve,
    step_rk4,
    zoh_value,
)


def decay_system(a=1.0):
    spec = SystemSpec(
        name="decay",
        n=1,
        m=1,
        f_terms=(Term(0, "a", (Factor(0),), -1.0),),
        g_terms=(Term(0, None, (), 1.0, input=0),),
        coeff_names=("a",),
        coeff_signs=("nonneg",),
        resting=(0.0,),
    )
    return spec, spec.coefficients([a])


def oscillator_system():
    # xdot = v, vdot = -x: unit circle in phase space, period 2 pi
    spec = SystemSpec(
        name="osc",
        n=2,
        m=1,
        f_terms=(Term(0, None, (Factor(1),)), Term(1, "w", (Factor(0),), -1.0)),
        g_terms=(Term(1, None, (), 1.0, input=0),),
        coeff_names=("w",),
        coeff_signs=("nonneg",),
    )
    return spec, spec.coefficients([1.0])


def zero_signal(m=1, k=2, dt=1.0):
    return InputSignal(0.0, dt, np.zeros((m, k)))


class TestZoh:
    def test_hold_within_interval(self):
        sig = InputSignal(0.0, 1.0, np.array([[0.0, 5.0, 0.0]]))
        assert zoh_value(sig, 1.5)[0] == 5.0

    def test_start_and_past_end(self):
        sig = InputSignal(0.0, 1.0, np.array([[3.0, 5.0, 7.0]]))
        assert zoh_value(sig, 0.0)[0] == 3.0
        assert zoh_value(sig, 99.0)[0] == 7.0

    def test_before_start_rejected(self):
        sig = zero_signal()
        with pytest.raises(SpecError):
            zoh_value(sig, -0.5)


class TestStepRk4:
    def test_decay_step_matches_stability_polynomial(self):
        # one step of the classical method on xdot = -x has the closed form
        # R(z) = 1 + z + z^2/2 + z^3/6 + z^4/24 with z = -h
        spec, coeffs = decay_system()
        z = -0.1
        expect = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
        out = step_rk4(spec, coeffs, [1.0], 0.0, 0.1, zero_signal())
        assert abs(out[0] - expect) < 1e-12
        # the 4th-order truncation gap to the true exponential is ~8.2e-8
        assert abs(out[0] - np.exp(-0.1)) < 1.2e-7

    def test_zero_rhs_leaves_state(self):
        spec, coeffs = decay_system(a=0.0)
        out = step_rk4(spec, coeffs, [3.5], 0.0, 0.25, zero_signal())
        assert out[0] == 3.5

    def test_harmonic_oscillator_period(self):
        spec, coeffs = oscillator_system()
        h = 2 * np.pi / 1000
        sig = zero_signal()
        x = np.array([1.0, 0.0])
        for i in range(1000):
            x = step_rk4(spec, coeffs, x, i * h, h, sig)
        assert np.max(np.abs(x - [1.0, 0.0])) < 1e-9

    def test_nonpositive_step_rejected(self):
        spec, coeffs = decay_system()
        with pytest.raises(SpecError):
            step_rk4(spec, coeffs, [1.0], 0.0, 0.0, zero_signal())


class TestSolve:
    def test_exponential_endpoint(self):
        spec, coeffs = decay_system()
        grid = np.arange(11) * 0.1
        tr = solve(spec, coeffs, [1.0], zero_signal(), grid)
        assert abs(tr.y[0, -1] - np.exp(-1.0)) < 1e-7

    def test_equilibrium_stays_constant(self):
        spec, coeffs = builtin_system("lotka_volterra")
        grid = np.arange(50) * 0.2
        tr = solve(spec, coeffs, [100.0, 20.0], zero_signal(), grid)
        assert np.max(np.abs(tr.y - np.array([[100.0], [20.0]]))) < 1e-9

    def test_self_consistency_with_recorded_inputs(self):
        spec, coeffs = builtin_system("bergman_aid")
        k = 40
        u = np.zeros((2, k))
        u[0] = 1.0
        u[0, 10] += 5.0
        u[1, 8] = 12.0
        sig = InputSignal(0.0, 5.0, u)
        grid = 5.0 * np.arange(k)
        first = solve(spec, coeffs, spec.resting_state(), sig, grid)
        again = solve(spec, coeffs, spec.resting_state(), sig, grid)
        assert np.array_equal(first.y, again.y)  # bit-identical determinism

    def test_masked_output_and_hidden_seeding(self):
        spec, coeffs = builtin_system("bergman_aid")
        mask = SensingMask((0, 0, 1))
        k = 20
        sig = InputSignal(0.0, 5.0, np.zeros((2, k)))
        grid = 5.0 * np.arange(k)
        tr = solve(spec, coeffs, [1.0], sig, grid, mask=mask, return_full_state=True)
        assert tr.y.shape == (1, k)
        full = tr.meta["full_state"]
        assert full[0, 0] == spec.resting_state()[0]
        assert full[2, 0] == 1.0

    def test_divergence_reports_time(self):
        spec = SystemSpec(
            name="blow",
            n=1,
            m=1,
            f_terms=(Term(0, "a", (Factor(0, 3),)),),
            g_terms=(Term(0, None, (), 1.0, input=0),),
            coeff_names=("a",),
            coeff_signs=("nonneg",),
        )
        coeffs = spec.coefficients([5.0])
        grid = np.arange(200) * 0.5
        with pytest.raises(DivergenceError) as err:
            solve(spec, coeffs, [2.0], zero_signal(), grid)
        assert np.isfinite(err.value.t)

    def test_grid_validation(self):
        spec, coeffs = decay_system()
        with pytest.raises(SpecError):
            solve(spec, coeffs, [1.0], zero_signal(), [0.0, 0.2, 0.1])
        with pytest.raises(SpecError):
            solve(spec, coeffs, [1.0], zero_signal(), [0.0, 0.1, 0.3])


class TestConvergenceOrder:
    def _endpoint_errors(self, method, substeps_list):
        spec, coeffs = decay_system()
        grid = np.arange(11) * 0.1
        errs = []
        for sub in substeps_list:
            tr = solve(spec, coeffs, [1.0], zero_signal(), grid, SolverConfig(method, sub))
            errs.append(abs(tr.y[0, -1] - np.exp(-1.0)))
        return errs

    def test_rk4_fourth_order(self):
        errs = self._endpoint_errors("rk4", [1, 2, 4, 8])
        for a, b in zip(errs, errs[1:]):
            assert 12.0 <= a / b <= 20.0

    def test_euler_first_order(self):
        errs = self._endpoint_errors("euler", [1, 2, 4, 8])
        for a, b in zip(errs, errs[1:]):
            assert 1.8 <= a / b <= 2.2

    def test_substep_refinement_consistency(self):
        # doubling substeps moves the solution by less than the Richardson
        # truncation estimate of the coarser run, on every built-in system
        for name in ("lotka_volterra", "bergman_aid", "eeg_dvdp"):
            spec, coeffs = builtin_system(name)
            k, dt = 60, (5.0 if name == "bergman_aid" else 0.05)
            sig = InputSignal(0.0, dt, np.zeros((spec.m, k)))
            grid = dt * np.arange(k)
            x0 = spec.resting_state() + 0.05
            sols = {}
            for sub in (2, 4, 8):
                sols[sub] = solve(spec, coeffs, x0, sig, grid, SolverConfig("rk4", sub)).y
            d_coarse = np.max(np.abs(sols[4] - sols[2]))
            d_fine = np.max(np.abs(sols[8] - sols[4]))
            richardson = d_coarse / 15.0
            assert d_fine <= max(richardson * 2.0, 1e-14)
