"""Tests for the control-affine term-library module."""

import numpy as np
import pytest

from physrec.dynamics import (
    BUILTIN_NAMES,
    Coefficients,
    ConfigError,
    Factor,
    SensingMask,
    SpecError,
    SystemSpec,
    Term,
    apply_sensing,
    bilinearize,
    builtin_system,
    dump_system_config,
    eval_rhs,
    input_effect,
    load_system_config,
    split_time_constant,
)


def lv():
    return builtin_system("lotka_volterra")


def test_lotka_volterra_equilibrium():
    spec, coeffs = lv()
    out = eval_rhs(spec, coeffs, [100.0, 20.0], [0.0])
    assert np.max(np.abs(out)) < 1e-12


def test_lorenz_point_value():
    spec, coeffs = builtin_system("lorenz")
    out = eval_rhs(spec, coeffs, [1.0, 1.0, 1.0], [0.0])
    assert np.allclose(out, [0.0, 26.0, -5.0 / 3.0], atol=1e-12)


def test_bergman_insulin_equation_vanishes():
    spec, coeffs = builtin_system("bergman_aid")
    out = eval_rhs(spec, coeffs, [0.0, 0.3, 1.0], [0.0, 0.0])
    assert out[0] == 0.0


def test_eval_rhs_rejects_bad_shapes():
    spec, coeffs = lv()
    with pytest.raises(SpecError):
        eval_rhs(spec, coeffs, [1.0, 2.0, 3.0], [0.0])
    with pytest.raises(SpecError):
        eval_rhs(spec, coeffs, [1.0, np.inf], [0.0])


def test_builtin_names_and_counts():
    spec, coeffs = builtin_system("bergman_aid")
    assert spec.n == 3 and spec.m == 2
    assert spec.p == 9 and len(coeffs) == 9
    spec, coeffs = builtin_system("eeg_dvdp")
    assert spec.n == 4 and spec.m == 1 and spec.p == 6


def test_unknown_builtin_mentions_config_loader():
    with pytest.raises(KeyError) as err:
        builtin_system("f8_crusader")
    msg = str(err.value)
    assert "load_system_config" in msg
    for name in BUILTIN_NAMES:
        assert name in msg


def test_linearity_in_coefficients():
    # all built-ins are degree-1 in their coefficients
    rng = np.random.default_rng(7)
    for name in BUILTIN_NAMES:
        spec, coeffs = builtin_system(name)
        for _ in range(10):
            x = rng.normal(0.5, 0.3, spec.n)
            u = rng.normal(0.0, 1.0, spec.m)
            t1 = Coefficients(np.abs(rng.normal(0.5, 0.2, spec.p)))
            t2 = Coefficients(np.abs(rng.normal(0.5, 0.2, spec.p)))
            alpha = rng.uniform()
            mix = Coefficients(alpha * t1.values + (1 - alpha) * t2.values)
            lhs = eval_rhs(spec, mix, x, u)
            rhs = alpha * eval_rhs(spec, t1, x, u) + (1 - alpha) * eval_rhs(spec, t2, x, u)
            assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_time_constant_split_is_exact():
    rng = np.random.default_rng(3)
    for name in BUILTIN_NAMES:
        spec, coeffs = builtin_system(name)
        x = rng.normal(0.5, 0.3, spec.n)
        tau, residual = split_time_constant(spec, coeffs, x)
        drift = eval_rhs(spec, coeffs, x, np.zeros(spec.m)) - input_effect(
            spec, coeffs, x, np.zeros(spec.m)
        )
        assert np.max(np.abs(-x / tau + residual - drift)) < 1e-12


def test_sensing_mask():
    m = SensingMask((1, 1, 1))
    assert np.array_equal(apply_sensing(m, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    m = SensingMask((0, 0, 1))
    assert np.array_equal(apply_sensing(m, np.array([5.0, 6.0, 7.0])), [7.0])
    m = SensingMask((1, 0))
    assert np.array_equal(apply_sensing(m, np.array([7.0, 9.0])), [7.0])
    with pytest.raises(SpecError):
        SensingMask((0, 0, 0))
    with pytest.raises(SpecError):
        apply_sensing(SensingMask((1, 0)), np.array([1.0, 2.0, 3.0]))


def test_sign_constraint_validation():
    spec, _ = lv()
    with pytest.raises(SpecError):
        spec.coefficients([-0.1, 0.5, 0.5, 0.5])
    spec.coefficients([0.0, 0.5, 0.5, 0.5])  # boundary allowed


class TestBilinearize:
    def test_constant_unit_input_effect(self):
        # g(x) u = u: pure input feedthrough
        spec = SystemSpec(
            name="feed",
            n=1,
            m=1,
            f_terms=(Term(0, "a", (Factor(0),), -1.0),),
            g_terms=(Term(0, None, (), 1.0, input=0),),
            coeff_names=("a",),
            coeff_signs=("nonneg",),
        )
        coeffs = spec.coefficients([1.0])
        form = bilinearize(spec, coeffs, [0.7], [0.3], h=1e-5)
        assert abs(form.state_jac[0, 0]) < 1e-9
        assert abs(form.input_jac[0, 0] - 1.0) < 1e-9
        assert abs(form.cross_jac[0][0, 0]) < 1e-9

    def test_scalar_bilinear_product(self):
        # g(x) u = x u at (2, 3): dg/dx = 3, dg/du = 2, d2g/dxdu = 1
        spec = SystemSpec(
            name="prod",
            n=1,
            m=1,
            f_terms=(Term(0, "a", (Factor(0),), -1.0),),
            g_terms=(Term(0, "g", (Factor(0),), 1.0, input=0),),
            coeff_names=("a", "g"),
            coeff_signs=("nonneg", "nonneg"),
        )
        coeffs = spec.coefficients([1.0, 1.0])
        form = bilinearize(spec, coeffs, [2.0], [3.0], h=1e-5)
        assert abs(form.state_jac[0, 0] - 3.0) < 1e-6
        assert abs(form.input_jac[0, 0] - 2.0) < 1e-6
        assert abs(form.cross_jac[0][0, 0] - 1.0) < 1e-4

    def test_bergman_meal_channel(self):
        spec, coeffs = builtin_system("bergman_aid")
        inv_voi = coeffs.values[spec.coeff_index("inv_voi")]
        x0 = np.array([1.0, 0.2, 1.1])
        u0 = np.array([0.5, 3.0])
        form = bilinearize(spec, coeffs, x0, u0)
        g_state = spec.n - 1  # glucose equation
        assert abs(form.input_jac[g_state, 1] - inv_voi) < 1e-9
        assert np.max(np.abs(form.state_jac[g_state])) < 1e-9
        assert np.max(np.abs(form.cross_jac[1][g_state])) < 1e-9

    def test_exact_at_expansion_point(self):
        rng = np.random.default_rng(11)
        for name in BUILTIN_NAMES:
            spec, coeffs = builtin_system(name)
            x0 = rng.normal(0.8, 0.3, spec.n)
            u0 = rng.normal(0.0, 1.0, spec.m)
            h = 1e-5 * max(1.0, np.max(np.abs(x0)))
            form = bilinearize(spec, coeffs, x0, u0)
            truth = input_effect(spec, coeffs, x0, u0)
            approx = form.evaluate(x0, u0)
            scale = max(1.0, float(np.max(np.abs(truth))))
            assert np.max(np.abs(approx - truth)) <= 10 * h**2 * scale


class TestConfigFiles:
    def test_minimal_decay_config(self, tmp_path):
        path = tmp_path / "sys.json"
        path.write_text(
            """{"name": "decay", "n": 1, "m": 0,
                "coeffs": [{"name": "a", "sign": "nonneg", "value": 1.0}],
                "f_terms": [{"state": 0, "coeff": "a", "weight": -1.0,
                             "factors": [{"var": 0, "power": 1}]}],
                "g_terms": []}"""
        )
        spec, coeffs = load_system_config(path)
        assert spec.n == 1 and spec.m == 0 and coeffs.values[0] == 1.0
        assert np.allclose(eval_rhs(spec, coeffs, [2.0], []), [-2.0])

    def test_round_trip_lorenz(self, tmp_path):
        spec, coeffs = builtin_system("lorenz")
        path = tmp_path / "lorenz.json"
        dump_system_config(spec, coeffs, path)
        spec2, coeffs2 = load_system_config(path)
        assert spec2 == spec
        assert np.array_equal(coeffs2.values, coeffs.values)

    def test_out_of_range_state_index(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(
            """{"name": "bad", "n": 3, "m": 0,
                "coeffs": [{"name": "a", "sign": "free", "value": 1.0}],
                "f_terms": [{"state": 0, "coeff": "a",
                             "factors": [{"var": 5, "power": 1}]}],
                "g_terms": []}"""
        )
        with pytest.raises(ConfigError) as err:
            load_system_config(path)
        assert "f_terms[0]" in str(err.value)

    def test_missing_field_path(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"name": "x", "n": 1, "m": 0}')
        with pytest.raises(ConfigError):
            load_system_config(path)
