"""Tests for the per-inverter model."""

import math

import numpy as np
import pytest

from microgrid.simulation.services.dg_model import DEFAULT_OMEGA_N
from microgrid.simulation.services.dg_model import DGParams
from microgrid.simulation.services.dg_model import DGState
from microgrid.simulation.services.dg_model import DqPair
from microgrid.simulation.services.dg_model import current_controller
from microgrid.simulation.services.dg_model import dg_rates
from microgrid.simulation.services.dg_model import fleet_rates
from microgrid.simulation.services.dg_model import droop_gains
from microgrid.simulation.services.dg_model import droop_setpoints
from microgrid.simulation.services.dg_model import frame_to_common
from microgrid.simulation.services.dg_model import frame_to_local
from microgrid.simulation.services.dg_model import instantaneous_power
from microgrid.simulation.services.dg_model import lcl_rates
from microgrid.simulation.services.dg_model import power_filter_rate
from microgrid.simulation.services.dg_model import steady_state
from microgrid.simulation.services.dg_model import voltage_controller
from microgrid.simulation.services.sim_engine import rk4_step
from microgrid.simulation.tests.factories import DGParamsFactory

ZERO = DqPair(0.0, 0.0)


def zero_state(**overrides: float) -> DGState:
    values = dict.fromkeys(
        (
            "delta",
            "P",
            "Q",
            "phi_d",
            "phi_q",
            "gamma_d",
            "gamma_q",
            "i_ld",
            "i_lq",
            "v_od",
            "v_oq",
            "i_od",
            "i_oq",
        ),
        0.0,
    )
    values.update(overrides)
    return DGState(**values)


def islanded_equilibrium(params: DGParams) -> tuple[DGState, DqPair, float]:
    """One inverter feeding a fixed current, with the bus voltage that holds it at rest."""
    i_o = DqPair(10.0, -3.0)
    # v_od = V_n - n * Q with Q = -q = 3 * v_od
    v_od = params.V_n / (1 + 3 * params.n)
    p = v_od * i_o.d
    omega = params.omega_n - params.m * p
    state = steady_state(DqPair(v_od, 0.0), i_o, omega, params)
    v_b = DqPair(
        v_od - params.r_c * i_o.d + omega * params.L_c * i_o.q,
        0.0 - params.r_c * i_o.q - omega * params.L_c * i_o.d,
    )
    return state, v_b, omega


class TestDGParams:
    """Tests for DGParams validation and stacking."""

    def test_defaults(self):
        """Defaults should carry the shared inverter constants."""
        params = DGParams()

        assert params.K_iv == 390.0
        assert params.m == 9.4e-5
        assert params.n == 1.3e-3
        assert params.F == 0.75
        assert params.omega_n == pytest.approx(2 * math.pi * 60)
        assert params.V_n == 381.0

    @pytest.mark.parametrize(
        ("field", "value"),
        [("r_f", 0.0), ("L_c", -1e-3), ("omega_c", 0.0), ("m", -1e-5), ("K_ic", -1.0)],
    )
    def test_rejects_invalid_values(self, field, value):
        """Non-positive filter values and negative gains should be rejected."""
        with pytest.raises(ValueError, match=field):
            DGParamsFactory(**{field: value})

    def test_rejects_feed_forward_outside_unit_interval(self):
        """F must lie in [0, 1]."""
        with pytest.raises(ValueError, match="F must lie"):
            DGParamsFactory(F=1.5)

    def test_stack_evaluates_like_individual_inverters(self):
        """Stacked parameters should give the same rates as one inverter at a time."""
        params = [DGParamsFactory(), DGParamsFactory(m=1.2e-4, n=1.0e-3, L_c=0.5e-3)]
        states = [islanded_equilibrium(p) for p in params]
        rng = np.random.default_rng(7)
        perturbed = [
            DGState.from_array(s.as_array() + rng.normal(scale=0.1, size=13))
            for s, _, _ in states
        ]

        stacked_state = DGState.from_array(np.column_stack([s.as_array() for s in perturbed]))
        stacked_vb = DqPair(
            np.array([vb.d for _, vb, _ in states]),
            np.array([vb.q for _, vb, _ in states]),
        )
        stacked = dg_rates(
            stacked_state,
            stacked_vb,
            np.zeros(2),
            states[0][2],
            DGParams.stack(params),
        ).as_array()

        for k, (p, state) in enumerate(zip(params, perturbed, strict=True)):
            single = dg_rates(state, states[k][1], 0.0, states[0][2], p).as_array()
            np.testing.assert_allclose(stacked[:, k], single, rtol=1e-13, atol=1e-9)


class TestInstantaneousPower:
    """Tests for instantaneous_power."""

    @pytest.mark.parametrize(
        ("v", "i", "expected"),
        [
            ((381.0, 0.0), (10.0, 0.0), (3810.0, 0.0)),
            ((1.0, 1.0), (1.0, 1.0), (2.0, 0.0)),
            ((3.0, 4.0), (4.0, 3.0), (24.0, -7.0)),
        ],
    )
    def test_examples(self, v, i, expected):
        """Active and reactive power should follow the dq product formulas."""
        p, q = instantaneous_power(DqPair(*v), DqPair(*i))

        assert (p, q) == expected


class TestPowerFilter:
    """Tests for the power low-pass filter."""

    def test_zero_rate_at_steady_state(self):
        """The filter should rest when its output equals the input."""
        assert power_filter_rate(500.0, 500.0, 31.41) == 0.0

    def test_rate_from_cutoff(self):
        """The rate should be omega_c times the error."""
        assert power_filter_rate(100.0, 0.0, 31.41) == pytest.approx(3141.0)

    def test_step_response_within_one_percent_after_five_time_constants(self):
        """A held step input should be tracked with the first-order response."""
        omega_c = 31.41
        dt = 1e-4
        steps = round(5 / omega_c / dt)
        value = np.array(0.0)
        for k in range(steps):
            value = rk4_step(
                lambda _t, x: power_filter_rate(100.0, x, omega_c),
                value,
                k * dt,
                dt,
            )

        expected = 100.0 * (1 - math.exp(-omega_c * steps * dt))
        assert float(value) == pytest.approx(expected, rel=1e-8)
        assert abs(100.0 - float(value)) < 1.0

    def test_unit_dc_gain(self):
        """A constant input held for many time constants should pass unchanged."""
        omega_c = 31.41
        dt = 1e-3
        value = np.array(0.0)
        for k in range(round(25 / omega_c / dt)):
            value = rk4_step(
                lambda _t, x: power_filter_rate(1234.0, x, omega_c),
                value,
                k * dt,
                dt,
            )

        assert abs(float(value) - 1234.0) < 1e-6 * 1234.0


class TestDroop:
    """Tests for droop_setpoints and droop_gains."""

    def test_no_load_returns_nominal_setpoints(self):
        """Zero power should give the nominal frequency and voltage."""
        params = DGParams()

        omega, v_od_star, v_oq_star = droop_setpoints(0.0, 0.0, 0.0, params)

        assert omega == params.omega_n
        assert v_od_star == params.V_n
        assert v_oq_star == 0.0

    def test_frequency_droop(self):
        """10 kW with m = 9.4e-5 should lower omega by 0.94 rad/s."""
        setpoints = droop_setpoints(10000.0, 0.0, 0.0, DGParams())

        assert setpoints.omega == pytest.approx(376.0512, abs=1e-4)

    def test_voltage_droop(self):
        """5 kvar with n = 1.3e-3 should lower the voltage set-point by 6.5 V."""
        setpoints = droop_setpoints(0.0, 5000.0, 0.0, DGParams())

        assert setpoints.v_od_star == pytest.approx(374.5)

    def test_secondary_correction_shifts_voltage(self):
        """dv_n should add directly to the voltage set-point."""
        setpoints = droop_setpoints(0.0, 0.0, 2.5, DGParams())

        assert setpoints.v_od_star == pytest.approx(383.5)

    def test_affine_in_power(self):
        """Doubling P and Q should double both deviations exactly."""
        params = DGParams()
        single = droop_setpoints(3000.0, 1500.0, 1.0, params)
        double = droop_setpoints(6000.0, 3000.0, 1.0, params)

        assert params.omega_n - double.omega == pytest.approx(
            2 * (params.omega_n - single.omega),
            rel=1e-12,
        )
        assert params.V_n + 1.0 - double.v_od_star == pytest.approx(
            2 * (params.V_n + 1.0 - single.v_od_star),
            rel=1e-12,
        )

    def test_gains_from_ratings(self):
        """m and n should be the allowed deviation over the rating."""
        m, n = droop_gains(0.94, 10000.0, 0.0, 5000.0)

        assert m == pytest.approx(9.4e-5)
        assert n == 0.0

    @pytest.mark.parametrize(("p_max", "q_max"), [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_gains_reject_nonpositive_ratings(self, p_max, q_max):
        """Ratings must be positive."""
        with pytest.raises(ValueError, match="must be positive"):
            droop_gains(1.0, p_max, 1.0, q_max)


class TestVoltageController:
    """Tests for the PI voltage loop."""

    def test_all_terms_vanish(self):
        """Zero inputs should give zero reference and zero integrator rates."""
        i_l_star, dphi = voltage_controller(ZERO, ZERO, ZERO, ZERO, DGParams())

        assert (i_l_star.d, i_l_star.q) == (0.0, 0.0)
        assert (dphi.d, dphi.q) == (0.0, 0.0)

    def test_current_feed_forward(self):
        """The output current should feed forward with gain F."""
        i_l_star, _ = voltage_controller(ZERO, ZERO, DqPair(10.0, 0.0), ZERO, DGParams())

        assert i_l_star.d == pytest.approx(7.5)

    def test_proportional_term(self):
        """A 2 V error should give K_pv * 2 on the d-axis."""
        i_l_star, dphi = voltage_controller(DqPair(2.0, 0.0), ZERO, ZERO, ZERO, DGParams())

        assert i_l_star.d == pytest.approx(0.1)
        assert (dphi.d, dphi.q) == (2.0, 0.0)

    def test_capacitor_decoupling(self):
        """The q-axis reference should carry +omega_n * C_f * v_od."""
        v_o = DqPair(381.0, 0.0)
        i_l_star, _ = voltage_controller(v_o, v_o, ZERO, ZERO, DGParams())

        assert i_l_star.q == pytest.approx(DEFAULT_OMEGA_N * 50e-6 * 381.0)


class TestCurrentController:
    """Tests for the PI current loop."""

    def test_all_terms_vanish(self):
        """Zero inputs should give a zero voltage reference."""
        v_i_star, dgamma = current_controller(ZERO, ZERO, ZERO, DGParams())

        assert (v_i_star.d, v_i_star.q) == (0.0, 0.0)
        assert (dgamma.d, dgamma.q) == (0.0, 0.0)

    def test_proportional_term(self):
        """A 1 A error should give K_pc volts."""
        v_i_star, _ = current_controller(DqPair(1.0, 0.0), ZERO, ZERO, DGParams())

        assert v_i_star.d == pytest.approx(10.5)

    def test_integral_term(self):
        """gamma_d = 1e-3 should give K_ic * 1e-3 volts."""
        v_i_star, _ = current_controller(ZERO, ZERO, DqPair(1e-3, 0.0), DGParams())

        assert v_i_star.d == pytest.approx(16.0)

    def test_inductor_decoupling_signs(self):
        """d-axis gets -omega_n L_f i_lq, q-axis gets +omega_n L_f i_ld."""
        params = DGParams()
        i_l = DqPair(2.0, 3.0)
        v_i_star, _ = current_controller(i_l, i_l, ZERO, params)

        assert v_i_star.d == pytest.approx(-params.omega_n * params.L_f * 3.0)
        assert v_i_star.q == pytest.approx(params.omega_n * params.L_f * 2.0)


def lcl_matrix(params: DGParams, omega: float) -> np.ndarray:
    r_f, l_f, c_f, r_c, l_c = params.r_f, params.L_f, params.C_f, params.r_c, params.L_c
    return np.array(
        [
            [-r_f / l_f, omega, -1 / l_f, 0, 0, 0],
            [-omega, -r_f / l_f, 0, -1 / l_f, 0, 0],
            [1 / c_f, 0, 0, omega, -1 / c_f, 0],
            [0, 1 / c_f, -omega, 0, 0, -1 / c_f],
            [0, 0, 1 / l_c, 0, -r_c / l_c, omega],
            [0, 0, 0, 1 / l_c, -omega, -r_c / l_c],
        ],
    )


def lcl_input(params: DGParams, v_i: DqPair, v_b: DqPair) -> np.ndarray:
    return np.array(
        [v_i.d / params.L_f, v_i.q / params.L_f, 0, 0, -v_b.d / params.L_c, -v_b.q / params.L_c],
    )


class TestLclRates:
    """Tests for the LC filter and coupling inductor equations."""

    def test_origin_is_equilibrium(self):
        """Zero states and zero voltages should give zero rates."""
        rates = lcl_rates(zero_state(), ZERO, ZERO, DEFAULT_OMEGA_N, DGParams())

        assert all(rate == 0.0 for rate in rates)

    def test_filter_resistance(self):
        """i_ld = 1 alone should decay at r_f / L_f."""
        rates = lcl_rates(zero_state(i_ld=1.0), ZERO, ZERO, 0.0, DGParams())

        assert rates.di_ld == pytest.approx(-74.074074, rel=1e-6)

    def test_matches_matrix_oracle(self):
        """For fixed inputs the equations should equal an independent 6x6 system."""
        params = DGParams()
        omega = 376.5
        rng = np.random.default_rng(3)
        x = rng.normal(scale=[10, 10, 300, 30, 10, 10])
        v_i = DqPair(385.0, 12.0)
        v_b = DqPair(378.0, -4.0)
        state = zero_state(
            i_ld=x[0],
            i_lq=x[1],
            v_od=x[2],
            v_oq=x[3],
            i_od=x[4],
            i_oq=x[5],
        )

        rates = np.array(lcl_rates(state, v_i, v_b, omega, params))
        expected = lcl_matrix(params, omega) @ x + lcl_input(params, v_i, v_b)

        np.testing.assert_allclose(rates, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())

    def test_rates_vanish_at_linear_steady_state(self):
        """The rates should vanish at the solution of the linear steady-state system."""
        params = DGParams()
        omega = DEFAULT_OMEGA_N
        v_i = DqPair(1.0, 0.5)
        v_b = DqPair(0.9, 0.4)
        x = np.linalg.solve(lcl_matrix(params, omega), -lcl_input(params, v_i, v_b))
        state = zero_state(i_ld=x[0], i_lq=x[1], v_od=x[2], v_oq=x[3], i_od=x[4], i_oq=x[5])

        rates = lcl_rates(state, v_i, v_b, omega, params)

        assert max(abs(rate) for rate in rates) < 1e-9


class TestFrames:
    """Tests for the frame rotations."""

    def test_zero_angle_is_identity(self):
        """delta = 0 should leave the pair unchanged."""
        x = DqPair(3.0, -2.0)

        rotated = frame_to_common(x, 0.0)

        assert (rotated.d, rotated.q) == (3.0, -2.0)

    def test_quarter_rotation(self):
        """A d-axis unit vector rotated by pi/2 should land on the q-axis."""
        rotated = frame_to_common(DqPair(1.0, 0.0), math.pi / 2)

        assert rotated.d == pytest.approx(0.0, abs=1e-15)
        assert rotated.q == pytest.approx(1.0)

    def test_round_trip_and_norm(self):
        """Rotations should invert each other and preserve magnitude."""
        rng = np.random.default_rng(11)
        x = DqPair(rng.normal(size=50), rng.normal(size=50))
        delta = rng.uniform(-10, 10, size=50)

        common = frame_to_common(x, delta)
        back = frame_to_local(common, delta)

        np.testing.assert_allclose(back.d, x.d, atol=1e-12)
        np.testing.assert_allclose(back.q, x.q, atol=1e-12)
        np.testing.assert_allclose(common.magnitude, x.magnitude, rtol=1e-12)


class TestDGRates:
    """Tests for the composed inverter rate function."""

    def test_rest_at_equilibrium(self):
        """A DG at its droop steady state should have all rates below 1e-8."""
        params = DGParams()
        state, v_b, omega = islanded_equilibrium(params)

        rates = dg_rates(state, v_b, 0.0, omega, params).as_array()

        assert np.max(np.abs(rates)) < 1e-8

    def test_equilibrium_satisfies_voltage_droop(self):
        """At rest with no correction, v_od = V_n - n * Q."""
        params = DGParams()
        state, _, _ = islanded_equilibrium(params)

        assert state.v_od == pytest.approx(params.V_n - params.n * state.Q, abs=1e-9)

    def test_secondary_step_drives_voltage_integrator(self):
        """A +1 V correction should make dphi_d/dt = +1 at once."""
        params = DGParams()
        state, v_b, omega = islanded_equilibrium(params)

        rates = dg_rates(state, v_b, 1.0, omega, params)

        assert rates.phi_d == pytest.approx(1.0, abs=1e-9)

    def test_frame_locked_angle(self):
        """omega equal to omega_com should give zero angle rate."""
        params = DGParams()
        state, v_b, omega = islanded_equilibrium(params)

        rates = dg_rates(state, v_b, 0.0, omega, params)

        assert rates.delta == 0.0

    def test_angle_rate_follows_frequency_difference(self):
        """The angle should advance at omega - omega_com."""
        params = DGParams()
        state, v_b, omega = islanded_equilibrium(params)

        rates = dg_rates(state, v_b, 0.0, omega - 0.25, params)

        assert rates.delta == pytest.approx(0.25)


class TestFleetRates:
    """fleet_rates should agree with dg_rates on any stacked state."""

    def test_matches_dg_rates(self):
        params = [DGParamsFactory(), DGParamsFactory(m=1.2e-4, n=1.0e-3, L_c=0.5e-3), DGParams()]
        stacked = DGParams.stack(params)
        rng = np.random.default_rng(17)
        base = [islanded_equilibrium(p) for p in params]
        x = np.column_stack([s.as_array() for s, _, _ in base]) + rng.normal(scale=0.5, size=(13, 3))
        x[0] = rng.uniform(-0.3, 0.3, size=3)
        state = DGState.from_array(x)
        v_b_common = frame_to_common(
            DqPair(np.array([vb.d for _, vb, _ in base]), np.array([vb.q for _, vb, _ in base])),
            state.delta,
        )
        dv_n = np.array([0.0, 1.5, -0.7])

        expected = dg_rates(state, v_b_common, dv_n, base[0][2], stacked).as_array()
        actual = fleet_rates(x, np.asarray(v_b_common.as_complex()), dv_n, base[0][2], stacked)

        np.testing.assert_allclose(actual, expected, rtol=1e-10, atol=1e-6)

    def test_rest_at_equilibrium(self):
        params = DGParams()
        state, v_b, omega = islanded_equilibrium(params)

        rates = fleet_rates(
            state.as_array()[:, None],
            np.array([complex(v_b.d, v_b.q)]),
            np.zeros(1),
            omega,
            DGParams.stack([params]),
        )

        assert rates.shape == (13, 1)
        assert np.max(np.abs(rates)) < 1e-8
