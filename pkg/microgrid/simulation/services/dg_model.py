"""Per-inverter dynamics of a droop-controlled voltage-source inverter.

The model covers the power calculation and its low-pass filter, the
frequency/voltage droop, the cascaded PI voltage and current loops, the LC
output filter with its coupling inductor, and the rotation between each
inverter's local dq frame and the common frame.

Every function here is pure. Arguments typed ``Scalar`` accept either floats
or numpy arrays of equal shape, so the same code evaluates a single inverter
or a whole fleet at once (see ``DGParams.stack``).

Frame orientation: complex value ``d + jq``, q-axis leading, frames rotating
in the positive direction. Under that orientation the d-axis rates of the
filter carry ``+omega * (q-axis state)`` and the q-axis rates carry
``-omega * (d-axis state)``.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import fields
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

Scalar = float | npt.NDArray[np.float64]

DEFAULT_OMEGA_N = 2 * math.pi * 60.0
DEFAULT_V_N = 381.0


@dataclass(frozen=True)
class DqPair:
    """A quantity expressed by its d-axis and q-axis components."""

    d: Scalar
    q: Scalar

    @classmethod
    def from_complex(cls, value: complex | npt.NDArray[np.complex128]) -> "DqPair":
        return cls(np.real(value), np.imag(value))

    def as_complex(self) -> complex | npt.NDArray[np.complex128]:
        return self.d + 1j * self.q

    @property
    def magnitude(self) -> Scalar:
        return np.hypot(self.d, self.q)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d)) and np.all(np.isfinite(self.q)))


@dataclass(frozen=True)
class DGParams:
    """Constants of one inverter: filter, controller gains, droop gains, set-points.

    Defaults are the shared values of the bundled 6-inverter system. ``K_iv``
    is the voltage-loop integral gain, ``F`` the current feed-forward gain.
    """

    r_f: Scalar = 0.1
    L_f: Scalar = 1.35e-3
    C_f: Scalar = 50e-6
    r_c: Scalar = 0.03
    L_c: Scalar = 0.35e-3
    omega_c: Scalar = 31.41
    K_pv: Scalar = 0.05
    K_iv: Scalar = 390.0
    K_pc: Scalar = 10.5
    K_ic: Scalar = 16e3
    F: Scalar = 0.75
    m: Scalar = 9.4e-5
    n: Scalar = 1.3e-3
    omega_n: Scalar = DEFAULT_OMEGA_N
    V_n: Scalar = DEFAULT_V_N

    def __post_init__(self) -> None:
        for name in ("r_f", "L_f", "C_f", "r_c", "L_c", "omega_c"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                msg = f"{name} must be strictly positive, got {getattr(self, name)}"
                raise ValueError(msg)
        for name in ("m", "n", "K_pv", "K_iv", "K_pc", "K_ic"):
            if not np.all(np.asarray(getattr(self, name)) >= 0):
                msg = f"{name} must be non-negative, got {getattr(self, name)}"
                raise ValueError(msg)
        feed_forward = np.asarray(self.F)
        if not np.all((feed_forward >= 0) & (feed_forward <= 1)):
            msg = f"F must lie in [0, 1], got {self.F}"
            raise ValueError(msg)

    @classmethod
    def stack(cls, params: Sequence["DGParams"]) -> "DGParams":
        """Pack per-inverter parameters into array-valued fields (one entry per DG)."""
        if not params:
            msg = "At least one DGParams is required"
            raise ValueError(msg)
        return cls(
            **{
                f.name: np.array([float(getattr(p, f.name)) for p in params])
                for f in fields(cls)
            },
        )

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class DGState:
    """The 13 dynamic states of one inverter (or of a fleet, field-wise arrays)."""

    delta: Scalar
    P: Scalar
    Q: Scalar
    phi_d: Scalar
    phi_q: Scalar
    gamma_d: Scalar
    gamma_q: Scalar
    i_ld: Scalar
    i_lq: Scalar
    v_od: Scalar
    v_oq: Scalar
    i_od: Scalar
    i_oq: Scalar

    @classmethod
    def from_array(cls, values: npt.NDArray[np.float64]) -> "DGState":
        """Build a state from an array whose leading axis follows ``STATE_FIELDS``."""
        return cls(*values)

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.array([getattr(self, name) for name in STATE_FIELDS], dtype=float)

    @property
    def v_o(self) -> DqPair:
        return DqPair(self.v_od, self.v_oq)

    @property
    def i_o(self) -> DqPair:
        return DqPair(self.i_od, self.i_oq)

    @property
    def i_l(self) -> DqPair:
        return DqPair(self.i_ld, self.i_lq)


STATE_FIELDS: tuple[str, ...] = tuple(f.name for f in fields(DGState))


class DroopSetpoints(NamedTuple):
    omega: Scalar
    v_od_star: Scalar
    v_oq_star: Scalar


class LclRates(NamedTuple):
    di_ld: Scalar
    di_lq: Scalar
    dv_od: Scalar
    dv_oq: Scalar
    di_od: Scalar
    di_oq: Scalar


def instantaneous_power(v_o: DqPair, i_o: DqPair) -> tuple[Scalar, Scalar]:
    """Instantaneous active and reactive power at the filter output.

    ``q`` is negative while the inverter feeds an inductive load.
    """
    p = v_o.d * i_o.d + v_o.q * i_o.q
    q = v_o.d * i_o.q - v_o.q * i_o.d
    return p, q


def power_filter_rate(p_inst: Scalar, P_filtered: Scalar, omega_c: Scalar) -> Scalar:  # noqa: N803
    """Rate of the first-order low-pass filter with cutoff ``omega_c``."""
    return omega_c * (p_inst - P_filtered)


def droop_setpoints(
    P: Scalar,  # noqa: N803
    Q: Scalar,  # noqa: N803
    dv_n: Scalar,
    params: DGParams,
) -> DroopSetpoints:
    """Frequency and voltage set-points; ``dv_n`` is the secondary correction."""
    omega = params.omega_n - params.m * P
    v_od_star = (params.V_n + dv_n) - params.n * Q
    return DroopSetpoints(omega=omega, v_od_star=v_od_star, v_oq_star=0.0 * v_od_star)


def droop_gains(
    d_omega_max: float,
    P_max: float,  # noqa: N803
    dV_max: float,  # noqa: N803
    Q_max: float,  # noqa: N803
) -> tuple[float, float]:
    """Droop gains from the allowed deviations and the inverter ratings."""
    if P_max <= 0:
        msg = f"P_max must be positive, got {P_max}"
        raise ValueError(msg)
    if Q_max <= 0:
        msg = f"Q_max must be positive, got {Q_max}"
        raise ValueError(msg)
    return d_omega_max / P_max, dV_max / Q_max


def voltage_controller(
    v_star: DqPair,
    v_o: DqPair,
    i_o: DqPair,
    phi: DqPair,
    params: DGParams,
) -> tuple[DqPair, DqPair]:
    """PI voltage loop with current feed-forward and capacitor decoupling.

    Returns the filter-current reference and the integrator rates.
    """
    dphi_dt = DqPair(v_star.d - v_o.d, v_star.q - v_o.q)
    i_ld_star = (
        params.F * i_o.d
        - params.omega_n * params.C_f * v_o.q
        + params.K_pv * dphi_dt.d
        + params.K_iv * phi.d
    )
    i_lq_star = (
        params.F * i_o.q
        + params.omega_n * params.C_f * v_o.d
        + params.K_pv * dphi_dt.q
        + params.K_iv * phi.q
    )
    return DqPair(i_ld_star, i_lq_star), dphi_dt


def current_controller(
    i_l_star: DqPair,
    i_l: DqPair,
    gamma: DqPair,
    params: DGParams,
) -> tuple[DqPair, DqPair]:
    """PI current loop with inductor decoupling.

    Returns the inverter voltage reference and the integrator rates.
    """
    dgamma_dt = DqPair(i_l_star.d - i_l.d, i_l_star.q - i_l.q)
    v_id_star = (
        -params.omega_n * params.L_f * i_l.q
        + params.K_pc * dgamma_dt.d
        + params.K_ic * gamma.d
    )
    v_iq_star = (
        params.omega_n * params.L_f * i_l.d
        + params.K_pc * dgamma_dt.q
        + params.K_ic * gamma.q
    )
    return DqPair(v_id_star, v_iq_star), dgamma_dt


def lcl_rates(
    state: DGState,
    v_i: DqPair,
    v_b: DqPair,
    omega: Scalar,
    params: DGParams,
) -> LclRates:
    """State equations of the LC filter and the coupling inductor.

    ``v_b`` is the bus voltage already rotated into this inverter's frame.
    """
    return LclRates(
        di_ld=(
            -params.r_f / params.L_f * state.i_ld
            + omega * state.i_lq
            + (v_i.d - state.v_od) / params.L_f
        ),
        di_lq=(
            -params.r_f / params.L_f * state.i_lq
            - omega * state.i_ld
            + (v_i.q - state.v_oq) / params.L_f
        ),
        dv_od=omega * state.v_oq + (state.i_ld - state.i_od) / params.C_f,
        dv_oq=-omega * state.v_od + (state.i_lq - state.i_oq) / params.C_f,
        di_od=(
            -params.r_c / params.L_c * state.i_od
            + omega * state.i_oq
            + (state.v_od - v_b.d) / params.L_c
        ),
        di_oq=(
            -params.r_c / params.L_c * state.i_oq
            - omega * state.i_od
            + (state.v_oq - v_b.q) / params.L_c
        ),
    )


def frame_to_common(x: DqPair, delta: Scalar) -> DqPair:
    """Rotate a local-frame quantity by ``+delta`` into the common frame."""
    cos_d = np.cos(delta)
    sin_d = np.sin(delta)
    return DqPair(cos_d * x.d - sin_d * x.q, sin_d * x.d + cos_d * x.q)


def frame_to_local(x: DqPair, delta: Scalar) -> DqPair:
    """Rotate a common-frame quantity by ``-delta`` into the local frame."""
    cos_d = np.cos(delta)
    sin_d = np.sin(delta)
    return DqPair(cos_d * x.d + sin_d * x.q, -sin_d * x.d + cos_d * x.q)


def dg_rates(
    state: DGState,
    v_b_common: DqPair,
    dv_n: Scalar,
    omega_com: Scalar,
    params: DGParams,
) -> DGState:
    """Full rate vector of one inverter (or of a stacked fleet).

    ``omega_com`` is the angular frequency of the inverter whose frame is the
    common frame.
    """
    v_o = state.v_o
    i_o = state.i_o
    p, q = instantaneous_power(v_o, i_o)
    # droop regulates on delivered (inductive-positive) vars
    q_delivered = -q

    setpoints = droop_setpoints(state.P, state.Q, dv_n, params)
    i_l_star, dphi_dt = voltage_controller(
        DqPair(setpoints.v_od_star, setpoints.v_oq_star),
        v_o,
        i_o,
        DqPair(state.phi_d, state.phi_q),
        params,
    )
    v_i_star, dgamma_dt = current_controller(
        i_l_star,
        state.i_l,
        DqPair(state.gamma_d, state.gamma_q),
        params,
    )
    v_b = frame_to_local(v_b_common, state.delta)
    lcl = lcl_rates(state, v_i_star, v_b, setpoints.omega, params)

    return DGState(
        delta=setpoints.omega - omega_com,
        P=power_filter_rate(p, state.P, params.omega_c),
        Q=power_filter_rate(q_delivered, state.Q, params.omega_c),
        phi_d=dphi_dt.d,
        phi_q=dphi_dt.q,
        gamma_d=dgamma_dt.d,
        gamma_q=dgamma_dt.q,
        i_ld=lcl.di_ld,
        i_lq=lcl.di_lq,
        v_od=lcl.dv_od,
        v_oq=lcl.dv_oq,
        i_od=lcl.di_od,
        i_oq=lcl.di_oq,
    )


def fleet_rates(
    x: npt.NDArray[np.float64],
    v_b_common: npt.NDArray[np.complex128],
    dv_n: npt.NDArray[np.float64],
    omega_com: float,
    params: DGParams,
) -> npt.NDArray[np.float64]:
    """``dg_rates`` on a ``(13, n_dg)`` state array, returned in the same layout.

    Same equations, evaluated row by row without building intermediate
    ``DGState`` or ``DqPair`` values. ``params`` must be stacked.
    """
    delta, p_filt, q_filt, phi_d, phi_q, gamma_d, gamma_q = x[:7]
    i_ld, i_lq, v_od, v_oq, i_od, i_oq = x[7:]
    v_b = v_b_common * np.exp(-1j * delta)
    v_bd = v_b.real
    v_bq = v_b.imag

    omega = params.omega_n - params.m * p_filt
    dphi_d = (params.V_n + dv_n) - params.n * q_filt - v_od
    dphi_q = -v_oq
    i_ld_star = (
        params.F * i_od
        - params.omega_n * params.C_f * v_oq
        + params.K_pv * dphi_d
        + params.K_iv * phi_d
    )
    i_lq_star = (
        params.F * i_oq
        + params.omega_n * params.C_f * v_od
        + params.K_pv * dphi_q
        + params.K_iv * phi_q
    )
    dgamma_d = i_ld_star - i_ld
    dgamma_q = i_lq_star - i_lq
    v_id = -params.omega_n * params.L_f * i_lq + params.K_pc * dgamma_d + params.K_ic * gamma_d
    v_iq = params.omega_n * params.L_f * i_ld + params.K_pc * dgamma_q + params.K_ic * gamma_q

    rates = np.empty_like(x)
    rates[0] = omega - omega_com
    rates[1] = params.omega_c * (v_od * i_od + v_oq * i_oq - p_filt)
    rates[2] = params.omega_c * (v_oq * i_od - v_od * i_oq - q_filt)
    rates[3] = dphi_d
    rates[4] = dphi_q
    rates[5] = dgamma_d
    rates[6] = dgamma_q
    rates[7] = -params.r_f / params.L_f * i_ld + omega * i_lq + (v_id - v_od) / params.L_f
    rates[8] = -params.r_f / params.L_f * i_lq - omega * i_ld + (v_iq - v_oq) / params.L_f
    rates[9] = omega * v_oq + (i_ld - i_od) / params.C_f
    rates[10] = -omega * v_od + (i_lq - i_oq) / params.C_f
    rates[11] = -params.r_c / params.L_c * i_od + omega * i_oq + (v_od - v_bd) / params.L_c
    rates[12] = -params.r_c / params.L_c * i_oq - omega * i_od + (v_oq - v_bq) / params.L_c
    return rates


def _divide_by_gain(numerator: Scalar, gain: Scalar) -> Scalar:
    gain_arr = np.asarray(gain, dtype=float)
    safe = np.where(gain_arr > 0, gain_arr, 1.0)
    result = np.where(gain_arr > 0, np.asarray(numerator) / safe, 0.0)
    return result if result.ndim else float(result)


def steady_state(  # noqa: PLR0913
    v_o: DqPair,
    i_o: DqPair,
    omega: Scalar,
    params: DGParams,
    dv_n: Scalar = 0.0,
    delta: Scalar = 0.0,
) -> DGState:
    """Inner-loop steady state for a given output voltage, output current and frequency.

    Filtered powers equal the instantaneous ones, the filter currents and the
    inverter voltage satisfy the LC equations at rest, and the integrators hold
    whatever keeps both PI loops at zero rate. Integrators of loops with a
    zero integral gain are left at zero.
    """
    p, q = instantaneous_power(v_o, i_o)
    q_delivered = -q
    i_ld = i_o.d - omega * params.C_f * v_o.q
    i_lq = i_o.q + omega * params.C_f * v_o.d
    v_id = v_o.d + params.r_f * i_ld - omega * params.L_f * i_lq
    v_iq = v_o.q + params.r_f * i_lq + omega * params.L_f * i_ld

    setpoints = droop_setpoints(p, q_delivered, dv_n, params)
    phi_d = _divide_by_gain(
        i_ld
        - params.F * i_o.d
        + params.omega_n * params.C_f * v_o.q
        - params.K_pv * (setpoints.v_od_star - v_o.d),
        params.K_iv,
    )
    phi_q = _divide_by_gain(
        i_lq
        - params.F * i_o.q
        - params.omega_n * params.C_f * v_o.d
        - params.K_pv * (setpoints.v_oq_star - v_o.q),
        params.K_iv,
    )
    gamma_d = _divide_by_gain(v_id + params.omega_n * params.L_f * i_lq, params.K_ic)
    gamma_q = _divide_by_gain(v_iq - params.omega_n * params.L_f * i_ld, params.K_ic)

    return DGState(
        delta=delta,
        P=p,
        Q=q_delivered,
        phi_d=phi_d,
        phi_q=phi_q,
        gamma_d=gamma_d,
        gamma_q=gamma_q,
        i_ld=i_ld,
        i_lq=i_lq,
        v_od=v_o.d,
        v_oq=v_o.q,
        i_od=i_o.d,
        i_oq=i_o.q,
    )
