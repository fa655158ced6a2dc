"""Fixed-step simulation of the inverters, the network and the secondary controller.

The integrated state is a ``(14, n_dg)`` array: the 13 ``DGState`` rows in
``STATE_FIELDS`` order followed by the secondary correction ``dv_n``. Bus
voltages are algebraic and recomputed inside every rate evaluation.
"""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import replace
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from django.conf import settings
from scipy import linalg
from scipy import optimize

from microgrid.simulation.services.dg_model import STATE_FIELDS
from microgrid.simulation.services.dg_model import DGParams
from microgrid.simulation.services.dg_model import DqPair
from microgrid.simulation.services.dg_model import fleet_rates
from microgrid.simulation.services.dg_model import steady_state
from microgrid.simulation.services.metrics import DEFAULT_SETTLING_FRACTION
from microgrid.simulation.services.metrics import RunMetrics
from microgrid.simulation.services.metrics import compute_metrics
from microgrid.simulation.services.network import BusVoltageSolver
from microgrid.simulation.services.network import NetworkEvent
from microgrid.simulation.services.network import NetworkModel
from microgrid.simulation.services.network import apply_event
from microgrid.simulation.services.network import build_admittance
from microgrid.simulation.services.secondary_consensus import CommGraph
from microgrid.simulation.services.secondary_consensus import SecondaryConfig
from microgrid.simulation.services.secondary_consensus import SecondaryState
from microgrid.simulation.services.secondary_consensus import consensus_rates
from microgrid.simulation.services.secondary_consensus import sample_and_hold
from microgrid.simulation.services.timeseries import TimeSeriesLog

logger = logging.getLogger(__name__)

STATE_ROWS: tuple[str, ...] = (*STATE_FIELDS, "dv_n")
DELTA = STATE_ROWS.index("delta")
P_ROW = STATE_ROWS.index("P")
Q_ROW = STATE_ROWS.index("Q")
V_OD = STATE_ROWS.index("v_od")
V_OQ = STATE_ROWS.index("v_oq")
I_OD = STATE_ROWS.index("i_od")
I_OQ = STATE_ROWS.index("i_oq")
DV_N = STATE_ROWS.index("dv_n")
N_DG_ROWS = len(STATE_FIELDS)

DEFAULT_DT = 2e-5
DEFAULT_T_END = 1.5
DEFAULT_DECIMATION = 50

# |v_od| above this multiple of V_n aborts the run
DIVERGENCE_FACTOR = 10.0

RateFunction = Callable[[float, npt.NDArray[np.float64]], npt.NDArray[np.float64]]


class SimulationError(Exception):
    pass


class ScenarioError(ValueError):
    pass


class EquilibriumError(SimulationError):
    def __init__(self, message: str, residual: float, channel: str) -> None:
        super().__init__(message)
        self.residual = residual
        self.channel = channel


class NonFiniteStateError(SimulationError):
    def __init__(self, message: str, channel: str) -> None:
        super().__init__(message)
        self.channel = channel


class SimulationDivergedError(SimulationError):
    pass


@dataclass(frozen=True)
class Scenario:
    """Everything a run needs. DG indices are 0-based."""

    dg_params: tuple[DGParams, ...]
    network: NetworkModel
    graph: CommGraph
    secondary: SecondaryConfig
    events: tuple[NetworkEvent, ...] = ()
    t_end: float = DEFAULT_T_END
    dt: float = DEFAULT_DT
    common_frame_dg: int = 0
    log_decimation: int = DEFAULT_DECIMATION
    secondary_enabled: bool = True
    settling_fraction: float = DEFAULT_SETTLING_FRACTION
    name: str = "scenario"

    def __post_init__(self) -> None:
        if not self.dt > 0:
            msg = f"dt must be positive, got {self.dt}"
            raise ScenarioError(msg)
        if not self.t_end > 0:
            msg = f"t_end must be positive, got {self.t_end}"
            raise ScenarioError(msg)
        if self.log_decimation < 1:
            msg = f"log_decimation must be at least 1, got {self.log_decimation}"
            raise ScenarioError(msg)
        if not 0 < self.settling_fraction < 1:
            msg = f"settling_fraction must lie in (0, 1), got {self.settling_fraction}"
            raise ScenarioError(msg)
        n = len(self.dg_params)
        if n == 0:
            msg = "Scenario needs at least one DG"
            raise ScenarioError(msg)
        if len(self.network.dg_attachments) != n or self.graph.n != n:
            msg = (
                f"{n} DGs but {len(self.network.dg_attachments)} network attachments "
                f"and {self.graph.n} graph agents"
            )
            raise ScenarioError(msg)
        if not 0 <= self.common_frame_dg < n:
            msg = f"common_frame_dg must name one of the {n} DGs, got {self.common_frame_dg + 1}"
            raise ScenarioError(msg)
        times = [event.time for event in self.events]
        if times != sorted(times):
            msg = "Events must be sorted by time"
            raise ScenarioError(msg)
        for event in self.events:
            self.network.load(event.load_id)

    @property
    def n_dg(self) -> int:
        return len(self.dg_params)

    @property
    def n_steps(self) -> int:
        return round(self.t_end / self.dt)


class RunResult(NamedTuple):
    log: TimeSeriesLog
    metrics: RunMetrics


def state_labels(n_dg: int) -> npt.NDArray[np.str_]:
    """Channel name of every entry of the integrated state."""
    return np.array([[f"dg{dg + 1}_{row}" for dg in range(n_dg)] for row in STATE_ROWS])


def rk4_step(
    rate_fn: RateFunction,
    state: npt.NDArray[np.float64],
    t: float,
    dt: float,
    labels: npt.NDArray[np.str_] | None = None,
) -> npt.NDArray[np.float64]:
    """One classical Runge-Kutta step.

    Raises ``NonFiniteStateError`` naming the first non-finite entry.
    """
    half = dt / 2
    k1 = rate_fn(t, state)
    k2 = rate_fn(t + half, state + half * k1)
    k3 = rate_fn(t + half, state + half * k2)
    k4 = rate_fn(t + dt, state + dt * k3)
    new_state = state + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    finite = np.isfinite(new_state)
    if not np.all(finite):
        index = tuple(np.argwhere(~finite)[0])
        channel = str(labels[index]) if labels is not None else f"state{list(index)}"
        msg = f"Non-finite value in {channel} after step at t={t + dt:.6f} s"
        raise NonFiniteStateError(msg, channel=channel)
    return new_state


class CoupledSystem:
    """Rate function of all inverters closed through the current network."""

    def __init__(self, scenario: Scenario) -> None:
        self.params = DGParams.stack(scenario.dg_params)
        self.graph = scenario.graph
        self.secondary = scenario.secondary
        self.common = scenario.common_frame_dg
        self.omega_nom = float(self.params.omega_n[self.common])
        self.set_network(scenario.network)

    def set_network(self, network: NetworkModel) -> None:
        self.network = network
        self.solver = BusVoltageSolver(build_admittance(network, self.omega_nom))
        self.injection = network.injection_matrix()
        self.dg_impedance = self.solver.transfer_impedance(self.injection)

    def output_currents(self, x: npt.NDArray[np.float64]) -> npt.NDArray[np.complex128]:
        """Inverter output currents in the common frame."""
        return (x[I_OD] + 1j * x[I_OQ]) * np.exp(1j * x[DELTA])

    def bus_voltages(self, x: npt.NDArray[np.float64]) -> npt.NDArray[np.complex128]:
        return self.solver.solve(self.injection @ self.output_currents(x))

    def frequencies(self, x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return self.params.omega_n - self.params.m * x[P_ROW]

    def rates(
        self,
        x: npt.NDArray[np.float64],
        held_v: npt.NDArray[np.float64],
        *,
        active: bool,
    ) -> npt.NDArray[np.float64]:
        v_b_common = self.dg_impedance @ self.output_currents(x)
        omega_com = self.frequencies(x)[self.common]

        rates = np.empty_like(x)
        rates[:N_DG_ROWS] = fleet_rates(x[:N_DG_ROWS], v_b_common, x[DV_N], omega_com, self.params)
        if active:
            rates[DV_N] = consensus_rates(x[V_OD], held_v, self.graph, self.secondary)
        else:
            rates[DV_N] = 0.0
        return rates

    def rate_function(self, held_v: npt.NDArray[np.float64], *, active: bool) -> RateFunction:
        def rate_fn(_t: float, x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
            return self.rates(x, held_v, active=active)

        return rate_fn


def flat_start(system: CoupledSystem) -> npt.NDArray[np.float64]:
    """Initial guess with every inverter holding ``V_n`` in phase with the common frame.

    Output currents follow from the coupling impedances and the network; the
    inner loops are put at their steady state for that operating point.
    Raises ``EquilibriumError`` when the guess is not finite.
    """
    params = system.params
    n = len(params.omega_n)
    coupling = np.diag(params.r_c + 1j * params.omega_n * params.L_c) + system.dg_impedance
    v = np.asarray(params.V_n, dtype=complex)
    try:
        i = linalg.solve(coupling, v)
    except (linalg.LinAlgError, ValueError) as e:
        msg = f"Flat start failed: {e}"
        raise EquilibriumError(msg, residual=math.inf, channel="coupling") from e

    p = (np.conj(v) * i).real
    omega_com = params.omega_n[system.common] - params.m[system.common] * p[system.common]
    state = steady_state(
        DqPair.from_complex(v),
        DqPair.from_complex(i),
        omega_com,
        params,
        delta=np.zeros(n),
    )
    x = np.vstack([state.as_array(), np.zeros(n)])
    finite = np.isfinite(x)
    if not np.all(finite):
        channel = str(state_labels(n)[tuple(np.argwhere(~finite)[0])])
        msg = f"Flat start is not finite in {channel}"
        raise EquilibriumError(msg, residual=math.inf, channel=channel)
    return x


def _worst_channel(rates: npt.NDArray[np.float64]) -> tuple[float, str]:
    index = np.unravel_index(np.argmax(np.abs(rates)), rates.shape)
    return float(np.abs(rates[index])), str(state_labels(rates.shape[1])[index])


def _newton_polish(
    residual: Callable[[npt.NDArray[np.float64]], npt.NDArray[np.float64]],
    z: npt.NDArray[np.float64],
    tolerance: float,
    max_iter: int,
) -> npt.NDArray[np.float64]:
    f = residual(z)
    for _ in range(max_iter):
        if not np.all(np.isfinite(f)) or np.max(np.abs(f)) < tolerance:
            break
        jacobian = np.empty((f.size, z.size))
        for j in range(z.size):
            h = 1e-7 * max(abs(z[j]), 1.0)
            shifted = z.copy()
            shifted[j] += h
            jacobian[:, j] = (residual(shifted) - f) / h
        try:
            step = linalg.solve(jacobian, -f)
        except (linalg.LinAlgError, ValueError):
            logger.warning("Singular Jacobian while polishing the equilibrium")
            break
        candidate = z + step
        f_candidate = residual(candidate)
        if not np.all(np.isfinite(f_candidate)) or np.max(np.abs(f_candidate)) >= np.max(np.abs(f)):
            break
        z, f = candidate, f_candidate
    return z


def find_equilibrium(
    scenario: Scenario,
    *,
    tolerance: float | None = None,
    max_iter: int | None = None,
    flat_start_fallback: bool | None = None,
) -> npt.NDArray[np.float64]:
    """Droop operating point with secondary control off, as a ``(14, n_dg)`` state.

    The common-frame angle is held at zero and removed from the unknowns.
    Raises ``EquilibriumError`` when the rates cannot be brought under
    ``tolerance``, unless the flat-start fallback is enabled.
    """
    if tolerance is None:
        tolerance = settings.MICROGRID_EQUILIBRIUM_TOLERANCE
    if max_iter is None:
        max_iter = settings.MICROGRID_EQUILIBRIUM_MAX_ITER
    if flat_start_fallback is None:
        flat_start_fallback = settings.MICROGRID_FLAT_START_FALLBACK

    system = CoupledSystem(scenario)
    n = scenario.n_dg
    base = flat_start(system)
    held = np.zeros(n)

    unknown = np.ones((N_DG_ROWS, n), dtype=bool)
    unknown[DELTA, scenario.common_frame_dg] = False

    def residual(z: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        x = base.copy()
        x[:N_DG_ROWS][unknown] = z
        return system.rates(x, held, active=False)[:N_DG_ROWS][unknown]

    z0 = base[:N_DG_ROWS][unknown]
    solution = optimize.root(residual, z0, method="hybr", options={"xtol": 1e-13})
    start = solution.x if np.all(np.isfinite(solution.x)) else z0
    z = _newton_polish(residual, start, tolerance, max_iter)

    x = base.copy()
    x[:N_DG_ROWS][unknown] = z
    residual_norm, channel = _worst_channel(system.rates(x, held, active=False))
    if residual_norm < tolerance:
        logger.info(
            "Equilibrium found for %s, residual %.3e",
            scenario.name,
            residual_norm,
            extra={"scenario": scenario.name, "residual": residual_norm},
        )
        return x

    msg = (
        f"Equilibrium solve did not converge for {scenario.name}: max rate "
        f"{residual_norm:.3e} in {channel} exceeds {tolerance:.1e} ({solution.message})"
    )
    if flat_start_fallback:
        logger.warning(
            "%s; continuing from the flat start",
            msg,
            extra={"scenario": scenario.name, "residual": residual_norm, "channel": channel},
        )
        return base
    raise EquilibriumError(msg, residual=residual_norm, channel=channel)


def _snap(time_s: float, dt: float, what: str, warnings: list[str]) -> int:
    step = round(time_s / dt)
    if not math.isclose(step * dt, time_s, rel_tol=1e-9, abs_tol=1e-12):
        warning = f"{what} at t={time_s} s snapped to step grid t={step * dt} s"
        warnings.append(warning)
        logger.warning(warning, extra={"requested": time_s, "snapped": step * dt})
    return step


class ScenarioRunner:
    """Integrates a scenario from its equilibrium and records the log.

    Equilibrium options fall back to the ``MICROGRID_*`` settings.
    """

    def __init__(
        self,
        scenario: Scenario,
        *,
        tolerance: float | None = None,
        max_iter: int | None = None,
        flat_start_fallback: bool | None = None,
    ) -> None:
        self.scenario = scenario
        self.tolerance = (
            tolerance if tolerance is not None else settings.MICROGRID_EQUILIBRIUM_TOLERANCE
        )
        self.max_iter = max_iter if max_iter is not None else settings.MICROGRID_EQUILIBRIUM_MAX_ITER
        self.flat_start_fallback = (
            flat_start_fallback
            if flat_start_fallback is not None
            else settings.MICROGRID_FLAT_START_FALLBACK
        )

    def _schedule(self, warnings: list[str]) -> tuple[dict[int, list[NetworkEvent]], int | None]:
        scenario = self.scenario
        events: dict[int, list[NetworkEvent]] = {}
        for event in scenario.events:
            step = _snap(event.time, scenario.dt, f"Event on load {event.load_id}", warnings)
            if step > scenario.n_steps:
                warning = f"Event on load {event.load_id} at t={event.time} s is after t_end"
                warnings.append(warning)
                logger.warning(warning)
                continue
            events.setdefault(step, []).append(event)

        activation = None
        if scenario.secondary_enabled:
            activation = _snap(
                scenario.secondary.t_activate,
                scenario.dt,
                "Secondary activation",
                warnings,
            )
        return events, activation

    def run(self) -> RunResult:
        scenario = self.scenario
        started = time.perf_counter()
        x = find_equilibrium(
            scenario,
            tolerance=self.tolerance,
            max_iter=self.max_iter,
            flat_start_fallback=self.flat_start_fallback,
        )
        system = CoupledSystem(scenario)
        labels = state_labels(scenario.n_dg)
        warnings: list[str] = []
        events, activation = self._schedule(warnings)
        secondary_cfg = scenario.secondary
        if activation is not None:
            secondary_cfg = replace(secondary_cfg, t_activate=activation * scenario.dt)
        secondary = SecondaryState.initial(scenario.n_dg)

        n_steps = scenario.n_steps
        n_samples = n_steps // scenario.log_decimation + 1
        t_log = np.empty(n_samples)
        channels = np.empty((n_samples, scenario.n_dg, 6))
        bus_vmag = np.empty((n_samples, len(scenario.network.buses)))
        msg_count = np.zeros(n_samples, dtype=np.int64)
        divergence_limit = DIVERGENCE_FACTOR * system.params.V_n

        logger.info(
            "Running %s: %d steps of %.3g s",
            scenario.name,
            n_steps,
            scenario.dt,
            extra={"scenario": scenario.name, "n_steps": n_steps, "dt": scenario.dt},
        )
        for k in range(n_steps + 1):
            t = k * scenario.dt
            for event in events.get(k, ()):
                system.set_network(apply_event(system.network, event))
                logger.info(
                    "Event %s on load %s at t=%.6f s",
                    event.action,
                    event.load_id,
                    t,
                    extra={"scenario": scenario.name, "step": k, "t": t},
                )
            if activation is not None and k >= activation:
                secondary = sample_and_hold(
                    t,
                    x[V_OD],
                    system.graph,
                    secondary_cfg,
                    secondary,
                    dv_n=x[DV_N],
                )

            if k % scenario.log_decimation == 0:
                sample = k // scenario.log_decimation
                t_log[sample] = t
                channels[sample] = np.column_stack(
                    [
                        x[V_OD],
                        x[V_OQ],
                        x[P_ROW],
                        x[Q_ROW],
                        system.frequencies(x),
                        x[DV_N],
                    ],
                )
                bus_vmag[sample] = np.abs(system.bus_voltages(x))
                msg_count[sample] = secondary.msg_count

            if k == n_steps:
                break
            rate_fn = system.rate_function(secondary.held_v, active=secondary.active)
            x = rk4_step(rate_fn, x, t, scenario.dt, labels)

            diverged = np.abs(x[V_OD]) > divergence_limit
            if np.any(diverged):
                dg = int(np.flatnonzero(diverged)[0])
                msg = (
                    f"DG{dg + 1} output voltage {x[V_OD, dg]:.1f} V exceeds "
                    f"{DIVERGENCE_FACTOR:g}x its nominal value at t={t + scenario.dt:.6f} s"
                )
                logger.error(msg, extra={"scenario": scenario.name, "step": k + 1})
                raise SimulationDivergedError(msg)

        log = TimeSeriesLog(
            t=t_log,
            dg_channels=channels,
            bus_ids=scenario.network.buses,
            bus_vmag=bus_vmag,
            msg_count=msg_count,
            t_activate=secondary_cfg.t_activate if activation is not None else None,
            warnings=warnings,
        )
        metrics = compute_metrics(log, scenario.secondary.v_ref, scenario.settling_fraction)
        logger.info(
            "Finished %s in %.2f s, %d messages",
            scenario.name,
            time.perf_counter() - started,
            metrics.total_messages,
            extra={"scenario": scenario.name, "settled": metrics.settled},
        )
        return RunResult(log=log, metrics=metrics)


def run_scenario(scenario: Scenario, **options: float | bool | None) -> RunResult:
    """Run ``scenario`` and return its log and metrics."""
    return ScenarioRunner(scenario, **options).run()  # type: ignore[arg-type]
