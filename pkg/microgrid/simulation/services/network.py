"""Quasi-static electrical network of the microgrid.

Lines and loads are phasors at the nominal frequency. Bus voltages follow
from the currents the inverters inject (common frame) through the nodal
admittance matrix. Complex numbers encode dq pairs as ``d + jq``.
"""

import logging
from dataclasses import dataclass
from dataclasses import replace
from functools import cached_property
from typing import Literal

import networkx as nx
import numpy as np
import numpy.typing as npt
from scipy import linalg

from microgrid.simulation.services.dg_model import DqPair

logger = logging.getLogger(__name__)

# Condition estimate above which Y is treated as singular
MAX_CONDITION_NUMBER = 1e12

EventAction = Literal["toggle", "enable", "disable", "scale"]


class NetworkError(ValueError):
    pass


class SingularNetworkError(NetworkError):
    pass


class UnknownLoadError(NetworkError):
    pass


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    resistance: float
    inductance: float

    def impedance(self, omega: float) -> complex:
        return complex(self.resistance, omega * self.inductance)


@dataclass(frozen=True)
class Load:
    """Constant-impedance series RL load."""

    load_id: int
    bus: int
    resistance: float
    inductance: float
    enabled: bool = True

    def impedance(self, omega: float) -> complex:
        return complex(self.resistance, omega * self.inductance)


@dataclass(frozen=True)
class NetworkEvent:
    """Load change applied between integration steps.

    ``scale`` multiplies the load impedance by ``factor``.
    """

    time: float
    load_id: int
    action: EventAction
    factor: float = 1.0

    def __post_init__(self) -> None:
        if self.time < 0:
            msg = f"Event time must be non-negative, got {self.time}"
            raise NetworkError(msg)
        if self.action == "scale" and self.factor <= 0:
            msg = f"Scale factor must be positive, got {self.factor}"
            raise NetworkError(msg)


@dataclass(frozen=True)
class NetworkModel:
    """Buses, lines, loads and the bus each inverter is attached to.

    ``dg_attachments[i]`` is the bus of inverter ``i``.
    """

    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    dg_attachments: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.buses:
            msg = "Network must contain at least one bus"
            raise NetworkError(msg)
        if len(set(self.buses)) != len(self.buses):
            msg = "Bus identifiers must be unique"
            raise NetworkError(msg)
        known = set(self.buses)

        for line in self.lines:
            if line.from_bus not in known or line.to_bus not in known:
                msg = f"Line {line.from_bus}-{line.to_bus} references an unknown bus"
                raise NetworkError(msg)
            if line.from_bus == line.to_bus:
                msg = f"Line {line.from_bus}-{line.to_bus} connects a bus to itself"
                raise NetworkError(msg)
            if line.resistance <= 0 or line.inductance < 0:
                msg = (
                    f"Line {line.from_bus}-{line.to_bus} needs resistance > 0 and "
                    f"inductance >= 0, got {line.resistance}, {line.inductance}"
                )
                raise NetworkError(msg)

        load_ids = [load.load_id for load in self.loads]
        if len(set(load_ids)) != len(load_ids):
            msg = "Load identifiers must be unique"
            raise NetworkError(msg)
        for load in self.loads:
            if load.bus not in known:
                msg = f"Load {load.load_id} references unknown bus {load.bus}"
                raise NetworkError(msg)
            if load.resistance <= 0 or load.inductance < 0:
                msg = (
                    f"Load {load.load_id} needs resistance > 0 and inductance >= 0, "
                    f"got {load.resistance}, {load.inductance}"
                )
                raise NetworkError(msg)

        for dg, bus in enumerate(self.dg_attachments):
            if bus not in known:
                msg = f"DG {dg + 1} is attached to unknown bus {bus}"
                raise NetworkError(msg)

        graph = nx.Graph()
        graph.add_nodes_from(self.buses)
        graph.add_edges_from((line.from_bus, line.to_bus) for line in self.lines)
        if not nx.is_connected(graph):
            msg = "Bus graph is not connected"
            raise NetworkError(msg)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {bus: k for k, bus in enumerate(self.buses)}

    @property
    def dg_bus_indices(self) -> npt.NDArray[np.int64]:
        return np.array([self.bus_index[bus] for bus in self.dg_attachments], dtype=int)

    def load(self, load_id: int) -> Load:
        for load in self.loads:
            if load.load_id == load_id:
                return load
        msg = f"Unknown load id {load_id}"
        raise UnknownLoadError(msg)

    def injection_matrix(self) -> npt.NDArray[np.float64]:
        """Incidence of inverter currents onto buses (``n_bus x n_dg``)."""
        matrix = np.zeros((len(self.buses), len(self.dg_attachments)))
        matrix[self.dg_bus_indices, np.arange(len(self.dg_attachments))] = 1.0
        return matrix


def build_admittance(net: NetworkModel, omega_nom: float) -> npt.NDArray[np.complex128]:
    """Nodal admittance matrix at ``omega_nom`` (enabled loads as shunts).

    Without an enabled load the matrix is singular; ``BusVoltageSolver``
    rejects it.
    """
    index = net.bus_index
    admittance = np.zeros((len(net.buses), len(net.buses)), dtype=complex)
    for line in net.lines:
        y = 1 / line.impedance(omega_nom)
        k, j = index[line.from_bus], index[line.to_bus]
        admittance[k, k] += y
        admittance[j, j] += y
        admittance[k, j] -= y
        admittance[j, k] -= y
    for load in net.loads:
        if not load.enabled:
            continue
        k = index[load.bus]
        admittance[k, k] += 1 / load.impedance(omega_nom)
    return admittance


class BusVoltageSolver:
    """LU-factorized nodal equations ``Y V = I`` for repeated solves."""

    def __init__(self, admittance: npt.NDArray[np.complex128]) -> None:
        condition = np.linalg.cond(admittance)
        if not np.isfinite(condition) or condition > MAX_CONDITION_NUMBER:
            msg = (
                f"Admittance matrix is singular or near-singular "
                f"(condition estimate {condition:.3e} > {MAX_CONDITION_NUMBER:.0e})"
            )
            raise SingularNetworkError(msg)
        self.admittance = admittance
        self.condition = float(condition)
        self._lu = linalg.lu_factor(admittance, check_finite=False)

    def solve(self, injections: npt.NDArray[np.complex128]) -> npt.NDArray[np.complex128]:
        return linalg.lu_solve(self._lu, injections, check_finite=False)

    def transfer_impedance(
        self,
        injection: npt.NDArray[np.float64],
    ) -> npt.NDArray[np.complex128]:
        """Impedance from inverter currents to the voltages of their own buses.

        ``injection`` is the ``n_bus x n_dg`` incidence matrix.
        """
        return injection.T @ self.solve(injection.astype(complex))


def solve_bus_voltages(
    admittance: npt.NDArray[np.complex128],
    injected_currents: DqPair,
) -> DqPair:
    """Bus voltages (common frame) for per-bus injected currents."""
    solver = BusVoltageSolver(admittance)
    return DqPair.from_complex(solver.solve(np.asarray(injected_currents.as_complex())))


def kcl_residual(
    admittance: npt.NDArray[np.complex128],
    voltages: npt.NDArray[np.complex128],
    injections: npt.NDArray[np.complex128],
) -> float:
    """Relative residual ``|Y V - I| / |I|`` (absolute when ``I`` is zero)."""
    residual = np.linalg.norm(admittance @ voltages - injections)
    scale = np.linalg.norm(injections)
    return float(residual / scale) if scale > 0 else float(residual)


def power_balance_residual(
    net: NetworkModel,
    omega_nom: float,
    voltages: npt.NDArray[np.complex128],
    injections: npt.NDArray[np.complex128],
) -> float:
    """Relative mismatch between injected power and load plus line consumption."""
    index = net.bus_index
    injected = np.sum(voltages * np.conj(injections))
    consumed = 0j
    for line in net.lines:
        drop = voltages[index[line.from_bus]] - voltages[index[line.to_bus]]
        consumed += drop * np.conj(drop / line.impedance(omega_nom))
    for load in net.loads:
        if load.enabled:
            v = voltages[index[load.bus]]
            consumed += v * np.conj(v / load.impedance(omega_nom))
    scale = abs(injected)
    mismatch = abs(injected - consumed)
    return float(mismatch / scale) if scale > 0 else float(mismatch)


def apply_event(net: NetworkModel, event: NetworkEvent) -> NetworkModel:
    """Return a new network with the event's load change applied."""
    target = net.load(event.load_id)
    match event.action:
        case "toggle":
            updated = replace(target, enabled=not target.enabled)
        case "enable":
            updated = replace(target, enabled=True)
        case "disable":
            updated = replace(target, enabled=False)
        case "scale":
            updated = replace(
                target,
                resistance=target.resistance * event.factor,
                inductance=target.inductance * event.factor,
            )
        case _:
            msg = f"Unknown event action {event.action!r}"
            raise NetworkError(msg)

    logger.debug(
        "Applied %s to load %s at t=%s",
        event.action,
        event.load_id,
        event.time,
        extra={"load_id": event.load_id, "action": event.action},
    )
    loads = tuple(updated if load.load_id == event.load_id else load for load in net.loads)
    return replace(net, loads=loads)
