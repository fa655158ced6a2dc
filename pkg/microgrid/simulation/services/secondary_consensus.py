"""Distributed secondary voltage control by leader-follower consensus.

Each agent integrates

    d(dv_n_i)/dt = -c_i * (sum_j a_ij * (v_i - v_j) + g_i * (v_i - v_ref))

where ``a_ij > 0`` means agent ``i`` receives agent ``j``'s voltage and
``g_i > 0`` marks a leader that knows ``v_ref``. Neighbor voltages arrive as
messages every ``T_comm`` seconds and are held in between.
"""

import logging
import math
from collections.abc import Iterable
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from functools import cached_property

import networkx as nx
import numpy as np
import numpy.typing as npt

from microgrid.simulation.services.dg_model import DEFAULT_V_N

logger = logging.getLogger(__name__)

DEFAULT_COUPLING = 30.0
DEFAULT_PINNING = 1.0
DEFAULT_T_ACTIVATE = 0.6
DEFAULT_T_COMM = 1e-3

# Absorbs round-off when locating sample instants on the step grid
_SAMPLE_TOLERANCE = 1e-9


class CommGraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Weighted communication graph, pinning gains and zone partition.

    Agents are indexed from 0. ``adjacency[i][j]`` is the weight with which
    agent ``i`` listens to agent ``j``.
    """

    adjacency: tuple[tuple[float, ...], ...]
    pinning: tuple[float, ...]
    coupling: tuple[float, ...]
    zones: tuple[tuple[int, ...], ...]
    # off only for graphs inspected without tracking a reference
    require_tracking: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self) -> None:
        n = self.n
        if n == 0:
            msg = "Communication graph needs at least one agent"
            raise CommGraphError(msg)
        if any(len(row) != n for row in self.adjacency):
            msg = f"Adjacency must be {n}x{n}"
            raise CommGraphError(msg)
        if len(self.pinning) != n or len(self.coupling) != n:
            msg = f"Pinning and coupling need one entry per agent ({n})"
            raise CommGraphError(msg)

        adjacency = self.adjacency_matrix
        if not np.all(np.isfinite(adjacency)) or np.any(adjacency < 0):
            msg = "Adjacency weights must be finite and non-negative"
            raise CommGraphError(msg)
        if np.any(np.diag(adjacency) != 0):
            msg = "Adjacency diagonal must be zero (no self-loops)"
            raise CommGraphError(msg)
        if any(g < 0 for g in self.pinning):
            msg = f"Pinning gains must be non-negative, got {self.pinning}"
            raise CommGraphError(msg)
        if any(c <= 0 for c in self.coupling):
            msg = f"Coupling gains must be positive, got {self.coupling}"
            raise CommGraphError(msg)

        self._check_partition()
        self._check_zone_boundaries()
        if self.require_tracking:
            self._check_reachability()

    def _check_partition(self) -> None:
        members = [agent for zone in self.zones for agent in zone]
        if any(not zone for zone in self.zones):
            msg = "Zones must be non-empty"
            raise CommGraphError(msg)
        if sorted(members) != list(range(self.n)):
            msg = f"Zones must partition agents 0..{self.n - 1}, got {self.zones}"
            raise CommGraphError(msg)

    def _check_zone_boundaries(self) -> None:
        zone_of = self.zone_of
        for i, j in zip(*np.nonzero(self.adjacency_matrix), strict=True):
            if zone_of[i] != zone_of[j]:
                msg = f"Edge DG{j + 1}->DG{i + 1} crosses a zone boundary"
                raise CommGraphError(msg)

    def _check_reachability(self) -> None:
        flow = self.information_flow()
        for zone_index, zone in enumerate(self.zones):
            pinned = [agent for agent in zone if self.pinning[agent] > 0]
            if not pinned:
                msg = f"Zone {zone_index + 1} has no pinned leader"
                raise CommGraphError(msg)
            reached = set(pinned)
            for leader in pinned:
                reached |= nx.descendants(flow, leader)
            missing = sorted(set(zone) - reached)
            if missing:
                names = ", ".join(f"DG{agent + 1}" for agent in missing)
                msg = f"Zone {zone_index + 1}: no path from a leader to {names}"
                raise CommGraphError(msg)

    @property
    def n(self) -> int:
        return len(self.adjacency)

    @cached_property
    def adjacency_matrix(self) -> npt.NDArray[np.float64]:
        return np.array(self.adjacency, dtype=float).reshape(self.n, self.n)

    @cached_property
    def pinning_vector(self) -> npt.NDArray[np.float64]:
        return np.array(self.pinning, dtype=float)

    @cached_property
    def coupling_vector(self) -> npt.NDArray[np.float64]:
        return np.array(self.coupling, dtype=float)

    @cached_property
    def zone_of(self) -> dict[int, int]:
        return {agent: k for k, zone in enumerate(self.zones) for agent in zone}

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(i for i, g in enumerate(self.pinning) if g > 0)

    @property
    def directed_edge_count(self) -> int:
        """Messages sent per sampling instant."""
        return int(np.count_nonzero(self.adjacency_matrix))

    def information_flow(self) -> nx.DiGraph:
        """Directed graph with an edge ``j -> i`` whenever ``i`` listens to ``j``."""
        flow = nx.DiGraph()
        flow.add_nodes_from(range(self.n))
        flow.add_edges_from(
            (int(j), int(i)) for i, j in zip(*np.nonzero(self.adjacency_matrix), strict=True)
        )
        return flow


@dataclass(frozen=True)
class SecondaryConfig:
    v_ref: float = DEFAULT_V_N
    t_activate: float = DEFAULT_T_ACTIVATE
    T_comm: float = DEFAULT_T_COMM

    def __post_init__(self) -> None:
        if not self.T_comm > 0:
            msg = f"T_comm must be positive, got {self.T_comm}"
            raise ValueError(msg)
        if not self.t_activate >= 0:
            msg = f"t_activate must be non-negative, got {self.t_activate}"
            raise ValueError(msg)


@dataclass(frozen=True)
class SecondaryState:
    """Message layer of the secondary controller.

    ``dv_n`` mirrors the corrections integrated by the engine at the last
    sample; ``samples_taken`` counts sampling instants since activation.
    """

    dv_n: npt.NDArray[np.float64]
    held_v: npt.NDArray[np.float64]
    msg_count: int = 0
    active: bool = False
    samples_taken: int = 0

    @classmethod
    def initial(cls, n: int) -> "SecondaryState":
        return cls(dv_n=np.zeros(n), held_v=np.zeros(n))


def build_zonal_graph(  # noqa: PLR0913
    zones: Sequence[Iterable[int]],
    leaders: Sequence[int],
    edges: Iterable[tuple[int, int]],
    weights: Sequence[float] | None = None,
    coupling: float | Sequence[float] = DEFAULT_COUPLING,
    pinning: float | Sequence[float] = DEFAULT_PINNING,
    *,
    bidirectional: bool = True,
) -> CommGraph:
    """Build a zone-partitioned graph, one leader per zone.

    An edge ``(i, j)`` lets ``j`` listen to ``i`` (and ``i`` to ``j`` when
    ``bidirectional``). Agent indices are 0-based. ``pinning`` is either one
    gain for every leader or one gain per leader.
    """
    zone_tuples = tuple(tuple(zone) for zone in zones)
    n = sum(len(zone) for zone in zone_tuples)
    if len(leaders) != len(zone_tuples):
        msg = f"Expected one leader per zone ({len(zone_tuples)}), got {len(leaders)}"
        raise CommGraphError(msg)
    for zone, leader in zip(zone_tuples, leaders, strict=True):
        if leader not in zone:
            msg = f"Leader DG{leader + 1} is not a member of its zone {[a + 1 for a in zone]}"
            raise CommGraphError(msg)

    edge_list = list(edges)
    if weights is None:
        weights = [1.0] * len(edge_list)
    if len(weights) != len(edge_list):
        msg = f"Got {len(weights)} weights for {len(edge_list)} edges"
        raise CommGraphError(msg)

    adjacency = np.zeros((n, n))
    for (sender, receiver), weight in zip(edge_list, weights, strict=True):
        if not (0 <= sender < n and 0 <= receiver < n):
            msg = f"Edge ({sender + 1}, {receiver + 1}) references an unknown DG"
            raise CommGraphError(msg)
        if sender == receiver:
            msg = f"Edge ({sender + 1}, {receiver + 1}) is a self-loop"
            raise CommGraphError(msg)
        if weight <= 0:
            msg = f"Edge ({sender + 1}, {receiver + 1}) needs a positive weight, got {weight}"
            raise CommGraphError(msg)
        adjacency[receiver, sender] = weight
        if bidirectional:
            adjacency[sender, receiver] = weight

    leader_gains = _per_entry(pinning, len(leaders), "pinning")
    pinning_vector = np.zeros(n)
    for leader, gain in zip(leaders, leader_gains, strict=True):
        pinning_vector[leader] = gain

    return CommGraph(
        adjacency=tuple(tuple(float(a) for a in row) for row in adjacency),
        pinning=tuple(float(g) for g in pinning_vector),
        coupling=tuple(_per_entry(coupling, n, "coupling")),
        zones=zone_tuples,
    )


def _per_entry(value: float | Sequence[float], count: int, name: str) -> list[float]:
    if isinstance(value, int | float):
        return [float(value)] * count
    values = [float(v) for v in value]
    if len(values) != count:
        msg = f"{name} needs {count} entries, got {len(values)}"
        raise CommGraphError(msg)
    return values


def pinned_laplacian(g: CommGraph) -> npt.NDArray[np.float64]:
    """``L + G``: graph Laplacian of the adjacency plus the pinning diagonal."""
    adjacency = g.adjacency_matrix
    return np.diag(adjacency.sum(axis=1) + g.pinning_vector) - adjacency


def consensus_rate(  # noqa: PLR0913
    i: int,
    v_od_held: npt.NDArray[np.float64],
    dv_n: npt.NDArray[np.float64],
    g: CommGraph,
    cfg: SecondaryConfig,
    v_own: float | None = None,
) -> float:
    """Rate of agent ``i``'s voltage correction.

    ``v_own`` defaults to the agent's own entry of ``v_od_held``.
    """
    v_i = v_od_held[i] if v_own is None else v_own
    adjacency = g.adjacency_matrix[i]
    disagreement = float(np.dot(adjacency, v_i - v_od_held))
    tracking = g.pinning[i] * (v_i - cfg.v_ref)
    return -g.coupling[i] * (disagreement + tracking)


def consensus_rates(
    v_own: npt.NDArray[np.float64],
    v_held: npt.NDArray[np.float64],
    g: CommGraph,
    cfg: SecondaryConfig,
) -> npt.NDArray[np.float64]:
    """Rates of all agents, each using its live voltage against held neighbor values."""
    disagreement = (g.adjacency_matrix * (v_own[:, None] - v_held)).sum(axis=1)
    tracking = g.pinning_vector * (v_own - cfg.v_ref)
    return -g.coupling_vector * (disagreement + tracking)


def sample_and_hold(
    t: float,
    v_od: npt.NDArray[np.float64],
    g: CommGraph,
    cfg: SecondaryConfig,
    s: SecondaryState,
    dv_n: npt.NDArray[np.float64] | None = None,
) -> SecondaryState:
    """Exchange voltages if a sampling instant was reached since the last call.

    Sampling instants are ``t_activate + k * T_comm``. Each instant costs one
    message per directed edge, including instants skipped by a coarse caller;
    only the latest values are held. Leaders read ``v_ref`` locally for free.
    """
    if t < cfg.t_activate - _SAMPLE_TOLERANCE * cfg.T_comm:
        return s
    instant = math.floor((t - cfg.t_activate) / cfg.T_comm + _SAMPLE_TOLERANCE)
    if instant < s.samples_taken:
        return s

    crossed = instant + 1 - s.samples_taken
    if not s.active:
        logger.info(
            "Secondary control active at t=%.6f s",
            t,
            extra={"t": t, "messages_per_sample": g.directed_edge_count},
        )
    return replace(
        s,
        dv_n=s.dv_n if dv_n is None else np.array(dv_n, dtype=float),
        held_v=np.array(v_od, dtype=float),
        msg_count=s.msg_count + crossed * g.directed_edge_count,
        active=True,
        samples_taken=instant + 1,
    )
