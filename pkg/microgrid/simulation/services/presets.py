"""Bundled six-inverter system and its two secondary-control scenarios.

Both scenarios share the network, the load-4 disturbance at 0.2 s and the
activation at 0.6 s; they differ only in the communication graph:

* ``zonal``: zones {DG1-3} and {DG4-6}, leaders DG1 and DG4, each leader
  linked both ways to the other two members of its zone.
* ``global``: one zone, DG1 leads and is linked both ways to every other DG.
"""

from collections.abc import Callable

from microgrid.simulation.services.dg_model import DGParams
from microgrid.simulation.services.network import Line
from microgrid.simulation.services.network import Load
from microgrid.simulation.services.network import NetworkEvent
from microgrid.simulation.services.network import NetworkModel
from microgrid.simulation.services.secondary_consensus import CommGraph
from microgrid.simulation.services.secondary_consensus import SecondaryConfig
from microgrid.simulation.services.secondary_consensus import build_zonal_graph
from microgrid.simulation.services.sim_engine import Scenario

N_DG = 6
LINE_RESISTANCE = 0.23
LINE_INDUCTANCE = 0.318e-3
# long, mostly inductive inter-zone feeder between buses 3 and 4
TIE_RESISTANCE = 0.15
TIE_INDUCTANCE = 5e-3
LOAD_RESISTANCE = 20.0
LOAD_INDUCTANCE = 20e-3
DISTURBED_LOAD = 4
DISTURBANCE_TIME = 0.2
DISTURBANCE_FACTOR = 0.5


def default_network() -> NetworkModel:
    """Two three-bus feeders joined by a tie line between buses 3 and 4.

    Loads 1-2 sit on buses 2-3 and loads 3-4 on buses 5-6, so each zone
    serves its own demand and the tie only carries the imbalance.
    """
    buses = tuple(range(1, N_DG + 1))
    feeders = ((1, 2), (2, 3), (4, 5), (5, 6))
    lines = (
        *(
            Line(from_bus=a, to_bus=b, resistance=LINE_RESISTANCE, inductance=LINE_INDUCTANCE)
            for a, b in feeders
        ),
        Line(from_bus=3, to_bus=4, resistance=TIE_RESISTANCE, inductance=TIE_INDUCTANCE),
    )
    loads = tuple(
        Load(load_id=k, bus=bus, resistance=LOAD_RESISTANCE, inductance=LOAD_INDUCTANCE)
        for k, bus in enumerate((2, 3, 5, 6), start=1)
    )
    return NetworkModel(buses=buses, lines=lines, loads=loads, dg_attachments=buses)


def default_events() -> tuple[NetworkEvent, ...]:
    return (
        NetworkEvent(
            time=DISTURBANCE_TIME,
            load_id=DISTURBED_LOAD,
            action="scale",
            factor=DISTURBANCE_FACTOR,
        ),
    )


def zonal_graph() -> CommGraph:
    return build_zonal_graph(
        zones=[(0, 1, 2), (3, 4, 5)],
        leaders=[0, 3],
        edges=[(0, 1), (0, 2), (3, 4), (3, 5)],
    )


def global_graph() -> CommGraph:
    return build_zonal_graph(
        zones=[tuple(range(N_DG))],
        leaders=[0],
        edges=[(0, k) for k in range(1, N_DG)],
    )


def _scenario(name: str, graph: CommGraph) -> Scenario:
    return Scenario(
        dg_params=tuple(DGParams() for _ in range(N_DG)),
        network=default_network(),
        graph=graph,
        secondary=SecondaryConfig(),
        events=default_events(),
        name=name,
    )


def zonal_scenario() -> Scenario:
    return _scenario("zonal", zonal_graph())


def global_scenario() -> Scenario:
    return _scenario("global", global_graph())


PRESETS: dict[str, Callable[[], Scenario]] = {
    "zonal": zonal_scenario,
    "global": global_scenario,
}
