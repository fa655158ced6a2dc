"""JSON scenario files and run outputs.

A scenario file may omit any section or key; omitted values come from the
bundled preset named by ``preset`` (``zonal`` unless stated) and are listed in
the ``provenance`` block of ``scenario_resolved.json``. DGs are numbered from
1 in files; buses and loads keep their own identifiers.
"""

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from typing import Any
from typing import Literal

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import NonNegativeFloat
from pydantic import PositiveFloat
from pydantic import PositiveInt
from pydantic import ValidationError
from pydantic import field_validator

from microgrid.simulation.services.dg_model import DGParams
from microgrid.simulation.services.metrics import ComparisonReport
from microgrid.simulation.services.metrics import RunMetrics
from microgrid.simulation.services.network import Line
from microgrid.simulation.services.network import Load
from microgrid.simulation.services.network import NetworkEvent
from microgrid.simulation.services.network import NetworkModel
from microgrid.simulation.services.presets import PRESETS
from microgrid.simulation.services.secondary_consensus import CommGraph
from microgrid.simulation.services.secondary_consensus import SecondaryConfig
from microgrid.simulation.services.secondary_consensus import build_zonal_graph
from microgrid.simulation.services.sim_engine import Scenario
from microgrid.simulation.services.timeseries import TimeSeriesLog

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "zonal"
TIMESERIES_FILE = "timeseries.csv"
METRICS_FILE = "metrics.json"
RESOLVED_SCENARIO_FILE = "scenario_resolved.json"
COMPARISON_FILE = "comparison.json"


class ScenarioFileError(Exception):
    pass


class StrictSchema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DGSchema(StrictSchema):
    r_f: PositiveFloat | None = None
    L_f: PositiveFloat | None = None
    C_f: PositiveFloat | None = None
    r_c: PositiveFloat | None = None
    L_c: PositiveFloat | None = None
    omega_c: PositiveFloat | None = None
    K_pv: NonNegativeFloat | None = None
    K_iv: NonNegativeFloat | None = None
    K_pc: NonNegativeFloat | None = None
    K_ic: NonNegativeFloat | None = None
    F: float | None = Field(default=None, ge=0, le=1)
    m: NonNegativeFloat | None = None
    n: NonNegativeFloat | None = None
    omega_n: PositiveFloat | None = None
    V_n: PositiveFloat | None = None


class LineSchema(StrictSchema):
    from_bus: int
    to_bus: int
    resistance: PositiveFloat
    inductance: NonNegativeFloat


class LoadSchema(StrictSchema):
    load_id: int
    bus: int
    resistance: PositiveFloat
    inductance: NonNegativeFloat
    enabled: bool = True


class NetworkSchema(StrictSchema):
    buses: list[int] | None = Field(default=None, min_length=1)
    lines: list[LineSchema] | None = None
    loads: list[LoadSchema] | None = None
    attachments: list[int] | None = Field(
        default=None,
        description="Bus of each DG, in DG order",
    )


class GraphSchema(StrictSchema):
    zones: list[list[PositiveInt]] | None = None
    leaders: list[PositiveInt] | None = None
    edges: list[list[float]] | None = Field(
        default=None,
        description="[sender, receiver] or [sender, receiver, weight], DGs from 1",
    )
    c_v: PositiveFloat | list[PositiveFloat] | None = None
    g: PositiveFloat | list[PositiveFloat] | None = None
    bidirectional: bool | None = None

    @field_validator("edges")
    @classmethod
    def check_edges(cls, edges: list[list[float]] | None) -> list[list[float]] | None:
        for edge in edges or []:
            if len(edge) not in (2, 3):
                msg = f"edge {edge} must be [sender, receiver] or [sender, receiver, weight]"
                raise ValueError(msg)
            if any(end != int(end) or end < 1 for end in edge[:2]):
                msg = f"edge {edge} must name DGs by positive integers"
                raise ValueError(msg)
        return edges


class SecondarySchema(StrictSchema):
    enabled: bool | None = None
    v_ref: PositiveFloat | None = None
    t_activate: NonNegativeFloat | None = None
    T_comm: PositiveFloat | None = None


class SimSchema(StrictSchema):
    dt: PositiveFloat | None = None
    t_end: PositiveFloat | None = None
    decimation: PositiveInt | None = None
    common_frame_dg: PositiveInt | None = None
    settling_fraction: float | None = Field(default=None, gt=0, lt=1)


class EventSchema(StrictSchema):
    time: NonNegativeFloat
    load: int
    action: Literal["toggle", "enable", "disable", "scale"]
    factor: PositiveFloat = 1.0


class ScenarioFileSchema(StrictSchema):
    preset: Literal["zonal", "global"] | None = None
    name: str | None = None
    dgs: list[DGSchema] | None = Field(default=None, min_length=1)
    network: NetworkSchema | None = None
    graph: GraphSchema | None = None
    secondary: SecondarySchema | None = None
    sim: SimSchema | None = None
    events: list[EventSchema] | None = None
    # written by serialize; ignored when read back
    provenance: dict[str, Any] | None = None


# Scenario fields settable from the command line and their document keys
OVERRIDABLE: dict[str, str] = {"dt": "sim.dt", "t_end": "sim.t_end", "name": "name"}


@dataclass
class ResolvedScenario:
    scenario: Scenario
    preset: str
    defaulted: list[str] = field(default_factory=list)
    overrides: dict[str, Any] = field(default_factory=dict)

    def override(self, **changes: Any) -> None:
        """Replace scenario fields named in ``OVERRIDABLE`` and record them.

        Raises ``ScenarioError`` for invalid values, leaving ``self`` unchanged.
        """
        self.scenario = replace(self.scenario, **changes)
        for name, value in changes.items():
            key = OVERRIDABLE[name]
            if key.startswith("sim.") and "sim" in self.defaulted:
                self.defaulted.remove("sim")
                self.defaulted.extend(f"sim.{k}" for k in SimSchema.model_fields)
            if key in self.defaulted:
                self.defaulted.remove(key)
            self.overrides[key] = value

    def provenance(self) -> dict[str, Any]:
        return {"preset": self.preset, "defaulted": self.defaulted, "overrides": self.overrides}


def _format_validation_error(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        key = ""
        for part in item["loc"]:
            key += f"[{part}]" if isinstance(part, int) else f".{part}" if key else str(part)
        problems.append(f"{key or '<document>'}: {item['msg']}")
    return "; ".join(problems)


def serialize_scenario(scenario: Scenario) -> dict[str, Any]:
    """Fully explicit document that parses back to an equal scenario."""
    graph = scenario.graph
    leaders = []
    for zone in graph.zones:
        pinned = [agent for agent in zone if graph.pinning[agent] > 0]
        if len(pinned) != 1:
            msg = f"Zone {[a + 1 for a in zone]} must have exactly one pinned leader to serialize"
            raise ScenarioFileError(msg)
        leaders.append(pinned[0])

    return {
        "name": scenario.name,
        "dgs": [params.as_dict() for params in scenario.dg_params],
        "network": {
            "buses": list(scenario.network.buses),
            "lines": [
                {
                    "from_bus": line.from_bus,
                    "to_bus": line.to_bus,
                    "resistance": line.resistance,
                    "inductance": line.inductance,
                }
                for line in scenario.network.lines
            ],
            "loads": [
                {
                    "load_id": load.load_id,
                    "bus": load.bus,
                    "resistance": load.resistance,
                    "inductance": load.inductance,
                    "enabled": load.enabled,
                }
                for load in scenario.network.loads
            ],
            "attachments": list(scenario.network.dg_attachments),
        },
        "graph": {
            "zones": [[agent + 1 for agent in zone] for zone in graph.zones],
            "leaders": [leader + 1 for leader in leaders],
            "edges": [
                [sender + 1, receiver + 1, weight]
                for receiver, row in enumerate(graph.adjacency)
                for sender, weight in enumerate(row)
                if weight > 0
            ],
            "c_v": list(graph.coupling),
            "g": [graph.pinning[leader] for leader in leaders],
            "bidirectional": False,
        },
        "secondary": {
            "enabled": scenario.secondary_enabled,
            "v_ref": scenario.secondary.v_ref,
            "t_activate": scenario.secondary.t_activate,
            "T_comm": scenario.secondary.T_comm,
        },
        "sim": {
            "dt": scenario.dt,
            "t_end": scenario.t_end,
            "decimation": scenario.log_decimation,
            "common_frame_dg": scenario.common_frame_dg + 1,
            "settling_fraction": scenario.settling_fraction,
        },
        "events": [
            {"time": e.time, "load": e.load_id, "action": e.action, "factor": e.factor}
            for e in scenario.events
        ],
    }


def _merge_section(
    section: str,
    given: BaseModel | None,
    defaults: Mapping[str, Any],
    defaulted: list[str],
) -> dict[str, Any]:
    values = given.model_dump(exclude_none=True) if given is not None else {}
    if given is None:
        defaulted.append(section)
    merged = {}
    for key, default in defaults.items():
        if key in values:
            merged[key] = values[key]
        else:
            merged[key] = default
            if given is not None:
                defaulted.append(f"{section}.{key}")
    return merged


def _build_graph(doc: Mapping[str, Any], n_dg: int) -> CommGraph:
    zones = [[agent - 1 for agent in zone] for zone in doc["zones"]]
    edges = [(int(edge[0]) - 1, int(edge[1]) - 1) for edge in doc["edges"]]
    weights = [float(edge[2]) if len(edge) == 3 else 1.0 for edge in doc["edges"]]  # noqa: PLR2004
    coupling = doc["c_v"]
    if isinstance(coupling, list) and len(coupling) != n_dg:
        msg = f"c_v needs one entry per DG ({n_dg}), got {len(coupling)}"
        raise ValueError(msg)
    return build_zonal_graph(
        zones=zones,
        leaders=[leader - 1 for leader in doc["leaders"]],
        edges=edges,
        weights=weights,
        coupling=coupling,
        pinning=doc["g"],
        bidirectional=doc["bidirectional"],
    )


def resolve_scenario(document: Mapping[str, Any], preset: str | None = None) -> ResolvedScenario:
    """Validate a scenario document and fill every omitted value from its preset."""
    try:
        schema = ScenarioFileSchema.model_validate(document)
    except ValidationError as e:
        raise ScenarioFileError(_format_validation_error(e)) from e

    preset_name = schema.preset or preset or DEFAULT_PRESET
    base = serialize_scenario(PRESETS[preset_name]())
    defaulted: list[str] = []

    name = schema.name if schema.name is not None else base["name"]
    if schema.name is None:
        defaulted.append("name")

    if schema.dgs is None:
        defaulted.append("dgs")
        dg_docs = base["dgs"]
    else:
        dg_defaults = DGParams().as_dict()
        dg_docs = []
        for index, entry in enumerate(schema.dgs):
            values = entry.model_dump(exclude_none=True)
            defaulted.extend(f"dgs[{index}].{key}" for key in dg_defaults if key not in values)
            dg_docs.append({**dg_defaults, **values})

    network = _merge_section("network", schema.network, base["network"], defaulted)
    graph = _merge_section("graph", schema.graph, base["graph"], defaulted)
    if schema.graph is not None and schema.graph.edges is not None and schema.graph.bidirectional is None:
        # bidirectional defaults to true alongside user-given edges
        graph["bidirectional"] = True
    secondary = _merge_section("secondary", schema.secondary, base["secondary"], defaulted)
    sim = _merge_section("sim", schema.sim, base["sim"], defaulted)
    if schema.events is None:
        defaulted.append("events")
        event_docs = base["events"]
    else:
        event_docs = [event.model_dump() for event in schema.events]

    section = "dgs"
    try:
        dg_params = tuple(DGParams(**values) for values in dg_docs)
        section = "network"
        net = NetworkModel(
            buses=tuple(network["buses"]),
            lines=tuple(Line(**line) for line in network["lines"]),
            loads=tuple(Load(**load) for load in network["loads"]),
            dg_attachments=tuple(network["attachments"]),
        )
        section = "graph"
        comm_graph = _build_graph(graph, len(dg_params))
        section = "secondary"
        secondary_cfg = SecondaryConfig(
            v_ref=secondary["v_ref"],
            t_activate=secondary["t_activate"],
            T_comm=secondary["T_comm"],
        )
        section = "events"
        events = tuple(
            NetworkEvent(
                time=event["time"],
                load_id=event["load"],
                action=event["action"],
                factor=event["factor"],
            )
            for event in event_docs
        )
        section = "sim"
        scenario = Scenario(
            dg_params=dg_params,
            network=net,
            graph=comm_graph,
            secondary=secondary_cfg,
            events=events,
            t_end=sim["t_end"],
            dt=sim["dt"],
            common_frame_dg=sim["common_frame_dg"] - 1,
            log_decimation=sim["decimation"],
            secondary_enabled=secondary["enabled"],
            settling_fraction=sim["settling_fraction"],
            name=name,
        )
    except ValueError as e:
        msg = f"{section}: {e}"
        raise ScenarioFileError(msg) from e

    logger.debug(
        "Resolved scenario %s from preset %s",
        name,
        preset_name,
        extra={"defaulted": defaulted},
    )
    return ResolvedScenario(scenario=scenario, preset=preset_name, defaulted=defaulted)


def load_scenario(path: Path | str, preset: str | None = None) -> ResolvedScenario:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        msg = f"Scenario file not found: {path}"
        raise ScenarioFileError(msg) from e
    except OSError as e:
        logger.exception("Cannot read scenario file %s", path)
        msg = f"Cannot read scenario file {path}: {e}"
        raise ScenarioFileError(msg) from e
    except json.JSONDecodeError as e:
        msg = f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"
        raise ScenarioFileError(msg) from e
    if not isinstance(document, dict):
        msg = f"{path}: top level must be a JSON object"
        raise ScenarioFileError(msg)
    try:
        return resolve_scenario(document, preset=preset)
    except ScenarioFileError as e:
        msg = f"{path}: {e}"
        raise ScenarioFileError(msg) from e


def parse_scenario(path: Path | str) -> Scenario:
    return load_scenario(path).scenario


def write_outputs(
    out_dir: Path,
    resolved: ResolvedScenario,
    log: TimeSeriesLog,
    metrics: RunMetrics,
) -> None:
    """Write the time series, the metrics and the resolved scenario of a run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    log.to_frame().to_csv(out_dir / TIMESERIES_FILE, index=False)
    (out_dir / METRICS_FILE).write_text(metrics.model_dump_json(indent=2), encoding="utf-8")
    document = {
        **serialize_scenario(resolved.scenario),
        "provenance": resolved.provenance(),
    }
    (out_dir / RESOLVED_SCENARIO_FILE).write_text(
        json.dumps(document, indent=2),
        encoding="utf-8",
    )
    logger.info("Wrote run outputs to %s", out_dir, extra={"out_dir": str(out_dir)})


def read_metrics(run_dir: Path) -> RunMetrics:
    path = run_dir / METRICS_FILE
    try:
        return RunMetrics.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        msg = f"No {METRICS_FILE} in {run_dir}"
        raise ScenarioFileError(msg) from e
    except ValidationError as e:
        msg = f"{path}: {_format_validation_error(e)}"
        raise ScenarioFileError(msg) from e


def write_comparison(out_dir: Path, report: ComparisonReport) -> Path:
    path = out_dir / COMPARISON_FILE
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path
