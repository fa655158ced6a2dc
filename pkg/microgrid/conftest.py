from dataclasses import replace

import pytest

from microgrid.simulation.services.presets import zonal_scenario
from microgrid.simulation.services.sim_engine import Scenario
from microgrid.simulation.tests.factories import ScenarioFactory


@pytest.fixture(autouse=True)
def _output_dir(settings, tmp_path) -> None:
    settings.MICROGRID_OUTPUT_DIR = str(tmp_path / "runs")


@pytest.fixture
def scenario() -> Scenario:
    return ScenarioFactory()


@pytest.fixture
def short_zonal() -> Scenario:
    """Bundled zonal system over 50 ms: load step at 10 ms, secondary control from 20 ms."""
    base = zonal_scenario()
    return replace(
        base,
        t_end=0.05,
        events=(replace(base.events[0], time=0.01),),
        secondary=replace(base.secondary, t_activate=0.02),
    )
