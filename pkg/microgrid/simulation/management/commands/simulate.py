"""Django management command to run a microgrid scenario or compare two runs."""

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from microgrid.simulation.services.metrics import compare_runs
from microgrid.simulation.services.network import NetworkError
from microgrid.simulation.services.presets import PRESETS
from microgrid.simulation.services.scenario_file import ScenarioFileError
from microgrid.simulation.services.scenario_file import load_scenario
from microgrid.simulation.services.scenario_file import read_metrics
from microgrid.simulation.services.scenario_file import resolve_scenario
from microgrid.simulation.services.scenario_file import write_comparison
from microgrid.simulation.services.scenario_file import write_outputs
from microgrid.simulation.services.sim_engine import SimulationError
from microgrid.simulation.services.sim_engine import run_scenario


class Command(BaseCommand):
    """Run a scenario file or a bundled preset and export its results."""

    help = "Simulate a microgrid scenario and write timeseries.csv, metrics.json and scenario_resolved.json"

    def add_arguments(self, parser):
        """Add command line arguments."""
        parser.add_argument(
            "--scenario",
            type=Path,
            help="Path to a JSON scenario file",
        )
        parser.add_argument(
            "--preset",
            choices=sorted(PRESETS),
            help="Bundled scenario (default: zonal); defaults for --scenario otherwise",
        )
        parser.add_argument(
            "--out",
            type=Path,
            help="Output directory (default: MICROGRID_OUTPUT_DIR/<scenario name>)",
        )
        parser.add_argument("--dt", type=float, help="Override the integration step, seconds")
        parser.add_argument("--t-end", type=float, help="Override the horizon, seconds")
        parser.add_argument("--name", type=str, help="Override the scenario name")
        parser.add_argument(
            "--compare",
            nargs=2,
            type=Path,
            metavar=("ZONAL_DIR", "GLOBAL_DIR"),
            help="Compare the metrics.json of two finished runs instead of simulating",
        )

    def handle(self, *args, **options):
        """Execute the command."""
        if options.get("compare"):
            self._compare(*options["compare"])
            return

        try:
            if options.get("scenario"):
                resolved = load_scenario(options["scenario"], preset=options.get("preset"))
            else:
                resolved = resolve_scenario({}, preset=options.get("preset"))

            overrides = {
                key: options[option]
                for key, option in (("dt", "dt"), ("t_end", "t_end"), ("name", "name"))
                if options.get(option) is not None
            }
            if overrides:
                resolved.override(**overrides)
        except (ScenarioFileError, ValueError) as e:
            raise CommandError(f"Invalid scenario: {e}") from e

        scenario = resolved.scenario
        out_dir = options.get("out") or Path(settings.MICROGRID_OUTPUT_DIR) / scenario.name
        self.stdout.write(
            f"Simulating {scenario.name}: {scenario.n_dg} DGs, "
            f"t_end={scenario.t_end} s, dt={scenario.dt} s",
        )

        try:
            log, metrics = run_scenario(scenario)
            write_outputs(out_dir, resolved, log, metrics)
        except (SimulationError, NetworkError) as e:
            raise CommandError(f"Simulation failed: {e}") from e
        except OSError as e:
            raise CommandError(f"Cannot write outputs to {out_dir}: {e}") from e

        for warning in metrics.warnings:
            self.stdout.write(self.style.WARNING(warning))
        if metrics.all_settled:
            last = max(t for t in metrics.settling_time if t is not None)
            self.stdout.write(
                self.style.SUCCESS(
                    f"All DGs settled (last at t={last:.4f} s), "
                    f"{metrics.total_messages} messages. Results in {out_dir}",
                ),
            )
        else:
            unsettled = [str(k + 1) for k, ok in enumerate(metrics.settled) if not ok]
            self.stdout.write(
                self.style.WARNING(
                    f"DG {', '.join(unsettled)} did not settle within "
                    f"±{metrics.settling_band:.4g} V. Results in {out_dir}",
                ),
            )

    def _compare(self, zonal_dir: Path, global_dir: Path):
        try:
            report = compare_runs(read_metrics(zonal_dir), read_metrics(global_dir))
            path = write_comparison(zonal_dir, report)
        except ScenarioFileError as e:
            raise CommandError(f"Cannot compare runs: {e}") from e
        except OSError as e:
            raise CommandError(f"Cannot write comparison to {zonal_dir}: {e}") from e

        self.stdout.write(report.model_dump_json(indent=2))
        if report.conclusive:
            self.stdout.write(
                self.style.SUCCESS(
                    f"Settling ratio {report.settling_ratio:.2f}, "
                    f"message ratio {report.message_ratio:.2f}. Written to {path}",
                ),
            )
        else:
            self.stdout.write(self.style.WARNING(f"Inconclusive: {report.reason}"))
