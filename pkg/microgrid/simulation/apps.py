from django.apps import AppConfig


class SimulationConfig(AppConfig):
    name = "microgrid.simulation"
    verbose_name = "Microgrid simulation"
