"""
With these settings, tests run faster.
"""

from .base import *  # noqa: F403
from .base import BASE_DIR
from .base import env

# GENERAL
# ------------------------------------------------------------------------------
# https://docs.djangoproject.com/en/dev/ref/settings/#secret-key
SECRET_KEY = env(
    "DJANGO_SECRET_KEY",
    default="Tq7WbN2eXk9LmR4sVy1ZcH6jPd0GfUa3KoE8iBxSnMt5rYwQlJv2hDg7uFpCzAe",
)
# https://docs.djangoproject.com/en/dev/ref/settings/#test-runner
TEST_RUNNER = "django.test.runner.DiscoverRunner"

# SIMULATION
# ------------------------------------------------------------------------------
MICROGRID_OUTPUT_DIR = str(BASE_DIR / ".test-runs")
MICROGRID_EQUILIBRIUM_TOLERANCE = 1e-8
MICROGRID_EQUILIBRIUM_MAX_ITER = 20
MICROGRID_FLAT_START_FALLBACK = False
