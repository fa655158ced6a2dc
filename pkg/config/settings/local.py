from .base import *  # noqa: F403
from .base import LOGGING
from .base import env

# GENERAL
# ------------------------------------------------------------------------------
# https://docs.djangoproject.com/en/dev/ref/settings/#debug
DEBUG = True
# https://docs.djangoproject.com/en/dev/ref/settings/#secret-key
SECRET_KEY = env(
    "DJANGO_SECRET_KEY",
    default="hS3qL0v8nFz2XcR7tYb1MwK9pDe4GjUa6VoN5iQxTrEsZ8yBmCkWd3fHlJg0uPa",
)

# LOGGING
# ------------------------------------------------------------------------------
LOGGING["loggers"]["microgrid"]["level"] = env("MICROGRID_LOG_LEVEL", default="DEBUG")  # type: ignore[index]
