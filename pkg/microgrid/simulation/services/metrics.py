import logging
import math

import numpy as np
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import computed_field

from microgrid.simulation.services.timeseries import TimeSeriesLog

logger = logging.getLogger(__name__)

DEFAULT_SETTLING_FRACTION = 0.02
MIN_SETTLING_BAND = 1e-3

# Tolerance when matching logged times against the activation time
_TIME_TOLERANCE = 1e-12


class RunMetrics(BaseModel):
    """Summary of a run, as written to ``metrics.json``.

    ``settling_time`` holds absolute times; ``None`` marks a DG that never
    settled inside ``settling_band`` around ``v_ref``.
    """

    model_config = ConfigDict(frozen=True)

    settling_time: list[float | None]
    final_error: list[float]
    total_messages: int
    peak_deviation: float
    settling_band: float
    v_ref: float
    t_activate: float | None = None
    warnings: list[str] = []

    @computed_field  # type: ignore[prop-decorator]
    @property
    def settled(self) -> list[bool]:
        return [t is not None for t in self.settling_time]

    @property
    def all_settled(self) -> bool:
        return all(self.settled)

    def settling_durations(self) -> list[float | None]:
        """Settling times measured from activation."""
        start = self.t_activate or 0.0
        return [None if t is None else t - start for t in self.settling_time]


class ComparisonReport(BaseModel):
    conclusive: bool
    settling_ratio: float | None
    message_ratio: float | None
    zonal_settling: float | None
    global_settling: float | None
    zonal_messages: int
    global_messages: int
    zonal_final_error: list[float]
    global_final_error: list[float]
    reason: str = ""


def settling_time(
    log: TimeSeriesLog,
    channel: str,
    target: float,
    band: float,
) -> float | None:
    """Earliest time after activation from which ``channel`` stays within ``target ± band``.

    Returns ``None`` when the channel is outside the band at the last sample.
    """
    if not band > 0:
        msg = f"band must be positive, got {band}"
        raise ValueError(msg)

    series = log.channel(channel)
    start = log.t_activate if log.t_activate is not None else float(log.t[0])
    window = log.t >= start - _TIME_TOLERANCE
    times = log.t[window]
    inside = np.abs(series[window] - target) <= band
    if times.size == 0 or not inside[-1]:
        return None

    outside = np.flatnonzero(~inside)
    if outside.size == 0:
        return start
    return float(times[outside[-1] + 1])


def compute_metrics(
    log: TimeSeriesLog,
    v_ref: float,
    settling_fraction: float = DEFAULT_SETTLING_FRACTION,
) -> RunMetrics:
    """Settling, error, message and deviation figures of a finished run.

    The settling band is ``settling_fraction`` of the largest voltage
    deviation at activation, never narrower than ``MIN_SETTLING_BAND``.
    """
    v_od = np.column_stack([log.channel(f"dg{dg}_vod") for dg in range(1, log.n_dg + 1)])
    deviation = np.abs(v_od - v_ref)

    start = log.t_activate if log.t_activate is not None else float(log.t[0])
    first = min(int(np.searchsorted(log.t, start - _TIME_TOLERANCE)), len(log.t) - 1)
    band = max(settling_fraction * float(deviation[first].max()), MIN_SETTLING_BAND)

    metrics = RunMetrics(
        settling_time=[
            settling_time(log, f"dg{dg}_vod", v_ref, band) for dg in range(1, log.n_dg + 1)
        ],
        final_error=[float(e) for e in deviation[-1]],
        total_messages=int(log.msg_count[-1]) if log.msg_count.size else 0,
        peak_deviation=float(deviation.max()),
        settling_band=band,
        v_ref=v_ref,
        t_activate=log.t_activate,
        warnings=list(log.warnings),
    )
    logger.debug(
        "Computed metrics: settled=%s, band=%.4g V",
        metrics.settled,
        band,
        extra={"settling_time": metrics.settling_time, "total_messages": metrics.total_messages},
    )
    return metrics


def _ratio(numerator: float, denominator: float) -> float:
    if numerator == denominator:
        return 1.0
    if denominator == 0:
        return math.inf
    return numerator / denominator


def compare_runs(metrics_zonal: RunMetrics, metrics_global: RunMetrics) -> ComparisonReport:
    """Settling-time and message-count ratios (global over zonal)."""
    message_ratio = _ratio(metrics_global.total_messages, metrics_zonal.total_messages)
    common = {
        "message_ratio": message_ratio,
        "zonal_messages": metrics_zonal.total_messages,
        "global_messages": metrics_global.total_messages,
        "zonal_final_error": metrics_zonal.final_error,
        "global_final_error": metrics_global.final_error,
    }

    unsettled = [
        label
        for label, metrics in (("zonal", metrics_zonal), ("global", metrics_global))
        if not metrics.all_settled
    ]
    if unsettled:
        reason = f"{' and '.join(unsettled)} run not settled"
        logger.warning("Comparison inconclusive: %s", reason)
        return ComparisonReport(
            conclusive=False,
            settling_ratio=None,
            zonal_settling=None,
            global_settling=None,
            reason=reason,
            **common,
        )

    zonal_settling = max(d for d in metrics_zonal.settling_durations() if d is not None)
    global_settling = max(d for d in metrics_global.settling_durations() if d is not None)
    return ComparisonReport(
        conclusive=True,
        settling_ratio=_ratio(global_settling, zonal_settling),
        zonal_settling=zonal_settling,
        global_settling=global_settling,
        **common,
    )
