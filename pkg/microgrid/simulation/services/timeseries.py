"""Recorded trajectories of a run."""

import re
from dataclasses import dataclass
from dataclasses import field

import numpy as np
import numpy.typing as npt
import pandas as pd

# Per-DG channels in CSV column order
DG_CHANNELS: tuple[str, ...] = ("vod", "voq", "P", "Q", "omega", "dvn")

_DG_CHANNEL_RE = re.compile(r"^dg(?P<dg>\d+)_(?P<channel>\w+)$")
_BUS_CHANNEL_RE = re.compile(r"^bus(?P<bus>-?\d+)_vmag$")


class UnknownChannelError(KeyError):
    pass


@dataclass
class TimeSeriesLog:
    """Decimated samples of every DG channel, bus voltage magnitudes and message count.

    ``dg_channels`` has shape ``(samples, n_dg, len(DG_CHANNELS))``;
    ``bus_vmag`` has shape ``(samples, n_bus)``.
    """

    t: npt.NDArray[np.float64]
    dg_channels: npt.NDArray[np.float64]
    bus_ids: tuple[int, ...]
    bus_vmag: npt.NDArray[np.float64]
    msg_count: npt.NDArray[np.int64]
    t_activate: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n_dg(self) -> int:
        return int(self.dg_channels.shape[1])

    def column_names(self) -> list[str]:
        dg_columns = [
            f"dg{dg}_{channel}" for dg in range(1, self.n_dg + 1) for channel in DG_CHANNELS
        ]
        return ["t", *dg_columns, "msg_count"]

    def channel(self, name: str) -> npt.NDArray[np.float64]:
        """Series by column name, e.g. ``dg3_vod``, ``msg_count`` or ``bus5_vmag``."""
        if name == "t":
            return self.t
        if name == "msg_count":
            return self.msg_count.astype(float)
        if match := _DG_CHANNEL_RE.match(name):
            dg = int(match["dg"])
            channel = match["channel"]
            if 1 <= dg <= self.n_dg and channel in DG_CHANNELS:
                return self.dg_channels[:, dg - 1, DG_CHANNELS.index(channel)]
        if match := _BUS_CHANNEL_RE.match(name):
            bus = int(match["bus"])
            if bus in self.bus_ids:
                return self.bus_vmag[:, self.bus_ids.index(bus)]
        msg = f"Unknown channel {name!r}"
        raise UnknownChannelError(msg)

    def to_frame(self, *, include_buses: bool = False) -> pd.DataFrame:
        """One row per sample, columns in CSV order."""
        n_samples = len(self.t)
        frame = pd.DataFrame(
            self.dg_channels.reshape(n_samples, -1),
            columns=self.column_names()[1:-1],
        )
        frame.insert(0, "t", self.t)
        frame["msg_count"] = self.msg_count
        if include_buses:
            for k, bus in enumerate(self.bus_ids):
                frame[f"bus{bus}_vmag"] = self.bus_vmag[:, k]
        return frame
