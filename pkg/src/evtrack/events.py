"""Event stream representation and accumulation into event buffer frames."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import UnorderedStream

TIME_ORDER_TOL = 1e-9


@dataclass
class EventArray:
    """Column-oriented event stream: timestamps, pixel coordinates, polarities."""

    t: np.ndarray  # (M,) seconds, nondecreasing
    x: np.ndarray  # (M,) int
    y: np.ndarray  # (M,) int
    p: np.ndarray  # (M,) in {-1, +1}

    def __len__(self) -> int:
        return len(self.t)

    def validate(self, width: int | None = None, height: int | None = None) -> None:
        if np.any(np.diff(self.t) < -TIME_ORDER_TOL):
            raise UnorderedStream("event timestamps regress beyond 1e-9 s")
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarities must be -1 or +1")
        if width is not None and (np.any(self.x < 0) or np.any(self.x >= width)):
            raise ValueError("event x coordinate out of bounds")
        if height is not None and (np.any(self.y < 0) or np.any(self.y >= height)):
            raise ValueError("event y coordinate out of bounds")


@dataclass
class EventBufferFrame:
    """Dense accumulation F(x, y) of N consecutive events."""

    values: np.ndarray  # (H, W) signed log-intensity change
    t_start: float  # timestamp of the first event
    dt: float  # span t_{N-1} - t_0
    count: int


def accumulate(
    events: EventArray, n_per_frame: int, contrast: float, width: int, height: int
) -> Iterator[EventBufferFrame]:
    """Group the stream into consecutive non-overlapping frames of exactly N events.

    Each frame's pixel accumulates ``sum(rho_i * C)`` over its events; the
    trailing partial group is discarded.
    """
    if n_per_frame < 1:
        raise ValueError("need N >= 1 events per frame")
    if contrast <= 0:
        raise ValueError("contrast threshold must be positive")
    events.validate(width, height)
    m = len(events)
    for start in range(0, m - n_per_frame + 1, n_per_frame):
        sl = slice(start, start + n_per_frame)
        values = np.zeros((height, width))
        np.add.at(values, (events.y[sl], events.x[sl]), events.p[sl] * contrast)
        t0 = float(events.t[start])
        t1 = float(events.t[start + n_per_frame - 1])
        yield EventBufferFrame(values=values, t_start=t0, dt=t1 - t0, count=n_per_frame)


def write_csv(path, events: EventArray) -> None:
    """Event stream file: header "t,x,y,p", t in seconds, rows time-ordered."""
    df = pd.DataFrame(
        {
            "t": np.asarray(events.t, dtype=float),
            "x": np.asarray(events.x, dtype=np.int64),
            "y": np.asarray(events.y, dtype=np.int64),
            "p": np.asarray(events.p, dtype=np.int64),
        }
    )
    df.to_csv(path, index=False, float_format="%.9f")


def read_csv(path) -> EventArray:
    df = pd.read_csv(path)
    expected = ["t", "x", "y", "p"]
    if list(df.columns) != expected:
        raise ValueError(f"event CSV must have columns {expected}, got {list(df.columns)}")
    ev = EventArray(
        t=df["t"].to_numpy(dtype=float),
        x=df["x"].to_numpy(dtype=np.int64),
        y=df["y"].to_numpy(dtype=np.int64),
        p=df["p"].to_numpy(dtype=np.int64),
    )
    ev.validate()
    return ev
