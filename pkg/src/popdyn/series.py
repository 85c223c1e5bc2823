"""Ingestion and preprocessing of cumulative like-count time series.

Raw (time, likes) samples are windowed onto the interval that carries the
evolution dynamics, then resampled onto a shared uniform grid so that
point-to-point metrics are well defined.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InertSeriesError, ValidationError

#: Default grid spacing in seconds (half of a nominal 10-min recording period).
DEFAULT_STEP = 300.0

#: Window extension factor applied to the t10..t95 interval.
WINDOW_EXTENSION = 1.2


@dataclass(frozen=True)
class LikeSeries:
    """Raw cumulative like counts of one post, timestamps rebased to 0."""

    id: str
    t: np.ndarray  # seconds since first record, strictly increasing
    y: np.ndarray  # cumulative like count, non-decreasing integers

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        if t.ndim != 1 or y.ndim != 1 or t.shape != y.shape:
            raise ValidationError(f"series {self.id!r}: t and y must be 1-D and equal length")
        if len(t) < 2:
            raise ValidationError(f"series {self.id!r}: needs at least 2 samples")
        if not np.all(np.diff(t) > 0):
            raise ValidationError(f"series {self.id!r}: timestamps must be strictly increasing")
        if np.any(y < 0) or np.any(np.diff(y) < 0):
            raise ValidationError(f"series {self.id!r}: like counts must be non-negative and non-decreasing")

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class WindowedSeries:
    """A LikeSeries truncated to its dynamics window [0, t_max].

    ``t_max = t10 + 1.2 * (t95 - t10)`` always holds for the stored fields;
    when the window extends past the recorded data the samples simply end
    early and ``clipped`` is set.
    """

    id: str
    t: np.ndarray
    y: np.ndarray
    t10: float
    t95: float
    delta_t: float
    t_max: float
    n_max_likes: float
    clipped: bool = False

    def __post_init__(self):
        if not math.isclose(self.t_max, self.t10 + WINDOW_EXTENSION * self.delta_t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValidationError(f"series {self.id!r}: t_max must equal t10 + 1.2*delta_t")
        if self.t10 > self.t95:
            raise ValidationError(f"series {self.id!r}: t10 must not exceed t95")
        if len(self.t) and self.t[-1] > self.t_max * (1 + 1e-12):
            raise ValidationError(f"series {self.id!r}: retained samples must satisfy t <= t_max")

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class GriddedSeries:
    """Values linearly interpolated at t = 0, step, 2*step, ..."""

    id: str
    step: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if self.step <= 0:
            raise ValidationError(f"series {self.id!r}: grid step must be positive")
        if values.ndim != 1 or len(values) == 0:
            raise ValidationError(f"series {self.id!r}: grid values must be a non-empty 1-D array")
        if np.any(np.diff(values) < -1e-9):
            raise ValidationError(f"series {self.id!r}: grid values must be non-decreasing")

    @property
    def n_points(self) -> int:
        return len(self.values)

    @property
    def t_max(self) -> float:
        """Time of the last grid point."""
        return (self.n_points - 1) * self.step


@dataclass(frozen=True)
class Corpus:
    """GriddedSeries sharing one grid, plus the dataset-median t_max."""

    series: tuple[GriddedSeries, ...]
    step: float
    n_points: int
    median_t_max: float

    def __post_init__(self):
        if not self.series:
            raise ValidationError("corpus must be non-empty")
        if self.median_t_max <= 0:
            raise ValidationError("corpus median t_max must be positive")
        for g in self.series:
            if g.step != self.step or g.n_points != self.n_points:
                raise ValidationError(f"series {g.id!r} does not share the corpus grid")

    def __len__(self) -> int:
        return len(self.series)

    @property
    def ids(self) -> list[str]:
        return [g.id for g in self.series]

    def values_matrix(self) -> np.ndarray:
        """All series stacked row-wise, shape (n_series, n_points)."""
        return np.stack([g.values for g in self.series])


def parse_jsonl(text: str) -> list[LikeSeries]:
    """Parse JSONL records ``{"id":, "t":, "likes":}`` into LikeSeries.

    Lines may interleave ids. Timestamps are sorted per id and rebased so
    the first sample of each series sits at t = 0.
    """
    records: dict[str, list[tuple[float, float]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            sid = str(obj["id"])
            t = float(obj["t"])
            likes = int(obj["likes"])
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValidationError(f"line {lineno}: malformed record ({exc})") from exc
        records.setdefault(sid, []).append((t, likes))
    return _records_to_series(records)


def parse_csv(text: str) -> list[LikeSeries]:
    """Parse CSV with header ``id,t,likes`` into LikeSeries."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    if [f.strip() for f in reader.fieldnames] != ["id", "t", "likes"]:
        raise ValidationError("CSV header must be exactly: id,t,likes")
    records: dict[str, list[tuple[float, float]]] = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            sid = str(row["id"])
            t = float(row["t"])
            likes = int(row["likes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {lineno}: malformed record ({exc})") from exc
        records.setdefault(sid, []).append((t, likes))
    return _records_to_series(records)


def _records_to_series(records: dict[str, list[tuple[float, float]]]) -> list[LikeSeries]:
    series = []
    for sid, samples in records.items():
        samples.sort(key=lambda s: s[0])
        t = np.array([s[0] for s in samples], dtype=float)
        y = np.array([s[1] for s in samples], dtype=float)
        series.append(LikeSeries(id=sid, t=t - t[0], y=y))
    return series


def read_series(path) -> list[LikeSeries]:
    """Load a corpus file, dispatching on the .csv / .jsonl extension."""
    text = open(path, "r", encoding="utf-8").read()
    if str(path).lower().endswith(".csv"):
        return parse_csv(text)
    return parse_jsonl(text)


def _crossing_time(t: np.ndarray, y: np.ndarray, level: float) -> float:
    """Earliest time the linearly interpolated curve reaches ``level``."""
    if y[0] >= level:
        return float(t[0])
    idx = int(np.argmax(y >= level))
    if y[idx] < level:
        raise ValidationError(f"curve never reaches level {level}")
    t0, t1 = t[idx - 1], t[idx]
    y0, y1 = y[idx - 1], y[idx]
    return float(t0 + (level - y0) * (t1 - t0) / (y1 - y0))


def extract_window(s: LikeSeries, t_max_override: float | None = None) -> WindowedSeries:
    """Truncate a series to its dynamics window.

    t10 and t95 are the earliest (grid-free, linearly interpolated) times at
    which the curve reaches 10% and 95% of its overall maximum; the window
    ends at t_max = t10 + 1.2*(t95 - t10). Samples past t_max are dropped;
    if the recording ends before t_max the series is kept whole and marked
    ``clipped``.

    ``t_max_override`` truncates at a caller-supplied instant instead (used
    to cut a whole corpus at its maximum window end).
    """
    n_max = float(np.max(s.y))
    if n_max <= 0:
        raise InertSeriesError(f"series {s.id!r}: inert series (maximum like count is zero)")
    t10 = _crossing_time(s.t, s.y, 0.10 * n_max)
    t95 = _crossing_time(s.t, s.y, 0.95 * n_max)
    delta_t = t95 - t10
    t_max = t10 + WINDOW_EXTENSION * delta_t
    cutoff = t_max if t_max_override is None else float(t_max_override)
    keep = s.t <= cutoff + 1e-12
    if not np.any(keep):
        keep[0] = True
    return WindowedSeries(
        id=s.id,
        t=s.t[keep],
        y=s.y[keep],
        t10=t10,
        t95=t95,
        delta_t=delta_t,
        t_max=t_max,
        n_max_likes=n_max,
        clipped=bool(s.t[-1] < cutoff),
    )


def regrid(w: WindowedSeries, step: float = DEFAULT_STEP) -> GriddedSeries:
    """Linearly interpolate a windowed series at t = 0, step, 2*step, ...

    The grid runs up to the last retained sample time; input spacing may be
    irregular.
    """
    if step <= 0:
        raise ValidationError("grid step must be positive")
    last = float(w.t[-1])
    n = int(math.floor(last / step + 1e-9)) + 1
    grid = np.arange(n) * step
    values = np.interp(grid, w.t, w.y)
    return GriddedSeries(id=w.id, step=step, values=values)


def align_corpus(series: list[GriddedSeries], mode: str = "pad") -> Corpus:
    """Put all series on a common grid length and compute the median t_max.

    ``pad`` extends every series with its last value (the asymptote) up to
    the longest member. ``truncate`` cuts/pads everything to the grid length
    implied by the corpus-maximum t_max; on input that was already windowed
    per series this coincides with padding, so callers wanting true shared-
    instant truncation should re-window at a common t_max first (see
    ``extract_window(t_max_override=...)``).
    """
    if not series:
        raise ValidationError("cannot align an empty corpus")
    if mode not in ("pad", "truncate"):
        raise ValidationError(f"unknown align mode {mode!r}")
    step = series[0].step
    if any(g.step != step for g in series):
        raise ValidationError("all series must share the same grid step")
    t_maxes = np.array([g.t_max for g in series])
    target = int(round(np.max(t_maxes) / step)) + 1
    aligned = []
    for g in series:
        v = g.values
        if len(v) > target:
            v = v[:target]
        elif len(v) < target:
            v = np.concatenate([v, np.full(target - len(v), v[-1])])
        aligned.append(GriddedSeries(id=g.id, step=step, values=v))
    return Corpus(
        series=tuple(aligned),
        step=step,
        n_points=target,
        median_t_max=float(np.median(t_maxes)),
    )


def key_instants(series: WindowedSeries | GriddedSeries, percents) -> list[float]:
    """Earliest times the curve reaches each given percent of its maximum.

    For a WindowedSeries the threshold is taken against the ORIGINAL series
    maximum (``n_max_likes``), so window truncation cannot shift it; for a
    GriddedSeries only its own maximum is available.
    """
    percents = list(percents)
    if any(p <= 0 or p > 100 for p in percents):
        raise ValidationError("percents must lie in (0, 100]")
    if isinstance(series, WindowedSeries):
        t, y, n_max = series.t, series.y, series.n_max_likes
    else:
        t = np.arange(series.n_points) * series.step
        y = series.values
        n_max = float(np.max(series.values))
    if n_max <= 0:
        raise ValidationError(f"series {series.id!r}: flat zero series has no key instants")
    return [_crossing_time(t, y, p / 100.0 * n_max) for p in percents]
