"""Pairwise distances between popularity curves.

Constrained dynamic time warping (plus a multiresolution accelerated
variant), plain L1 on a shared grid, and L1 weighted by a tanh penalty that
favors the first instants of the evolution.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import StageFailure, ValidationError
from .series import Corpus, GriddedSeries, WindowedSeries


@dataclass(frozen=True)
class DtwConfig:
    """Warping-window bound and pointwise distance for DTW.

    ``window=None`` means unbounded; the package default (config omitted) is
    a Sakoe-Chiba band of 10% of the longer series.  ``point_distance=None``
    selects plain absolute difference, which is the euclidean distance in
    one dimension.
    """

    window: int | None = None
    point_distance: object = None  # optional callable (x, y) -> float

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValidationError("warping window must be >= 1 when bounded")


def _auto_window(p: int, q: int) -> int:
    return max(1, math.ceil(0.10 * max(p, q)))


def _as_values(series) -> np.ndarray:
    if isinstance(series, (WindowedSeries,)):
        return np.asarray(series.y, dtype=float)
    if isinstance(series, GriddedSeries):
        return np.asarray(series.values, dtype=float)
    return np.asarray(series, dtype=float)


def dtw_distance(a, b, cfg: DtwConfig | None = None) -> float:
    """Exact DTW distance under boundary/monotonicity/continuity constraints.

    Minimizes the summed pointwise distance over all admissible warping
    paths via the cumulative-distance recursion; cells outside the warping
    window are treated as forbidden (+inf).
    """
    x = _as_values(a)
    y = _as_values(b)
    p, q = len(x), len(y)
    if p == 0 or q == 0:
        raise ValidationError("DTW requires non-empty series")
    if cfg is None:
        window = _auto_window(p, q)
        delta = None
    else:
        window = cfg.window
        delta = cfg.point_distance
    if window is not None and abs(p - q) > window:
        raise ValidationError(
            f"warping window {window} infeasible for lengths {p} and {q}"
        )
    return _dtw_band(x, y, window, delta)


def _dtw_band(x: np.ndarray, y: np.ndarray, window: int | None, delta) -> float:
    """Row-sweep DP; the in-row dependency is folded into a running minimum.

    gamma(i,j) = min_{k<=j} (m_k + sum_{l=k..j} c_l) with m_k the best entry
    of the previous row, which cummin over (m_k - S_{k-1}) evaluates in one
    vectorized pass per row.
    """
    p, q = len(x), len(y)
    big = np.inf
    prev = np.full(q, big)
    for i in range(p):
        if window is None:
            lo, hi = 0, q - 1
        else:
            lo, hi = max(0, i - window), min(q - 1, i + window)
        if delta is None:
            c = np.abs(x[i] - y[lo : hi + 1])
        else:
            c = np.array([delta(x[i], y[j]) for j in range(lo, hi + 1)], dtype=float)
        s = np.cumsum(c)
        if i == 0:
            cur = np.full(q, big)
            cur[lo : hi + 1] = s  # only left-moves exist on the first row
            prev = cur
            continue
        m = prev[lo : hi + 1].copy()
        if lo >= 1:
            m = np.minimum(m, prev[lo - 1 : hi])
        else:
            m[1:] = np.minimum(m[1:], prev[0:hi])
        e = m - np.concatenate(([0.0], s[:-1]))
        cur = np.full(q, big)
        cur[lo : hi + 1] = s + np.minimum.accumulate(e)
        prev = cur
    result = prev[q - 1]
    if not np.isfinite(result):
        raise ValidationError("no admissible warping path inside the window")
    return float(result)


def _halve(x: np.ndarray) -> np.ndarray:
    m = len(x) // 2
    coarse = (x[0 : 2 * m : 2] + x[1 : 2 * m : 2]) / 2.0
    if len(x) % 2:
        coarse = np.append(coarse, x[-1])
    return coarse


def _dtw_corridor(x, y, lo, hi):
    """Plain DP restricted to per-row column ranges, with path backtracking."""
    p, q = len(x), len(y)
    rows = []
    choices = []  # 0 = left, 1 = diag, 2 = up
    prev = None
    for i in range(p):
        width = hi[i] - lo[i] + 1
        cur = [math.inf] * width
        ch = [0] * width
        for k in range(width):
            j = lo[i] + k
            c = abs(x[i] - y[j])
            if i == 0 and j == 0:
                cur[k] = c
                continue
            best = math.inf
            pick = -1
            if k > 0 and cur[k - 1] < best:  # left
                best = cur[k - 1]
                pick = 0
            if i > 0 and lo[i - 1] <= j <= hi[i - 1]:  # up
                v = prev[j - lo[i - 1]]
                if v < best:
                    best = v
                    pick = 2
            if i > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:  # diag
                v = prev[j - 1 - lo[i - 1]]
                if v <= best:  # prefer the diagonal on ties
                    best = v
                    pick = 1
            cur[k] = c + best
            ch[k] = pick
        rows.append(cur)
        choices.append(ch)
        prev = cur
    dist = rows[p - 1][q - 1 - lo[p - 1]] if lo[p - 1] <= q - 1 <= hi[p - 1] else math.inf
    if not math.isfinite(dist):
        raise ValidationError("no admissible warping path inside the corridor")
    path = []
    i, j = p - 1, q - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        pick = choices[i][j - lo[i]]
        if pick == 0:
            j -= 1
        elif pick == 1:
            i -= 1
            j -= 1
        else:
            i -= 1
    path.reverse()
    return dist, path


def _expand_window(path, p: int, q: int, radius: int):
    """Project a coarse warping path to fine resolution, widened by ``radius``."""
    base_lo = np.full(p, q, dtype=int)
    base_hi = np.full(p, -1, dtype=int)
    for ci, cj in path:
        j0, j1 = 2 * cj, min(2 * cj + 1, q - 1)
        for i in (2 * ci, 2 * ci + 1):
            if i < p:
                base_lo[i] = min(base_lo[i], j0)
                base_hi[i] = max(base_hi[i], j1)
    lo = np.empty(p, dtype=int)
    hi = np.empty(p, dtype=int)
    for i in range(p):
        r0, r1 = max(0, i - radius), min(p - 1, i + radius)
        lo[i] = max(0, int(base_lo[r0 : r1 + 1].min()) - radius)
        hi[i] = min(q - 1, int(base_hi[r0 : r1 + 1].max()) + radius)
    return lo, hi


def _fastdtw(x, y, radius):
    if len(x) <= radius + 2 or len(y) <= radius + 2:
        p, q = len(x), len(y)
        return _dtw_corridor(x, y, np.zeros(p, dtype=int), np.full(p, q - 1, dtype=int))
    _, coarse_path = _fastdtw(_halve(x), _halve(y), radius)
    lo, hi = _expand_window(coarse_path, len(x), len(y), radius)
    return _dtw_corridor(x, y, lo, hi)


def fastdtw_distance(a, b, radius: int = 1) -> float:
    """Multiresolution DTW: coarsen, solve, then refine inside a corridor.

    Exact whenever the corridor covers the full matrix, i.e. when ``radius``
    is at least the longer series length.
    """
    if radius < 0:
        raise ValidationError("radius must be >= 0")
    x = _as_values(a)
    y = _as_values(b)
    if len(x) == 0 or len(y) == 0:
        raise ValidationError("DTW requires non-empty series")
    if radius >= max(len(x), len(y)):
        return dtw_distance(x, y, DtwConfig(window=None))
    dist, _ = _fastdtw(x, y, radius)
    return float(dist)


def l1_distance(a: GriddedSeries, b: GriddedSeries) -> float:
    """Sum of absolute differences on a shared grid (area between curves)."""
    _check_same_grid(a, b)
    return float(np.sum(np.abs(a.values - b.values)))


def _check_same_grid(a: GriddedSeries, b: GriddedSeries):
    if a.step != b.step or a.n_points != b.n_points:
        raise ValidationError(
            f"grid mismatch between {a.id!r} and {b.id!r}: "
            f"({a.step}, {a.n_points}) vs ({b.step}, {b.n_points})"
        )


@dataclass(frozen=True)
class PenaltyWeights:
    """Time-decaying weight f(t) = (1-eps)*((tanh(beta - alpha*t)+1)/2) + eps.

    Calibrated so f(0) = 0.99 and f(reference_t) = 0.7, with floor ``eps``.
    """

    epsilon: float
    alpha: float
    beta: float
    reference_t: float

    def __post_init__(self):
        if not (0 < self.epsilon < 0.7):
            raise ValidationError("epsilon must lie in (0, 0.7) for the 0.7 target to be reachable")
        if self.reference_t <= 0:
            raise ValidationError("reference_t must be positive")
        if not math.isclose(self.weight(0.0), 0.99, rel_tol=0, abs_tol=1e-9):
            raise ValidationError("penalty weights must satisfy f(0) = 0.99")
        if not math.isclose(self.weight(self.reference_t), 0.7, rel_tol=0, abs_tol=1e-9):
            raise ValidationError("penalty weights must satisfy f(reference_t) = 0.7")

    def weight(self, t):
        """Evaluate the penalty at time(s) t; scalar in, scalar out."""
        w = (1.0 - self.epsilon) * ((np.tanh(self.beta - self.alpha * np.asarray(t, dtype=float)) + 1.0) / 2.0) + self.epsilon
        return float(w) if np.isscalar(t) or np.ndim(t) == 0 else w


def fit_penalty(corpus, epsilon: float = 0.05) -> PenaltyWeights:
    """Solve the two calibration conditions in closed form via atanh.

    ``corpus`` may be a Corpus (its ``median_t_max`` is used) or the median
    t_max directly as a number.
    """
    median_t_max = corpus.median_t_max if isinstance(corpus, Corpus) else float(corpus)
    if median_t_max <= 0:
        raise ValidationError("median t_max must be positive")
    if not (0 < epsilon < 0.7):
        raise ValidationError("epsilon must lie in (0, 0.7); the f = 0.7 target is otherwise infeasible")
    beta = math.atanh(2.0 * (0.99 - epsilon) / (1.0 - epsilon) - 1.0)
    inner = math.atanh(2.0 * (0.7 - epsilon) / (1.0 - epsilon) - 1.0)
    alpha = (beta - inner) / median_t_max
    return PenaltyWeights(epsilon=epsilon, alpha=alpha, beta=beta, reference_t=median_t_max)


def weighted_l1_distance(a: GriddedSeries, b: GriddedSeries, w: PenaltyWeights) -> float:
    """L1 distance with each grid point's contribution scaled by f(t_i)."""
    _check_same_grid(a, b)
    t = np.arange(a.n_points) * a.step
    return float(np.sum(w.weight(t) * np.abs(a.values - b.values)))


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric pairwise distances over a corpus."""

    values: np.ndarray
    ids: tuple[str, ...]
    metric_tag: str
    elapsed_seconds: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError("distance matrix must be square")
        if len(self.ids) != v.shape[0]:
            raise ValidationError("one id per matrix row required")
        if np.any(v < 0):
            raise ValidationError("distances must be non-negative")
        if np.any(np.abs(np.diagonal(v)) > 1e-12):
            raise ValidationError("distance matrix diagonal must be zero")
        if not np.allclose(v, v.T, rtol=1e-12, atol=1e-12):
            raise ValidationError("distance matrix must be symmetric")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def submatrix(self, indices) -> "DistanceMatrix":
        idx = np.asarray(indices, dtype=int)
        return DistanceMatrix(
            values=self.values[np.ix_(idx, idx)],
            ids=tuple(self.ids[i] for i in idx),
            metric_tag=self.metric_tag,
        )

    def save_binary(self, path):
        """n as little-endian uint64, then row-major little-endian float64."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", self.n))
            fh.write(self.values.astype("<f8").tobytes(order="C"))
        sidecar = {
            "metric": self.metric_tag,
            "n": self.n,
            "ids": list(self.ids),
            "elapsed_seconds": self.elapsed_seconds,
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_binary(cls, path) -> "DistanceMatrix":
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            values = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n)
        try:
            with open(str(path) + ".json", "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
            ids = tuple(sidecar["ids"])
            tag = sidecar["metric"]
        except FileNotFoundError:
            ids = tuple(str(i) for i in range(n))
            tag = "unknown"
        return cls(values=values.copy(), ids=ids, metric_tag=tag)

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id," + ",".join(self.ids) + "\n")
            for sid, row in zip(self.ids, self.values):
                fh.write(sid + "," + ",".join(f"{v:.12g}" for v in row) + "\n")


def pairwise_matrix(
    items,
    metric: str = "l1",
    *,
    dtw_config: DtwConfig | None = None,
    fastdtw_radius: int = 1,
    weights: PenaltyWeights | None = None,
) -> DistanceMatrix:
    """Evaluate one metric over all unordered pairs.

    ``items`` is a Corpus for the grid metrics, or any sequence of
    WindowedSeries/GriddedSeries/arrays for the DTW family (which compares
    raw value sequences of possibly different lengths). Wall-clock duration
    is recorded on the result for the timing report.
    """
    if metric not in ("l1", "weighted_l1", "dtw", "fastdtw"):
        raise ValidationError(f"unknown metric {metric!r}")
    start = time.perf_counter()
    if isinstance(items, Corpus):
        members = list(items.series)
    else:
        members = list(items)
    ids = tuple(getattr(m, "id", str(i)) for i, m in enumerate(members))
    n = len(members)
    out = np.zeros((n, n))

    if metric in ("l1", "weighted_l1"):
        if not all(isinstance(m, GriddedSeries) for m in members):
            raise ValidationError(f"{metric} requires gridded series on a shared grid")
        for i in range(1, n):
            _check_same_grid(members[0], members[i])
        values = np.stack([m.values for m in members])
        if metric == "weighted_l1":
            if weights is None:
                if not isinstance(items, Corpus):
                    raise ValidationError("weighted_l1 needs PenaltyWeights or a Corpus to fit them from")
                weights = fit_penalty(items)
            t = np.arange(values.shape[1]) * members[0].step
            scale = weights.weight(t)
        else:
            scale = np.ones(values.shape[1])
        for i in range(n):
            diffs = np.abs(values[i + 1 :] - values[i]) * scale
            out[i, i + 1 :] = diffs.sum(axis=1)
        out = out + out.T
    else:
        seqs = [_as_values(m) for m in members]
        for i in range(n):
            for j in range(i + 1, n):
                try:
                    if metric == "dtw":
                        d = dtw_distance(seqs[i], seqs[j], dtw_config)
                    else:
                        d = fastdtw_distance(seqs[i], seqs[j], fastdtw_radius)
                except ValidationError as exc:
                    raise ValidationError(f"pair ({ids[i]!r}, {ids[j]!r}): {exc}") from exc
                except Exception as exc:
                    raise StageFailure(f"pair ({ids[i]!r}, {ids[j]!r}): {exc}") from exc
                out[i, j] = out[j, i] = d

    elapsed = time.perf_counter() - start
    return DistanceMatrix(values=out, ids=ids, metric_tag=metric, elapsed_seconds=elapsed)
