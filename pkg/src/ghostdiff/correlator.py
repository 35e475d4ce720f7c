"""Streaming intensity-correlation estimators.

A :class:`MomentAccumulator` holds running sums of the two detector arms.
Frames arrive in numbered blocks.  Block partial sums are reduced through a
fixed dyadic tree keyed by block number, so the totals are bit-identical no
matter how blocks were split between accumulators or in which order they were
merged.  Blocks are also dealt round-robin into jackknife groups, which give
the standard errors reported by every estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._tree import DyadicSum, pairwise as _pairwise
from .specklefield import GridAxis

MODES = ("full_matrix", "fixed_pixel", "difference_coordinate")
NORMALIZE_FLOOR = 0.05


class EstimatorError(ValueError):
    """An estimator cannot be evaluated on the accumulated data."""


@dataclass
class Pattern:
    """Real profile on an axis.  Masked samples are NaN."""

    axis: GridAxis
    values: np.ndarray
    stderr: np.ndarray | None = None
    peak_table: list = field(default_factory=list)
    label: str = ""

    @property
    def coordinates(self) -> np.ndarray:
        return self.axis.coordinates

    @property
    def mask(self) -> np.ndarray:
        return ~np.isfinite(self.values)


@dataclass
class VisibilityReport:
    values: np.ndarray
    max_visibility: float
    argmax: tuple
    stderr_at_max: float = float("nan")


class MomentAccumulator:
    """Running sums of I1, I2 and their products.

    mode
        ``full_matrix``: all (x1, x2) products (small grids only).
        ``fixed_pixel``: products of the test-arm pixels in ``rows`` with every
        pixel of both arms (cross- and auto-correlation slices).
        ``difference_coordinate``: sums of I1(x) I2(x - r) over the common
        support, for each integer lag r in ``lags``.
    """

    def __init__(
        self,
        axis: GridAxis,
        mode: str = "fixed_pixel",
        rows=(),
        lags=(),
        n_groups: int = 10,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.axis = axis
        self.mode = mode
        n = axis.n_points
        self.rows = np.arange(n) if mode == "full_matrix" else np.asarray(sorted(set(int(r) for r in rows)), int)
        if mode == "full_matrix" and n > 512:
            raise ValueError(f"full_matrix mode limited to n <= 512 points, got {n}")
        if mode == "fixed_pixel":
            if self.rows.size == 0:
                raise ValueError("fixed_pixel mode needs at least one row")
            if self.rows.min() < 0 or self.rows.max() >= n:
                raise ValueError(f"rows must lie in [0, {n})")
        self.lags = np.asarray(sorted(set(int(r) for r in lags)), int)
        if mode == "difference_coordinate":
            if self.lags.size == 0:
                raise ValueError("difference_coordinate mode needs lags")
            lo, hi = max(self.lags.max(), 0), n + min(self.lags.min(), 0)
            if hi <= lo:
                raise ValueError(f"lags {self.lags.min()}..{self.lags.max()} leave no common support on {n} pixels")
            self.support = (int(lo), int(hi))
        if n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        self.n_groups = int(n_groups)
        self._groups = [DyadicSum() for _ in range(self.n_groups)]
        self._next_block = 0

    # -- accumulation -----------------------------------------------------
    def _partial(self, i1: np.ndarray, i2: np.ndarray) -> dict:
        p = {
            "n": np.array(i1.shape[0], dtype=np.int64),
            "s1": i1.sum(0),
            "s2": i2.sum(0),
            "q1": (i1 * i1).sum(0),
            "q2": (i2 * i2).sum(0),
        }
        if self.mode == "fixed_pixel":
            sel = i1[:, self.rows]
            p["x12"] = np.einsum("br,bj->rj", sel, i2)
            p["x11"] = np.einsum("br,bj->rj", sel, i1)
        elif self.mode == "full_matrix":
            p["x12"] = np.einsum("bi,bj->ij", i1, i2)
            p["x11"] = np.einsum("bi,bj->ij", i1, i1)
        else:
            lo, hi = self.support
            p["d12"] = np.array([(i1[:, lo:hi] * i2[:, lo - r:hi - r]).sum() for r in self.lags])
        return p

    def accumulate(self, i1, i2, block: int | None = None) -> "MomentAccumulator":
        """Add one frame (1-D) or a batch of frames (2-D, frames along axis 0)."""
        i1 = np.atleast_2d(np.asarray(i1, dtype=float))
        i2 = np.atleast_2d(np.asarray(i2, dtype=float))
        n = self.axis.n_points
        if i1.shape != i2.shape or i1.shape[-1] != n:
            raise ValueError(f"frame shapes {i1.shape} / {i2.shape} do not match accumulator width {n}")
        if block is None:
            block = self._next_block
        block = int(block)
        if block < 0:
            raise ValueError("block index must be >= 0")
        self._groups[block % self.n_groups].insert(0, block // self.n_groups, self._partial(i1, i2))
        self._next_block = max(self._next_block, block + 1)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Fold ``other``'s blocks into ``self`` (in place) and return ``self``."""
        if (
            other.mode != self.mode
            or other.axis != self.axis
            or other.n_groups != self.n_groups
            or not np.array_equal(other.rows, self.rows)
            or not np.array_equal(other.lags, self.lags)
        ):
            raise ValueError("cannot merge accumulators with different shapes or modes")
        for mine, theirs in zip(self._groups, other._groups):
            mine.merge_from(theirs)
        self._next_block = max(self._next_block, other._next_block)
        return self

    # -- moments ------------------------------------------------------------
    def _group_totals(self) -> list[dict]:
        return [t for t in (g.total() for g in self._groups) if t is not None]

    def sums(self) -> dict:
        parts = self._group_totals()
        if not parts:
            raise EstimatorError("no frames accumulated")
        return _pairwise(parts)

    @property
    def n_frames(self) -> int:
        parts = self._group_totals()
        return int(sum(int(p["n"]) for p in parts))

    @staticmethod
    def _means(s: dict) -> dict:
        n = float(s["n"])
        return {k: (v / n if k != "n" else v) for k, v in s.items()}

    def means(self, min_frames: int = 2) -> dict:
        s = self.sums()
        if int(s["n"]) < min_frames:
            raise EstimatorError(f"estimator needs at least {min_frames} frames, have {int(s['n'])}")
        return self._means(s)

    def jackknife(self, fn: Callable[[dict], np.ndarray], min_frames: int = 2):
        """``fn`` applied to the full-sample means, with delete-one-group standard error."""
        est = np.asarray(fn(self.means(min_frames)), dtype=float)
        parts = self._group_totals()
        k = len(parts)
        if k < 2:
            return est, np.full(est.shape, np.nan)
        reps = []
        for g in range(k):
            rest = _pairwise([p for j, p in enumerate(parts) if j != g])
            reps.append(np.asarray(fn(self._means(rest)), dtype=float))
        reps = np.stack(reps)
        with np.errstate(invalid="ignore"):
            se = np.sqrt((k - 1) / k * ((reps - reps.mean(0)) ** 2).sum(0))
        return est, se

    def row_position(self, x1_index: int) -> int:
        hit = np.flatnonzero(self.rows == int(x1_index))
        if not hit.size:
            raise EstimatorError(f"accumulator does not hold the x1 slice {x1_index}")
        return int(hit[0])


# -- estimators on means ---------------------------------------------------
def _cross(m: dict, rows: np.ndarray, sel=slice(None)) -> np.ndarray:
    """Covariance rows ``sel`` (positions within ``rows``) of I1 against I2."""
    return m["x12"][sel] - np.outer(m["s1"][rows[sel]], m["s2"])


def _auto(m: dict, rows: np.ndarray, sel=slice(None)) -> np.ndarray:
    return m["x11"][sel] - np.outer(m["s1"][rows[sel]], m["s1"])


def _check_mode(acc: MomentAccumulator, *modes):
    if acc.mode not in modes:
        raise EstimatorError(f"estimator needs accumulator mode in {modes}, got {acc.mode}")


def mean_intensities(acc: MomentAccumulator) -> tuple[Pattern, Pattern]:
    """<I1> and <I2> profiles with standard errors."""
    (m1, m2), (e1, e2) = acc.jackknife(lambda m: np.stack([m["s1"], m["s2"]]), min_frames=1)
    return Pattern(acc.axis, m1, e1, label="mean_I1"), Pattern(acc.axis, m2, e2, label="mean_I2")


def cross_correlation(acc: MomentAccumulator) -> np.ndarray:
    """G(x1, x2) = <I1 I2> - <I1><I2> for the held x1 slices (rows x n)."""
    _check_mode(acc, "fixed_pixel", "full_matrix")
    return _cross(acc.means(), acc.rows)


def _normalized_row(m, rows, pos, floor):
    m2 = m["s2"]
    row = _cross(m, rows, slice(pos, pos + 1))[0]
    keep = (m2 >= floor * m2.max()) & (m2 > 0)
    out = np.full_like(row, np.nan)
    out[keep] = row[keep] / m2[keep] ** 2
    return out


def ghost_pattern_fixed_pixel(
    acc: MomentAccumulator, x1_index: int, normalize: bool = False, floor: float = NORMALIZE_FLOOR
) -> Pattern:
    """G(x1 fixed, x2) as a function of x2, optionally divided by <I2(x2)>^2.

    Normalization masks pixels where <I2> is below ``floor`` times its maximum.
    """
    _check_mode(acc, "fixed_pixel", "full_matrix")
    pos = acc.row_position(x1_index)
    rows = acc.rows
    if normalize:
        fn = lambda m: _normalized_row(m, rows, pos, floor)
    else:
        fn = lambda m: _cross(m, rows, slice(pos, pos + 1))[0]
    vals, se = acc.jackknife(fn)
    if not np.any(np.isfinite(vals)):
        raise EstimatorError("every x2 pixel is masked by the normalization floor")
    label = "ghost_normalized" if normalize else "ghost"
    return Pattern(acc.axis, vals, se, label=f"{label}_x1={acc.axis.coordinate(x1_index):.6g}")


def autocorrelation(acc: MomentAccumulator, x1_index: int) -> Pattern:
    """C_auto(x, x1 fixed) = <I1(x) I1(x1)> - <I1(x)><I1(x1)> as a function of x."""
    _check_mode(acc, "fixed_pixel", "full_matrix")
    pos = acc.row_position(x1_index)
    rows = acc.rows
    vals, se = acc.jackknife(lambda m: _auto(m, rows, slice(pos, pos + 1))[0])
    return Pattern(acc.axis, vals, se, label=f"autocorrelation_x1={acc.axis.coordinate(x1_index):.6g}")


def _spatial_average(m: dict, lags: np.ndarray, support: tuple[int, int]) -> np.ndarray:
    lo, hi = support
    s1, s2 = m["s1"], m["s2"]
    bg = np.array([np.dot(s1[lo:hi], s2[lo - r:hi - r]) for r in lags])
    return (m["d12"] - bg) / (hi - lo)


def spatial_average(acc: MomentAccumulator) -> Pattern:
    """Mean over x of G(x, x - r) as a function of r = x1 - x2."""
    _check_mode(acc, "difference_coordinate")
    lags, support = acc.lags, acc.support
    vals, se = acc.jackknife(lambda m: _spatial_average(m, lags, support))
    if not np.all(np.diff(lags) == 1):
        raise EstimatorError("spatial-average lags must be contiguous")
    r_axis = GridAxis(len(lags), acc.axis.pitch, lags[0] * acc.axis.pitch)
    return Pattern(r_axis, vals, se, label="spatial_average")


def ghost_pattern_spatial_average(i1, i2, axis: GridAxis, max_lag: int, n_groups: int = 10) -> Pattern:
    """Spatial-average ghost pattern of a stack of frame pairs, lags -max_lag..max_lag pixels."""
    i1 = np.atleast_2d(i1)
    i2 = np.atleast_2d(i2)
    if i1.shape[0] < 2:
        raise EstimatorError("spatial average needs at least 2 frames")
    acc = MomentAccumulator(axis, "difference_coordinate", lags=range(-max_lag, max_lag + 1), n_groups=n_groups)
    # one block per frame so every jackknife group is populated
    for k in range(i1.shape[0]):
        acc.accumulate(i1[k], i2[k], block=k)
    return spatial_average(acc)


def _visibility(m, rows, floor):
    g = _cross(m, rows)
    bg = np.outer(m["s1"][rows], m["s2"])
    keep = (m["s1"][rows][:, None] >= floor * m["s1"].max()) & (m["s2"][None, :] >= floor * m["s2"].max())
    keep &= bg > 0
    v = np.full(g.shape, np.nan)
    v[keep] = np.clip(g[keep] / (bg[keep] + g[keep]), 0.0, 1.0)
    return v


def visibility(acc: MomentAccumulator, floor: float = NORMALIZE_FLOOR) -> VisibilityReport:
    """V = G / (<I1><I2> + G) on pixels above the intensity floor in both arms.

    Negative sample covariances are reported as zero visibility.
    """
    _check_mode(acc, "fixed_pixel", "full_matrix")
    rows = acc.rows
    v, se = acc.jackknife(lambda m: _visibility(m, rows, floor))
    if not np.any(np.isfinite(v)):
        raise EstimatorError("every pixel is masked by the visibility floor")
    idx = np.unravel_index(np.nanargmax(v), v.shape)
    return VisibilityReport(v, float(v[idx]), tuple(int(i) for i in idx), float(se[idx]))
