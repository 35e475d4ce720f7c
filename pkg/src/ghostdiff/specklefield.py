"""Pseudo-thermal speckle synthesis on a 1-D grid and second-order field statistics.

Fields are circular complex Gaussian: white noise is low-passed with a Gaussian
filter in the spatial-frequency domain and then multiplied by the source
envelope (the pinhole).  The filter width is fixed analytically from the
Gaussian Fourier pair so that the intensity correlation peak
``|Gamma(x, x + dx)|**2`` has a FWHM equal to ``SpeckleSpec.delta_x_n``.

Lengths are in micrometres throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ._tree import DyadicSum

# FWHM of exp(-x**2 / (2 s**2)) is FWHM_PER_SIGMA * s
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
SIEGERT_TOLERANCE = 0.1
GAMMA_FULL_MAX = 2048


@dataclass(frozen=True)
class GridAxis:
    """Uniform 1-D sampling grid; ``coordinate(i) = origin + i * pitch``."""

    n_points: int
    pitch: float
    origin: float = 0.0

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"GridAxis.n_points must be an integer >= 2, got {self.n_points}")
        if not self.pitch > 0:
            raise ValueError(f"GridAxis.pitch must be > 0, got {self.pitch}")
        object.__setattr__(self, "n_points", int(self.n_points))

    @classmethod
    def centered(cls, n_points: int, pitch: float) -> "GridAxis":
        # sample n_points // 2 sits at coordinate 0
        return cls(n_points, pitch, -pitch * (int(n_points) // 2))

    @property
    def is_centered(self) -> bool:
        return np.isclose(self.origin, -self.pitch * (self.n_points // 2), rtol=0, atol=1e-9 * self.pitch)

    @property
    def extent(self) -> float:
        return self.n_points * self.pitch

    @property
    def center_index(self) -> int:
        return self.n_points // 2

    def coordinate(self, i):
        return self.origin + np.asarray(i) * self.pitch

    @property
    def coordinates(self) -> np.ndarray:
        return self.origin + np.arange(self.n_points) * self.pitch

    def index_of(self, x: float) -> int:
        """Nearest sample index to ``x``; raises if ``x`` is off the grid."""
        i = int(round((x - self.origin) / self.pitch))
        if not 0 <= i < self.n_points:
            raise ValueError(
                f"coordinate {x} lies outside the axis [{self.origin}, {self.coordinate(self.n_points - 1)}]"
            )
        return i


@dataclass
class ComplexField:
    """Complex amplitude sampled on ``axis``.

    ``values`` may carry leading batch dimensions; the last dimension runs
    over the grid.
    """

    axis: GridAxis
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[-1] != self.axis.n_points:
            raise ValueError(
                f"field has {self.values.shape[-1]} samples but axis has {self.axis.n_points}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def intensity(self) -> np.ndarray:
        return self.values.real ** 2 + self.values.imag ** 2

    def __len__(self):
        return self.values.shape[0] if self.values.ndim > 1 else 1


ENVELOPES = ("hard_pinhole", "gaussian")


@dataclass(frozen=True)
class SpeckleSpec:
    """Generator parameters.

    delta_x_n
        Near-field speckle size: FWHM of the normalized intensity correlation
        ``|Gamma(x, x+dx)|**2 / (<I(x)><I(x+dx)>)``.
    aperture_d_ph
        Pinhole diameter (hard) or 1/e^2 intensity diameter (gaussian).
    """

    delta_x_n: float
    aperture_d_ph: float
    axis: GridAxis
    envelope_shape: str = "hard_pinhole"

    def __post_init__(self):
        if self.envelope_shape not in ENVELOPES:
            raise ValueError(f"envelope_shape must be one of {ENVELOPES}, got {self.envelope_shape!r}")
        if not self.delta_x_n > 0:
            raise ValueError(f"delta_x_n must be > 0, got {self.delta_x_n}")
        if self.delta_x_n < 2 * self.axis.pitch:
            raise ValueError(
                f"delta_x_n={self.delta_x_n} um is under-sampled: need delta_x_n >= 2*pitch "
                f"({2 * self.axis.pitch} um)"
            )
        if not self.aperture_d_ph > 0:
            raise ValueError(f"aperture_d_ph must be > 0, got {self.aperture_d_ph}")
        if self.aperture_d_ph > self.axis.extent * (1 + 1e-12):
            raise ValueError(
                f"aperture_d_ph={self.aperture_d_ph} um exceeds the grid extent {self.axis.extent} um"
            )

    @property
    def coherence_sigma(self) -> float:
        """Gaussian sigma of |Gamma|; |Gamma|**2 has FWHM delta_x_n."""
        return np.sqrt(2.0) * self.delta_x_n / FWHM_PER_SIGMA

    def envelope(self) -> np.ndarray:
        """Real amplitude envelope, equal to 1 at the aperture centre."""
        x = self.axis.coordinates
        half = self.aperture_d_ph / 2
        if self.envelope_shape == "hard_pinhole":
            return (np.abs(x) <= half).astype(float)
        return np.exp(-((x / half) ** 2))

    def spectral_filter(self) -> np.ndarray:
        """Frequency-domain amplitude filter (FFT ordering), scaled to unit mean intensity."""
        q = 2 * np.pi * np.fft.fftfreq(self.axis.n_points, d=self.axis.pitch)
        s = self.coherence_sigma
        # |H|^2 = exp(-q^2 s^2 / 2)  <->  |Gamma(dx)| = exp(-dx^2 / (2 s^2))
        h = np.exp(-(q ** 2) * s ** 2 / 4)
        return h * np.sqrt(self.axis.n_points / np.sum(h ** 2))


def child_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """64-bit seed for frame ``index`` of a run (counter-based, order independent)."""
    ss = np.random.SeedSequence(int(master_seed) & (2 ** 64 - 1), spawn_key=(int(index), int(stream)))
    return int(ss.generate_state(1, np.uint64)[0])


def white_noise(seed: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(int(seed) & (2 ** 64 - 1))
    z = rng.standard_normal((2, n))
    return (z[0] + 1j * z[1]) / np.sqrt(2.0)


def synthesize_batch(spec: SpeckleSpec, seeds: Sequence[int]) -> ComplexField:
    """One speckle realization per seed, stacked along axis 0."""
    n = spec.axis.n_points
    noise = np.stack([white_noise(s, n) for s in seeds]) if len(seeds) else np.zeros((0, n), complex)
    filtered = np.fft.ifft(np.fft.fft(noise, axis=-1) * spec.spectral_filter(), axis=-1)
    return ComplexField(spec.axis, filtered * spec.envelope())


def synthesize_speckle(spec: SpeckleSpec, seed: int) -> ComplexField:
    """Single realization; identical to the matching row of :func:`synthesize_batch`."""
    f = synthesize_batch(spec, [seed])
    return ComplexField(f.axis, f.values[0])


def _as_array(fields) -> tuple[GridAxis, np.ndarray]:
    if isinstance(fields, ComplexField):
        vals = np.atleast_2d(fields.values)
        return fields.axis, vals.reshape(-1, fields.axis.n_points)
    fields = list(fields)
    if not fields:
        raise ValueError("empty ensemble")
    axis = fields[0].axis
    for f in fields[1:]:
        if f.axis != axis:
            raise ValueError(f"mismatched axes in ensemble: {f.axis} vs {axis}")
    return axis, np.concatenate([np.atleast_2d(f.values) for f in fields]).reshape(-1, axis.n_points)


@dataclass
class GammaMatrix:
    """Estimate of <a*(x_i) a(x_j)>.  ``rows`` is None for the full matrix."""

    axis: GridAxis
    values: np.ndarray
    rows: np.ndarray | None = None

    def row(self, i: int) -> np.ndarray:
        if self.rows is None:
            return self.values[i]
        hit = np.flatnonzero(self.rows == i)
        if not hit.size:
            raise ValueError(f"row {i} was not estimated")
        return self.values[hit[0]]

    @property
    def is_full(self) -> bool:
        return self.rows is None


class GammaAccumulator:
    """Mergeable running sum of conj(a_i) a_j.

    Batches may carry a block number; totals are then independent of how the
    blocks were split between accumulators or the order they were merged in.
    """

    def __init__(self, axis: GridAxis, rows=None):
        n = axis.n_points
        if rows is None and n > GAMMA_FULL_MAX:
            raise ValueError(f"full Gamma matrix limited to n <= {GAMMA_FULL_MAX}; pass rows=")
        self.axis = axis
        self.rows = None if rows is None else np.asarray(rows, dtype=int)
        self._tree = DyadicSum()
        self._next_block = 0

    def add(self, fields, block: int | None = None) -> "GammaAccumulator":
        axis, a = _as_array(fields)
        if axis != self.axis:
            raise ValueError(f"field axis {axis} does not match accumulator axis {self.axis}")
        left = a if self.rows is None else a[:, self.rows]
        if a.shape[1] <= 256:
            prod = np.einsum("bi,bj->ij", left.conj(), a)
        else:
            prod = left.conj().T @ a
        block = self._next_block if block is None else int(block)
        self._tree.insert(0, block, {"n": np.array(a.shape[0], dtype=np.int64), "g": prod})
        self._next_block = max(self._next_block, block + 1)
        return self

    def merge(self, other: "GammaAccumulator") -> "GammaAccumulator":
        if other.axis != self.axis or not np.array_equal(
            np.asarray(self.rows if self.rows is not None else []),
            np.asarray(other.rows if other.rows is not None else []),
        ):
            raise ValueError("cannot merge Gamma accumulators with different axes or rows")
        self._tree.merge_from(other._tree)
        self._next_block = max(self._next_block, other._next_block)
        return self

    @property
    def n_frames(self) -> int:
        t = self._tree.total()
        return 0 if t is None else int(t["n"])

    def result(self) -> GammaMatrix:
        t = self._tree.total()
        if t is None or int(t["n"]) < 2:
            raise ValueError("Gamma estimate needs at least 2 fields")
        m = t["g"] / float(t["n"])
        if self.rows is None:
            m = (m + m.conj().T) / 2
        return GammaMatrix(self.axis, m, self.rows)


def estimate_gamma(fields, rows: Iterable[int] | None = None) -> GammaMatrix:
    """Sample mutual intensity of an ensemble (Hermitian by construction)."""
    axis, a = _as_array(fields)
    if a.shape[0] < 2:
        raise ValueError("Gamma estimate needs at least 2 fields")
    acc = GammaAccumulator(axis, None if rows is None else np.asarray(list(rows)))
    return acc.add(ComplexField(axis, a)).result()


def _sample_points(mean_i: np.ndarray, max_points: int) -> np.ndarray:
    keep = np.flatnonzero(mean_i > 0.01 * mean_i.max())
    if keep.size > max_points:
        keep = keep[np.linspace(0, keep.size - 1, max_points).round().astype(int)]
    return keep


def siegert_check(fields, other=None, max_points: int = 128) -> float:
    """Max relative violation of <II'> - <I><I'> = |Gamma|^2 over sampled pairs.

    With ``other`` the pairs are (x from ``fields``, x' from ``other``), the two
    ensembles being paired frame by frame.  Only points whose mean intensity
    exceeds 1% of the maximum are used.
    """
    axis, a = _as_array(fields)
    b = a if other is None else _as_array(other)[1]
    if b.shape != a.shape:
        raise ValueError("paired ensembles must have identical shapes")
    if a.shape[0] < 2:
        raise ValueError("siegert_check needs at least 2 fields")
    ia, ib = np.abs(a) ** 2, np.abs(b) ** 2
    ma, mb = ia.mean(0), ib.mean(0)
    if ma.max() <= 0 or mb.max() <= 0:
        raise ValueError("degenerate ensemble: zero mean intensity everywhere")
    pa, pb = _sample_points(ma, max_points), _sample_points(mb, max_points)
    n = a.shape[0]
    cov = ia[:, pa].T @ ib[:, pb] / n - np.outer(ma[pa], mb[pb])
    gam = a[:, pa].conj().T @ b[:, pb] / n
    dev = np.abs(cov - np.abs(gam) ** 2) / np.outer(ma[pa], mb[pb])
    return float(dev.max())


def intensity_ks_statistic(fields, region: np.ndarray | None = None, max_samples: int = 2_000_000) -> float:
    """KS distance between I/<I(x)> (pooled over ``region``) and a unit exponential."""
    axis, a = _as_array(fields)
    inten = np.abs(a) ** 2
    mean_i = inten.mean(0)
    if region is None:
        region = mean_i > 0.5 * mean_i.max()
    norm = (inten[:, region] / mean_i[region]).ravel()
    if norm.size > max_samples:
        norm = norm[:: int(np.ceil(norm.size / max_samples))]
    return float(stats.kstest(norm, "expon").statistic)


def intensity_contrast(fields, region: np.ndarray | None = None) -> np.ndarray:
    """Pointwise ensemble contrast <I^2>/<I>^2 - 1."""
    axis, a = _as_array(fields)
    inten = np.abs(a) ** 2
    m = inten.mean(0)
    if region is None:
        region = m > 0.5 * m.max()
    return (inten[:, region] ** 2).mean(0) / m[region] ** 2 - 1
