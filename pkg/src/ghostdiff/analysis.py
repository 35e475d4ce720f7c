"""Analytic references and diagnostics.

Units: grating and near-field lengths in um, focal-plane peak positions in mm
(``DiffractionPrediction.x``), pattern axes in um.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correlator import Pattern
from .optics import BeamSplitterSpec, OpticalConfig, TransmissionObject, transmission_at
from .specklefield import GammaMatrix, GridAxis

ORACLE_MAX_POINTS = 128


@dataclass(frozen=True)
class GratingSpec:
    period_d: float
    groove_width_a: float
    phase_shift_dphi: float
    groove_depth_delta: float | None = None
    refractive_index_n_g: float | None = None
    wavelength: float | None = None  # um, only used with the groove depth

    def __post_init__(self):
        if not 0 < self.groove_width_a < self.period_d:
            raise ValueError(
                f"need 0 < groove_width_a < period_d, got a={self.groove_width_a}, d={self.period_d}"
            )
        if self.groove_depth_delta is not None:
            if self.refractive_index_n_g is None or self.wavelength is None:
                raise ValueError("groove_depth_delta needs refractive_index_n_g and wavelength")
            expected = phase_from_groove(self.refractive_index_n_g, self.groove_depth_delta, self.wavelength)
            if abs(expected - self.phase_shift_dphi) > 1e-12:
                raise ValueError(
                    f"phase_shift_dphi={self.phase_shift_dphi} inconsistent with groove depth (gives {expected})"
                )

    @classmethod
    def from_object(cls, obj: TransmissionObject) -> "GratingSpec":
        if obj.kind != "square_phase_grating":
            raise ValueError(f"object of kind {obj.kind!r} is not a square phase grating")
        return cls(obj.period_d, obj.groove_width_a, obj.phase_shift_dphi)

    def as_object(self) -> TransmissionObject:
        return TransmissionObject.square_phase_grating(self.period_d, self.groove_width_a, self.phase_shift_dphi)


def sampled_grating(obj: TransmissionObject, axis: GridAxis) -> GratingSpec:
    """The grating actually seen by ``axis``: groove width = grooved samples per period x pitch.

    Requires an integer number of samples per period.
    """
    g = GratingSpec.from_object(obj)
    per = g.period_d / axis.pitch
    if abs(per - round(per)) > 1e-9 * per:
        raise ValueError(f"period {g.period_d} um is not an integer number of {axis.pitch} um samples")
    per = int(round(per))
    x = axis.origin + np.arange(per) * axis.pitch
    grooved = int(np.count_nonzero(np.mod(x, g.period_d) <= g.groove_width_a))
    if not 0 < grooved < per:
        raise ValueError("grating is not resolved by the grid")
    return GratingSpec(g.period_d, grooved * axis.pitch, g.phase_shift_dphi)


@dataclass
class DiffractionPrediction:
    orders: np.ndarray
    eta: np.ndarray
    theta: np.ndarray  # rad; NaN for evanescent orders
    x: np.ndarray  # mm, small-angle focal-plane positions

    def eta_of(self, n: int) -> float:
        return float(self.eta[np.flatnonzero(self.orders == n)[0]])

    def ratios(self) -> dict[int, float]:
        e0 = self.eta_of(0)
        return {int(n): float(e / e0) for n, e in zip(self.orders, self.eta)}

    def to_dict(self) -> dict:
        return {
            "orders": [int(n) for n in self.orders],
            "eta": [float(e) for e in self.eta],
            "theta": [None if not np.isfinite(t) else float(t) for t in self.theta],
            "x_mm": [float(v) for v in self.x],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffractionPrediction":
        theta = np.array([np.nan if t is None else t for t in d.get("theta", [None] * len(d["orders"]))])
        return cls(np.asarray(d["orders"], int), np.asarray(d["eta"], float), theta, np.asarray(d["x_mm"], float))


def _sinc(u):
    # sin(u)/u
    return np.sinc(np.asarray(u) / np.pi)


def grating_eta(g: GratingSpec, orders) -> np.ndarray:
    """Closed-form diffraction efficiencies of the square phase grating."""
    n = np.asarray(orders)
    s2 = np.sin(g.phase_shift_dphi / 2) ** 2
    f = g.groove_width_a / g.period_d
    eta = s2 * 4 * f ** 2 * _sinc(np.pi * n * f) ** 2
    return np.where(n == 0, 1 + s2 * 4 * f * (f - 1), eta)


def fourier_coefficients_numeric(obj: TransmissionObject, period: float, orders, breakpoints=(), n_nodes: int = 64):
    """c_n = (1/d) int_0^d T(x) exp(-i 2 pi n x / d) dx by composite Gauss-Legendre.

    ``breakpoints`` are the discontinuities of T inside (0, d).
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.unique(np.concatenate([[0.0], np.asarray(breakpoints, float), [period]]))
    orders = np.asarray(orders)
    out = np.zeros(orders.shape, complex)
    for lo, hi in zip(edges[:-1], edges[1:]):
        # interior nodes only, so T is evaluated on the correct side of each jump
        x = (hi - lo) / 2 * nodes + (hi + lo) / 2
        t = transmission_at(obj, x)
        ph = np.exp(-2j * np.pi * np.outer(orders, x) / period)
        out += (ph * t) @ weights * (hi - lo) / 2
    return out / period


def grating_coefficients(g: GratingSpec, n_max: int, cfg: OpticalConfig | None = None) -> DiffractionPrediction:
    """Efficiencies eta_n for |n| <= n_max, with angles and focal-plane positions."""
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    orders = np.arange(-n_max, n_max + 1)
    eta = grating_eta(g, orders)
    cfg = cfg or OpticalConfig()
    s = orders * cfg.wavelength_lambda / g.period_d
    theta = np.where(np.abs(s) < 1, np.arcsin(np.clip(s, -1, 1)), np.nan)
    x = orders * cfg.focal_length_f * cfg.wavelength_lambda / g.period_d
    return DiffractionPrediction(orders, eta, theta, x)


def grating_coefficients_quadrature(g: GratingSpec, orders) -> np.ndarray:
    """|c_n|^2 by direct numerical integration over one period (independent check)."""
    c = fourier_coefficients_numeric(g.as_object(), g.period_d, orders, breakpoints=[g.groove_width_a])
    return np.abs(c) ** 2


def phase_from_groove(n_g: float, delta: float, wavelength: float) -> float:
    if n_g < 1 or delta < 0:
        raise ValueError("need n_g >= 1 and delta >= 0")
    return (n_g - 1) * 2 * np.pi * delta / wavelength


def peak_positions(cfg: OpticalConfig, d: float, orders, exact: bool = False) -> dict[int, float]:
    """Focal-plane positions [mm] of the propagating orders.

    Small-angle mapping x_n = n F lambda / d; ``exact`` uses F tan(arcsin(n lambda/d)).
    Evanescent orders are left out.
    """
    out = {}
    for n in orders:
        s = n * cfg.wavelength_lambda / d
        if abs(s) >= 1:
            continue
        out[int(n)] = cfg.focal_length_f * (np.tan(np.arcsin(s)) if exact else s)
    return out


@dataclass
class PeakEntry:
    order: int
    position: float  # um
    height: float
    ratio: float = float("nan")
    stderr: float = float("nan")

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in self.__dict__.items()}


def _peak_heights(values, coords, pitch, centers, spacing, window, baseline):
    out = []
    for c in centers:
        inside = np.abs(coords - c) <= window / 2 + 1e-9 * pitch
        flank = (np.abs(coords - c) > window / 2 + 1e-9 * pitch) & (np.abs(coords - c) <= spacing / 2)
        fv = values[flank]
        good = np.isfinite(fv)
        if not good.any():
            base = np.zeros(inside.sum())
        elif baseline == "median":
            base = np.full(inside.sum(), np.median(fv[good]))
        else:
            fx = coords[flank][good] - c
            coef = np.polyfit(fx / spacing, fv[good], 2)
            base = np.polyval(coef, (coords[inside] - c) / spacing)
        out.append(float(np.sum(values[inside] - base) * pitch))
    return np.array(out)


def integrate_peaks(
    p: Pattern,
    predicted: DiffractionPrediction,
    window: float,
    center: float = 0.0,
    direction: int = 1,
    baseline: str = "median",
    orders=None,
) -> list[PeakEntry]:
    """Integrated height of each predicted order in ``p``.

    Order n is looked for at ``center + direction * x_n`` (um).  The baseline
    comes from the flanking gaps between windows: their median, or a quadratic
    fit for curved backgrounds.  Ratios are relative to order 0.
    """
    if baseline not in ("median", "quadratic"):
        raise ValueError(f"baseline must be 'median' or 'quadratic', got {baseline!r}")
    pitch = p.axis.pitch
    if window < 2 * pitch:
        raise ValueError(f"window {window} um spans fewer than 2 pixels of pitch {pitch} um")
    sel = np.ones(predicted.orders.shape, bool) if orders is None else np.isin(predicted.orders, list(orders))
    ords = predicted.orders[sel]
    xs = predicted.x[sel] * 1e3
    spacing = np.min(np.diff(np.sort(predicted.x * 1e3))) if len(predicted.x) > 1 else np.inf
    if window >= spacing:
        raise ValueError(f"peak windows overlap: window {window} um >= order spacing {spacing} um")
    centers = center + direction * xs
    coords = p.coordinates
    lo, hi = coords[0] - pitch / 2, coords[-1] + pitch / 2
    for n, c in zip(ords, centers):
        if c - window / 2 < lo or c + window / 2 > hi:
            raise ValueError(f"order {n} window around {c:.1f} um falls off the pattern axis")
    heights = _peak_heights(p.values, coords, pitch, centers, spacing, window, baseline)
    h0 = heights[list(ords).index(0)] if 0 in ords else np.nan
    return [
        PeakEntry(int(n), float(c), float(h), float(h / h0) if np.isfinite(h0) and h0 != 0 else float("nan"))
        for n, c, h in zip(ords, centers, heights)
    ]


def fwhm(profile: Pattern) -> float:
    """Full width at half maximum above a baseline (median of the outer 10% of samples)."""
    v = np.asarray(profile.values, float)
    x = profile.coordinates
    good = np.isfinite(v)
    if good.sum() < 3:
        raise ValueError("profile has too few finite samples")
    n = v.size
    edge = max(1, int(round(0.05 * n)))
    outer = np.concatenate([v[:edge], v[-edge:]])
    base = np.median(outer[np.isfinite(outer)])
    i0 = int(np.nanargmax(v))
    half = base + (v[i0] - base) / 2
    if not v[i0] > base:
        raise ValueError("profile maximum does not rise above the baseline")

    def crossing(step):
        i = i0
        while 0 <= i + step < n:
            j = i + step
            if np.isfinite(v[j]) and v[j] <= half:
                # linear interpolation between samples i and j
                return x[i] + (half - v[i]) * (x[j] - x[i]) / (v[j] - v[i])
            i = j
        raise ValueError("no half-maximum crossing found")

    return float(crossing(1) - crossing(-1))


@dataclass(frozen=True)
class SourceGeometry:
    z: float  # mm
    d_ph: float  # mm
    rho_eff: float  # um
    wavelength: float = 0.532  # um

    def __post_init__(self):
        for name in ("z", "d_ph", "rho_eff", "wavelength"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SourceGeometry.{name} must be > 0")


@dataclass
class RegimeReport:
    regime: str
    predicted_speckle_size: float | None  # um
    nfs_lower: float  # um
    nfs_upper: float  # um
    ffs_lower: float  # um
    details: dict = field(default_factory=dict)


def classify_speckle_regime(geom: SourceGeometry, margin: float = 10.0) -> RegimeReport:
    """Near-field (NFS) vs far-field (FFS) speckle.

    FFS when z >= margin * D_ph rho / lambda (size z lambda / D_ph).
    NFS when margin * rho^2 / lambda <= z < D_ph rho / lambda (size rho).
    Anything else is reported as indeterminate.
    """
    z = geom.z * 1e3
    d = geom.d_ph * 1e3
    lam, rho = geom.wavelength, geom.rho_eff
    crossover = d * rho / lam
    nfs_lower = margin * rho ** 2 / lam
    ffs_lower = margin * crossover
    if z >= ffs_lower:
        regime, size = "FFS", z * lam / d
    elif nfs_lower <= z < crossover:
        regime, size = "NFS", rho
    else:
        regime, size = "indeterminate", None
    return RegimeReport(regime, size, nfs_lower, crossover, ffs_lower,
                        {"ffs_size": z * lam / d, "d_star": lam / rho * z})


def _focal_kernel(in_axis: GridAxis, cfg: OpticalConfig) -> tuple[GridAxis, np.ndarray]:
    out_axis = GridAxis.centered(in_axis.n_points, cfg.far_field_pitch(in_axis))
    xo, xi = out_axis.coordinates, in_axis.coordinates
    h = np.exp(-1j * np.outer(xo, xi) * cfg.wavenumber_k / cfg.focal_length_um)
    return out_axis, h / np.sqrt(cfg.wavelength_lambda * cfg.focal_length_um)


def _oracle(gamma: GammaMatrix, t1, t2, cfg: OpticalConfig, prefactor: float):
    if not gamma.is_full:
        raise ValueError("oracle needs the full Gamma matrix")
    n = gamma.axis.n_points
    if n > ORACLE_MAX_POINTS:
        raise ValueError(f"oracle quadrature limited to n <= {ORACLE_MAX_POINTS} points, got {n}")
    out_axis, h = _focal_kernel(gamma.axis, cfg)
    h1 = h * t1[None, :]
    h2 = h * t2[None, :]
    p = gamma.axis.pitch
    # sum_ij conj(h1[x1, i]) h2[x2, j] Gamma[i, j] pitch^2
    amp = np.einsum("ai,ij,bj->ab", h1.conj(), gamma.values, h2) * p ** 2
    return out_axis, prefactor * np.abs(amp) ** 2


def oracle_correlation(
    gamma: GammaMatrix, obj: TransmissionObject, cfg: OpticalConfig, bs: BeamSplitterSpec | None = None
) -> tuple[GridAxis, np.ndarray]:
    """Ghost-diffraction G(x1, x2) by direct summation over the near-field Gamma.

    The object sits in the test arm only.  Returns (focal-plane axis, G matrix).
    """
    bs = bs or BeamSplitterSpec()
    t = transmission_at(obj, gamma.axis.coordinates)
    return _oracle(gamma, t, np.ones_like(t), cfg, bs.rt_squared)


def oracle_hbt(
    gamma: GammaMatrix, obj: TransmissionObject, cfg: OpticalConfig, bs: BeamSplitterSpec | None = None
) -> tuple[GridAxis, np.ndarray]:
    """HBT correlation: the beam is split after the object, so both kernels carry T."""
    bs = bs or BeamSplitterSpec()
    t = transmission_at(obj, gamma.axis.coordinates)
    return _oracle(gamma, t, t, cfg, bs.rt_squared)


def relative_rms(estimate: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    """||estimate - reference|| / ||reference|| over unmasked points."""
    if mask is None:
        mask = np.ones(reference.shape, bool)
    d = estimate[mask] - reference[mask]
    return float(np.sqrt(np.sum(d ** 2) / np.sum(reference[mask] ** 2)))


def coherence_profile(gamma: GammaMatrix, index: int, squared: bool = True) -> Pattern:
    """Normalized |Gamma(x0, x0 + dx)| (or its square) vs dx, for FWHM estimation."""
    row = gamma.row(index)
    diag = np.real(np.diag(gamma.values)) if gamma.is_full else None
    g = np.abs(row)
    if diag is not None:
        with np.errstate(invalid="ignore", divide="ignore"):
            g = g / np.sqrt(diag[index] * diag)
        g = np.where(np.isfinite(g), g, 0.0)
    ax = gamma.axis
    rel = GridAxis(ax.n_points, ax.pitch, ax.origin - ax.coordinate(index))
    return Pattern(rel, g ** 2 if squared else g, label="coherence")
