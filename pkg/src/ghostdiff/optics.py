"""Two-arm bench: object transmission, beam splitter, f-f lens and CCD detection.

All operations act on :class:`ComplexField` objects whose values may be
batched along leading axes, so a whole block of realizations goes through
the bench in one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .specklefield import ComplexField, GridAxis


@dataclass(frozen=True)
class OpticalConfig:
    wavelength_lambda: float = 0.532  # um
    focal_length_f: float = 50.0  # mm

    def __post_init__(self):
        if not self.wavelength_lambda > 0:
            raise ValueError(f"wavelength_lambda must be > 0, got {self.wavelength_lambda}")
        if not self.focal_length_f > 0:
            raise ValueError(f"focal_length_f must be > 0, got {self.focal_length_f}")

    @property
    def wavenumber_k(self) -> float:
        return 2 * np.pi / self.wavelength_lambda

    @property
    def focal_length_um(self) -> float:
        return self.focal_length_f * 1e3

    def far_field_pitch(self, axis: GridAxis) -> float:
        return self.wavelength_lambda * self.focal_length_um / (axis.n_points * axis.pitch)


OBJECT_KINDS = ("identity", "square_phase_grating", "amplitude_mask")


@dataclass(frozen=True, eq=False)
class TransmissionObject:
    """Complex transmission T(x).

    Build with :meth:`identity`, :meth:`square_phase_grating` or
    :meth:`amplitude_mask` rather than calling the constructor directly.
    """

    kind: str = "identity"
    period_d: float | None = None
    groove_width_a: float | None = None
    phase_shift_dphi: float | None = None
    mask: np.ndarray | None = None
    mask_axis: GridAxis | None = None

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"object kind must be one of {OBJECT_KINDS}, got {self.kind!r}")
        if self.kind == "square_phase_grating":
            d, a = self.period_d, self.groove_width_a
            if d is None or a is None or self.phase_shift_dphi is None:
                raise ValueError("square_phase_grating needs period_d, groove_width_a and phase_shift_dphi")
            if not 0 < a < d:
                raise ValueError(f"grating needs 0 < groove_width_a < period_d, got a={a}, d={d}")
        if self.kind == "amplitude_mask":
            if self.mask is None or self.mask_axis is None:
                raise ValueError("amplitude_mask needs mask values and mask_axis")
            m = np.asarray(self.mask, dtype=float)
            if m.shape != (self.mask_axis.n_points,):
                raise ValueError("amplitude_mask length must match mask_axis.n_points")
            if np.any(m < 0) or np.any(m > 1):
                raise ValueError("amplitude_mask values must lie in [0, 1]")
            object.__setattr__(self, "mask", m)

    @classmethod
    def identity(cls) -> "TransmissionObject":
        return cls("identity")

    @classmethod
    def square_phase_grating(cls, period_d: float, groove_width_a: float, phase_shift_dphi: float):
        return cls("square_phase_grating", float(period_d), float(groove_width_a), float(phase_shift_dphi))

    @classmethod
    def amplitude_mask(cls, values, axis: GridAxis) -> "TransmissionObject":
        return cls("amplitude_mask", mask=np.asarray(values, dtype=float), mask_axis=axis)

    @classmethod
    def double_slit(cls, axis: GridAxis, slit_width: float, separation: float) -> "TransmissionObject":
        x = axis.coordinates
        m = (np.abs(x - separation / 2) <= slit_width / 2) | (np.abs(x + separation / 2) <= slit_width / 2)
        return cls.amplitude_mask(m.astype(float), axis)

    @property
    def is_pure_phase(self) -> bool:
        return self.kind in ("identity", "square_phase_grating")


def transmission_at(obj: TransmissionObject, x) -> np.ndarray | complex:
    """T_obj at coordinate(s) ``x`` [um].  Gratings repeat with period d."""
    xa = np.asarray(x, dtype=float)
    if obj.kind == "identity":
        out = np.ones(xa.shape, complex)
    elif obj.kind == "square_phase_grating":
        u = np.mod(xa, obj.period_d)
        out = np.where(u <= obj.groove_width_a, np.exp(1j * obj.phase_shift_dphi), 1.0 + 0j)
    else:
        ax = obj.mask_axis
        idx = np.rint((xa - ax.origin) / ax.pitch).astype(int)
        inside = (idx >= 0) & (idx < ax.n_points)
        out = np.where(inside, obj.mask[np.clip(idx, 0, ax.n_points - 1)], 0.0).astype(complex)
    return out if out.ndim else complex(out)


def apply_object(field: ComplexField, obj: TransmissionObject) -> ComplexField:
    if obj.kind == "identity":
        return ComplexField(field.axis, field.values.copy())
    return ComplexField(field.axis, field.values * transmission_at(obj, field.axis.coordinates))


@dataclass(frozen=True)
class BeamSplitterSpec:
    r: complex = 1 / np.sqrt(2)
    t: complex = 1 / np.sqrt(2)

    def __post_init__(self):
        if abs(self.r) ** 2 + abs(self.t) ** 2 > 1 + 1e-12:
            raise ValueError(f"beam splitter gains energy: |r|^2+|t|^2 = {abs(self.r)**2 + abs(self.t)**2}")

    @property
    def rt_squared(self) -> float:
        return abs(self.r * self.t) ** 2


def split_beam(field: ComplexField, bs: BeamSplitterSpec) -> tuple[ComplexField, ComplexField]:
    """(test arm, reference arm) = (t * field, r * field)."""
    return ComplexField(field.axis, bs.t * field.values), ComplexField(field.axis, bs.r * field.values)


def lens_far_field(field: ComplexField, cfg: OpticalConfig) -> ComplexField:
    """Focal-plane field of an f-f lens.

    Kernel exp(-i x x' k/F) with x = output coordinate; the constant phase of
    (i lambda F)^-1 is dropped.  Output pitch is lambda F / (n * pitch) and
    sum(|u|^2) * pitch is conserved.
    """
    axis = field.axis
    if not axis.is_centered:
        raise ValueError("lens_far_field needs a centered input axis")
    out_axis = GridAxis.centered(axis.n_points, cfg.far_field_pitch(axis))
    v = np.fft.ifftshift(field.values, axes=-1)
    v = np.fft.fftshift(np.fft.fft(v, axis=-1, norm="ortho"), axes=-1)
    return ComplexField(out_axis, v * np.sqrt(axis.pitch / out_axis.pitch))


@dataclass(frozen=True)
class DetectorSpec:
    pixel_pitch: float | None = None  # um; None -> native field pitch
    add_shot_noise: bool = False
    shot_noise_scale: float = 1.0  # photons per unit intensity

    def __post_init__(self):
        if self.pixel_pitch is not None and not self.pixel_pitch > 0:
            raise ValueError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        if self.add_shot_noise and not self.shot_noise_scale > 0:
            raise ValueError(f"shot_noise_scale must be > 0, got {self.shot_noise_scale}")

    def binning(self, field_pitch: float) -> int:
        if self.pixel_pitch is None:
            return 1
        ratio = self.pixel_pitch / field_pitch
        if ratio < 1 - 1e-2:
            raise ValueError(f"pixel_pitch {self.pixel_pitch} um is finer than the field pitch {field_pitch} um")
        b = int(round(ratio))
        if abs(ratio - b) > 1e-2 * ratio:
            raise ValueError(f"pixel_pitch/field pitch = {ratio:.4f} is not an integer within 1%")
        return b


@dataclass
class IntensityFrame:
    axis: GridAxis
    values: np.ndarray


def detect(field: ComplexField, det: DetectorSpec, seed: int | None = None) -> IntensityFrame:
    """Pixel-binned intensity, optionally with Poisson shot noise."""
    b = det.binning(field.axis.pitch)
    inten = field.intensity
    n = field.axis.n_points
    if n % b:
        raise ValueError(f"binning factor {b} does not divide {n} samples")
    if b > 1:
        inten = inten.reshape(inten.shape[:-1] + (n // b, b)).mean(-1)
    axis = GridAxis(n // b, field.axis.pitch * b, field.axis.origin + (b - 1) * field.axis.pitch / 2)
    if det.add_shot_noise:
        rng = np.random.default_rng(0 if seed is None else int(seed) & (2 ** 64 - 1))
        inten = rng.poisson(inten * det.shot_noise_scale) / det.shot_noise_scale
    return IntensityFrame(axis, inten)
