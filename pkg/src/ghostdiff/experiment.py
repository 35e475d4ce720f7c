"""Declarative experiment runner.

An :class:`ExperimentConfig` describes a bench (grid, source, object, optics,
detector), the estimators to evaluate and where to write results.  Configs
are YAML documents; named presets ship with the package.

:func:`run_experiment` runs the frame loop in numbered blocks of
``source.block_size`` frames.  Block k always draws the same seeds, and the
accumulators reduce blocks along a fixed tree, so every output file is
byte-identical for a given (config, seed) whatever the number of workers.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .analysis import (
    DiffractionPrediction,
    GratingSpec,
    fwhm,
    grating_coefficients,
    integrate_peaks,
    oracle_correlation,
    oracle_hbt,
    relative_rms,
    sampled_grating,
)
from .correlator import (
    NORMALIZE_FLOOR,
    EstimatorError,
    MomentAccumulator,
    Pattern,
    _auto,
    _cross,
    _normalized_row,
    _spatial_average,
    _visibility,
)
from .optics import (
    BeamSplitterSpec,
    DetectorSpec,
    OpticalConfig,
    TransmissionObject,
    apply_object,
    detect,
    lens_far_field,
    split_beam,
)
from .specklefield import ENVELOPES, ComplexField, GammaAccumulator, GridAxis, SpeckleSpec, child_seed, synthesize_batch

ESTIMATOR_KINDS = (
    "mean_intensity",
    "fixed_pixel",
    "autocorrelation",
    "spatial_average",
    "visibility",
    "gamma_oracle",
    "near_field_fwhm",
)
OBJECT_KINDS = ("identity", "square_phase_grating", "double_slit")
PLACEMENTS = ("test_arm", "both_arms")
OUTPUT_FORMATS = ("csv", "json")
OUTPUT_ENV = "GHOSTDIFF_OUTPUT_DIR"
ORACLE_MASK = 0.05


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


# -- config sections ---------------------------------------------------------
@dataclass
class GridConfig:
    n_points: int = 1024
    pitch: float | None = None  # um
    pixels_per_period: int | None = 32


@dataclass
class SourceConfig:
    delta_x_n: list[float] = field(default_factory=lambda: [2.0])  # um, one run per value
    aperture: float | None = None  # um
    far_field_speckle: float | None = 80.0  # um; aperture = lambda F / this
    envelope: str = "hard_pinhole"
    master_seed: int = 2006
    n_frames: int = 20000
    full_frames: int = 100000
    block_size: int = 500


@dataclass
class ObjectConfig:
    kind: str = "square_phase_grating"
    period_d: float | None = 12.5  # um
    groove_width_a: float | None = 4.2  # um
    phase_shift_pi: float | None = 0.84  # phase step in units of pi
    slit_width: float | None = None  # um
    separation: float | None = None  # um
    placement: str = "test_arm"


@dataclass
class OpticsConfig:
    wavelength: float = 0.532  # um
    focal_length: float = 50.0  # mm
    r: float = 0.7071067811865476
    t: float = 0.7071067811865476


@dataclass
class DetectorConfig:
    pixel_pitch: float | None = None  # um
    shot_noise: bool = False
    shot_noise_scale: float = 1.0


@dataclass
class EstimatorConfig:
    kind: str = "mean_intensity"
    x1_mm: list[float] = field(default_factory=lambda: [0.0])
    normalize: bool = False
    max_lag_mm: float = 5.0
    max_lag_um: float = 10.0


@dataclass
class AnalysisConfig:
    n_max: int = 2
    peak_window_pixels: int = 5
    n_groups: int = 10


@dataclass
class OutputConfig:
    directory: str = "runs"
    formats: list[str] = field(default_factory=lambda: ["csv", "json"])


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    grid: GridConfig = field(default_factory=GridConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    object: ObjectConfig = field(default_factory=ObjectConfig)
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    estimators: list[EstimatorConfig] = field(default_factory=lambda: [EstimatorConfig()])
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data, "")
        validate(cfg)
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<document>", f"not valid YAML: {exc}") from None
        return cls.from_dict(data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(value, kind: str, path: str):
    optional = kind.endswith(" | None")
    base = kind.removesuffix(" | None")
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, f"must be finite, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base.startswith("list["):
        inner = base[5:-1]
        if not isinstance(value, list):
            value = [value]
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    raise AssertionError(f"unhandled field type {kind}")


def _build(cls, data, path: str):
    where = path or "<document>"
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(where, "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        ftype = f.type
        if ftype == "list[EstimatorConfig]":
            items = data[name]
            if not isinstance(items, list):
                raise ConfigError(sub, "expected a list of estimators")
            kwargs[name] = [_build(EstimatorConfig, it, f"{sub}[{i}]") for i, it in enumerate(items)]
        elif ftype in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[ftype], data[name], sub)
        else:
            kwargs[name] = _coerce(data[name], ftype, sub)
    return cls(**kwargs)


_SECTIONS = {
    "GridConfig": GridConfig,
    "SourceConfig": SourceConfig,
    "ObjectConfig": ObjectConfig,
    "OpticsConfig": OpticsConfig,
    "DetectorConfig": DetectorConfig,
    "AnalysisConfig": AnalysisConfig,
    "OutputConfig": OutputConfig,
}


# -- bench -------------------------------------------------------------------
@dataclass
class Bench:
    """Every physical object of one run, built from a config and one Delta x_n."""

    axis: GridAxis
    speckle: SpeckleSpec
    obj: TransmissionObject
    placement: str
    optics: OpticalConfig
    splitter: BeamSplitterSpec
    detector: DetectorSpec
    detector_axis: GridAxis
    prediction: DiffractionPrediction | None
    grating: GratingSpec | None


def _object(cfg: ExperimentConfig, axis: GridAxis) -> TransmissionObject:
    o = cfg.object
    if o.kind == "identity":
        return TransmissionObject.identity()
    if o.kind == "double_slit":
        return TransmissionObject.double_slit(axis, o.slit_width, o.separation)
    return TransmissionObject.square_phase_grating(o.period_d, o.groove_width_a, o.phase_shift_pi * np.pi)


def _pitch(cfg: ExperimentConfig) -> float:
    g = cfg.grid
    if g.pitch is not None:
        return g.pitch
    return cfg.object.period_d / g.pixels_per_period


def _aperture(cfg: ExperimentConfig) -> float:
    s = cfg.source
    if s.aperture is not None:
        return s.aperture
    return cfg.optics.wavelength * cfg.optics.focal_length * 1e3 / s.far_field_speckle


def build_bench(cfg: ExperimentConfig, delta_x_n: float) -> Bench:
    axis = GridAxis.centered(cfg.grid.n_points, _pitch(cfg))
    speckle = SpeckleSpec(delta_x_n, _aperture(cfg), axis, cfg.source.envelope)
    obj = _object(cfg, axis)
    optics = OpticalConfig(cfg.optics.wavelength, cfg.optics.focal_length)
    splitter = BeamSplitterSpec(cfg.optics.r, cfg.optics.t)
    det = DetectorSpec(cfg.detector.pixel_pitch, cfg.detector.shot_noise, cfg.detector.shot_noise_scale)
    far_pitch = optics.far_field_pitch(axis)
    b = det.binning(far_pitch)
    n = axis.n_points
    if n % b:
        raise ConfigError("detector.pixel_pitch", f"binning factor {b} does not divide {n} samples")
    far = GridAxis.centered(n, far_pitch)
    det_axis = GridAxis(n // b, far_pitch * b, far.origin + (b - 1) * far_pitch / 2)
    prediction = grating = None
    if obj.kind == "square_phase_grating":
        grating = sampled_grating(obj, axis)
        prediction = grating_coefficients(grating, cfg.analysis.n_max, optics)
    return Bench(axis, speckle, obj, cfg.object.placement, optics, splitter, det, det_axis, prediction, grating)


def _nearest_index(axis: GridAxis, x_um: float) -> int:
    return int(round((x_um - axis.origin) / axis.pitch))


def _on_axis(axis: GridAxis, x_um: float) -> bool:
    lo = axis.origin - axis.pitch / 2
    return lo <= x_um <= lo + axis.n_points * axis.pitch


# -- validation ----------------------------------------------------------------
def _positive(value, path):
    if value is None or not value > 0:
        raise ConfigError(path, f"must be > 0, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` naming the first invalid field."""
    if not cfg.name or any(c in cfg.name for c in "/\\"):
        raise ConfigError("name", "must be a non-empty name without path separators")
    g, s, o = cfg.grid, cfg.source, cfg.object
    if o.kind not in OBJECT_KINDS:
        raise ConfigError("object.kind", f"must be one of {OBJECT_KINDS}, got {o.kind!r}")
    if g.n_points < 4:
        raise ConfigError("grid.n_points", f"must be >= 4, got {g.n_points}")
    if (g.pitch is None) == (g.pixels_per_period is None):
        raise ConfigError("grid.pitch", "give exactly one of grid.pitch and grid.pixels_per_period")
    if g.pitch is not None:
        _positive(g.pitch, "grid.pitch")
    else:
        if g.pixels_per_period < 2:
            raise ConfigError("grid.pixels_per_period", f"must be >= 2, got {g.pixels_per_period}")
        if o.kind != "square_phase_grating":
            raise ConfigError("grid.pixels_per_period", "needs a periodic object; give grid.pitch instead")

    if o.placement not in PLACEMENTS:
        raise ConfigError("object.placement", f"must be one of {PLACEMENTS}, got {o.placement!r}")
    if o.kind == "square_phase_grating":
        _positive(o.period_d, "object.period_d")
        _positive(o.groove_width_a, "object.groove_width_a")
        if o.groove_width_a >= o.period_d:
            raise ConfigError("object.groove_width_a", f"must be < period_d = {o.period_d}")
        if o.phase_shift_pi is None:
            raise ConfigError("object.phase_shift_pi", "required for a phase grating")
    if o.kind == "double_slit":
        _positive(o.slit_width, "object.slit_width")
        _positive(o.separation, "object.separation")

    if not s.delta_x_n:
        raise ConfigError("source.delta_x_n", "needs at least one value")
    if (s.aperture is None) == (s.far_field_speckle is None):
        raise ConfigError("source.aperture", "give exactly one of source.aperture and source.far_field_speckle")
    if s.aperture is not None:
        _positive(s.aperture, "source.aperture")
    else:
        _positive(s.far_field_speckle, "source.far_field_speckle")
    if s.envelope not in ENVELOPES:
        raise ConfigError("source.envelope", f"must be one of {ENVELOPES}, got {s.envelope!r}")
    if s.master_seed < 0:
        raise ConfigError("source.master_seed", "must be >= 0")
    for name in ("n_frames", "full_frames", "block_size"):
        if getattr(s, name) < 1:
            raise ConfigError(f"source.{name}", f"must be >= 1, got {getattr(s, name)}")

    _positive(cfg.optics.wavelength, "optics.wavelength")
    _positive(cfg.optics.focal_length, "optics.focal_length")
    for name in ("r", "t"):
        v = getattr(cfg.optics, name)
        if not 0 <= v <= 1:
            raise ConfigError(f"optics.{name}", f"must lie in [0, 1], got {v}")
    if cfg.optics.r ** 2 + cfg.optics.t ** 2 > 1 + 1e-12:
        raise ConfigError("optics.r", "beam splitter gains energy: r^2 + t^2 > 1")
    if cfg.detector.pixel_pitch is not None:
        _positive(cfg.detector.pixel_pitch, "detector.pixel_pitch")
    if cfg.detector.shot_noise:
        _positive(cfg.detector.shot_noise_scale, "detector.shot_noise_scale")

    a = cfg.analysis
    if a.n_max < 2:
        raise ConfigError("analysis.n_max", f"must be >= 2, got {a.n_max}")
    if a.peak_window_pixels < 2:
        raise ConfigError("analysis.peak_window_pixels", f"must be >= 2, got {a.peak_window_pixels}")
    if a.n_groups < 2:
        raise ConfigError("analysis.n_groups", f"must be >= 2, got {a.n_groups}")
    if not cfg.outputs.directory:
        raise ConfigError("outputs.directory", "must not be empty")
    for i, fmt in enumerate(cfg.outputs.formats):
        if fmt not in OUTPUT_FORMATS:
            raise ConfigError(f"outputs.formats[{i}]", f"must be one of {OUTPUT_FORMATS}, got {fmt!r}")
    if not cfg.estimators:
        raise ConfigError("estimators", "needs at least one estimator")

    axis = GridAxis.centered(g.n_points, _pitch(cfg))
    aperture = _aperture(cfg)
    if aperture > axis.extent:
        raise ConfigError("source.aperture", f"aperture {aperture:.6g} um exceeds the grid extent {axis.extent:.6g} um")
    for i, dx in enumerate(s.delta_x_n):
        if not dx >= 2 * axis.pitch:
            raise ConfigError(f"source.delta_x_n[{i}]", f"{dx} um is below two grid pitches ({2 * axis.pitch:.6g} um)")
    if o.kind == "square_phase_grating":
        per = o.period_d / axis.pitch
        if abs(per - round(per)) > 1e-9 * per:
            raise ConfigError("grid.pitch", f"period {o.period_d} um is not a whole number of samples")
    try:
        bench = build_bench(cfg, s.delta_x_n[0])
    except ConfigError:
        raise
    except ValueError as exc:
        field_name = "detector.pixel_pitch" if "pixel" in str(exc) or "binning" in str(exc) else "object"
        raise ConfigError(field_name, str(exc)) from None
    _validate_estimators(cfg, bench)


def _validate_estimators(cfg: ExperimentConfig, bench: Bench) -> None:
    ax = bench.detector_axis
    pred = bench.prediction
    window = cfg.analysis.peak_window_pixels * ax.pitch
    for i, est in enumerate(cfg.estimators):
        path = f"estimators[{i}]"
        if est.kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"{path}.kind", f"must be one of {ESTIMATOR_KINDS}, got {est.kind!r}")
        if est.kind in ("fixed_pixel", "autocorrelation", "visibility"):
            if not est.x1_mm:
                raise ConfigError(f"{path}.x1_mm", "needs at least one position")
            for j, x1 in enumerate(est.x1_mm):
                if not _on_axis(ax, x1 * 1e3):
                    raise ConfigError(f"{path}.x1_mm[{j}]", f"{x1} mm is off the detector axis")
                if pred is not None and est.kind != "visibility":
                    sign = -1 if est.kind == "fixed_pixel" else 1
                    for n, xn in zip(pred.orders, pred.x):
                        c = x1 * 1e3 + sign * xn * 1e3
                        if not (_on_axis(ax, c - window / 2) and _on_axis(ax, c + window / 2)):
                            raise ConfigError(
                                f"{path}.x1_mm[{j}]", f"order {n} peak at {c / 1e3:.4f} mm falls off the detector axis"
                            )
        if est.kind == "spatial_average":
            _positive(est.max_lag_mm, f"{path}.max_lag_mm")
            lag = int(round(est.max_lag_mm * 1e3 / ax.pitch))
            if lag < 1 or 2 * lag >= ax.n_points:
                raise ConfigError(f"{path}.max_lag_mm", f"{lag} pixels must lie in [1, {(ax.n_points - 1) // 2}]")
            if pred is not None:
                reach = float(np.max(np.abs(pred.x))) * 1e3 + window / 2
                if reach > lag * ax.pitch:
                    raise ConfigError(
                        f"{path}.max_lag_mm", f"must reach the order {int(np.max(np.abs(pred.orders)))} peak window ({reach / 1e3:.4f} mm)"
                    )
        if est.kind == "near_field_fwhm":
            _positive(est.max_lag_um, f"{path}.max_lag_um")
            lag = int(round(est.max_lag_um / bench.axis.pitch))
            if lag < 2 or 2 * lag >= bench.axis.n_points:
                raise ConfigError(f"{path}.max_lag_um", f"{lag} samples must lie in [2, {(bench.axis.n_points - 1) // 2}]")
        if est.kind == "gamma_oracle":
            from .analysis import ORACLE_MAX_POINTS

            if bench.axis.n_points > ORACLE_MAX_POINTS:
                raise ConfigError("grid.n_points", f"gamma_oracle needs n_points <= {ORACLE_MAX_POINTS}")
            if cfg.detector.pixel_pitch is not None or cfg.detector.shot_noise:
                raise ConfigError("detector", "gamma_oracle needs the native pixel pitch and no shot noise")
            if bench.placement != "test_arm":
                raise ConfigError("object.placement", "gamma_oracle needs the object in the test arm")
            if cfg.optics.t == 0 or cfg.optics.r == 0:
                raise ConfigError("optics.t", "gamma_oracle needs both arms illuminated")


# -- loading -----------------------------------------------------------------
def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return ExperimentConfig.from_yaml(text)


def preset_names() -> list[str]:
    files = resources.files("ghostdiff").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError("<preset>", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return resources.files("ghostdiff").joinpath("presets", f"{name}.yaml").read_text()


def load_preset(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_yaml(preset_text(name))


def resolve_config(spec: str) -> ExperimentConfig:
    """A config file path, or the name of a shipped preset."""
    if Path(spec).is_file():
        return load_config(spec)
    if spec in preset_names():
        return load_preset(spec)
    raise ConfigError("<file>", f"{spec!r} is neither a config file nor a preset")


# -- frame loop ------------------------------------------------------------------
def _far_rows(cfg: ExperimentConfig, ax: GridAxis) -> list[int]:
    rows = {ax.center_index}
    for est in cfg.estimators:
        if est.kind in ("fixed_pixel", "autocorrelation", "visibility"):
            rows.update(_nearest_index(ax, x * 1e3) for x in est.x1_mm)
    return sorted(rows)


def _new_accumulators(cfg: ExperimentConfig, bench: Bench) -> dict:
    ax = bench.detector_axis
    groups = cfg.analysis.n_groups
    accs = {"far": MomentAccumulator(ax, "fixed_pixel", rows=_far_rows(cfg, ax), n_groups=groups)}
    for est in cfg.estimators:
        if est.kind == "spatial_average" and "diff" not in accs:
            lag = int(round(est.max_lag_mm * 1e3 / ax.pitch))
            accs["diff"] = MomentAccumulator(ax, "difference_coordinate", lags=range(-lag, lag + 1), n_groups=groups)
        if est.kind == "gamma_oracle" and "gamma" not in accs:
            accs["gamma"] = GammaAccumulator(bench.axis)
            accs["full"] = MomentAccumulator(ax, "full_matrix", n_groups=groups)
        if est.kind == "near_field_fwhm" and "near" not in accs:
            lag = int(round(est.max_lag_um / bench.axis.pitch))
            accs["near"] = MomentAccumulator(
                bench.axis, "difference_coordinate", lags=range(-lag, lag + 1), n_groups=groups
            )
    return accs


def simulate_block(bench: Bench, master_seed: int, start: int, stop: int, block: int):
    """Near field and detected intensities of frames start..stop-1."""
    near = synthesize_batch(bench.speckle, [child_seed(master_seed, k) for k in range(start, stop)])
    src = apply_object(near, bench.obj) if bench.placement == "both_arms" else near
    a1, a2 = split_beam(src, bench.splitter)
    if bench.placement == "test_arm":
        a1 = apply_object(a1, bench.obj)
    f1 = lens_far_field(a1, bench.optics)
    f2 = lens_far_field(a2, bench.optics)
    i1 = detect(f1, bench.detector, seed=child_seed(master_seed, block, 1))
    i2 = detect(f2, bench.detector, seed=child_seed(master_seed, block, 2))
    return near, i1.values, i2.values


def _run_blocks(cfg: ExperimentConfig, delta_x_n: float, n_frames: int, blocks) -> dict:
    bench = build_bench(cfg, delta_x_n)
    accs = _new_accumulators(cfg, bench)
    size = cfg.source.block_size
    for b in blocks:
        start, stop = b * size, min((b + 1) * size, n_frames)
        near, i1, i2 = simulate_block(bench, cfg.source.master_seed, start, stop, b)
        for key, acc in accs.items():
            if key == "gamma":
                acc.add(near, block=b)
            elif key == "near":
                inten = near.intensity
                acc.accumulate(inten, inten, block=b)
            else:
                acc.accumulate(i1, i2, block=b)
    return accs


def _merge(total: dict | None, part: dict) -> dict:
    if total is None:
        return part
    for key, acc in part.items():
        total[key].merge(acc)
    return total


def accumulate_run(cfg: ExperimentConfig, delta_x_n: float, n_frames: int, workers: int = 1) -> dict:
    """Run the frame loop for one Delta x_n and return the merged accumulators."""
    n_blocks = -(-n_frames // cfg.source.block_size)
    if workers <= 1 or n_blocks == 1:
        return _run_blocks(cfg, delta_x_n, n_frames, range(n_blocks))
    chunks = [c.tolist() for c in np.array_split(np.arange(n_blocks), min(workers, n_blocks)) if c.size]
    total = None
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(_run_blocks, cfg, delta_x_n, n_frames, c) for c in chunks]
        for fut in futures:
            total = _merge(total, fut.result())
    return total


# -- estimator finalization ------------------------------------------------------
def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _tag(x: float, prefix: str) -> str:
    return f"{prefix}{x:g}".replace("+", "")


def _x1_tag(x_mm: float) -> str:
    return f"x1{int(round(x_mm * 1e3)):+d}um"


def peak_report(acc: MomentAccumulator, fn, axis: GridAxis, pred: DiffractionPrediction, window: float,
                center: float = 0.0, direction: int = 1, baseline: str = "median") -> list[dict]:
    """Peak table of the pattern ``fn(means)`` with jackknife errors on heights and ratios."""
    orders = list(pred.orders)

    def table(m):
        entries = integrate_peaks(Pattern(axis, fn(m)), pred, window, center, direction, baseline)
        return np.array([[e.height for e in entries], [e.ratio for e in entries]])

    est, se = acc.jackknife(table)
    h0 = est[0, orders.index(0)]
    if not (np.isfinite(h0) and h0 != 0):
        raise EstimatorError(f"zeroth-order peak height is {h0}; ratios are undefined")
    entries = integrate_peaks(Pattern(axis, fn(acc.means())), pred, window, center, direction, baseline)
    predicted = pred.ratios()
    rows = []
    for k, (n, e) in enumerate(zip(orders, entries)):
        rows.append({
            "order": int(n),
            "position_mm": e.position / 1e3,
            "height": est[0, k],
            "height_stderr": se[0, k],
            "ratio": est[1, k],
            "ratio_stderr": se[1, k],
            "predicted_ratio": predicted[int(n)],
            "relative_error": est[1, k] / predicted[int(n)] - 1,
        })
    return rows


def _write_csv(path: Path, coords, values, stderr, unit: str) -> None:
    stderr = np.full(np.shape(values), np.nan) if stderr is None else stderr
    lines = [f"coordinate_{unit},value,standard_error"]
    for c, v, e in zip(coords, values, stderr):
        lines.append(f"{c!r},{float(v)!r},{float(e)!r}")
    path.write_text("\n".join(lines) + "\n")


def read_pattern_csv(path) -> tuple[GridAxis, np.ndarray, np.ndarray, str]:
    """Inverse of the CSV writer: (axis [um], values, standard errors, coordinate unit)."""
    text = Path(path).read_text().splitlines()
    head = text[0].split(",")
    unit = head[0].removeprefix("coordinate_")
    data = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line.strip()])
    scale = {"mm": 1e3, "um": 1.0}.get(unit)
    if scale is None:
        raise ValueError(f"{path}: unknown coordinate unit {unit!r}")
    x = data[:, 0] * scale
    pitch = float(np.median(np.diff(x)))
    return GridAxis(len(x), pitch, float(x[0])), data[:, 1], data[:, 2], unit


class _RunWriter:
    def __init__(self, root: Path, formats):
        self.root = root
        self.formats = formats
        self.files: list[Path] = []

    def pattern(self, rel: str, axis: GridAxis, values, stderr, unit: str = "mm"):
        if "csv" not in self.formats:
            return None
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        scale = 1e-3 if unit == "mm" else 1.0
        _write_csv(path, [float(c) * scale for c in axis.coordinates], values, stderr, unit)
        self.files.append(path)
        return rel

    def document(self, rel: str, payload) -> str | None:
        if "json" not in self.formats:
            return None
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")
        self.files.append(path)
        return rel


def _finalize(cfg: ExperimentConfig, bench: Bench, accs: dict, tag: str, out: _RunWriter) -> tuple[dict, list]:
    ax = bench.detector_axis
    far = accs["far"]
    pred = bench.prediction
    window = cfg.analysis.peak_window_pixels * ax.pitch
    result: dict = {}
    errors: list = []

    def attempt(kind, x1, fn):
        try:
            return fn()
        except (EstimatorError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            errors.append({"estimator": kind, "x1_mm": x1, "message": str(exc)})
            return None

    rows = far.rows
    for est in cfg.estimators:
        kind = est.kind
        if kind == "mean_intensity":
            def mean_intensity():
                m, se = far.jackknife(lambda mm: np.stack([mm["s1"], mm["s2"]]), min_frames=1)
                entry = {
                    "I1_file": out.pattern(f"{tag}/mean_I1.csv", ax, m[0], se[0]),
                    "I2_file": out.pattern(f"{tag}/mean_I2.csv", ax, m[1], se[1]),
                }
                if pred is not None:
                    peaks = peak_report(far, lambda mm: mm["s1"], ax, pred, window, baseline="quadratic")
                    for p in peaks:
                        p["excess_sigma"] = p["height"] / p["height_stderr"] if p["height_stderr"] else float("nan")
                    entry["peaks"] = peaks
                    side = [p for p in peaks if p["order"] != 0]
                    entry["max_sideband_sigma"] = max(abs(p["excess_sigma"]) for p in side)
                return entry

            result["mean_intensity"] = attempt(kind, None, mean_intensity)

        elif kind in ("fixed_pixel", "autocorrelation"):
            entries = []
            for x1 in est.x1_mm:
                idx = _nearest_index(ax, x1 * 1e3)
                pos = far.row_position(idx)
                x1_um = ax.coordinate(idx)
                if kind == "fixed_pixel" and est.normalize:
                    fn = lambda m, pos=pos: _normalized_row(m, rows, pos, NORMALIZE_FLOOR)
                    name = "ghost_normalized"
                elif kind == "fixed_pixel":
                    fn = lambda m, pos=pos: _cross(m, rows, slice(pos, pos + 1))[0]
                    name = "ghost"
                else:
                    fn = lambda m, pos=pos: _auto(m, rows, slice(pos, pos + 1))[0]
                    name = "autocorrelation"

                def one(fn=fn, name=name, x1_um=x1_um, x1=x1):
                    vals, se = far.jackknife(fn)
                    if not np.any(np.isfinite(vals)):
                        raise EstimatorError("every pixel is masked by the normalization floor")
                    entry = {"x1_mm": x1_um / 1e3, "file": out.pattern(f"{tag}/{name}_{_x1_tag(x1)}.csv", ax, vals, se)}
                    if pred is not None:
                        direction = -1 if kind == "fixed_pixel" else 1
                        entry["peaks"] = peak_report(far, fn, ax, pred, window, x1_um, direction)
                        entry["peaks_file"] = out.document(f"{tag}/{name}_{_x1_tag(x1)}_peaks.json",
                                                           {"peaks": entry["peaks"]})
                    return entry

                e = attempt(kind, x1, one)
                if e is not None:
                    entries.append(e)
            result[kind + ("_normalized" if kind == "fixed_pixel" and est.normalize else "")] = entries

        elif kind == "spatial_average":
            def spatial():
                acc = accs["diff"]
                lags, support = acc.lags, acc.support
                fn = lambda m: _spatial_average(m, lags, support)
                vals, se = acc.jackknife(fn)
                r_axis = GridAxis(len(lags), ax.pitch, lags[0] * ax.pitch)
                entry = {"file": out.pattern(f"{tag}/spatial_average.csv", r_axis, vals, se)}
                if pred is not None:
                    entry["peaks"] = peak_report(acc, fn, r_axis, pred, window)
                    entry["peaks_file"] = out.document(f"{tag}/spatial_average_peaks.json", {"peaks": entry["peaks"]})
                return entry

            result["spatial_average"] = attempt(kind, None, spatial)

        elif kind == "visibility":
            def vis():
                v, se = far.jackknife(lambda m: _visibility(m, rows, NORMALIZE_FLOOR))
                if not np.any(np.isfinite(v)):
                    raise EstimatorError("every pixel is masked by the visibility floor")
                m2 = far.means()["s2"]
                entries = []
                for x1 in est.x1_mm:
                    idx = _nearest_index(ax, x1 * 1e3)
                    pos = far.row_position(idx)
                    row, row_se = v[pos], se[pos]
                    if not np.any(np.isfinite(row)):
                        raise EstimatorError(f"visibility row x1={x1} mm is fully masked")
                    j = int(np.nanargmax(row))
                    entry = {
                        "x1_mm": ax.coordinate(idx) / 1e3,
                        "file": out.pattern(f"{tag}/visibility_{_x1_tag(x1)}.csv", ax, row, row_se),
                        "max_visibility": row[j],
                        "max_stderr": row_se[j],
                        "argmax_mm": ax.coordinate(j) / 1e3,
                        "within_thermal_bound": bool(row[j] <= 0.5 + 3 * row_se[j]),
                    }
                    if pred is not None:
                        peaks = []
                        for n, xn in zip(pred.orders, pred.x):
                            k = _nearest_index(ax, ax.coordinate(idx) - xn * 1e3)
                            if 0 <= k < ax.n_points:
                                peaks.append({"order": int(n), "visibility": row[k], "stderr": row_se[k],
                                              "reference_intensity": m2[k]})
                        entry["peaks"] = peaks
                    entries.append(entry)
                return entries

            result["visibility"] = attempt(kind, None, vis)

        elif kind == "gamma_oracle":
            def oracle():
                full = accs["full"]
                m = full.means()
                gamma = accs["gamma"].result()
                g_mc = _cross(m, full.rows)
                h_mc = _auto(m, full.rows) * (cfg.optics.r / cfg.optics.t) ** 2
                _, g_or = oracle_correlation(gamma, bench.obj, bench.optics, bench.splitter)
                _, h_or = oracle_hbt(gamma, bench.obj, bench.optics, bench.splitter)
                b12 = np.outer(m["s1"], m["s2"])
                b11 = np.outer(m["s1"], m["s1"])
                mask12 = b12 >= ORACLE_MASK * b12.max()
                mask11 = b11 >= ORACLE_MASK * b11.max()
                return {
                    "ghost_relative_rms": relative_rms(g_mc, g_or, mask12),
                    "hbt_relative_rms": relative_rms(h_mc, h_or, mask11),
                    "ghost_unmasked_fraction": float(mask12.mean()),
                    "hbt_unmasked_fraction": float(mask11.mean()),
                }

            result["gamma_oracle"] = attempt(kind, None, oracle)

        elif kind == "near_field_fwhm":
            def near_fwhm():
                acc = accs["near"]
                lags, support = acc.lags, acc.support
                vals, se = acc.jackknife(lambda m: _spatial_average(m, lags, support))
                r_axis = GridAxis(len(lags), bench.axis.pitch, lags[0] * bench.axis.pitch)
                width = fwhm(Pattern(r_axis, vals))
                return {
                    "file": out.pattern(f"{tag}/near_field_correlation.csv", r_axis, vals, se, unit="um"),
                    "fwhm_um": width,
                    "target_um": bench.speckle.delta_x_n,
                }

            result["near_field_fwhm"] = attempt(kind, None, near_fwhm)
    return result, errors


# -- run ---------------------------------------------------------------------------
@dataclass
class RunManifest:
    config_hash: str
    seed: int
    frames: dict
    files: list
    wall_clock_s: float
    workers: int
    errors: list = field(default_factory=list)
    output_dir: str = ""

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def output_directory(cfg: ExperimentConfig, override=None) -> Path:
    """``override`` first, then the environment variable, then the config."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.outputs.directory)


def run_experiment(
    cfg: ExperimentConfig,
    *,
    seed: int | None = None,
    frames: int | None = None,
    full: bool = False,
    workers: int = 1,
    out_dir=None,
    progress=None,
) -> RunManifest:
    """Run every Delta x_n of ``cfg`` and write patterns, summary and manifest.

    ``seed`` and ``frames`` override the config; ``full`` selects
    ``source.full_frames``.  Estimator failures are recorded in the manifest
    and the remaining outputs are still written.
    """
    if seed is not None or frames is not None or full:
        cfg = dataclasses.replace(cfg, source=dataclasses.replace(cfg.source))
        if seed is not None:
            cfg.source.master_seed = int(seed)
        if full:
            cfg.source.n_frames = cfg.source.full_frames
        if frames is not None:
            cfg.source.n_frames = int(frames)
    validate(cfg)
    if workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {workers}")
    t0 = time.perf_counter()
    root = output_directory(cfg, out_dir)
    root.mkdir(parents=True, exist_ok=True)
    out = _RunWriter(root, cfg.outputs.formats)
    (root / "config.yaml").write_text(cfg.to_yaml())
    out.files.append(root / "config.yaml")

    n_frames = cfg.source.n_frames
    runs, errors, frame_counts = [], [], {}
    for dx in cfg.source.delta_x_n:
        tag = _tag(dx, "dxn")
        bench = build_bench(cfg, dx)
        accs = accumulate_run(cfg, dx, n_frames, workers)
        frame_counts[tag] = accs["far"].n_frames
        if progress:
            progress(tag, frame_counts[tag])
        est, errs = _finalize(cfg, bench, accs, tag, out)
        for e in errs:
            e["delta_x_n"] = dx
        errors.extend(errs)
        run = {"delta_x_n": dx, "n_frames": frame_counts[tag], "estimators": est}
        if bench.grating is not None:
            run["grating"] = {
                "period_d": bench.grating.period_d,
                "groove_width_a": cfg.object.groove_width_a,
                "sampled_groove_width_a": bench.grating.groove_width_a,
                "phase_shift_dphi": bench.grating.phase_shift_dphi,
            }
            run["prediction"] = bench.prediction.to_dict()
            out.document(f"{tag}/prediction.json", bench.prediction.to_dict())
        runs.append(run)

    digest = cfg.digest()
    out.document("summary.json", {
        "name": cfg.name,
        "config_hash": digest,
        "seed": cfg.source.master_seed,
        "runs": runs,
        "errors": errors,
    })
    files = [{"path": p.relative_to(root).as_posix(), "sha256": _sha256(p)} for p in out.files]
    manifest = RunManifest(
        digest, cfg.source.master_seed, frame_counts, files, time.perf_counter() - t0, workers, errors, str(root)
    )
    (root / "manifest.json").write_text(
        json.dumps(_clean(manifest.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"
    )
    return manifest


# -- comparison ----------------------------------------------------------------------
@dataclass
class CompareReport:
    tolerance: float
    deviations: dict  # order -> relative deviation of the measured ratio
    missing: list
    passed: bool

    def lines(self) -> list[str]:
        out = [f"order {n:+d}: deviation {d:+.4f}" for n, d in sorted(self.deviations.items())]
        out += [f"order {n:+d}: missing" for n in self.missing]
        out.append(f"{'PASS' if self.passed else 'FAIL'} at tolerance {self.tolerance}")
        return out


def _measured_ratios(pattern_file, prediction: DiffractionPrediction, window_mm, center_mm, direction) -> dict:
    path = Path(pattern_file)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        peaks = data["peaks"] if isinstance(data, dict) else data
        return {int(p["order"]): p["ratio"] for p in peaks}
    axis, values, _, unit = read_pattern_csv(path)
    window = window_mm * 1e3 if window_mm is not None else 5 * axis.pitch
    entries = integrate_peaks(Pattern(axis, values), prediction, window, center_mm * 1e3, direction)
    return {e.order: e.ratio for e in entries}


def compare_with_reference(
    pattern_file,
    prediction_file,
    tolerance: float,
    orders=None,
    window_mm: float | None = None,
    center_mm: float = 0.0,
    direction: int = 1,
) -> CompareReport:
    """Per-order deviation of measured peak ratios from eta_n / eta_0.

    ``pattern_file`` is a peak table (JSON with a ``peaks`` list) or a pattern
    CSV, in which case peaks are integrated around ``center_mm + direction * x_n``.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pred = DiffractionPrediction.from_dict(json.loads(Path(prediction_file).read_text()))
    measured = _measured_ratios(pattern_file, pred, window_mm, center_mm, direction)
    predicted = pred.ratios()
    wanted = sorted(predicted) if orders is None else sorted(int(n) for n in orders)
    deviations, missing = {}, []
    for n in wanted:
        r = measured.get(n)
        if n not in predicted or r is None or not math.isfinite(r):
            missing.append(n)
            continue
        deviations[n] = r / predicted[n] - 1
    passed = not missing and all(abs(d) <= tolerance * (1 + 1e-12) for d in deviations.values())
    return CompareReport(tolerance, deviations, missing, passed)
