"""Synthetic specimens and the tilted-sensor measurement model.

A frame is formed by translating the specimen, re-expressing its exit
wavefront on a plane parallel to the tilted sensor, propagating it to the
sensor and integrating the intensity over each ``M x M`` block of high
resolution samples.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .errors import DomainError
from .field import ComplexField, Geometry, ShiftVector, fourier_shift
from .propagation import TiltSpec, angular_spectrum_propagate, tilt_spectrum_remap

__all__ = [
    "RawFrame",
    "NoiseModel",
    "BarGroup",
    "bar_layout",
    "synth_object",
    "downsample_intensity",
    "footprint_slices",
    "simulation_shape",
    "linear_scan",
    "pattern_shift",
    "simulate_measurement",
    "simulate_dataset",
    "WrapAroundWarning",
    "illumination_window",
]

# minimum clearance (high-resolution samples) between the sensor footprint
# and the illumination taper, on top of scan extent and oblique walk-off
MIN_GUARD_PX = 64
# default clearance used when sizing grids; light scattered by cell-sized
# features still carries ~0.5% intensity error at 128 samples
DEFAULT_GUARD_PX = 192
# width of the raised-cosine roll-off of the illumination at the grid edges
TAPER_PX = 64


class WrapAroundWarning(UserWarning):
    """The simulation grid is too small to keep periodic wraparound off the sensor."""


@dataclass
class RawFrame:
    """One low-resolution intensity measurement.

    ``nominal_shift`` is the commanded stage travel in the specimen plane.
    ``refined_shift`` is the measured translation of the diffraction pattern
    on the sensor, relative to frame 0; see :func:`pattern_shift`.
    """

    intensity: np.ndarray
    nominal_shift: ShiftVector = field(default_factory=ShiftVector)
    refined_shift: ShiftVector | None = None
    index: int = 0
    wrap_warning: bool = False

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.intensity.ndim != 2:
            raise DomainError("frame intensity must be 2D")
        if not np.all(np.isfinite(self.intensity)) or np.any(self.intensity < 0):
            raise DomainError("frame intensity must be finite and non-negative")

    @property
    def shape(self):
        return self.intensity.shape


@dataclass(frozen=True)
class NoiseModel:
    """Sensor noise: shot noise, read noise, clipping and quantization.

    ``photon_scale`` is the expected photo-electron count at unit intensity
    (0 disables shot noise). ``read_sigma`` is in counts. ``bit_depth`` = 0
    disables quantization; otherwise intensities are rounded onto
    ``2**bit_depth`` levels spanning ``[0, full_scale]``.
    """

    photon_scale: float = 0.0
    read_sigma: float = 0.0
    bit_depth: int = 0
    full_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.photon_scale < 0 or self.read_sigma < 0:
            raise DomainError("noise parameters must be non-negative")
        if self.bit_depth < 0:
            raise DomainError("bit depth must be non-negative")

    @property
    def is_null(self) -> bool:
        return self.photon_scale == 0 and self.read_sigma == 0 and self.bit_depth == 0

    def apply(self, intensity, rng, full_scale_default):
        out = np.asarray(intensity, dtype=np.float64)
        gain = self.photon_scale if self.photon_scale > 0 else 1.0
        if self.photon_scale > 0:
            out = rng.poisson(out * gain).astype(np.float64) / gain
        if self.read_sigma > 0:
            out = out + rng.normal(0.0, self.read_sigma, out.shape) / gain
        out = np.clip(out, 0.0, None)
        if self.bit_depth:
            full = self.full_scale if self.full_scale is not None else full_scale_default
            step = full / (2**self.bit_depth - 1)
            out = np.clip(np.round(out / step), 0, 2**self.bit_depth - 1) * step
        return out


@dataclass(frozen=True)
class BarGroup:
    """A three-bar group; bars run along y and the profile is read along x."""

    linewidth_um: float
    center_x_um: float
    center_y_um: float
    length_um: float

    @property
    def extent_x(self):
        half = 2.5 * self.linewidth_um
        return (self.center_x_um - half, self.center_x_um + half)


def _box_coverage(coords, pitch, lo, hi):
    """Fraction of each sample cell [c - p/2, c + p/2] inside [lo, hi]."""
    a = np.maximum(coords - pitch / 2, lo)
    b = np.minimum(coords + pitch / 2, hi)
    return np.clip(b - a, 0, None) / pitch


def _centred_coords(n, pitch):
    return (np.arange(n) - n // 2) * pitch


def bar_layout(linewidths, shape, pitch_um, spacing_um=None, center_um=(0.0, 0.0)):
    """Place one three-bar group per linewidth, left to right, centred on ``center_um``.

    ``center_um`` is ``(x, y)`` relative to the grid centre.
    """
    linewidths = [float(w) for w in linewidths]
    if not linewidths:
        return []
    widths = [5 * w for w in linewidths]
    gap = spacing_um if spacing_um is not None else max(4 * max(linewidths), 8.0)
    total = sum(widths) + gap * (len(widths) - 1)
    x = center_um[0] - total / 2
    groups = []
    for w, ext in zip(linewidths, widths):
        groups.append(BarGroup(w, x + ext / 2, center_um[1], 5 * w))
        x += ext + gap
    return groups


def _render_bars(groups, shape, pitch, transmission):
    xs = _centred_coords(shape[1], pitch)
    ys = _centred_coords(shape[0], pitch)
    cover = np.zeros(shape)
    for g in groups:
        cy = _box_coverage(ys, pitch, g.center_y_um - g.length_um / 2, g.center_y_um + g.length_um / 2)
        left = g.center_x_um - 2.5 * g.linewidth_um
        for k in range(3):
            lo = left + 2 * k * g.linewidth_um
            cx = _box_coverage(xs, pitch, lo, lo + g.linewidth_um)
            cover += cy[:, None] * cx[None, :]
    cover = np.clip(cover, 0, 1)
    return 1.0 - (1.0 - transmission) * cover


def _render_phase_steps(shape, pitch, step_rad, size_um, spacing_um, levels, extent_um=None, center_um=(0.0, 0.0)):
    xs = _centred_coords(shape[1], pitch)
    ys = _centred_coords(shape[0], pitch)
    phase = np.zeros(shape)
    period = size_um + spacing_um
    ex, ey = extent_um if extent_um is not None else (shape[1] * pitch, shape[0] * pitch)
    nx = max(1, int((ex - spacing_um) // period))
    ny = max(1, int((ey - spacing_um) // period))
    x0 = center_um[0] - (nx * period - spacing_um) / 2
    y0 = center_um[1] - (ny * period - spacing_um) / 2
    k = 0
    for iy in range(ny):
        for ix in range(nx):
            lx, ly = x0 + ix * period, y0 + iy * period
            cx = _box_coverage(xs, pitch, lx, lx + size_um)
            cy = _box_coverage(ys, pitch, ly, ly + size_um)
            phase += step_rad * (1 + k % levels) * cy[:, None] * cx[None, :]
            k += 1
    return np.exp(1j * phase)


def _render_smear(shape, pitch, count, diameter_um, absorption, phase_rad, seed, margin_um):
    rng = np.random.default_rng(seed)
    xs = _centred_coords(shape[1], pitch)
    ys = _centred_coords(shape[0], pitch)
    half_x = shape[1] * pitch / 2 - margin_um
    half_y = shape[0] * pitch / 2 - margin_um
    profile = np.zeros(shape)
    for _ in range(count):
        cx = rng.uniform(-half_x, half_x)
        cy = rng.uniform(-half_y, half_y)
        r0 = 0.5 * diameter_um * rng.uniform(0.8, 1.2)
        w = rng.uniform(0.6, 1.0)
        sx = slice(max(0, np.searchsorted(xs, cx - 2 * r0)), np.searchsorted(xs, cx + 2 * r0))
        sy = slice(max(0, np.searchsorted(ys, cy - 2 * r0)), np.searchsorted(ys, cy + 2 * r0))
        rr = np.hypot(xs[None, sx] - cx, ys[sy, None] - cy)
        # soft-edged disc, roughly the shape of a settled cell
        profile[sy, sx] += w / (1 + np.exp((rr - r0) / (0.15 * r0 + pitch)))
    profile = np.clip(profile, 0, 1.5)
    return (1 - absorption * profile / 1.5) * np.exp(1j * phase_rad * profile / 1.5)


def synth_object(kind: str, shape=(512, 512), pitch_um=1.67 / 3, **params) -> ComplexField:
    """Build a synthetic specimen exit wavefront.

    Parameters
    ----------
    kind : {"bars", "phase_steps", "smear", "uniform"}
        ``bars``: opaque three-bar groups, one per entry of ``linewidths``
        (µm), with the profile along x. ``phase_steps``: unit amplitude
        with square plateaus of phase ``step_rad``. ``smear``: random
        soft-edged absorbing and phase-shifting cells.
    shape : tuple of int
        Grid shape (rows, cols).
    pitch_um : float
        Sample pitch, the same along x and y.
    **params
        Kind-specific options. ``bars``: ``linewidths``, ``spacing_um``,
        ``center_um``, ``transmission``. ``phase_steps``: ``step_rad``,
        ``size_um``, ``spacing_um``, ``levels``, ``extent_um``,
        ``center_um``. ``smear``: ``density`` (covered area fraction) or
        ``count``, ``diameter_um``, ``absorption``, ``phase_rad``, ``seed``,
        ``margin_um``. Omitting the feature parameters (linewidths, step,
        density or count) yields a uniform unit field.
    """
    rows, cols = shape
    if kind == "uniform":
        return ComplexField.uniform(rows, cols, pitch_um)
    if kind == "bars":
        linewidths = params.get("linewidths", ())
        for w in linewidths:
            # a bar period must span more than two samples
            if w < pitch_um:
                raise DomainError(f"linewidth {w} µm is not representable at pitch {pitch_um} µm")
        groups = bar_layout(linewidths, shape, pitch_um, params.get("spacing_um"), params.get("center_um", (0.0, 0.0)))
        if not groups:
            return ComplexField.uniform(rows, cols, pitch_um)
        amp = _render_bars(groups, shape, pitch_um, params.get("transmission", 0.0))
        return ComplexField(amp.astype(np.complex128), pitch_um, pitch_um)
    if kind == "phase_steps":
        step = params.get("step_rad", 0.0)
        if step == 0:
            return ComplexField.uniform(rows, cols, pitch_um)
        data = _render_phase_steps(
            shape, pitch_um, step, params.get("size_um", 20.0), params.get("spacing_um", 20.0),
            params.get("levels", 1), params.get("extent_um"), params.get("center_um", (0.0, 0.0)),
        )
        return ComplexField(data, pitch_um, pitch_um)
    if kind == "smear":
        count = params.get("count", None)
        diameter = params.get("diameter_um", 8.0)
        if count is None:
            area = rows * cols * pitch_um**2
            count = int(params.get("density", 0.0) * area / (np.pi * diameter**2 / 4))
        if count == 0:
            return ComplexField.uniform(rows, cols, pitch_um)
        data = _render_smear(
            shape, pitch_um, count, diameter, params.get("absorption", 0.3),
            params.get("phase_rad", 1.0), params.get("seed", 0), params.get("margin_um", 0.0),
        )
        return ComplexField(data, pitch_um, pitch_um)
    raise DomainError(f"unknown object kind {kind!r}")


def downsample_intensity(hi, M: int) -> np.ndarray:
    """Sum each ``M x M`` block of a high-resolution intensity grid."""
    hi = np.asarray(hi)
    if int(M) != M or M < 1:
        raise DomainError("M must be an integer >= 1")
    r, c = hi.shape
    if r % M or c % M:
        raise DomainError(f"shape {hi.shape} is not divisible by {M}")
    return hi.reshape(r // M, M, c // M, M).sum(axis=(1, 3))


def footprint_slices(grid_shape, geom: Geometry):
    """Row/column slices of the sensor footprint, centred on the grid.

    The footprint's column ``cols_hi // 2`` coincides with the grid's
    central column, which is where the tilt axis sits.
    """
    h, w = geom.hires_shape
    R, C = grid_shape
    if h > R or w > C:
        raise DomainError(f"grid {grid_shape} is smaller than the sensor footprint {(h, w)}")
    r0 = R // 2 - h // 2
    c0 = C // 2 - w // 2
    return slice(r0, r0 + h), slice(c0, c0 + w)


def walkoff_um(geom: Geometry, distance_um=None) -> float:
    """Lateral drift of the illumination over the specimen-sensor gap."""
    d = geom.axis_distance_um if distance_um is None else distance_um
    return abs(d * math.tan(geom.theta))


def simulation_shape(geom: Geometry, shifts, guard_px=DEFAULT_GUARD_PX, taper_px=TAPER_PX, fast=True):
    """Object grid that keeps wraparound and the illumination edge off the sensor.

    Each side gets the scan extent, the oblique walk-off, ``guard_px`` clear
    samples and the ``taper_px`` roll-off.
    """
    p = geom.hires_pitch_um
    h, w = geom.hires_shape
    sx = max((abs(s.dx_um) for s in shifts), default=0.0)
    sy = max((abs(s.dy_um) for s in shifts), default=0.0)
    extra = walkoff_um(geom, geom.axis_distance_um + sx * abs(math.tan(geom.theta)))
    cols = w + 2 * (math.ceil((sx + extra) / p) + guard_px + taper_px)
    rows = h + 2 * (math.ceil(sy / p) + guard_px + taper_px)
    if fast:
        rows, cols = sfft.next_fast_len(rows), sfft.next_fast_len(cols)
    return rows, cols


def linear_scan(n, step_um=40.0, jitter_um=0.0, seed=0, start_um=0.0):
    """Stage positions along x, ``n`` of them, with optional uniform step jitter."""
    rng = np.random.default_rng(seed)
    xs = [start_um]
    for _ in range(n - 1):
        xs.append(xs[-1] + step_um + (rng.uniform(-jitter_um, jitter_um) if jitter_um else 0.0))
    return [ShiftVector(x, 0.0) for x in xs]


def pattern_shift(stage: ShiftVector, geom: Geometry) -> ShiftVector:
    """Translation of the diffraction pattern on the sensor for a stage travel.

    The specimen plane is inclined to the sensor, so the pattern moves by
    the stage travel divided by ``cos(theta)`` along x.
    """
    return ShiftVector(stage.dx_um / math.cos(geom.theta), stage.dy_um)


def _guard_ok(grid_shape, geom, shift, taper_px):
    p = geom.hires_pitch_um
    h, w = geom.hires_shape
    R, C = grid_shape
    extra = walkoff_um(geom, geom.axis_distance_um + abs(shift.dx_um) * abs(math.tan(geom.theta)))
    margin_x = (C - w) / 2 - (abs(shift.dx_um) + extra) / p - taper_px
    margin_y = (R - h) / 2 - abs(shift.dy_um) / p - taper_px
    return min(margin_x, margin_y) >= MIN_GUARD_PX


def illumination_window(shape, taper_px=TAPER_PX):
    """Flat illumination with a raised-cosine roll-off to zero at the grid edges.

    A hard-edged field would diffract from the grid boundary onto the
    sensor; the roll-off keeps the exit wave compactly supported and smooth.
    """
    def ramp(n):
        a = np.ones(n)
        t = min(taper_px, n // 2)
        if t > 0:
            r = 0.5 - 0.5 * np.cos(np.pi * np.arange(t) / t)
            a[:t] = r
            a[n - t:] = r[::-1]
        return a

    return ramp(shape[0])[:, None] * ramp(shape[1])[None, :]


def simulate_measurement(
    obj: ComplexField,
    geom: Geometry,
    shift: ShiftVector = ShiftVector(),
    noise: NoiseModel | None = None,
    index: int = 0,
    rng=None,
    method: str = "exact",
    taper_px: int = TAPER_PX,
) -> RawFrame:
    """Simulate one raw frame for a specimen translated by ``shift``.

    The specimen exit wavefront ``obj`` is sampled at the high-resolution
    pitch ``sensor_pitch / M`` with the tilt axis at its central column and
    the sensor centred beneath it. ``shift`` is the stage travel in the
    specimen plane. The illumination is uniform except for a ``taper_px``
    roll-off at the grid edges, which stays put while the specimen moves.
    """
    if not math.isclose(obj.pitch_x, geom.hires_pitch_um, rel_tol=1e-9) or not math.isclose(
        obj.pitch_y, geom.hires_pitch_um, rel_tol=1e-9
    ):
        raise DomainError(f"object pitch must equal sensor pitch / M = {geom.hires_pitch_um}")
    rs, cs = footprint_slices(obj.shape, geom)
    warn = not _guard_ok(obj.shape, geom, shift, taper_px)
    if warn:
        warnings.warn(
            f"frame {index}: grid {obj.shape} leaves less than {MIN_GUARD_PX} guard samples", WrapAroundWarning
        )
    f = fourier_shift(obj, shift)
    if taper_px:
        f = f.with_data(f.data * illumination_window(obj.shape, taper_px))
    f = tilt_spectrum_remap(f, TiltSpec(geom.tilt_deg), geom.wavelength_um, method=method)
    f = angular_spectrum_propagate(f, geom.axis_distance_um, geom.wavelength_um)
    raw = downsample_intensity(np.abs(f.data[rs, cs]) ** 2, geom.upsample_factor)
    if noise is not None and not noise.is_null:
        if rng is None:
            rng = np.random.default_rng([noise.seed, index])
        raw = noise.apply(raw, rng, full_scale_default=4.0 * geom.upsample_factor**2)
    return RawFrame(raw, nominal_shift=shift, index=index, wrap_warning=warn)


def simulate_dataset(obj, geom, shifts, noise=None, method="exact", taper_px=TAPER_PX):
    """Simulate one frame per stage position; frame ``j`` uses RNG stream ``(seed, j)``."""
    shifts = list(shifts)
    if not shifts:
        raise DomainError("at least one shift is required")
    return [
        simulate_measurement(obj, geom, s, noise, index=j, method=method, taper_px=taper_px)
        for j, s in enumerate(shifts)
    ]
