"""Quality metrics comparing a reconstruction with the ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .field import ComplexField, Geometry, ShiftVector, fourier_shift
from .forward import BarGroup

#: Michelson contrast at or above which a bar group counts as resolved.
RESOLVED_CONTRAST = 0.2
#: Smallest overlap region, per side, that a metric is computed on.
MIN_OVERLAP_PX = 64

REPORT_KEYS = (
    "amplitude_correlation",
    "phase_rmse_rad",
    "bar_contrast",
    "per_iteration_error",
    "wall_clock_s",
)


@dataclass
class Report:
    amplitude_correlation: float
    phase_rmse_rad: float
    bar_contrast: dict = field(default_factory=dict)
    per_iteration_error: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.amplitude_correlation <= 1.0 + 1e-12:
            raise DomainError(f"correlation {self.amplitude_correlation} outside [-1, 1]")
        for w, c in self.bar_contrast.items():
            if not 0.0 <= c <= 1.0:
                raise DomainError(f"contrast {c} for {w} µm outside [0, 1]")

    def resolved(self, linewidth_um) -> bool:
        return self.bar_contrast[linewidth_um] >= RESOLVED_CONTRAST

    def as_dict(self) -> dict:
        return {
            "amplitude_correlation": float(self.amplitude_correlation),
            "phase_rmse_rad": float(self.phase_rmse_rad),
            "bar_contrast": {float(k): float(v) for k, v in self.bar_contrast.items()},
            "per_iteration_error": [float(e) for e in self.per_iteration_error],
            "wall_clock_s": float(self.wall_clock_s),
        }


def amplitude_correlation(a, b) -> float:
    """Normalised cross-correlation (Pearson) of two real arrays."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def phase_rmse(recon, truth, fit_ramp: bool = False, yx=None) -> float:
    """RMS phase difference after removing the best constant phase.

    With ``fit_ramp`` a linear phase ramp is removed as well; ``yx`` then
    gives the sample coordinates for the ramp fit.
    """
    r = np.asarray(recon).ravel()
    t = np.asarray(truth).ravel()
    z = r * np.conj(t)
    if fit_ramp:
        if yx is None:
            raise DomainError("fit_ramp needs sample coordinates")
        y, x = (np.asarray(c, dtype=float).ravel() for c in yx)
        dphi = np.angle(z * np.exp(-1j * np.angle(z.sum())))
        A = np.column_stack([np.ones_like(x), x, y])
        coef, *_ = np.linalg.lstsq(A, dphi, rcond=None)
        z = z * np.exp(-1j * (A @ coef))
    g = np.angle(z.sum())
    d = np.angle(z * np.exp(-1j * g))
    return float(np.sqrt(np.mean(d**2)))


def michelson(profile) -> float:
    p = np.asarray(profile, dtype=float)
    hi, lo = p.max(), p.min()
    if hi + lo <= 0:
        return 0.0
    return float(np.clip((hi - lo) / (hi + lo), 0.0, 1.0))


def bar_profile(image, group: BarGroup, pitch_um: float, origin=None, length_fraction: float = 0.6):
    """Trace across a three-bar group, averaged along the bars.

    The trace runs from the centre of the first bar to the centre of the
    last, sampled on the image grid. ``origin`` is the (row, col) of the
    coordinate origin the group is positioned against; the grid centre by
    default.
    """
    img = np.asarray(image, dtype=float)
    rows, cols = img.shape
    r0, c0 = origin if origin is not None else (rows // 2, cols // 2)
    w = group.linewidth_um
    left = group.center_x_um - 2 * w
    right = group.center_x_um + 2 * w
    half = 0.5 * length_fraction * group.length_um
    ca = int(math.ceil(left / pitch_um + c0 - 1e-9))
    cb = int(math.floor(right / pitch_um + c0 + 1e-9))
    ra = int(round((group.center_y_um - half) / pitch_um + r0))
    rb = int(round((group.center_y_um + half) / pitch_um + r0)) + 1
    if ca < 0 or cb >= cols or ra < 0 or rb > rows or cb <= ca or rb <= ra:
        raise DomainError(f"bar group at {group.center_x_um:.1f} µm lies outside the image")
    return img[ra:rb, ca:cb + 1].mean(axis=0)


def bar_contrast(image, groups, pitch_um: float, origin=None) -> dict:
    """Michelson contrast of every bar group, keyed by linewidth in µm."""
    return {g.linewidth_um: michelson(bar_profile(image, g, pitch_um, origin)) for g in groups}


def compute_metrics(recon: ComplexField, truth: ComplexField, bar_spec=(), mask=None, origin=None,
                    fit_ramp: bool = False, per_iteration_error=(), wall_clock_s: float = 0.0) -> Report:
    """Compare a reconstruction with the ground truth on a common grid.

    Parameters
    ----------
    recon, truth : ComplexField
        Same shape and pitch.
    bar_spec : sequence of BarGroup
        Groups whose contrast is measured on ``|recon|``.
    mask : bool array, optional
        Region the correlation and phase error are computed on; the whole
        grid by default. Its bounding box must be at least 64 x 64.
    origin : (row, col), optional
        Grid position of the coordinate origin used by ``bar_spec``.
    fit_ramp : bool
        Also remove a linear phase ramp before the phase RMSE.
    """
    if recon.shape != truth.shape:
        raise DomainError(f"shapes differ: {recon.shape} vs {truth.shape}")
    if not (math.isclose(recon.pitch_x, truth.pitch_x) and math.isclose(recon.pitch_y, truth.pitch_y)):
        raise DomainError("recon and truth pitches differ")
    if mask is None:
        mask = np.ones(recon.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != recon.shape or not mask.any():
        raise DomainError("no overlap between reconstruction and truth")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows[-1] - rows[0] + 1 < MIN_OVERLAP_PX or cols[-1] - cols[0] + 1 < MIN_OVERLAP_PX:
        raise DomainError(f"overlap region smaller than {MIN_OVERLAP_PX}x{MIN_OVERLAP_PX} samples")
    r = recon.data[mask]
    t = truth.data[mask]
    corr = amplitude_correlation(np.abs(r), np.abs(t))
    yx = np.nonzero(mask) if fit_ramp else None
    rmse = phase_rmse(r, t, fit_ramp, yx)
    contrast = bar_contrast(recon.amplitude, bar_spec, recon.pitch_x, origin) if bar_spec else {}
    return Report(corr, rmse, contrast, list(per_iteration_error), wall_clock_s)


def common_region_center(geom: Geometry, stage_shifts) -> ShiftVector:
    """Specimen coordinates of the centre of the area every frame sees.

    ``stage_shifts`` are the stage travels of the frames, frame 0 first.
    The result is relative to the specimen origin used by the simulator
    (the grid centre), which is where test targets should be placed to be
    covered by the whole scan.
    """
    t = math.tan(geom.theta)
    c = math.cos(geom.theta)
    half = 0.5 * geom.sensor_cols * geom.sensor_pitch_um
    s0 = stage_shifts[0]
    lo, hi = -math.inf, math.inf
    for s in stage_shifts:
        x = (s.dx_um - s0.dx_um) * c
        drift = (geom.axis_distance_um + x * t) * t
        lo = max(lo, -half - x - drift)
        hi = min(hi, half - x - drift)
    if lo >= hi:
        raise DomainError("the frames share no common area")
    ys = [s.dy_um - s0.dy_um for s in stage_shifts]
    yc = -0.5 * (max(ys) + min(ys))
    return ShiftVector(0.5 * (lo + hi) / c - s0.dx_um, yc - s0.dy_um)


def truth_on_recon_grid(obj: ComplexField, stage0: ShiftVector, result):
    """Ground truth resampled onto a reconstruction's object grid.

    The simulator keeps the tilt axis on the central column of ``obj`` and
    the sensor centred on it, while the reconstruction keeps frame 0's view
    with the axis at ``result.axis_col``. Samples that fall outside ``obj``
    are flagged in the returned validity mask.

    Returns
    -------
    truth : ComplexField
    valid : bool array
    origin : (row, col) of the specimen origin on the reconstruction grid,
        fractional when frame 0's stage travel is not a whole sample
    """
    O = result.object
    R, C = obj.shape
    h = result.geometry_used.hires_shape[0]
    row0 = result.footprint_origin[0]
    ri = np.arange(O.shape[0]) - row0 + (R // 2 - h // 2)
    ci = np.arange(O.shape[1]) - result.axis_col + C // 2
    valid = ((ri >= 0) & (ri < R))[:, None] & ((ci >= 0) & (ci < C))[None, :]
    shifted = fourier_shift(obj, stage0).data
    data = shifted[np.ix_(np.clip(ri, 0, R - 1), np.clip(ci, 0, C - 1))]
    # the specimen origin, carried along by frame 0's stage travel
    origin = (row0 + h // 2 + stage0.dy_um / O.pitch_y, result.axis_col + stage0.dx_um / O.pitch_x)
    return ComplexField(data, O.pitch_x, O.pitch_y), valid, origin


def edge_band_px(geom: Geometry) -> int:
    """Width, in high-resolution samples, of the border where the hologram is cut off.

    Light that the sensor samples at its own Nyquist frequency leaves the
    specimen at ``asin(wavelength / (2 pitch))`` and travels sideways by
    ``d`` times the tangent of that angle before reaching the sensor. A
    feature closer than that to the edge of the common area has part of its
    hologram off the sensor in some frame, so its reconstruction is not
    fixed by the data.
    """
    sin_a = min(geom.wavelength_um / (2 * geom.sensor_pitch_um), 0.99)
    reach = geom.axis_distance_um * math.tan(math.asin(sin_a))
    return int(math.ceil(reach / geom.hires_pitch_um))


def overlap_mask(result, erode_px: int | None = None):
    """Samples every frame saw, at least ``erode_px`` away from the area's edge.

    ``erode_px`` defaults to :func:`edge_band_px` of the reconstruction's
    geometry.
    """
    full = result.coverage == len(result.shifts_um)
    if erode_px is None:
        erode_px = edge_band_px(result.geometry_used)
    if erode_px > 0:
        dist = ndimage.distance_transform_edt(np.pad(full, 1))[1:-1, 1:-1]
        full = dist > erode_px
    return full
