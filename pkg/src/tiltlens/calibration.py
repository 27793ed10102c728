"""Post-measurement calibration: lateral shifts, axis distance and tilt angle."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import DegenerateGeometry, DomainError, NoFocusSignal, PeakAmbiguity
from .field import ComplexField, Geometry, ShiftVector, upsample_nearest
from .forward import RawFrame, pattern_shift
from .propagation import transfer_function

#: Minimum separation of the two tilt-estimation windows, in raw pixels.
MIN_TILT_BASELINE_PX = 50
#: A secondary correlation peak this close to the primary is ambiguous.
AMBIGUITY_RATIO = 0.95


@dataclass(frozen=True)
class FocusSearch:
    """Grid of candidate sensor distances for autofocus."""

    d_min_um: float = 500.0
    d_max_um: float = 1100.0
    step_um: float = 10.0
    refine: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.d_min_um) and math.isfinite(self.d_max_um)):
            raise DomainError("search bounds must be finite")
        if not self.d_min_um < self.d_max_um:
            raise DomainError(f"d_min ({self.d_min_um}) must be below d_max ({self.d_max_um})")
        if not self.step_um > 0:
            raise DomainError(f"step must be positive, got {self.step_um}")

    def distances(self) -> np.ndarray:
        n = int(math.floor((self.d_max_um - self.d_min_um) / self.step_um + 1e-9)) + 1
        return self.d_min_um + self.step_um * np.arange(n)


class FocusDistance(float):
    """Autofocus result: a distance in µm that also carries the search trace.

    ``at_boundary`` is set when the best candidate sits on either end of the
    search grid, which usually means the true distance lies outside it.
    """

    at_boundary: bool
    distances: np.ndarray
    metrics: np.ndarray

    def __new__(cls, value, at_boundary=False, distances=None, metrics=None):
        obj = super().__new__(cls, value)
        obj.at_boundary = bool(at_boundary)
        obj.distances = np.asarray(distances if distances is not None else [value], dtype=float)
        obj.metrics = np.asarray(metrics if metrics is not None else [np.nan], dtype=float)
        return obj


def focus_metric(img) -> float:
    """Tamura coefficient of the gradient magnitude, ``sqrt(std(g) / mean(g))``.

    ``g`` is the central-difference gradient magnitude of ``img``. A flat
    image has no gradient and scores 0. The ratio form makes the metric
    independent of the image scale.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise DomainError("focus_metric expects a 2D image")
    gy, gx = np.gradient(img)
    g = np.hypot(gx, gy)
    mu = g.mean()
    if mu <= 0 or not np.isfinite(mu):
        return 0.0
    return math.sqrt(g.std() / mu)


def _intensity(frame):
    return np.asarray(frame.intensity if isinstance(frame, RawFrame) else frame, dtype=float)


def _focus_stack(intensity, geom: Geometry, distances, regions=(None,), pad_px=None):
    """Focus metric of the back-propagated amplitude at each candidate distance.

    The square-root amplitude is upsampled to the high-resolution pitch and
    given the oblique illumination ramp, so that back-propagation follows
    the tilted beam. It is padded with its mean so that the light walking
    off the frame does not wrap around. The spectrum is restricted to the
    band the raw pixels sample, which drops the block edges of the
    nearest-neighbour upsampling; left in, they dominate the gradient at
    every distance.

    The metric is taken over each of ``regions`` (raw-pixel ``(row0, row1,
    col0, col1)``, ``None`` for the whole frame), trimmed by an eighth of its
    size on each side and moved to where each candidate distance maps it.
    One row of metrics is returned per region.
    """
    M = geom.upsample_factor
    p = geom.hires_pitch_um
    amp = np.sqrt(np.clip(upsample_nearest(intensity, M), 0, None) / M**2)
    h, w = amp.shape
    if amp.std() <= 1e-9 * amp.mean():
        # the metric ignores scale, so the ringing of the band limit on a blank
        # frame would otherwise score as content
        return np.zeros((len(regions), len(distances)))
    t = math.tan(geom.theta)
    dmax = float(np.max(np.abs(distances)))
    walk = int(math.ceil(dmax * abs(t) / p))
    if pad_px is None:
        pad_px = max(32, min(h, w) // 8)
    pr, pc = pad_px, pad_px + walk
    rows = sfft.next_fast_len(h + 2 * pr)
    cols = sfft.next_fast_len(w + 2 * pc)
    r0 = (rows - h) // 2
    c0 = (cols - w) // 2
    field = np.full((rows, cols), amp.mean(), dtype=np.complex128)
    field[r0:r0 + h, c0:c0 + w] = amp
    x = (np.arange(cols) - (c0 + w // 2)) * p
    field *= np.exp(1j * geom.k0 * math.sin(geom.theta) * x)[None, :]
    spec = sfft.fft2(field, workers=-1)
    fy = sfft.fftfreq(rows, p)[:, None]
    fx = sfft.fftfreq(cols, p)[None, :]
    carrier = math.sin(geom.theta) / geom.wavelength_um
    half = 0.5 / geom.sensor_pitch_um
    spec *= (np.abs(fx - carrier) < half) & (np.abs(fy) < half)
    boxes = []
    for region in regions:
        ra, rb, ca, cb = (v * M for v in (region if region is not None else (0, h // M, 0, w // M)))
        # trim the edges, where light that missed the sensor spoils focus
        mr = max((rb - ra) // 8, 4)
        mc = max((cb - ca) // 8, 4)
        boxes.append((r0 + ra + mr, r0 + rb - mr, c0 + ca + mc, c0 + cb - mc))
    spec = spec.astype(np.complex64)
    out = np.empty((len(boxes), len(distances)))
    for j, d in enumerate(distances):
        H = transfer_function((rows, cols), p, p, -d, geom.wavelength_um).astype(np.complex64)
        back = np.abs(sfft.ifft2(spec * H, workers=-1))
        # light reaching the sensor at x' left the specimen at x' - d tan(theta)
        shift = int(round(d * t / p))
        for i, (ya, yb, xa, xb) in enumerate(boxes):
            out[i, j] = focus_metric(back[ya:yb, xa - shift:xb - shift])
    return out


def _parabolic_vertex(y_prev, y0, y_next):
    den = y_prev - 2 * y0 + y_next
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (y_prev - y_next) / den, -0.5, 0.5))


def _pick(ds, metrics, search):
    """Best candidate of one focus stack, parabola-refined when asked."""
    mean = metrics.mean()
    if not np.all(np.isfinite(metrics)) or mean <= 0 or (metrics.max() - metrics.min()) <= 0.05 * mean:
        raise NoFocusSignal("focus metric is flat over the search range; the frame has no focusable content")
    k = int(np.argmax(metrics))
    at_boundary = k == 0 or k == len(ds) - 1
    best = float(ds[k])
    if search.refine and not at_boundary:
        best += search.step_um * _parabolic_vertex(metrics[k - 1], metrics[k], metrics[k + 1])
    return FocusDistance(best, at_boundary, ds, metrics)


def _best_distance(intensity, geom, search, region=None):
    ds = search.distances()
    return _pick(ds, _focus_stack(intensity, geom, ds, [region])[0], search)


def autofocus_distance(frame, geom: Geometry, search: FocusSearch = FocusSearch()) -> FocusDistance:
    """Estimate the specimen-to-sensor distance at the tilt axis from a raw frame.

    The frame is back-propagated by every distance on the search grid and
    the distance with the sharpest amplitude, by ``focus_metric``, wins.
    With ``search.refine`` the peak is refined by a parabola through the
    best sample and its two neighbours.

    The sharpest distance belongs to the specimen area imaged at the frame
    centre. Light reaches the sensor along the tilted beam, so that area
    lies ``d tan(theta)`` before the axis and sits at height
    ``d cos(theta)^2``; the returned value is converted back to ``d``.
    ``at_boundary``, ``distances`` and ``metrics`` describe the raw search.

    Raises
    ------
    NoFocusSignal
        If the metric varies by no more than 5% of its mean over the grid.
    """
    raw = _best_distance(_intensity(frame), geom, search)
    return FocusDistance(raw / math.cos(geom.theta) ** 2, raw.at_boundary, raw.distances, raw.metrics)


def _window(intensity, region):
    r0, r1, c0, c1 = (int(v) for v in region)
    h, w = intensity.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise DomainError(f"window {region} lies outside the {h}x{w} frame")
    return intensity[r0:r1, c0:c1]


def _windows_focus(intensity, regions, geom, search):
    """In-focus heights of the specimen imaged by several windows.

    The whole frame is back-propagated so that light scattered across a
    window border is accounted for; only the metric is restricted. A coarse
    pass over ``search`` is followed by a pass ten times finer around each
    window's peak. Windows should keep clear of the frame edge by a few
    tens of pixels: near the edge the light diffracted off the sensor biases
    the peak.
    """
    for r in regions:
        _window(intensity, r)
    ds = search.distances()
    coarse = [_pick(ds, m, search) for m in _focus_stack(intensity, geom, ds, regions)]
    if not search.refine:
        return coarse
    fine_step = search.step_um / 10
    grids = [None if c.at_boundary else c + fine_step * np.arange(-10, 11) for c in coarse]
    live = [i for i, g in enumerate(grids) if g is not None]
    if not live:
        return coarse
    fine_ds = np.concatenate([grids[i] for i in live])
    metrics = _focus_stack(intensity, geom, fine_ds, [regions[i] for i in live])
    fine_search = FocusSearch(0.0, 1.0, fine_step, True)
    out = list(coarse)
    for row, i in enumerate(live):
        sl = slice(21 * row, 21 * row + 21)
        try:
            f = _pick(fine_ds[sl], metrics[row, sl], fine_search)
        except NoFocusSignal:
            continue
        if not f.at_boundary:
            out[i] = f
    return out


def estimate_tilt_angle(frame, geom: Geometry, region_a, region_b, search: FocusSearch = FocusSearch()) -> float:
    """Estimate the sensor tilt from the in-focus distances of two windows.

    ``region_a`` and ``region_b`` are ``(row0, row1, col0, col1)`` windows
    in raw pixels. Each is autofocused on its own; the tilt is the arctangent
    of their distance difference over the separation of the window centres
    along x'. Positive angles mean the specimen is farther from the sensor
    at larger x'.

    Raises
    ------
    DegenerateGeometry
        If the centres are fewer than 50 raw pixels apart along x', or the
        windows overlap.
    NoFocusSignal
        If either window has no focusable content.
    """
    intensity = _intensity(frame)
    a = [int(v) for v in region_a]
    b = [int(v) for v in region_b]
    ca = 0.5 * (a[2] + a[3])
    cb = 0.5 * (b[2] + b[3])
    L_px = cb - ca
    if abs(L_px) < MIN_TILT_BASELINE_PX:
        raise DegenerateGeometry(
            f"window centres are {abs(L_px):.1f} raw px apart; at least {MIN_TILT_BASELINE_PX} are needed"
        )
    rows_overlap = a[0] < b[1] and b[0] < a[1]
    cols_overlap = a[2] < b[3] and b[2] < a[3]
    if rows_overlap and cols_overlap:
        raise DegenerateGeometry("tilt windows overlap")
    da, db = _windows_focus(intensity, [a, b], geom, search)
    return math.degrees(math.atan((db - da) / (L_px * geom.sensor_pitch_um)))


def _upsampled_dft(data, region, upsample, offsets):
    """Inverse DFT of ``data`` evaluated on a ``region``-sized patch.

    The patch is sampled every ``1/upsample`` pixel and its first sample
    sits at ``offsets`` (in upsampled units), in the manner of matrix
    multiply DFT refinement.
    """
    rows, cols = data.shape
    ky = sfft.ifftshift(np.arange(rows)) - rows // 2
    kx = sfft.ifftshift(np.arange(cols)) - cols // 2
    ry = np.arange(region[0]) - offsets[0]
    rx = np.arange(region[1]) - offsets[1]
    ker_r = np.exp(2j * np.pi / (rows * upsample) * ry[:, None] * ky[None, :])
    ker_c = np.exp(2j * np.pi / (cols * upsample) * kx[:, None] * rx[None, :])
    return ker_r @ data @ ker_c


def _local_maxima(surface):
    """Values and positions of strict 3x3 local maxima on a periodic surface."""
    s = surface
    is_max = np.ones(s.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_max &= s > np.roll(np.roll(s, dy, 0), dx, 1)
    idx = np.argwhere(is_max)
    return s[is_max], idx


def _wrap(idx, n):
    return idx - n if idx > n // 2 else idx


def estimate_shift(frame_a, frame_b, upsample: int = 100, pitch_um: float = 1.67, expected=None,
                   search_radius_px=None, frame_index=None) -> ShiftVector:
    """Shift of ``frame_b`` relative to ``frame_a`` by cross-correlation.

    The correlation peak is located on the pixel grid and then refined to
    ``1 / upsample`` pixel with a local upsampled DFT. Both frames are
    mean-subtracted and the cross-power spectrum is whitened, which keeps
    the peak sharp for diffraction patterns.

    Parameters
    ----------
    frame_a, frame_b : RawFrame or 2D array
    upsample : int
        Sub-pixel refinement factor, at least 1.
    pitch_um : float
        Raw pixel pitch used to express the result in µm.
    expected : ShiftVector, optional
        Prior shift in µm. When given, only peaks within ``search_radius_px``
        of it are considered, which resolves periodic-content ambiguities.
    search_radius_px : float, optional
        Radius of the prior window. Defaults to a quarter of the prior shift
        or 8 px, whichever is larger.

    Raises
    ------
    PeakAmbiguity
        If the second-highest correlation peak reaches 95% of the highest.
    """
    a = _intensity(frame_a)
    b = _intensity(frame_b)
    if a.shape != b.shape:
        raise DomainError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if upsample < 1:
        raise DomainError("upsample must be at least 1")
    rows, cols = a.shape
    Fa = sfft.fft2(a - a.mean())
    Fb = sfft.fft2(b - b.mean())
    cross = Fb * np.conj(Fa)
    mag = np.abs(cross)
    floor = 1e-12 * mag.max() if mag.max() > 0 else 1.0
    cross = cross / np.maximum(mag, floor)
    surface = sfft.ifft2(cross).real
    vals, idx = _local_maxima(surface)
    if vals.size == 0:
        raise PeakAmbiguity("correlation surface has no distinct peak", frame_index)
    shifts_px = np.array([[_wrap(r, rows), _wrap(c, cols)] for r, c in idx], dtype=float)
    if expected is not None:
        ey, ex = expected.dy_um / pitch_um, expected.dx_um / pitch_um
        radius = search_radius_px
        if radius is None:
            radius = max(8.0, 0.25 * math.hypot(ex, ey))
        keep = np.hypot(shifts_px[:, 0] - ey, shifts_px[:, 1] - ex) <= radius
        if not np.any(keep):
            raise PeakAmbiguity(f"no correlation peak within {radius:.1f} px of the expected shift", frame_index)
        vals, shifts_px = vals[keep], shifts_px[keep]
    order = np.argsort(vals)[::-1]
    primary = vals[order[0]]
    if primary <= 0:
        raise PeakAmbiguity("correlation peak is not positive", frame_index)
    if order.size > 1 and vals[order[1]] >= AMBIGUITY_RATIO * primary:
        raise PeakAmbiguity(
            f"secondary correlation peak at {vals[order[1]] / primary:.3f} of the primary", frame_index
        )
    dy, dx = shifts_px[order[0]]
    if upsample > 1:
        up = float(upsample)
        size = int(math.ceil(1.5 * up))
        centre = size // 2
        patch = _upsampled_dft(cross, (size, size), up, (centre - dy * up, centre - dx * up)).real
        pr, pc = np.unravel_index(np.argmax(patch), patch.shape)
        dy += (pr - centre) / up
        dx += (pc - centre) / up
    return ShiftVector(dx * pitch_um, dy * pitch_um)


def register_dataset(frames, upsample: int = 100, geom: Geometry | None = None):
    """Set ``refined_shift`` on every frame from consecutive-pair correlation.

    Frame 0 is the reference at (0, 0); each later frame accumulates the
    shift measured against its predecessor. The nominal stage shifts,
    converted to diffraction-pattern shifts when ``geom`` is given, pick the
    right peak when the correlation has several.

    Returns new ``RawFrame`` objects; the inputs are left untouched.
    """
    frames = list(frames)
    if not frames:
        raise DomainError("no frames to register")
    pitch = geom.sensor_pitch_um if geom is not None else 1.67
    out = [dataclasses.replace(frames[0], refined_shift=ShiftVector())]
    total = ShiftVector()
    for prev, cur in zip(frames[:-1], frames[1:]):
        nominal = cur.nominal_shift - prev.nominal_shift
        if geom is not None:
            nominal = pattern_shift(nominal, geom)
        step = estimate_shift(prev, cur, upsample, pitch, expected=nominal, frame_index=cur.index)
        total = total + step
        out.append(dataclasses.replace(cur, refined_shift=total))
    return out
