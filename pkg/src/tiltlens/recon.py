"""Pixel-super-resolved multi-height reconstruction for a tilted sensor.

The unknown is the wavefront ``W`` on a plane parallel to the sensor at the
tilt-axis distance ``d``. Translating the specimen by ``x_j`` along the
sensor slides ``W`` by ``x_j`` and changes its height above the sensor by
``tan(theta) * x_j``. Each frame therefore acts as a defocus measurement of
the shifted wavefront, and every update enforces the frame's block-summed
intensity on the propagated field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .errors import DomainError
from .field import ComplexField, Geometry, ShiftVector, upsample_nearest
from .forward import RawFrame, downsample_intensity, walkoff_um
from .propagation import TiltSpec, angular_spectrum_propagate, tilt_spectrum_remap

__all__ = [
    "ReconConfig",
    "ReconResult",
    "equivalent_height",
    "magnitude_project",
    "wavefront_shift",
    "WavefrontGrid",
    "plan_grid",
    "initialize_wavefront",
    "intensity_derivative",
    "tie_phase",
    "reconstruct",
    "recover_object",
]

HEIGHT_MODES = ("radial", "signed_projection")
INIT_MODES = ("tie", "frame0")
#: Damping period of the transport-of-intensity solve, in µm.
TIE_CUTOFF_UM = 140.0
#: Edge roll-off of each frame's weight when blending initial candidates.
TIE_BLEND_TAPER_PX = 16
#: Frame-edge pixels left out of the intensity derivative fit.
ALIGN_MARGIN_PX = 2


@dataclass(frozen=True)
class ReconConfig:
    """Settings for :func:`reconstruct`.

    ``guard_px`` pads the wavefront grid beyond everything the frames see.
    ``frame_order`` is ``"sequential"`` or ``"random:<seed>"``.
    ``flipped_height_back_propagation`` propagates back by ``-d + d_j`` instead of
    ``-(d + d_j)``; it is only useful for comparing the two readings.
    """

    iterations: int = 20
    guard_px: int = 32
    epsilon_rel: float = 1e-9
    height_mode: str = "signed_projection"
    frame_order: str = "sequential"
    record_error: bool = True
    dtype: str = "complex64"
    flipped_height_back_propagation: bool = False
    init_mode: str = "tie"
    tie_cutoff_um: float = TIE_CUTOFF_UM

    def __post_init__(self):
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.guard_px < 0:
            raise DomainError("guard_px must be >= 0")
        if not 0 < self.epsilon_rel < 1:
            raise DomainError("epsilon_rel must lie in (0, 1)")
        if self.height_mode not in HEIGHT_MODES:
            raise DomainError(f"height_mode must be one of {HEIGHT_MODES}")
        if not self.tie_cutoff_um > 0:
            raise DomainError("tie_cutoff_um must be positive")
        if self.init_mode not in INIT_MODES:
            raise DomainError(f"init_mode must be one of {INIT_MODES}")
        if self.frame_order != "sequential" and not self.frame_order.startswith("random"):
            raise DomainError(f"unknown frame order {self.frame_order!r}")

    def order_rng(self):
        if self.frame_order == "sequential":
            return None
        _, _, seed = self.frame_order.partition(":")
        return np.random.default_rng(int(seed) if seed else 0)


@dataclass
class ReconResult:
    tilted_wavefront: ComplexField
    object: ComplexField
    per_iteration_error: list
    geometry_used: Geometry
    axis_col: int
    footprint_origin: tuple
    coverage: np.ndarray
    shifts_um: list = field(default_factory=list)

    @property
    def W(self):
        return self.tilted_wavefront

    @property
    def O(self):
        return self.object


def equivalent_height(shift: ShiftVector, theta_deg: float, mode: str = "signed_projection") -> float:
    """Height change of the specimen above the sensor caused by ``shift``.

    ``radial`` returns ``tan(theta) * |shift|``; ``signed_projection`` uses
    only the x-component, the direction in which the sensor is inclined.
    """
    if not abs(theta_deg) < 45:
        raise DomainError("|theta| must be below 45 degrees")
    t = math.tan(math.radians(theta_deg))
    if mode == "radial":
        return t * math.hypot(shift.dx_um, shift.dy_um)
    if mode == "signed_projection":
        return t * shift.dx_um
    raise DomainError(f"unknown height mode {mode!r}")


def wavefront_shift(pattern: ShiftVector, geom: Geometry) -> ShiftVector:
    """Convert a measured diffraction-pattern shift into a wavefront shift.

    The pattern of a specimen raised by ``tan(theta) * x`` drifts an extra
    ``tan(theta)^2 * x`` along the inclined illumination, so the wavefront
    itself moved by ``cos(theta)^2`` times the measured shift.
    """
    return ShiftVector(pattern.dx_um * math.cos(geom.theta) ** 2, pattern.dy_um)


def _block_sum_replicated(intensity, M):
    if M == 1:
        return intensity
    return upsample_nearest(downsample_intensity(intensity, M), M)


def magnitude_project(psi, raw, M: int, epsilon_rel: float = 1e-9):
    """Scale ``psi`` so each ``M x M`` block's summed intensity equals ``raw``.

    Blocks whose summed intensity is below ``epsilon_rel`` times the mean
    are returned unchanged. Phases are never altered.

    Parameters
    ----------
    psi : ComplexField or ndarray
        High-resolution field at the sensor.
    raw : ndarray
        Measured intensity, ``psi`` dims divided by ``M``.
    """
    data = psi.data if isinstance(psi, ComplexField) else np.asarray(psi)
    raw = np.asarray(raw)
    if data.shape != (raw.shape[0] * M, raw.shape[1] * M):
        raise DomainError(f"field shape {data.shape} does not match raw {raw.shape} x {M}")
    out = _project(data, raw, M, epsilon_rel)
    return psi.with_data(out) if isinstance(psi, ComplexField) else out


def _project(data, raw, M, epsilon_rel, return_error=False):
    inten = data.real**2 + data.imag**2
    U = downsample_intensity(inten, M)
    floor = epsilon_rel * U.mean()
    ok = U >= floor
    ratio = np.where(ok, np.sqrt(raw / np.where(ok, U, 1.0)), 1.0)
    out = data * upsample_nearest(ratio, M).astype(data.real.dtype)
    if return_error:
        return out, float(np.linalg.norm(np.sqrt(U) - np.sqrt(raw)))
    return out


@dataclass(frozen=True)
class WavefrontGrid:
    """Layout of the reconstructed wavefront relative to the sensor footprint."""

    shape: tuple
    row0: int
    col0: int
    footprint: tuple
    pitch: float

    @property
    def axis_col(self):
        return self.col0 + self.footprint[1] // 2

    def footprint_slices(self):
        return (slice(self.row0, self.row0 + self.footprint[0]), slice(self.col0, self.col0 + self.footprint[1]))


def plan_grid(geom: Geometry, shifts, guard_px: int) -> WavefrontGrid:
    """Wavefront grid holding every frame's view plus oblique walk-off and guard.

    ``shifts`` are wavefront shifts relative to frame 0. The frame-0
    footprint is placed so that its central column is the tilt axis.
    """
    p = geom.hires_pitch_um
    h, w = geom.hires_shape
    xs = [s.dx_um for s in shifts] or [0.0]
    ys = [s.dy_um for s in shifts] or [0.0]
    t = math.tan(geom.theta)
    drift = [(geom.axis_distance_um + t * x) * t for x in xs]
    # sensor pixel x' sees the wavefront at x' - x_j - drift_j
    lo = max(max(x + dr for x, dr in zip(xs, drift)), 0.0)
    hi = max(max(-(x + dr) for x, dr in zip(xs, drift)), 0.0)
    left = math.ceil(lo / p) + guard_px
    right = math.ceil(hi / p) + guard_px
    top = math.ceil(max(max(ys), 0.0) / p) + guard_px
    bottom = math.ceil(max(-min(ys), 0.0) / p) + guard_px
    cols = sfft.next_fast_len(w + left + right)
    rows = sfft.next_fast_len(h + top + bottom)
    # spread any padding from next_fast_len evenly
    left += (cols - (w + left + right)) // 2
    top += (rows - (h + top + bottom)) // 2
    return WavefrontGrid((rows, cols), top, left, (h, w), p)


def _carrier(grid: WavefrontGrid, geom: Geometry):
    """Illumination phase ramp in the sensor-parallel frame, zero at the axis."""
    x = (np.arange(grid.shape[1]) - grid.axis_col) * grid.pitch
    return np.exp(1j * geom.k0 * math.sin(geom.theta) * x)[None, :]


def _frame_shifts(frames, geom):
    missing = [f.index for f in frames if f.refined_shift is None]
    if missing:
        raise DomainError(f"frames {missing} have no refined shift; register the dataset first")
    ref = frames[0].refined_shift
    return [wavefront_shift(f.refined_shift - ref, geom) for f in frames]


def _align_to(frames, geom, ref, heights):
    """Frames resampled onto frame ``ref``'s pattern, with validity masks and heights.

    Frame ``j`` shows the pattern of frame ``ref`` displaced by the
    difference of their refined shifts; undoing that displacement leaves
    only the defocus between them.
    """
    p = geom.sensor_pitch_um
    h, w = frames[ref].intensity.shape
    xs = np.arange(w)
    ys = np.arange(h)
    r = frames[ref].refined_shift
    stack, masks, dz = [], [], []
    for j, f in enumerate(frames):
        s = f.refined_shift - r
        sx, sy = s.dx_um / p, s.dy_um / p
        spec = ndimage.fourier_shift(sfft.fft2(f.intensity), (-sy, -sx))
        stack.append(sfft.ifft2(spec).real)
        m = ALIGN_MARGIN_PX
        vx = (xs + sx >= m) & (xs + sx <= w - 1 - m)
        vy = (ys + sy >= m) & (ys + sy <= h - 1 - m)
        masks.append(vy[:, None] & vx[None, :])
        dz.append(heights[j] - heights[ref])
    return np.array(stack), np.array(masks, dtype=float), np.array(dz)


def intensity_derivative(frames, geom: Geometry, ref: int = 0, heights=None) -> np.ndarray:
    """Axial intensity derivative at frame ``ref`` from the whole height series.

    Every frame is moved back onto frame ``ref``'s pattern and a straight
    line in height is fitted per pixel over the frames that cover it.
    Pixels seen by a single frame get zero.
    """
    if heights is None:
        shifts = _frame_shifts(frames, geom)
        heights = [equivalent_height(s, geom.tilt_deg) for s in shifts]
    stack, masks, z = _align_to(frames, geom, ref, heights)
    count = masks.sum(axis=0)
    safe = np.maximum(count, 1)
    zm = (masks * z[:, None, None]).sum(axis=0) / safe
    im = (masks * stack).sum(axis=0) / safe
    dz = z[:, None, None] - zm
    num = (masks * dz * (stack - im)).sum(axis=0)
    den = (masks * dz**2).sum(axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def tie_phase(intensity, dI_dz, pitch_um: float, wavelength_um: float, cutoff_um: float = TIE_CUTOFF_UM):
    """Phase from the transport-of-intensity equation.

    Solves ``div(I grad(phi)) = -k dI/dz`` with the usual pair of inverse
    Laplacians. The inverse Laplacian is rolled off below spatial frequency
    ``2 pi / cutoff_um``, where the height diversity carries no usable
    signal.
    """
    I = np.asarray(intensity, dtype=float)
    I = np.maximum(I, 0.05 * I.mean()) if I.mean() > 0 else np.ones_like(I)
    h, w = I.shape
    # mirror the frame so the spectral derivatives see no wrap-around edge
    I = _mirror(I)
    dI_dz = _mirror(np.asarray(dI_dz, dtype=float))
    k = 2 * np.pi / wavelength_um
    rows, cols = I.shape
    ky = 2 * np.pi * sfft.fftfreq(rows, pitch_um)[:, None]
    kx = 2 * np.pi * sfft.fftfreq(cols, pitch_um)[None, :]
    k2 = kx**2 + ky**2
    kc2 = (2 * np.pi / cutoff_um) ** 2
    # -1/k^2 with a Tikhonov roll-off below the cutoff
    gain = -k2 / (k2**2 + kc2**2)

    def inv_lap(f):
        return sfft.ifft2(sfft.fft2(f) * gain).real

    # spectral derivatives, so that they invert exactly what inv_lap inverts
    def grad(f):
        F = sfft.fft2(f)
        return sfft.ifft2(1j * ky * F).real, sfft.ifft2(1j * kx * F).real

    psi = inv_lap(-k * dI_dz)
    gy, gx = grad(psi)
    div = sfft.ifft2(1j * kx * sfft.fft2(gx / I) + 1j * ky * sfft.fft2(gy / I)).real
    return inv_lap(div)[:h, :w]


def _mirror(a):
    """Even extension to twice the size, periodic without jumps."""
    top = np.concatenate([a, a[:, ::-1]], axis=1)
    return np.concatenate([top, top[::-1]], axis=0)


def _taper(n, m):
    m = min(m, n // 2)
    a = np.ones(n)
    if m > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(m) + 0.5) / m)
        a[:m] = ramp
        a[n - m:] = ramp[::-1]
    return a


def initialize_wavefront(frames, geom: Geometry, grid: WavefrontGrid | None = None, guard_px: int = 32,
                         mode: str = "tie", height_mode: str = "signed_projection",
                         tie_cutoff_um: float = TIE_CUTOFF_UM) -> ComplexField:
    """Starting wavefront for the iterations.

    ``mode="frame0"``: inside the frame-0 footprint the amplitude is the
    square root of the nearest-upsampled intensity divided by ``M^2``;
    elsewhere it is the dataset-mean amplitude. The only phase is the tilted
    illumination ramp, and the field is propagated back by ``d``.

    ``mode="tie"``: every frame gets a sensor-plane phase from the
    transport-of-intensity equation, using the intensity derivative along
    the height series. Each frame's field is then taken back through its own
    shift and distance, and the candidates are blended with tapered weights
    after matching their constant phases. This supplies the slowly varying
    phase that the height diversity encodes only weakly and that the
    iterations would otherwise take long to find.
    """
    if not frames:
        raise DomainError("at least one frame is required")
    if mode not in INIT_MODES:
        raise DomainError(f"init mode must be one of {INIT_MODES}")
    registered = all(f.refined_shift is not None for f in frames)
    if grid is None:
        shifts = _frame_shifts(frames, geom) if registered else [ShiftVector()]
        grid = plan_grid(geom, shifts, guard_px)
    M = geom.upsample_factor
    mean_amp = math.sqrt(np.mean([f.intensity.mean() for f in frames]) / M**2)
    carrier = _carrier(grid, geom)
    rs, cs = grid.footprint_slices()
    d = geom.axis_distance_um
    if mode == "frame0" or len(frames) < 2 or not registered:
        amp = np.full(grid.shape, mean_amp)
        amp[rs, cs] = np.sqrt(upsample_nearest(frames[0].intensity, M) / M**2)
        sensor = ComplexField(amp * carrier, grid.pitch, grid.pitch)
        return angular_spectrum_propagate(sensor, -d, geom.wavelength_um)

    shifts = _frame_shifts(frames, geom)
    heights = [equivalent_height(s, geom.tilt_deg, height_mode) for s in shifts]
    p = grid.pitch
    t = math.tan(geom.theta)
    ky, kx = _kgrid(grid.shape, p)
    kz2 = geom.k0**2 - kx**2 - ky**2
    band = kz2 > 0
    kz = np.sqrt(np.where(band, kz2, 0.0))
    h, w = grid.footprint
    weight = np.outer(_taper(h, TIE_BLEND_TAPER_PX), _taper(w, TIE_BLEND_TAPER_PX))
    acc = np.zeros(grid.shape, dtype=np.complex128)
    wsum = np.zeros(grid.shape)
    for j, f in enumerate(frames):
        slope = intensity_derivative(frames, geom, j, heights)
        phi = tie_phase(f.intensity, slope, geom.sensor_pitch_um, geom.wavelength_um, tie_cutoff_um)
        sensor = np.full(grid.shape, mean_amp, dtype=np.complex128)
        sensor[rs, cs] = np.sqrt(upsample_nearest(f.intensity, M) / M**2) * np.exp(
            1j * ndimage.zoom(phi, M, order=3, mode="nearest")
        )
        s = shifts[j]
        H = np.where(band, np.exp(-1j * ((d + heights[j]) * kz - kx * s.dx_um - ky * s.dy_um)), 0)
        cand = sfft.ifft2(sfft.fft2(sensor * carrier) * H)
        # where frame j's view lands on the wavefront grid
        r0 = grid.row0 - int(round(s.dy_um / p))
        c0 = grid.col0 - int(round((s.dx_um + (d + heights[j]) * t) / p))
        wj = np.zeros(grid.shape)
        R, C = grid.shape
        a0, a1 = max(r0, 0), min(r0 + h, R)
        b0, b1 = max(c0, 0), min(c0 + w, C)
        if a0 >= a1 or b0 >= b1:
            continue
        wj[a0:a1, b0:b1] = weight[a0 - r0:a1 - r0, b0 - c0:b1 - c0]
        overlap = wj * wsum
        if overlap.any():
            ref = np.sum(overlap * acc / np.maximum(wsum, 1e-12) * np.conj(cand))
            cand *= np.exp(1j * np.angle(ref))
        acc += wj * cand
        wsum += wj
    blend = np.where(wsum > 1e-6, acc / np.maximum(wsum, 1e-12), 0)
    covered = wsum > 0.5
    level = np.mean(np.abs(blend[covered])) if covered.any() else mean_amp
    background = level * np.exp(1j * np.angle(acc.sum())) * carrier
    a = np.clip(wsum, 0, 1)
    return ComplexField(a * blend + (1 - a) * background, p, p)


def _kgrid(shape, pitch):
    ky = 2 * np.pi * sfft.fftfreq(shape[0], pitch)[:, None]
    kx = 2 * np.pi * sfft.fftfreq(shape[1], pitch)[None, :]
    return ky, kx


def reconstruct(frames, geom: Geometry, cfg: ReconConfig = ReconConfig(), initial: ComplexField | None = None) -> ReconResult:
    """Recover the tilted wavefront and the specimen wavefront from registered frames.

    For every iteration and every frame ``j`` the wavefront is shifted by
    ``x_j``, propagated by ``d + d_j`` to the sensor, its block intensities
    are replaced by the measured ones, and the change is propagated back
    and shifted back. Shift and propagation are applied together as one
    transfer function on the whole wavefront grid, so the spectrum of ``W``
    is kept between updates. Finally ``W`` is rotated back into the
    specimen plane.
    """
    frames = list(frames)
    if not frames:
        raise DomainError("no frames")
    for f in frames:
        if f.intensity.shape != (geom.sensor_rows, geom.sensor_cols):
            raise DomainError(f"frame {f.index} has shape {f.intensity.shape}, geometry expects "
                              f"{(geom.sensor_rows, geom.sensor_cols)}")
    shifts = _frame_shifts(frames, geom)
    grid = plan_grid(geom, shifts, cfg.guard_px)
    if initial is None:
        W0 = initialize_wavefront(frames, geom, grid, mode=cfg.init_mode, height_mode=cfg.height_mode,
                                 tie_cutoff_um=cfg.tie_cutoff_um)
    elif initial.shape != grid.shape:
        raise DomainError(f"initial wavefront has shape {initial.shape}, expected {grid.shape}")
    else:
        W0 = initial
    M = geom.upsample_factor
    cdtype = np.dtype(cfg.dtype)
    rdtype = np.finfo(cdtype).dtype

    ky, kx = _kgrid(grid.shape, grid.pitch)
    kz2 = geom.k0**2 - kx**2 - ky**2
    band = kz2 > 0
    kz = np.sqrt(np.where(band, kz2, 0.0))
    heights = [equivalent_height(s, geom.tilt_deg, cfg.height_mode) for s in shifts]
    d = geom.axis_distance_um

    def forward_tf(j):
        s = shifts[j]
        phase = (d + heights[j]) * kz - kx * s.dx_um - ky * s.dy_um
        return np.where(band, np.exp(1j * phase), 0).astype(cdtype)

    def backward_tf(j, fwd):
        if not cfg.flipped_height_back_propagation:
            return np.conj(fwd)
        s = shifts[j]
        phase = (-d + heights[j]) * kz + kx * s.dx_um + ky * s.dy_um
        return np.where(band, np.exp(1j * phase), 0).astype(cdtype)

    tfs = [forward_tf(j) for j in range(len(frames))]
    btfs = [backward_tf(j, tfs[j]) for j in range(len(frames))]
    raws = [f.intensity.astype(rdtype) for f in frames]
    rs, cs = grid.footprint_slices()

    spec = sfft.fft2(W0.data.astype(cdtype))
    errors = []
    rng = cfg.order_rng()
    for _ in range(cfg.iterations):
        order = np.arange(len(frames)) if rng is None else rng.permutation(len(frames))
        total = 0.0
        for j in order:
            psi = sfft.ifft2(spec * tfs[j])
            window = psi[rs, cs]
            updated, err = _project(window, raws[j], M, cfg.epsilon_rel, return_error=True)
            total += err
            delta = np.zeros_like(psi)
            delta[rs, cs] = updated - window
            spec += sfft.fft2(delta) * btfs[j]
        if cfg.record_error:
            errors.append(total)

    W = ComplexField(sfft.ifft2(spec).astype(np.complex128), grid.pitch, grid.pitch)
    coverage = np.zeros(grid.shape, dtype=np.int32)
    p = grid.pitch
    t = math.tan(geom.theta)
    for s, h in zip(shifts, heights):
        # sensor pixel x' sees the wavefront at x' - x_j - (d + d_j) tan(theta)
        r0 = grid.row0 - int(round(s.dy_um / p))
        c0 = grid.col0 - int(round((s.dx_um + (d + h) * t) / p))
        coverage[max(r0, 0):r0 + grid.footprint[0], max(c0, 0):c0 + grid.footprint[1]] += 1
    O = recover_object(W, geom, 0.0, axis_col=grid.axis_col)
    return ReconResult(W, O, errors, geom, grid.axis_col, (grid.row0, grid.col0), coverage, shifts)


def recover_object(W: ComplexField, geom: Geometry, extra_defocus_um: float = 0.0, axis_col=None,
                   method: str = "exact") -> ComplexField:
    """Rotate the tilted wavefront back into the specimen plane, then optionally refocus."""
    O = tilt_spectrum_remap(W, TiltSpec(-geom.tilt_deg), geom.wavelength_um, method=method, axis_col=axis_col)
    if extra_defocus_um:
        O = angular_spectrum_propagate(O, extra_defocus_um, geom.wavelength_um)
    return O
