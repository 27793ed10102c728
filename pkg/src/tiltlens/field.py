"""Complex field container, acquisition geometry and Fourier-domain helpers.

All lengths are in micrometres and all angular frequencies in rad/µm.
Spectra returned by :func:`spectrum` are centred: DC sits at index
``(rows // 2, cols // 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from .errors import DomainError

__all__ = [
    "ComplexField",
    "Geometry",
    "ShiftVector",
    "field_energy",
    "fourier_shift",
    "upsample_nearest",
    "spectrum",
    "inverse_spectrum",
    "angular_frequencies",
]


@dataclass(frozen=True, eq=False)
class ComplexField:
    """A sampled complex amplitude on a regular grid.

    Parameters
    ----------
    data : ndarray
        2D complex array, rows along y and columns along x.
    pitch_x, pitch_y : float
        Sample spacing in µm.
    """

    data: np.ndarray
    pitch_x: float
    pitch_y: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DomainError(f"field data must be 2D, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise DomainError(f"field needs at least 2x2 samples, got {data.shape}")
        if not (self.pitch_x > 0 and self.pitch_y > 0):
            raise DomainError("pitch must be positive")
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        if not np.all(np.isfinite(data)):
            raise DomainError("field contains NaN or Inf")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pitch_x", float(self.pitch_x))
        object.__setattr__(self, "pitch_y", float(self.pitch_y))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.data)

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def with_data(self, data) -> "ComplexField":
        """Same pitch, new samples."""
        return ComplexField(data, self.pitch_x, self.pitch_y)

    @classmethod
    def uniform(cls, rows, cols, pitch, value=1.0) -> "ComplexField":
        return cls(np.full((rows, cols), value, dtype=np.complex128), pitch, pitch)


@dataclass(frozen=True)
class ShiftVector:
    """Lateral translation in µm."""

    dx_um: float = 0.0
    dy_um: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.dx_um) and np.isfinite(self.dy_um)):
            raise DomainError("shift components must be finite")
        object.__setattr__(self, "dx_um", float(self.dx_um))
        object.__setattr__(self, "dy_um", float(self.dy_um))

    def __add__(self, other):
        return ShiftVector(self.dx_um + other.dx_um, self.dy_um + other.dy_um)

    def __sub__(self, other):
        return ShiftVector(self.dx_um - other.dx_um, self.dy_um - other.dy_um)

    def __neg__(self):
        return ShiftVector(-self.dx_um, -self.dy_um)

    def __mul__(self, factor):
        return ShiftVector(self.dx_um * factor, self.dy_um * factor)

    __rmul__ = __mul__

    @property
    def norm(self) -> float:
        return float(np.hypot(self.dx_um, self.dy_um))

    def as_tuple(self) -> tuple[float, float]:
        return (self.dx_um, self.dy_um)


@dataclass(frozen=True)
class Geometry:
    """Acquisition parameters of the tilted-sensor microscope.

    ``axis_distance_um`` is the specimen-to-sensor distance measured at the
    tilt axis. A positive ``tilt_deg`` means the specimen gets farther from
    the sensor towards +x.
    """

    wavelength_um: float = 0.532
    tilt_deg: float = 5.0
    axis_distance_um: float = 800.0
    sensor_pitch_um: float = 1.67
    upsample_factor: int = 3
    sensor_rows: int = 128
    sensor_cols: int = 128

    def __post_init__(self):
        if not self.wavelength_um > 0:
            raise DomainError("wavelength must be positive")
        if not self.sensor_pitch_um > 0:
            raise DomainError("sensor pitch must be positive")
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise DomainError("upsample factor must be an integer >= 1")
        if not abs(self.tilt_deg) < 45:
            raise DomainError("|tilt| must be below 45 degrees")
        if self.sensor_rows < 1 or self.sensor_cols < 1:
            raise DomainError("sensor dimensions must be positive")
        object.__setattr__(self, "upsample_factor", int(self.upsample_factor))

    @property
    def k0(self) -> float:
        return 2 * np.pi / self.wavelength_um

    @property
    def hires_pitch_um(self) -> float:
        return self.sensor_pitch_um / self.upsample_factor

    @property
    def hires_shape(self) -> tuple[int, int]:
        m = self.upsample_factor
        return (self.sensor_rows * m, self.sensor_cols * m)

    @property
    def theta(self) -> float:
        return np.deg2rad(self.tilt_deg)

    def replace(self, **changes) -> "Geometry":
        return replace(self, **changes)


def field_energy(f: ComplexField) -> float:
    """Return sum(|f|^2) * pitch_x * pitch_y."""
    return float(np.sum(np.abs(f.data) ** 2) * f.pitch_x * f.pitch_y)


def angular_frequencies(shape, pitch_x, pitch_y, centered=True):
    """Angular spatial frequencies (rad/µm) for a grid, as ``(ky, kx)`` columns/rows.

    Returned arrays broadcast against a ``shape`` grid: ``ky`` has shape
    ``(rows, 1)`` and ``kx`` has shape ``(1, cols)``.
    """
    rows, cols = shape
    ky = 2 * np.pi * sfft.fftfreq(rows, pitch_y)
    kx = 2 * np.pi * sfft.fftfreq(cols, pitch_x)
    if centered:
        ky = sfft.fftshift(ky)
        kx = sfft.fftshift(kx)
    return ky[:, None], kx[None, :]


def spectrum(data: np.ndarray) -> np.ndarray:
    """Centred unitary-free 2D DFT (DC moved to the grid centre)."""
    return sfft.fftshift(sfft.fft2(sfft.ifftshift(data)))


def inverse_spectrum(spec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`spectrum`."""
    return sfft.fftshift(sfft.ifft2(sfft.ifftshift(spec)))


def fourier_shift(f: ComplexField, s: ShiftVector) -> ComplexField:
    """Translate a field by ``s`` with a Fourier-domain phase ramp.

    The output is ``f(x - dx, y - dy)`` with periodic boundaries, so
    content leaving one edge re-enters on the opposite edge.

    Raises
    ------
    DomainError
        If a shift component reaches half the field extent.
    """
    if abs(s.dx_um) >= f.cols * f.pitch_x / 2 or abs(s.dy_um) >= f.rows * f.pitch_y / 2:
        raise DomainError(f"shift {s.as_tuple()} exceeds half the field extent")
    if s.dx_um == 0 and s.dy_um == 0:
        return f.with_data(f.data.copy())
    ky, kx = angular_frequencies(f.shape, f.pitch_x, f.pitch_y, centered=False)
    ramp = np.exp(-1j * (kx * s.dx_um)) * np.exp(-1j * (ky * s.dy_um))
    return f.with_data(sfft.ifft2(sfft.fft2(f.data) * ramp))


def upsample_nearest(img, M: int) -> np.ndarray:
    """Replicate every pixel into an ``M x M`` block."""
    if int(M) != M or M < 1:
        raise DomainError(f"upsample factor must be an integer >= 1, got {M}")
    img = np.asarray(img)
    if M == 1:
        return img.copy()
    return np.repeat(np.repeat(img, M, axis=0), M, axis=1)
