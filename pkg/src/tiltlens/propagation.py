"""Free-space propagation and tilted-plane spectrum remapping.

Propagation uses the angular spectrum method with evanescent components
zeroed. The tilt remap resamples a field's spectrum under a rotation of the
reference plane about the y-axis, weighted by the Jacobian of the frequency
mapping.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import BandEdgeError, DomainError
from .field import ComplexField, angular_frequencies, inverse_spectrum, spectrum

__all__ = [
    "TiltSpec",
    "transfer_function",
    "angular_spectrum_propagate",
    "jacobian_weight",
    "tilt_spectrum_remap",
    "BAND_EDGE_FRACTION",
]

# Spectral samples whose longitudinal wavenumber falls below this fraction
# of k0 are dropped by the tilt remap.
BAND_EDGE_FRACTION = 0.05


@dataclass(frozen=True)
class TiltSpec:
    """Rotation of the reference plane about the y-axis.

    Positive ``angle_deg`` describes a specimen whose distance to the
    sensor grows towards +x.
    """

    angle_deg: float

    def __post_init__(self):
        if not abs(self.angle_deg) < 45:
            raise DomainError(f"|tilt| must be below 45 degrees, got {self.angle_deg}")

    @property
    def theta(self) -> float:
        return np.deg2rad(self.angle_deg)


def transfer_function(shape, pitch_x, pitch_y, distance_um, wavelength_um, centered=False):
    """Angular-spectrum transfer function ``exp(i * z * kz)``.

    Evanescent frequencies are set to zero. With ``centered=False`` the
    array is laid out in plain FFT order.
    """
    k0 = 2 * np.pi / wavelength_um
    ky, kx = angular_frequencies(shape, pitch_x, pitch_y, centered=centered)
    kz2 = k0**2 - kx**2 - ky**2
    prop = kz2 > 0
    kz = np.sqrt(np.where(prop, kz2, 0.0))
    return np.where(prop, np.exp(1j * distance_um * kz), 0.0)


def angular_spectrum_propagate(f: ComplexField, distance_um: float, wavelength_um: float) -> ComplexField:
    """Propagate a field by ``distance_um`` (negative values back-propagate).

    Parameters
    ----------
    f : ComplexField
        Input field.
    distance_um : float
        Propagation distance along +z in µm.
    wavelength_um : float
        Vacuum wavelength in µm.

    Returns
    -------
    ComplexField
        Field on the parallel plane at ``distance_um``, same grid as ``f``.
    """
    if not wavelength_um > 0:
        raise DomainError("wavelength must be positive")
    if not np.isfinite(distance_um):
        raise DomainError("distance must be finite")
    if distance_um == 0:
        return f.with_data(f.data.copy())
    H = transfer_function(f.shape, f.pitch_x, f.pitch_y, distance_um, wavelength_um)
    return f.with_data(sfft.ifft2(sfft.fft2(f.data) * H))


def jacobian_weight(kx_prime, ky, theta_deg, k0):
    """Magnitude of the frequency-remap Jacobian ``|cos t + (kx'/kz') sin t|``.

    Accepts scalars or broadcastable arrays.

    Raises
    ------
    BandEdgeError
        If any ``(kx', ky)`` lies on or outside the propagating circle.
    """
    kx_prime = np.asarray(kx_prime, dtype=float)
    ky = np.asarray(ky, dtype=float)
    kz2 = k0**2 - kx_prime**2 - ky**2
    if np.any(kz2 <= 0):
        raise BandEdgeError("Jacobian evaluated at or beyond the propagating-band edge")
    t = np.deg2rad(theta_deg)
    w = np.abs(np.cos(t) + kx_prime / np.sqrt(kz2) * np.sin(t))
    return float(w) if w.ndim == 0 else w


def _remap_geometry(shape, pitch_x, pitch_y, theta, k0):
    """Source frequency, Jacobian weight and validity mask on a centred grid."""
    ky, kx = angular_frequencies(shape, pitch_x, pitch_y, centered=True)
    kx, ky = np.broadcast_arrays(kx, ky)
    edge = (BAND_EDGE_FRACTION * k0) ** 2
    kz2 = k0**2 - kx**2 - ky**2
    valid = kz2 > edge
    kz = np.sqrt(np.where(valid, kz2, 1.0))
    src = kx * np.cos(theta) - kz * np.sin(theta)
    src_kz2 = k0**2 - src**2 - ky**2
    nyq = np.pi / pitch_x
    valid &= (src_kz2 > edge) & (src >= -nyq) & (src < nyq)
    weight = np.abs(np.cos(theta) + kx / kz * np.sin(theta))
    return src, ky, weight, valid


def _sample_linear(spec, src, pitch_x):
    """Linearly interpolate each row of a centred spectrum at ``src``."""
    rows, cols = spec.shape
    dk = 2 * np.pi / (cols * pitch_x)
    pos = src / dk + cols // 2
    i0 = np.floor(pos).astype(np.intp)
    frac = pos - i0
    inside = (i0 >= 0) & (i0 + 1 < cols)
    i0c = np.clip(i0, 0, cols - 2)
    r = np.arange(rows)[:, None]
    out = spec[r, i0c] * (1 - frac) + spec[r, i0c + 1] * frac
    # the last bin has no right neighbour; use it as-is when hit exactly
    exact_last = (i0 == cols - 1) & (frac == 0)
    out = np.where(exact_last, spec[r, np.clip(i0, 0, cols - 1)], out)
    return np.where(inside | exact_last, out, 0.0)


def _sample_exact(data, src, ky, pitch_x, pitch_y, axis_col, mask):
    """Evaluate the finite-support DTFT of ``data`` at ``(ky, src)``."""
    import finufft

    rows, cols = data.shape
    out = np.zeros(data.shape, dtype=np.complex128)
    py = (ky * pitch_y)[mask]
    px = (src * pitch_x)[mask]
    vals = finufft.nufft2d2(py, px, np.ascontiguousarray(data, dtype=np.complex128), isign=-1, eps=1e-12)
    # finufft indexes modes from -N//2, i.e. about the central column
    offset = (axis_col - cols // 2) * pitch_x
    out[mask] = vals * np.exp(1j * src[mask] * offset)
    return out


def tilt_spectrum_remap(
    f: ComplexField,
    tilt: TiltSpec | float,
    wavelength_um: float,
    method: str = "exact",
    axis_col: int | None = None,
) -> ComplexField:
    """Re-express a field on a plane rotated about the y-axis.

    The output spectrum at ``(kx, ky)`` is the input spectrum sampled at
    ``kx cos(t) - kz sin(t)``, multiplied by ``|cos(t) + (kx / kz) sin(t)|``
    with ``kz = sqrt(k0^2 - kx^2 - ky^2)``. Remapping by ``t`` and then by
    ``-t`` returns the original field on the band both passes keep.

    Parameters
    ----------
    f : ComplexField
        Field on the source plane.
    tilt : TiltSpec or float
        Rotation angle (degrees when given as a float).
    wavelength_um : float
        Vacuum wavelength.
    method : {"exact", "linear"}
        ``"exact"`` evaluates the finite-support Fourier transform at the
        off-grid source frequencies with a non-uniform FFT. ``"linear"``
        interpolates the sampled spectrum, which is cheaper but tapers
        fields that fill the grid.
    axis_col : int, optional
        Column of the rotation axis. Defaults to ``cols // 2``.
    """
    if not isinstance(tilt, TiltSpec):
        tilt = TiltSpec(float(tilt))
    if tilt.angle_deg == 0:
        return f.with_data(f.data.copy())
    if not wavelength_um > 0:
        raise DomainError("wavelength must be positive")
    k0 = 2 * np.pi / wavelength_um
    if axis_col is None:
        axis_col = f.cols // 2
    src, ky, weight, valid = _remap_geometry(f.shape, f.pitch_x, f.pitch_y, tilt.theta, k0)
    offset = (axis_col - f.cols // 2) * f.pitch_x
    if method == "exact":
        sampled = _sample_exact(f.data, src, ky, f.pitch_x, f.pitch_y, axis_col, valid)
    elif method == "linear":
        shifted = f.data
        if offset:
            # move the axis to the central column before resampling
            kx = angular_frequencies(f.shape, f.pitch_x, f.pitch_y)[1]
            sampled = _sample_linear(spectrum(shifted) * np.exp(1j * kx * offset), src, f.pitch_x)
        else:
            sampled = _sample_linear(spectrum(shifted), src, f.pitch_x)
    else:
        raise DomainError(f"unknown remap method {method!r}")
    out_spec = np.where(valid, sampled * weight, 0.0)
    if offset:
        kx = angular_frequencies(f.shape, f.pitch_x, f.pitch_y)[1]
        out_spec = out_spec * np.exp(-1j * kx * offset)
    return f.with_data(inverse_spectrum(out_spec))
