import numpy as np
import pytest

from tiltlens.field import ComplexField, Geometry, ShiftVector


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_field(rng, shape=(16, 16), pitch=0.5):
    data = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    return ComplexField(data, pitch, pitch)


def smooth_field(rng, shape=(64, 64), pitch=0.25, wavelength=0.532, band=0.5):
    """Random field whose spectrum lies inside ``band * k0``."""
    k0 = 2 * np.pi / wavelength
    ky = 2 * np.pi * np.fft.fftfreq(shape[0], pitch)[:, None]
    kx = 2 * np.pi * np.fft.fftfreq(shape[1], pitch)[None, :]
    spec = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    spec *= np.hypot(kx, ky) < band * k0
    return ComplexField(np.fft.ifft2(spec), pitch, pitch)


@pytest.fixture
def small_geom():
    return Geometry(sensor_rows=48, sensor_cols=48, axis_distance_um=300.0)


#: Sparse opaque particles: amplitude-sharpness autofocus needs absorbing content.
ABSORBERS = dict(density=0.05, phase_rad=0.0, absorption=0.9, diameter_um=4.0)


def absorber_frame(n=256, tilt_deg=5.0, seed=0, distance_um=800.0):
    """Noiseless single frame of a sparse absorbing specimen, and its geometry."""
    from tiltlens.forward import simulate_measurement, simulation_shape, synth_object

    geom = Geometry(sensor_rows=n, sensor_cols=n, tilt_deg=tilt_deg, axis_distance_um=distance_um)
    shape = simulation_shape(geom, [ShiftVector()])
    obj = synth_object("smear", shape, geom.hires_pitch_um, seed=seed, **ABSORBERS)
    return simulate_measurement(obj, geom), geom


#: One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
