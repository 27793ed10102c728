import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_field
from tiltlens.errors import DomainError
from tiltlens.field import (
    ComplexField,
    Geometry,
    ShiftVector,
    field_energy,
    fourier_shift,
    inverse_spectrum,
    spectrum,
    upsample_nearest,
)


def test_field_rejects_bad_input():
    with pytest.raises(DomainError):
        ComplexField(np.ones((1, 4)), 1, 1)
    with pytest.raises(DomainError):
        ComplexField(np.ones((4, 4)), 0, 1)
    with pytest.raises(DomainError):
        ComplexField(np.full((4, 4), np.nan), 1, 1)
    with pytest.raises(DomainError):
        ComplexField(np.ones(4), 1, 1)


def test_geometry_invariants():
    g = Geometry()
    assert g.k0 == pytest.approx(2 * np.pi / 0.532)
    assert g.hires_pitch_um == pytest.approx(1.67 / 3)
    with pytest.raises(DomainError):
        Geometry(tilt_deg=45)
    with pytest.raises(DomainError):
        Geometry(upsample_factor=0)
    with pytest.raises(DomainError):
        Geometry(wavelength_um=-1)


def test_shift_vector_must_be_finite():
    with pytest.raises(DomainError):
        ShiftVector(np.inf, 0)


def test_energy_of_zero_field():
    assert field_energy(ComplexField(np.zeros((4, 4)), 1, 1)) == 0


def test_energy_of_ones():
    assert field_energy(ComplexField(np.ones((2, 2)), 1, 1)) == 4


def test_energy_matches_elementwise_sum(rng):
    f = random_field(rng, (8, 8), 0.7)
    oracle = 0.0
    for v in f.data.ravel():
        oracle += v.real * v.real + v.imag * v.imag
    oracle *= 0.7 * 0.7
    assert field_energy(f) == pytest.approx(oracle, rel=1e-12)


def test_parseval_round_trip(rng):
    f = random_field(rng, (12, 10))
    back = f.with_data(inverse_spectrum(spectrum(f.data)))
    assert field_energy(back) == pytest.approx(field_energy(f), rel=1e-12)


def test_spectrum_is_centred():
    spec = spectrum(np.ones((6, 8)))
    assert np.unravel_index(np.argmax(np.abs(spec)), spec.shape) == (3, 4)


def test_null_shift_is_identity(rng):
    f = random_field(rng)
    out = fourier_shift(f, ShiftVector())
    assert np.allclose(out.data, f.data, rtol=0, atol=1e-12 * np.abs(f.data).max())


def test_integer_shift_is_circular_roll(rng):
    f = random_field(rng, (16, 20), 0.5)
    out = fourier_shift(f, ShiftVector(3 * 0.5, -2 * 0.5))
    expect = np.roll(f.data, (-2, 3), axis=(0, 1))
    assert np.linalg.norm(out.data - expect) <= 1e-10 * np.linalg.norm(expect)


def test_shift_beyond_half_extent_is_rejected(rng):
    f = random_field(rng, (16, 16), 1.0)
    with pytest.raises(DomainError):
        fourier_shift(f, ShiftVector(8.0, 0))


shift_component = st.floats(min_value=-3.5, max_value=3.5, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(dx=shift_component, dy=shift_component, seed=st.integers(0, 2**16))
def test_shift_then_unshift(dx, dy, seed):
    f = random_field(np.random.default_rng(seed), (16, 16), 0.5)
    s = ShiftVector(dx, dy)
    back = fourier_shift(fourier_shift(f, s), -s)
    assert np.linalg.norm(back.data - f.data) <= 1e-10 * np.linalg.norm(f.data)


@settings(max_examples=30, deadline=None)
@given(dx=shift_component, dy=shift_component, seed=st.integers(0, 2**16))
def test_shift_preserves_energy(dx, dy, seed):
    f = random_field(np.random.default_rng(seed), (16, 16), 0.5)
    out = fourier_shift(f, ShiftVector(dx, dy))
    assert field_energy(out) == pytest.approx(field_energy(f), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(a=shift_component, b=shift_component, c=shift_component, d=shift_component, seed=st.integers(0, 2**16))
def test_shift_composition(a, b, c, d, seed):
    f = random_field(np.random.default_rng(seed), (16, 16), 0.5)
    s1, s2 = ShiftVector(a / 2, b / 2), ShiftVector(c / 2, d / 2)
    two = fourier_shift(fourier_shift(f, s1), s2)
    one = fourier_shift(f, s1 + s2)
    assert np.linalg.norm(two.data - one.data) <= 1e-10 * np.linalg.norm(one.data)


def test_upsample_identity_for_m1(rng):
    img = rng.random((3, 5))
    assert np.array_equal(upsample_nearest(img, 1), img)


def test_upsample_single_pixel():
    assert np.array_equal(upsample_nearest(np.array([[5.0]]), 3), np.full((3, 3), 5.0))


def test_upsample_index_map(rng):
    img = rng.random((2, 2))
    out = upsample_nearest(img, 2)
    assert out.shape == (4, 4)
    for r in range(4):
        for c in range(4):
            assert out[r, c] == img[r // 2, c // 2]


def test_upsample_rejects_bad_factor():
    with pytest.raises(DomainError):
        upsample_nearest(np.ones((2, 2)), 0)
