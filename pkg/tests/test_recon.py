import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltlens.errors import DomainError
from tiltlens.field import ComplexField, Geometry, ShiftVector, upsample_nearest
from tiltlens.forward import (
    RawFrame,
    downsample_intensity,
    linear_scan,
    pattern_shift,
    simulate_dataset,
    simulation_shape,
    synth_object,
)
from tiltlens.propagation import angular_spectrum_propagate, tilt_spectrum_remap
from tiltlens.recon import (
    ReconConfig,
    equivalent_height,
    initialize_wavefront,
    magnitude_project,
    plan_grid,
    reconstruct,
    recover_object,
    tie_phase,
    wavefront_shift,
)


def test_height_at_origin():
    for mode in ("radial", "signed_projection"):
        assert equivalent_height(ShiftVector(), 5.0, mode) == 0


def test_height_along_x():
    for mode in ("radial", "signed_projection"):
        assert equivalent_height(ShiftVector(50, 0), 5.0, mode) == pytest.approx(4.374, abs=5e-4)


def test_height_diagonal():
    s = ShiftVector(30, 40)
    assert equivalent_height(s, 5.0, "radial") == pytest.approx(math.tan(math.radians(5)) * 50)
    assert equivalent_height(s, 5.0, "radial") == pytest.approx(4.374, abs=5e-4)
    assert equivalent_height(s, 5.0, "signed_projection") == pytest.approx(2.625, abs=5e-4)


def test_height_rejects_bad_input():
    with pytest.raises(DomainError):
        equivalent_height(ShiftVector(1, 0), 50.0)
    with pytest.raises(DomainError):
        equivalent_height(ShiftVector(1, 0), 5.0, "spiral")


finite = st.floats(-1e3, 1e3)


@given(dx=finite, dy=finite, theta=st.floats(-40, 40))
def test_height_symmetries(dx, dy, theta):
    s = ShiftVector(dx, dy)
    assert equivalent_height(s, theta, "radial") == equivalent_height(-s, theta, "radial")
    assert equivalent_height(s, theta, "signed_projection") == -equivalent_height(-s, theta, "signed_projection")


def test_wavefront_shift_is_cos_squared_of_pattern_shift():
    geom = Geometry()
    stage = ShiftVector(40.0, 3.0)
    w = wavefront_shift(pattern_shift(stage, geom), geom)
    assert w.dx_um == pytest.approx(40.0 * math.cos(geom.theta))
    assert w.dy_um == 3.0


def test_projection_fixed_point(rng):
    psi = rng.normal(size=(12, 9)) + 1j * rng.normal(size=(12, 9))
    raw = downsample_intensity(np.abs(psi) ** 2, 3)
    out = magnitude_project(psi, raw, 3)
    assert np.allclose(out, psi, rtol=0, atol=1e-12 * np.abs(psi).max())


def test_projection_uniform_block():
    psi = np.full((3, 3), 2.0 + 0j)
    out = magnitude_project(psi, np.array([[36.0]]), 3)
    assert np.allclose(np.abs(out), 2.0, rtol=1e-12)


def test_projection_of_uniform_field_to_new_level():
    psi = np.full((6, 6), 1.0 + 1.0j)
    out = magnitude_project(psi, np.full((2, 2), 36.0), 3)
    assert np.allclose(np.abs(out), 2.0)
    assert np.allclose(np.angle(out), np.pi / 4)


def test_projection_accepts_fields():
    f = ComplexField(np.ones((6, 6)), 0.5, 0.5)
    out = magnitude_project(f, np.full((2, 2), 36.0), 3)
    assert isinstance(out, ComplexField)
    assert out.pitch_x == 0.5


def test_projection_shape_mismatch():
    with pytest.raises(DomainError):
        magnitude_project(np.ones((6, 6)), np.ones((3, 3)), 3)


def test_projection_leaves_dark_blocks_alone():
    psi = np.ones((6, 6), complex)
    psi[:3, :3] = 1e-8
    raw = np.full((2, 2), 4.0)
    out = magnitude_project(psi, raw, 3, epsilon_rel=1e-9)
    assert np.array_equal(out[:3, :3], psi[:3, :3])
    assert np.allclose(downsample_intensity(np.abs(out[3:, 3:]) ** 2, 3), 4.0)


def project_case(seed):
    r = np.random.default_rng(seed)
    psi = r.normal(size=(12, 15)) + 1j * r.normal(size=(12, 15))
    raw = r.uniform(0.1, 10.0, size=(4, 5))
    return psi, raw


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_projection_block_sums_equal_raw(seed):
    psi, raw = project_case(seed)
    out = magnitude_project(psi, raw, 3)
    sums = downsample_intensity(np.abs(out) ** 2, 3)
    assert np.allclose(sums, raw, rtol=1e-10, atol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_projection_idempotent(seed):
    psi, raw = project_case(seed)
    once = magnitude_project(psi, raw, 3)
    twice = magnitude_project(once, raw, 3)
    assert np.linalg.norm(twice - once) <= 1e-10 * np.linalg.norm(once)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_projection_keeps_phase(seed):
    psi, raw = project_case(seed)
    out = magnitude_project(psi, raw, 3)
    assert np.allclose(np.angle(out), np.angle(psi), atol=1e-12)


def test_tie_recovers_known_phase():
    n, pitch, wl = 256, 1.67, 0.532
    k = 2 * np.pi / wl
    x = (np.arange(n) - n / 2) * pitch
    X, Y = np.meshgrid(x, x)
    phi = 0.8 * np.exp(-((X - 30) ** 2 + (Y + 20) ** 2) / 40.0**2) - 0.5 * np.exp(-((X + 60) ** 2 + Y**2) / 30.0**2)
    intensity = 1.0 + 0.2 * np.exp(-(X**2 + (Y - 40) ** 2) / 50.0**2)
    gy, gx = np.gradient(phi, pitch)
    div = np.gradient(intensity * gx, pitch, axis=1) + np.gradient(intensity * gy, pitch, axis=0)
    dIdz = -div / k
    est = tie_phase(intensity, dIdz, pitch, wl, cutoff_um=1e4)
    est -= est.mean()
    truth = phi - phi.mean()
    inner = slice(32, -32)
    err = np.sqrt(np.mean((est - truth)[inner, inner] ** 2)) / np.sqrt(np.mean(truth[inner, inner] ** 2))
    assert err < 0.05


def flat_frame(geom, value=9.0):
    f = RawFrame(np.full((geom.sensor_rows, geom.sensor_cols), value))
    f.refined_shift = ShiftVector()
    return f


def test_frame0_init_of_flat_field():
    geom = Geometry(axis_distance_um=0.0, sensor_rows=16, sensor_cols=16, tilt_deg=0.0)
    W = initialize_wavefront([flat_frame(geom)], geom, mode="frame0")
    assert np.allclose(np.abs(W.data), 1.0)


def test_frame0_init_without_distance_is_not_propagated(rng):
    geom = Geometry(axis_distance_um=0.0, sensor_rows=16, sensor_cols=16)
    frame = RawFrame(rng.uniform(1, 20, (16, 16)), refined_shift=ShiftVector())
    grid = plan_grid(geom, [ShiftVector()], 8)
    W = initialize_wavefront([frame], geom, grid, mode="frame0")
    rs, cs = grid.footprint_slices()
    assert np.allclose(np.abs(W.data[rs, cs]) ** 2, upsample_nearest(frame.intensity, 3) / 9, rtol=1e-12)
    outside = np.ones(grid.shape, bool)
    outside[rs, cs] = False
    assert np.allclose(np.abs(W.data[outside]), math.sqrt(frame.intensity.mean() / 9))


def test_frame0_init_energy():
    geom = Geometry(axis_distance_um=300.0, sensor_rows=96, sensor_cols=96, tilt_deg=0.0)
    obj = synth_object("smear", (512, 512), geom.hires_pitch_um, density=0.3, seed=3)
    sensor = angular_spectrum_propagate(obj, 300.0, geom.wavelength_um)
    r0 = 256 - 144
    raw = downsample_intensity(sensor.intensity[r0:r0 + 288, r0:r0 + 288], 3)
    frame = RawFrame(raw, refined_shift=ShiftVector())
    grid = plan_grid(geom, [ShiftVector()], 32)
    W = initialize_wavefront([frame], geom, grid, mode="frame0")
    rs, cs = grid.footprint_slices()
    assert np.sum(np.abs(W.data[rs, cs]) ** 2) == pytest.approx(raw.sum(), rel=0.01)


def test_init_needs_frames():
    with pytest.raises(DomainError):
        initialize_wavefront([], Geometry())


def test_config_validation():
    with pytest.raises(DomainError):
        ReconConfig(iterations=-1)
    with pytest.raises(DomainError):
        ReconConfig(epsilon_rel=0)
    with pytest.raises(DomainError):
        ReconConfig(height_mode="radial_ish")
    with pytest.raises(DomainError):
        ReconConfig(frame_order="backwards")
    with pytest.raises(DomainError):
        ReconConfig(init_mode="oracle")


def test_unregistered_frames_rejected():
    geom = Geometry(sensor_rows=8, sensor_cols=8)
    with pytest.raises(DomainError):
        reconstruct([RawFrame(np.ones((8, 8)))], geom)


def test_frame_shape_must_match_geometry():
    geom = Geometry(sensor_rows=8, sensor_cols=8)
    f = RawFrame(np.ones((8, 9)), refined_shift=ShiftVector())
    with pytest.raises(DomainError):
        reconstruct([f], geom)


def test_recover_object_untilted_is_identity(rng):
    geom = Geometry(tilt_deg=0.0)
    f = ComplexField(rng.normal(size=(16, 16)) + 0j, 0.5, 0.5)
    assert np.array_equal(recover_object(f, geom).data, f.data)


def test_recover_object_inverts_tilt():
    from test_propagation import rel, windowed_smooth_field

    geom = Geometry()
    f = windowed_smooth_field(5, 128, 0.25, 0.2)
    tilted = tilt_spectrum_remap(f, geom.tilt_deg, geom.wavelength_um)
    assert rel(recover_object(tilted, geom).data, f.data) <= 1e-2


def test_recover_object_refocus():
    from test_propagation import windowed_smooth_field

    geom = Geometry(tilt_deg=0.0)
    f = windowed_smooth_field(6, 64, 0.25, 0.2)
    out = recover_object(f, geom, 12.0)
    assert np.allclose(out.data, angular_spectrum_propagate(f, 12.0, geom.wavelength_um).data)


# a small closed loop shared by the tests below
@pytest.fixture(scope="module")
def small_loop():
    geom = Geometry(axis_distance_um=300.0, sensor_rows=64, sensor_cols=64)
    stage = linear_scan(6, 12.0, start_um=-30.0)
    shape = simulation_shape(geom, stage, guard_px=96)
    obj = synth_object("smear", shape, geom.hires_pitch_um, density=0.3, seed=11)
    frames = simulate_dataset(obj, geom, stage)
    for f in frames:
        f.refined_shift = pattern_shift(f.nominal_shift, geom)
    return geom, stage, obj, frames


def test_zero_iterations_returns_initialization(small_loop):
    geom, _, _, frames = small_loop
    cfg = ReconConfig(iterations=0)
    res = reconstruct(frames, geom, cfg)
    W0 = initialize_wavefront(frames, geom, plan_grid(geom, res.shifts_um, cfg.guard_px))
    assert res.per_iteration_error == []
    assert np.allclose(res.W.data, W0.data, atol=1e-5 * np.abs(W0.data).max())
    O = recover_object(res.W, geom, axis_col=res.axis_col)
    assert np.allclose(res.O.data, O.data)


def test_error_falls_tenfold_and_monotonically(small_loop):
    geom, _, _, frames = small_loop
    res = reconstruct(frames, geom, ReconConfig(iterations=20))
    e = np.array(res.per_iteration_error)
    assert len(e) == 20
    assert np.all(np.diff(e) < 0)
    assert e[0] / e[-1] >= 10


def test_sequential_order_is_deterministic(small_loop):
    geom, _, _, frames = small_loop
    a = reconstruct(frames, geom, ReconConfig(iterations=2))
    b = reconstruct(frames, geom, ReconConfig(iterations=2))
    assert np.array_equal(a.W.data, b.W.data)
    assert a.per_iteration_error == b.per_iteration_error


def closed_loop_corr(geom_recon, frames, obj, stage):
    from tiltlens.metrics import compute_metrics, overlap_mask, truth_on_recon_grid

    res = reconstruct(frames, geom_recon, ReconConfig(iterations=5))
    T, valid, _ = truth_on_recon_grid(obj, stage[0], res)
    return compute_metrics(res.O, T, mask=overlap_mask(res, 8) & valid).amplitude_correlation


def test_tilt_sign_convention(small_loop):
    geom, stage, obj, frames = small_loop
    right = closed_loop_corr(geom, frames, obj, stage)
    wrong = closed_loop_corr(geom.replace(tilt_deg=-geom.tilt_deg), frames, obj, stage)
    assert right > wrong + 0.1


def test_one_iteration_reduces_error_single_frame():
    geom = Geometry(tilt_deg=0.0, axis_distance_um=200.0, sensor_rows=48, sensor_cols=48)
    shape = simulation_shape(geom, [ShiftVector()])
    obj = synth_object("smear", shape, geom.hires_pitch_um, density=0.3, seed=2)
    frames = simulate_dataset(obj, geom, [ShiftVector()])
    frames[0].refined_shift = ShiftVector()
    grid = plan_grid(geom, [ShiftVector()], 32)
    start = ComplexField.uniform(*grid.shape, grid.pitch)
    cfg = ReconConfig(iterations=2, guard_px=32, dtype="complex128")
    res = reconstruct(frames, geom, cfg, initial=start)
    # the first entry is measured on the initialization, the second after one update
    assert res.per_iteration_error[1] < res.per_iteration_error[0]


def test_both_back_propagation_readings_run(small_loop):
    geom, _, _, frames = small_loop
    res = reconstruct(frames[:2], geom, ReconConfig(iterations=1, flipped_height_back_propagation=True))
    assert np.all(np.isfinite(res.W.data))
