import numpy as np
import pytest

from tiltlens.errors import DomainError
from tiltlens.field import ComplexField, ShiftVector
from tiltlens.forward import synth_object
from tiltlens.metrics import amplitude_correlation
from tiltlens.mosaic import StitchWarning, stitch_grid

PITCH = 0.5


@pytest.fixture(scope="module")
def scene():
    obj = synth_object("smear", (300, 300), PITCH, seed=21, density=0.4, diameter_um=6.0)
    return obj.amplitude


def test_single_tile_identity(scene):
    tile = ComplexField(scene[:100, :120].astype(complex), PITCH, PITCH)
    out = stitch_grid([(tile, ShiftVector(12.0, -4.0))], overlap_px=16)
    assert np.allclose(out, scene[:100, :120])


def test_two_tiles_with_offset_error(scene):
    img = scene[:160, :260]
    left, right = img[:, :160], img[:, 100:]
    # the right tile's nominal offset is 3 px too far right
    tiles = [(left, ShiftVector(0, 0)), (right, ShiftVector((100 + 3) * PITCH, 0))]
    out = stitch_grid(tiles, overlap_px=30, pitch_um=PITCH)
    assert out.shape[1] in (260, 261)
    assert amplitude_correlation(out[:, :260], img) >= 0.99
    naive = stitch_grid(tiles, overlap_px=30, pitch_um=PITCH, refine=False)
    assert amplitude_correlation(naive[:, :260], img) < amplitude_correlation(out[:, :260], img)


def test_two_by_two_seams(scene, rng):
    size, step = 170, 130
    offsets = [(0, 0), (0, step), (step, 0), (step, step)]
    errors = [(0, 0), (2, -1), (-1, 2), (1, 1)]
    tiles = []
    for (r, c), (er, ec) in zip(offsets, errors):
        tile = scene[r:r + size, c:c + size] + rng.normal(0, 0.001, (size, size))
        tiles.append((tile, ShiftVector((c + ec) * PITCH, (r + er) * PITCH)))
    out = stitch_grid(tiles, overlap_px=40, pitch_um=PITCH)
    truth = scene[:step + size, :step + size]
    band = np.zeros(truth.shape, bool)
    band[step:size, :] = True
    band[:, step:size] = True
    # the outer rim can lose a column to sub-pixel placement; it is no seam
    band[:8] = band[-8:] = band[:, :8] = band[:, -8:] = False
    seam = np.sqrt(np.mean((out[:truth.shape[0], :truth.shape[1]][band] - truth[band]) ** 2))
    assert seam <= 0.02 * (truth.max() - truth.min())


def test_featureless_overlap_falls_back():
    # a blank overlap has no correlation peak to register on
    blank = np.full((128, 128), 2.0)
    tiles = [(blank, (0.0, 0.0)), (blank, (64 * PITCH, 0.0))]
    with pytest.warns(StitchWarning):
        out = stitch_grid(tiles, overlap_px=16, pitch_um=PITCH)
    assert out.shape == (128, 192)


def test_array_tiles_need_pitch(scene):
    with pytest.raises(DomainError):
        stitch_grid([(scene, (0, 0))], overlap_px=8)
    with pytest.raises(DomainError):
        stitch_grid([], overlap_px=8)
