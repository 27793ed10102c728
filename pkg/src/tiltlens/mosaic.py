"""Whole-slide assembly of reconstructed tiles."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .calibration import estimate_shift
from .errors import DomainError, PeakAmbiguity
from .field import ComplexField, ShiftVector


class StitchWarning(UserWarning):
    """A tile kept its nominal offset because registration failed."""


def _as_image(tile):
    if isinstance(tile, ComplexField):
        return tile.amplitude
    a = np.asarray(tile)
    if np.iscomplexobj(a):
        a = np.abs(a)
    a = a.astype(float)
    if a.ndim != 2:
        raise DomainError("tiles must be 2D")
    return a


def _as_shift(offset):
    if isinstance(offset, ShiftVector):
        return offset
    dx, dy = offset
    return ShiftVector(float(dx), float(dy))


def _feather(shape, overlap_px):
    """Weights rising linearly from the tile edge over ``overlap_px`` samples."""
    def ramp(n):
        k = np.arange(n)
        edge = np.minimum(k + 1, n - k).astype(float)
        return np.minimum(edge / max(overlap_px, 1), 1.0)

    return np.outer(ramp(shape[0]), ramp(shape[1]))


def _overlap(pos_a, shape_a, pos_b, shape_b):
    """Overlap of two placed tiles as (row0, row1, col0, col1) in mosaic pixels."""
    r0 = max(pos_a[0], pos_b[0])
    r1 = min(pos_a[0] + shape_a[0], pos_b[0] + shape_b[0])
    c0 = max(pos_a[1], pos_b[1])
    c1 = min(pos_a[1] + shape_a[1], pos_b[1] + shape_b[1])
    return r0, r1, c0, c1


def _tukey2d(shape, fraction=0.25):
    from scipy.signal.windows import tukey

    return np.outer(tukey(shape[0], fraction), tukey(shape[1], fraction))


def _residual(img_a, pos_a, img_b, pos_b, min_side, upsample, index):
    """Sub-pixel misplacement of tile b relative to tile a at their nominal positions."""
    r0, r1, c0, c1 = _overlap(pos_a, img_a.shape, pos_b, img_b.shape)
    if r1 - r0 < min_side or c1 - c0 < min_side:
        return None
    ca = img_a[r0 - pos_a[0]:r1 - pos_a[0], c0 - pos_a[1]:c1 - pos_a[1]]
    cb = img_b[r0 - pos_b[0]:r1 - pos_b[0], c0 - pos_b[1]:c1 - pos_b[1]]
    w = _tukey2d(ca.shape)
    ca = (ca - ca.mean()) * w
    cb = (cb - cb.mean()) * w
    # content of b sits at (true - nominal) inside the crop, i.e. shifted by minus that error
    s = estimate_shift(ca, cb, upsample, 1.0, expected=ShiftVector(), frame_index=index,
                       search_radius_px=0.5 * min(ca.shape))
    return -s.dy_um, -s.dx_um


def stitch_grid(recons, overlap_px: int, pitch_um: float | None = None, upsample: int = 20,
                refine: bool = True):
    """Assemble overlapping tiles into one image.

    Parameters
    ----------
    recons : sequence of (tile, offset)
        ``tile`` is a ComplexField (its amplitude is used) or a 2D array;
        ``offset`` is the nominal position of the tile's top-left sample, in
        µm, as a ShiftVector or ``(dx, dy)``.
    overlap_px : int
        Width of the linear feathering ramp at tile edges.
    pitch_um : float, optional
        Sample pitch; taken from the first ComplexField tile when omitted.
    refine : bool
        Correct each tile's offset by cross-correlating its overlap with the
        tiles already placed. A failed correlation keeps the nominal offset
        and emits a :class:`StitchWarning`.

    Returns
    -------
    numpy.ndarray
        The blended mosaic; samples no tile covers are zero.
    """
    recons = list(recons)
    if not recons:
        raise DomainError("no tiles to stitch")
    if pitch_um is None:
        first = next((t for t, _ in recons if isinstance(t, ComplexField)), None)
        if first is None:
            raise DomainError("pitch_um is required for array tiles")
        pitch_um = first.pitch_x
    images = [_as_image(t) for t, _ in recons]
    nominal = [_as_shift(o) for _, o in recons]
    # positions in (row, col) samples, relative to the first tile
    pos = [(s.dy_um / pitch_um - nominal[0].dy_um / pitch_um, s.dx_um / pitch_um - nominal[0].dx_um / pitch_um)
           for s in nominal]
    placed = [pos[0]]
    min_side = max(8, overlap_px // 2)
    for i in range(1, len(images)):
        here = pos[i]
        if refine:
            ipos = (int(round(here[0])), int(round(here[1])))
            best = None
            for j in range(i):
                jpos = (int(round(placed[j][0])), int(round(placed[j][1])))
                r0, r1, c0, c1 = _overlap(jpos, images[j].shape, ipos, images[i].shape)
                area = max(r1 - r0, 0) * max(c1 - c0, 0)
                if best is None or area > best[0]:
                    best = (area, j, jpos)
            if best is not None and best[0] > 0:
                _, j, jpos = best
                # nominal relation between the pair, on top of where j actually landed
                rel = (pos[i][0] - pos[j][0], pos[i][1] - pos[j][1])
                guess = (placed[j][0] + rel[0], placed[j][1] + rel[1])
                gpos = (int(round(guess[0])), int(round(guess[1])))
                try:
                    res = _residual(images[j], jpos, images[i], gpos, min_side, upsample, i)
                except PeakAmbiguity as exc:
                    warnings.warn(f"tile {i}: {exc}; keeping the nominal offset", StitchWarning)
                    res = None
                if res is not None:
                    frac_j = (placed[j][0] - jpos[0], placed[j][1] - jpos[1])
                    here = (gpos[0] + res[0] + frac_j[0], gpos[1] + res[1] + frac_j[1])
                else:
                    here = guess
        placed.append(here)

    rmin = min(p[0] for p in placed)
    cmin = min(p[1] for p in placed)
    placed = [(p[0] - rmin, p[1] - cmin) for p in placed]
    rows = int(math.ceil(max(p[0] + im.shape[0] for p, im in zip(placed, images))))
    cols = int(math.ceil(max(p[1] + im.shape[1] for p, im in zip(placed, images))))
    acc = np.zeros((rows, cols))
    wsum = np.zeros((rows, cols))
    for p, im in zip(placed, images):
        ir, ic = int(math.floor(p[0])), int(math.floor(p[1]))
        fr, fc = p[0] - ir, p[1] - ic
        w = _feather(im.shape, overlap_px)
        if fr or fc:
            im = ndimage.shift(im, (fr, fc), order=3, mode="nearest")
            w = ndimage.shift(w, (fr, fc), order=1, mode="constant", cval=0.0)
        h = min(im.shape[0], rows - ir)
        v = min(im.shape[1], cols - ic)
        acc[ir:ir + h, ic:ic + v] += (w * im)[:h, :v]
        wsum[ir:ir + h, ic:ic + v] += w[:h, :v]
    return np.where(wsum > 0, acc / np.where(wsum > 0, wsum, 1.0), 0.0)
