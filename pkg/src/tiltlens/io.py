"""Dataset and field files.

A dataset directory holds one 16-bit binary PGM per frame and a UTF-8
``manifest.txt`` of ``key = value`` lines under a version line. Stored
pixel values are integers; the manifest's ``intensity_scale`` converts them
back to linear intensity, so saving quantizes intensities to 16 bits and
a saved dataset reloads bit for bit.

A field is written as two raw little-endian float32 planes (amplitude and
phase, row-major), a text sidecar with the dimensions and pitch, and two
16-bit PGM previews.
"""
from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError
from .field import ComplexField, Geometry, ShiftVector
from .forward import RawFrame

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "tiltlens-dataset"
FORMAT_VERSION = 1
FIELD_MAGIC = "tiltlens-field"
PGM_MAX = 65535

_GEOMETRY_KEYS = {
    "wavelength_um": float,
    "tilt_deg": float,
    "axis_distance_um": float,
    "sensor_pitch_um": float,
    "upsample_factor": int,
    "sensor_rows": int,
    "sensor_cols": int,
}


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _write_or_raise(path, data: bytes):
    try:
        atomic_write(path, data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


# ---------------------------------------------------------------- PGM

def encode_pgm(values) -> bytes:
    """16-bit binary PGM (P5) bytes, big-endian samples."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError("PGM images are 2D")
    if v.size and (v.min() < 0 or v.max() > PGM_MAX):
        raise ValueError("PGM samples must lie in [0, 65535]")
    rows, cols = v.shape
    header = f"P5\n{cols} {rows}\n{PGM_MAX}\n".encode("ascii")
    return header + v.astype(">u2").tobytes()


def decode_pgm(data: bytes, name="<pgm>") -> np.ndarray:
    """Parse a binary PGM into a ``uint16`` array."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise IntegrityError(f"{name}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # the single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise IntegrityError(f"{name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IntegrityError(f"{name}: malformed PGM header") from exc
    if cols <= 0 or rows <= 0 or not 0 < maxval <= PGM_MAX:
        raise IntegrityError(f"{name}: invalid PGM dimensions or maxval")
    width = 2 if maxval > 255 else 1
    need = rows * cols * width
    body = data[pos:pos + need]
    if len(body) != need:
        raise IntegrityError(f"{name}: expected {need} bytes of pixel data, found {len(body)}")
    dtype = ">u2" if width == 2 else "u1"
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols).astype(np.uint16)


# ---------------------------------------------------------------- datasets

def intensity_scale_for(frames) -> float:
    """Scale that maps the brightest pixel of the dataset to 65535."""
    peak = max(float(f.intensity.max()) for f in frames)
    return peak / PGM_MAX if peak > 0 else 1.0


def quantize_intensity(intensity, scale: float) -> np.ndarray:
    """Stored 16-bit counts for a linear intensity at the given scale."""
    q = np.rint(np.asarray(intensity, dtype=float) / scale)
    return np.clip(q, 0, PGM_MAX).astype(np.uint16)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(frames, geom: Geometry, directory, intensity_scale: float | None = None) -> Path:
    """Write frames and geometry to ``directory``; returns the manifest path.

    Intensities are stored as ``round(I / intensity_scale)`` in 16 bits;
    by default the scale puts the dataset's brightest pixel at 65535.
    """
    frames = list(frames)
    if not frames:
        raise IntegrityError("a dataset needs at least one frame")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scale = intensity_scale if intensity_scale is not None else intensity_scale_for(frames)
    if not (math.isfinite(scale) and scale > 0):
        raise IntegrityError(f"intensity scale must be positive, got {scale}")
    indices = [f.index for f in frames]
    if sorted(indices) != list(range(len(frames))):
        raise IntegrityError(f"frame indices must be unique and run from 0: {indices}")
    lines = [
        f"{MANIFEST_MAGIC} {FORMAT_VERSION}",
        *(f"{k} = {_fmt(getattr(geom, k)) if t is float else int(getattr(geom, k))}"
          for k, t in _GEOMETRY_KEYS.items()),
        f"intensity_scale = {_fmt(scale)}",
        f"frame_count = {len(frames)}",
    ]
    for f in sorted(frames, key=lambda f: f.index):
        if f.intensity.shape != (geom.sensor_rows, geom.sensor_cols):
            raise IntegrityError(f"frame {f.index} has shape {f.intensity.shape}, geometry says "
                                 f"{(geom.sensor_rows, geom.sensor_cols)}")
        name = f"frame_{f.index:03d}.pgm"
        _write_or_raise(directory / name, encode_pgm(quantize_intensity(f.intensity, scale)))
        entry = f"frame.{f.index} = {name} {_fmt(f.nominal_shift.dx_um)} {_fmt(f.nominal_shift.dy_um)}"
        if f.refined_shift is not None:
            entry += f" {_fmt(f.refined_shift.dx_um)} {_fmt(f.refined_shift.dy_um)}"
        lines.append(entry)
    manifest = directory / MANIFEST_NAME
    _write_or_raise(manifest, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest


def _parse_float(text, line, key):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line=line, field=key) from None
    if not math.isfinite(v):
        raise ParseError(f"not finite: {text!r}", line=line, field=key)
    return v


def _parse_int(text, line, key):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"not an integer: {text!r}", line=line, field=key) from None


def read_manifest(directory):
    """Parse a manifest into ``(geometry, scale, entries)`` without reading frames.

    ``entries`` is a list of ``(index, file name, nominal, refined or None)``.
    """
    path = Path(directory) / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise IntegrityError(f"missing manifest {path}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"manifest is not UTF-8: {exc}", line=None) from None
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty manifest", line=1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != MANIFEST_MAGIC:
        raise ParseError(f"first line must be '{MANIFEST_MAGIC} <version>'", line=1)
    version = _parse_int(head[1], 1, "version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", line=1, field="version")
    values = {}
    entries = {}
    for no, raw in enumerate(lines[1:], start=2):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=no)
        if key.startswith("frame."):
            index = _parse_int(key[len("frame."):], no, key)
            parts = value.split()
            if len(parts) not in (3, 5):
                raise ParseError("frame entry needs a file name, dx, dy and optionally refined dx, dy",
                                 line=no, field=key)
            if index in entries:
                raise IntegrityError(f"duplicate frame index {index} (line {no})")
            nominal = ShiftVector(_parse_float(parts[1], no, key), _parse_float(parts[2], no, key))
            refined = None
            if len(parts) == 5:
                refined = ShiftVector(_parse_float(parts[3], no, key), _parse_float(parts[4], no, key))
            entries[index] = (index, parts[0], nominal, refined)
            continue
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=no, field=key)
        values[key] = (value, no)
    for key in (*_GEOMETRY_KEYS, "intensity_scale", "frame_count"):
        if key not in values:
            raise ParseError(f"missing key {key!r}", line=None, field=key)
    kwargs = {}
    for key, kind in _GEOMETRY_KEYS.items():
        value, no = values[key]
        kwargs[key] = _parse_float(value, no, key) if kind is float else _parse_int(value, no, key)
    try:
        geom = Geometry(**kwargs)
    except ValueError as exc:
        raise ParseError(f"invalid geometry: {exc}", line=None) from None
    scale = _parse_float(*values["intensity_scale"], "intensity_scale")
    if scale <= 0:
        raise ParseError("intensity_scale must be positive", line=values["intensity_scale"][1],
                         field="intensity_scale")
    count = _parse_int(*values["frame_count"], "frame_count")
    if sorted(entries) != list(range(len(entries))):
        raise IntegrityError(f"frame indices must be contiguous from 0, found {sorted(entries)}")
    if count != len(entries):
        raise IntegrityError(f"frame_count says {count} but {len(entries)} frames are listed")
    return geom, scale, [entries[i] for i in sorted(entries)]


def load_dataset(directory):
    """Read a dataset written by :func:`save_dataset`; returns ``(frames, geom)``."""
    directory = Path(directory)
    geom, scale, entries = read_manifest(directory)
    frames = []
    for index, name, nominal, refined in entries:
        path = directory / name
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"frame {index}: missing file {name}") from None
        counts = decode_pgm(data, name)
        if counts.shape != (geom.sensor_rows, geom.sensor_cols):
            raise IntegrityError(f"{name}: {counts.shape[0]}x{counts.shape[1]} pixels, manifest geometry is "
                                 f"{geom.sensor_rows}x{geom.sensor_cols}")
        frames.append(RawFrame(counts.astype(np.float64) * scale, nominal, refined, index))
    return frames, geom


def update_refined_shifts(directory, frames) -> Path:
    """Rewrite the manifest with the frames' refined shifts; pixel files stay."""
    directory = Path(directory)
    geom, scale, entries = read_manifest(directory)
    by_index = {f.index: f for f in frames}
    lines = [
        f"{MANIFEST_MAGIC} {FORMAT_VERSION}",
        *(f"{k} = {_fmt(getattr(geom, k)) if t is float else int(getattr(geom, k))}"
          for k, t in _GEOMETRY_KEYS.items()),
        f"intensity_scale = {_fmt(scale)}",
        f"frame_count = {len(entries)}",
    ]
    for index, name, nominal, refined in entries:
        f = by_index.get(index)
        if f is not None and f.refined_shift is not None:
            refined = f.refined_shift
        entry = f"frame.{index} = {name} {_fmt(nominal.dx_um)} {_fmt(nominal.dy_um)}"
        if refined is not None:
            entry += f" {_fmt(refined.dx_um)} {_fmt(refined.dy_um)}"
        lines.append(entry)
    manifest = directory / MANIFEST_NAME
    _write_or_raise(manifest, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest


# ---------------------------------------------------------------- fields

def preview_amplitude(amp) -> np.ndarray:
    """Amplitude scaled linearly from its own min/max to [0, 65535]."""
    a = np.asarray(amp, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.full(a.shape, PGM_MAX if hi > 0 else 0, dtype=np.uint16)
    return np.rint((a - lo) / (hi - lo) * PGM_MAX).astype(np.uint16)


def preview_phase(phase) -> np.ndarray:
    """Phase mapped from [-pi, pi] to [0, 65535]."""
    p = np.clip(np.asarray(phase, dtype=float), -math.pi, math.pi)
    return np.rint((p + math.pi) / (2 * math.pi) * PGM_MAX).astype(np.uint16)


def field_paths(prefix):
    prefix = str(prefix)
    return {
        "amplitude": Path(prefix + ".amp.f32"),
        "phase": Path(prefix + ".phase.f32"),
        "sidecar": Path(prefix + ".txt"),
        "amplitude_preview": Path(prefix + ".amp.pgm"),
        "phase_preview": Path(prefix + ".phase.pgm"),
    }


def save_field(f: ComplexField, path_prefix) -> dict:
    """Write a complex field as float32 planes, a sidecar and 16-bit previews."""
    paths = field_paths(path_prefix)
    paths["amplitude"].parent.mkdir(parents=True, exist_ok=True)
    amp = f.amplitude.astype("<f4")
    phase = f.phase.astype("<f4")
    _write_or_raise(paths["amplitude"], amp.tobytes(order="C"))
    _write_or_raise(paths["phase"], phase.tobytes(order="C"))
    sidecar = "\n".join([
        f"{FIELD_MAGIC} {FORMAT_VERSION}",
        f"rows = {f.rows}",
        f"cols = {f.cols}",
        f"pitch_x_um = {_fmt(f.pitch_x)}",
        f"pitch_y_um = {_fmt(f.pitch_y)}",
        "dtype = float32 little-endian, row-major",
        f"amplitude = {paths['amplitude'].name}",
        f"phase = {paths['phase'].name}",
    ]) + "\n"
    _write_or_raise(paths["sidecar"], sidecar.encode("utf-8"))
    _write_or_raise(paths["amplitude_preview"], encode_pgm(preview_amplitude(f.amplitude)))
    _write_or_raise(paths["phase_preview"], encode_pgm(preview_phase(f.phase)))
    return paths


def load_field(path_prefix) -> ComplexField:
    """Read a field written by :func:`save_field` (float32 precision)."""
    paths = field_paths(path_prefix)
    try:
        lines = paths["sidecar"].read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise IntegrityError(f"missing field sidecar {paths['sidecar']}") from None
    if not lines or lines[0].split()[:1] != [FIELD_MAGIC]:
        raise ParseError(f"first line must be '{FIELD_MAGIC} <version>'", line=1)
    meta = {}
    for no, raw in enumerate(lines[1:], start=2):
        key, sep, value = raw.partition("=")
        if not sep:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=no)
        meta[key.strip()] = (value.strip(), no)
    for key in ("rows", "cols", "pitch_x_um", "pitch_y_um"):
        if key not in meta:
            raise ParseError(f"missing key {key!r}", field=key)
    rows = _parse_int(*meta["rows"], "rows")
    cols = _parse_int(*meta["cols"], "cols")
    px = _parse_float(*meta["pitch_x_um"], "pitch_x_um")
    py = _parse_float(*meta["pitch_y_um"], "pitch_y_um")
    planes = []
    for key in ("amplitude", "phase"):
        try:
            buf = paths[key].read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"missing field plane {paths[key]}") from None
        if len(buf) != rows * cols * 4:
            raise IntegrityError(f"{paths[key].name}: {len(buf)} bytes, expected {rows * cols * 4}")
        planes.append(np.frombuffer(buf, dtype="<f4").reshape(rows, cols))
    amp, phase = planes
    return ComplexField(amp.astype(np.float64) * np.exp(1j * phase.astype(np.float64)), px, py)
