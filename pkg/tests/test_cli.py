import json

import numpy as np
import pytest

from tiltlens.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from tiltlens.io import MANIFEST_NAME, load_dataset
from tiltlens.metrics import REPORT_KEYS

SMALL = ["--rows", "48", "--cols", "48", "--distance-um", "300", "--auto-shifts", "3,12", "--jitter-um", "2"]


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", *SMALL, "--out", str(out)]) == EXIT_OK
    return out


def test_simulate_writes_dataset(small_dataset):
    frames, geom = load_dataset(small_dataset)
    assert len(frames) == 3 and geom.sensor_rows == 48
    assert (small_dataset / "truth.amp.f32").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["simulate", "--bogus", "--out", "x"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_command():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code = main(["reconstruct", str(tmp_path), "--out", str(tmp_path / "r")])
    assert code == EXIT_DATA
    assert MANIFEST_NAME in capsys.readouterr().err


def test_flat_frame_is_numeric_failure(tmp_path, capsys):
    ds = tmp_path / "flat"
    assert main(["simulate", "--object", "uniform", *SMALL, "--out", str(ds)]) == EXIT_OK
    assert main(["autofocus", str(ds), "--dmin", "200", "--dmax", "400", "--step", "20"]) == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_register_updates_manifest(tmp_path, small_dataset):
    import shutil

    ds = tmp_path / "copy"
    shutil.copytree(small_dataset, ds)
    assert main(["register", str(ds)]) == EXIT_OK
    frames, _ = load_dataset(ds)
    assert all(f.refined_shift is not None for f in frames)
    assert frames[0].refined_shift.dx_um == 0.0


def test_reconstruct_with_truth(tmp_path, capsys):
    ds = tmp_path / "mid"
    args = ["simulate", "--rows", "96", "--cols", "96", "--distance-um", "300", "--auto-shifts", "3,12",
            "--out", str(ds)]
    assert main(args) == EXIT_OK
    out = tmp_path / "r"
    code = main(["reconstruct", str(ds), "--iters", "2", "--guard-px", "16", "--truth", str(ds), "--edge-px", "8", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert [k for k in report if k != "schema"] == list(REPORT_KEYS)
    assert len(report["per_iteration_error"]) == 2
    for name in ("object", "wavefront", "truth_aligned"):
        assert (out / f"{name}.amp.f32").exists()
    assert "amplitude_correlation" in capsys.readouterr().out
    # the metrics command reads the written fields back
    assert main(["metrics", "--recon", str(out / "object"), "--truth", str(out / "truth_aligned")]) == EXIT_OK


def test_reconstruct_is_deterministic(tmp_path, small_dataset):
    planes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["reconstruct", str(small_dataset), "--iters", "2", "--guard-px", "16",
                     "--order", "random:3", "--out", str(out)]) == EXIT_OK
        planes.append([(out / f"object.{p}.f32").read_bytes() for p in ("amp", "phase")])
    assert planes[0] == planes[1]


def test_simulate_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        args = ["simulate", *SMALL, "--photon-scale", "1000", "--bit-depth", "12", "--out", str(tmp_path / name)]
        assert main(args) == EXIT_OK
        outs.append(sorted((p.name, p.read_bytes()) for p in (tmp_path / name).iterdir()))
    assert outs[0] == outs[1]


def test_stitch_tiles(tmp_path, small_dataset, capsys):
    prefix = small_dataset / "truth"
    out = tmp_path / "mosaic"
    code = main(["stitch", "--tile", f"{prefix}:0,0", "--tile", f"{prefix}:20,0", "--overlap-px", "8",
                 "--out", str(out)])
    assert code == EXIT_OK
    assert (tmp_path / "mosaic.amp.f32").exists()


def test_bad_tile_spec():
    assert main(["stitch", "--tile", "nooffset", "--out", "x"]) == EXIT_USAGE


def test_autofocus_prints_distance(tmp_path, capsys):
    ds = tmp_path / "focus"
    args = ["simulate", "--rows", "256", "--cols", "256", "--auto-shifts", "1,0", "--density", "0.05",
            "--absorption", "0.9", "--phase-rad", "0", "--diameter-um", "4", "--out", str(ds)]
    assert main(args) == EXIT_OK
    capsys.readouterr()
    assert main(["autofocus", str(ds), "--dmin", "500", "--dmax", "1100", "--step", "10"]) == EXIT_OK
    d = float(capsys.readouterr().out.strip())
    assert abs(d - 800.0) <= 10.0


def test_estimate_tilt_degenerate(tmp_path, small_dataset, capsys):
    code = main(["estimate-tilt", str(small_dataset), "--region-a", "0,48,0,10", "--region-b", "0,48,10,20",
                 "--dmin", "200", "--dmax", "400", "--step", "20"])
    assert code == EXIT_NUMERIC
