import csv
import json
import socket
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spacetime_k.cli import DataError, ingest, main, parse_time, read_boundary
from spacetime_k.geometry import TemporalUnit

DATA = Path(__file__).resolve().parents[1] / "src" / "spacetime_k" / "data"
POINTS = DATA / "sample_points.csv"
BOUNDARY = DATA / "sample_boundary.wkt"
GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_sample.json").read_text())


def run_cli(capsys, *args):
    code = main(["run", "--points", str(POINTS), "--boundary", str(BOUNDARY), *args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def small_args(sims="0"):
    return ["--smax", "1000", "--sstep", "250", "--tmax", "10", "--tstep", "5", "--sims", sims]


def test_golden_sample(capsys):
    code, out, _ = run_cli(capsys, *GOLDEN["args"])
    assert code == 0
    rep = json.loads(out)
    s = np.array(GOLDEN["grid"]["s"])[:, None]
    assert rep["grid"] == GOLDEN["grid"]
    np.testing.assert_allclose(rep["k_hat"], GOLDEN["k_hat"], rtol=1e-9)
    np.testing.assert_allclose(rep["theoretical_k"], GOLDEN["theoretical_k"], rtol=1e-12)
    # L values sit near zero, so compare on the scale of s
    for key in ("upper_l", "lower_l"):
        np.testing.assert_allclose(rep["envelope"][key], GOLDEN["envelope"][key], rtol=0, atol=1e-9 * s.max())
    np.testing.assert_allclose(rep["l_hat"], GOLDEN["l_hat"], rtol=0, atol=1e-9 * s.max())
    np.testing.assert_allclose(rep["diff_upper"], GOLDEN["diff_upper"], rtol=0, atol=1e-9 * s.max())
    assert rep["params"]["significance"] == 0.1


def test_no_sims_omits_envelope(capsys):
    code, out, _ = run_cli(capsys, *small_args("0"))
    rep = json.loads(out)
    assert code == 0 and "envelope" not in rep and "diff_upper" not in rep
    assert set(rep) == {"params", "grid", "k_hat", "l_hat", "theoretical_k", "telemetry"}
    assert np.array(rep["k_hat"]).shape == (4, 2)


def test_deterministic_output(capsys, tmp_path):
    outs = []
    for i in range(2):
        p = tmp_path / f"r{i}.json"
        assert run_cli(capsys, *small_args("3"), "--out", str(p), "--partitions", "4")[0] == 0
        rep = json.loads(p.read_text())
        del rep["telemetry"]
        outs.append(json.dumps(rep, sort_keys=True))
    assert outs[0] == outs[1]


def test_csv_dir(capsys, tmp_path):
    code, out, _ = run_cli(capsys, *small_args("2"), "--csv-dir", str(tmp_path))
    assert code == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["diff_upper.csv", "k_hat.csv", "l_hat.csv", "lower_l.csv", "theoretical_k.csv", "upper_l.csv"]
    rows = list(csv.reader(open(tmp_path / "k_hat.csv")))
    assert len(rows) == 5 and len(rows[0]) == 3
    np.testing.assert_array_equal(np.array(rows[1:], float)[:, 1:], json.loads(out)["k_hat"])


def test_usage_errors(capsys):
    assert run_cli(capsys, *small_args("0"), "--sstep", "-1")[0] == 1
    with pytest.raises(SystemExit) as e:
        main(["run", "--points", str(POINTS)])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_data_errors(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,x,y,t\n1,0,0,1\n2,abc,0,2\n")
    assert main(["run", "--points", str(bad), "--boundary", str(BOUNDARY), *small_args()]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["run", "--points", str(tmp_path / "missing.csv"), "--boundary", str(BOUNDARY), *small_args()]) == 2
    capsys.readouterr()
    hole = tmp_path / "hole.wkt"
    hole.write_text("POLYGON ((0 0, 10 0, 10 10, 0 10, 0 0), (2 2, 3 2, 3 3, 2 2))")
    assert main(["run", "--points", str(POINTS), "--boundary", str(hole), *small_args()]) == 2


def test_outside_points(capsys, tmp_path):
    rows = POINTS.read_text().splitlines()
    extra = tmp_path / "pts.csv"
    extra.write_text("\n".join(rows + ["9999,-50000,-50000,10"]) + "\n")
    code = main(["run", "--points", str(extra), "--boundary", str(BOUNDARY), *small_args()])
    err = capsys.readouterr().err
    assert code == 2 and f"line {len(rows) + 1}" in err and "id 9999" in err
    code = main(["run", "--points", str(extra), "--boundary", str(BOUNDARY), *small_args(), "--drop-outside"])
    cap = capsys.readouterr()
    assert code == 0 and json.loads(cap.out)["params"]["dropped"] == 1 and "dropped 1" in cap.err


def test_runtime_failure_exit_code(capsys, monkeypatch):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()  # nothing listens here now
    monkeypatch.setenv("STK_WORKERS", f"127.0.0.1:{port}")
    code, _, err = run_cli(capsys, *small_args(), "--mode", "distributed")
    assert code == 3 and "runtime failure" in err


def test_times_and_boundaries(tmp_path):
    assert parse_time("17", TemporalUnit.DAYS) == 17
    assert parse_time("1970-01-03", TemporalUnit.DAYS) == 2
    assert parse_time("1970-01-02T06:00:00", TemporalUnit.HOURS) == 30
    assert parse_time("1970-03-02", TemporalUnit.MONTHS) == 2
    with pytest.raises(DataError):
        parse_time("yesterday", TemporalUnit.DAYS)
    gj = tmp_path / "b.geojson"
    gj.write_text(json.dumps({"type": "Feature", "properties": {},
                              "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [4, 0], [4, 3], [0, 0]]]}}))
    ring = read_boundary(gj)
    assert ring.shape[1] == 2 and (ring[0] == [0, 0]).all()
    pts = tmp_path / "p.csv"
    pts.write_text("id,x,y,t\na,1,0.5,2020-01-01\nb,3,1,2020-01-05\n")
    xy, t, region, dropped = ingest(pts, gj)
    assert t.tolist() == [18262, 18266] and (region.period_start, region.period_end) == (18262, 18266)
    assert dropped == 0


def test_iso_dates_end_to_end(capsys, tmp_path):
    src = list(csv.DictReader(open(POINTS)))
    iso = tmp_path / "iso.csv"
    with open(iso, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "t"])
        for r in src:
            w.writerow([r["id"], r["x"], r["y"], np.datetime_as_string(np.datetime64("1970-01-01") + int(r["t"]))])
    a = main(["run", "--points", str(iso), "--boundary", str(BOUNDARY), *small_args()])
    ja = json.loads(capsys.readouterr().out)
    b = main(["run", "--points", str(POINTS), "--boundary", str(BOUNDARY), *small_args()])
    jb = json.loads(capsys.readouterr().out)
    assert a == b == 0 and ja["k_hat"] == jb["k_hat"]


def test_benchmark_mode(capsys):
    code, out, _ = run_cli(capsys, *small_args("1"), "--benchmark", "--partitions", "3")
    runs = json.loads(out)["benchmark"]
    assert code == 0 and len(runs) == 8
    assert all(r["matches_baseline"] for r in runs)
    assert all(r["sf"] > 0 for r in runs)


def test_module_entry_point(tmp_path):
    out = tmp_path / "o.json"
    proc = subprocess.run([sys.executable, "-m", "spacetime_k", "run", "--points", str(POINTS), "--boundary",
                           str(BOUNDARY), *small_args(), "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "k_hat" in json.loads(out.read_text())
