import csv
import io
import json
import os
import time

import numpy as np
import pytest
from PIL import Image

from quantholo.cli import canonical_json, git_blob_hash, load_config, main
from quantholo.io import load_index_png
from quantholo.plotting import heatmap
from quantholo.sweep import Cell, SweepConfig, SweepResult, run_sweep

SMALL = {"grid": {"height": 16, "width": 16}, "scheme": {"bits": 2}}


def _cfg(tmp_path, body, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(body))
    return str(p)


def _run(tmp_path, command, body, out="out", extra=()):
    code = main([command, "--config", _cfg(tmp_path, body), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


@pytest.fixture(scope="module")
def tiny_sweep():
    cfg = SweepConfig(bits=(1, 2), frames=(1, 2), methods=("naive", "gs_surrogate"), targets=("camera", "moon"),
                      height=16, width=16, iterations=15)
    return cfg, run_sweep(cfg)


# ---------------------------------------------------------------------------
# SweepResult


def test_csv_round_trip_exact(tiny_sweep):
    _, res = tiny_sweep
    back = SweepResult.from_csv(res.to_csv())
    assert back == res
    assert back.to_csv() == res.to_csv()


def test_csv_round_trip_keeps_failures():
    res = SweepResult((1,), (1,), ("naive",))
    res.cells[("naive", 1, 1)] = Cell("naive", 1, 1, float("nan"), float("nan"), (), "ValueError: boom")
    back = SweepResult.from_csv(res.to_csv())
    c = back.cell("naive", 1, 1)
    assert np.isnan(c.psnr) and c.error == "ValueError: boom" and not c.ok
    with pytest.raises(ValueError):
        SweepResult.from_csv("")


def test_cells_complete_and_referenced(tiny_sweep):
    cfg, res = tiny_sweep
    assert len(res.cells) == 2 * 2 * 2
    for c in res.cells.values():
        assert c.ok and len(c.runs) == len(cfg.targets)
    assert res.reference() == res.cell("naive", 2, 1).psnr
    front = res.frontier("naive")
    assert front[2] == 1
    assert set(res.iso_cells("naive")) >= {(2, 1)}


def test_failed_cell_does_not_stop_sweep():
    cfg = SweepConfig(bits=(1,), frames=(1,), methods=("naive",), targets=("camera", "/no/such/image.png"),
                      height=8, width=8, iterations=2)
    res = run_sweep(cfg)
    c = res.cell("naive", 1, 1)
    assert not c.ok and "image.png" in c.error and c.runs == ("camera@seed0",)


def test_heatmap_is_pure_view_of_csv(tiny_sweep, tmp_path):
    _, res = tiny_sweep
    heatmap(res, "gs_surrogate", tmp_path / "a.png")
    heatmap(SweepResult.from_csv(res.to_csv()), "gs_surrogate", tmp_path / "b.png")
    a = np.asarray(Image.open(tmp_path / "a.png"))
    b = np.asarray(Image.open(tmp_path / "b.png"))
    assert np.array_equal(a, b)


def test_sweep_config_validation():
    from quantholo.quantization import ConfigurationError
    for kw in ({"bits": ()}, {"methods": ("magic",)}, {"frames": (0,)}):
        with pytest.raises(ConfigurationError):
            SweepConfig(**kw)


# ---------------------------------------------------------------------------
# CLI


def test_optimize_smoke_under_5s(tmp_path):
    body = dict(SMALL, optim={"iterations": 10, "frames": 2})
    t0 = time.perf_counter()
    code, out = _run(tmp_path, "optimize", body)
    assert code == 0 and time.perf_counter() - t0 < 5.0
    names = set(os.listdir(out))
    assert {"metrics.json", "config.json", "loss.csv", "recon_plane0.png",
            "phases_frame0.png", "phases_frame1.png"} <= names
    m = json.loads((out / "metrics.json").read_text())
    assert np.isfinite(m["psnr"]) and 0 <= m["ssim"] <= 1 and m["iterations"] == 10
    rows = list(csv.reader(io.StringIO((out / "loss.csv").read_text())))
    assert rows[0] == ["iteration", "loss"] and len(rows) == 11
    idx = load_index_png(out / "phases_frame0.png")
    assert idx.shape == (16, 16) and idx.max() < 4


def test_config_echo_is_canonical(tmp_path):
    body = {"scheme": {"bits": 2}, "grid": {"width": 16, "height": 16}, "optim": {"iterations": 3, "frames": 1}}
    code, out = _run(tmp_path, "optimize", body)
    assert code == 0
    assert (out / "config.json").read_text() == canonical_json(body)
    # overrides and --seed are part of the effective config
    code, out2 = _run(tmp_path, "optimize", body, "out2", ["--seed", "7", "--override", "optim.frames=2"])
    assert code == 0
    echo = json.loads((out2 / "config.json").read_text())
    assert echo["seed"] == 7 and echo["optim"]["frames"] == 2


def test_content_hash_matches_git_blob():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_missing_target_file_exit_1(tmp_path, capsys):
    missing = str(tmp_path / "nope" / "target.png")
    code, _ = _run(tmp_path, "optimize", dict(SMALL, target={"path": missing}))
    assert code == 1
    assert missing in capsys.readouterr().err


def test_missing_config_exit_1(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    assert main(["optimize", "--config", missing, "--out", str(tmp_path / "o")]) == 1
    assert missing in capsys.readouterr().err


@pytest.mark.parametrize("body, field", [
    ({"optim": {"iterations": 1, "bogus": 1}}, "optim.bogus"),
    ({"grid": {"height": "tall"}}, "grid"),
    ({"scheme": {"bits": 0}}, "scheme"),
    ({"target": {"builtin": "zebra"}}, "target.builtin"),
    ({"target": {"kind": "hologram"}}, "target.kind"),
    ({"optim": {"surrogate": "magic"}}, "optim"),
])
def test_config_errors_name_field(tmp_path, capsys, body, field):
    code, _ = _run(tmp_path, "optimize", body)
    assert code == 1
    assert field in capsys.readouterr().err


def test_bad_override_exit_1(tmp_path):
    code, _ = _run(tmp_path, "optimize", SMALL, extra=["--override", "novalue"])
    assert code == 1
    assert load_config(None, ["a.b=3", "c=x"]) == {"a": {"b": 3}, "c": "x"}


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numeric_failure_exit_2(tmp_path, capsys):
    body = dict(SMALL, optim={"iterations": 5, "frames": 1, "lr": 1e308, "method": "naive"})
    code, _ = _run(tmp_path, "optimize", body)
    assert code == 2
    assert "numerical" in capsys.readouterr().err


def test_one_cell_sweep_equals_optimize(tmp_path):
    grid = {"height": 16, "width": 16}
    code, out = _run(tmp_path, "sweep", {"grid": grid, "bits": [3], "frames": [2], "methods": ["gs_surrogate"],
                                         "targets": ["coins"], "iterations": 12}, "sw")
    assert code == 0
    cell = SweepResult.from_csv((out / "sweep.csv").read_text()).cell("gs_surrogate", 3, 2)
    code, out = _run(tmp_path, "optimize", {
        "grid": grid, "scheme": {"bits": 3}, "target": {"builtin": "coins"},
        "optim": {"iterations": 12, "frames": 2, "surrogate": "gumbel_softmax", "patience": None}}, "opt")
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert cell.psnr == m["psnr"] and cell.ssim == m["ssim"]
    assert os.path.exists(tmp_path / "sw" / "heatmap_gs_surrogate.png")


def test_sweep_outputs_and_frontier(tmp_path):
    code, out = _run(tmp_path, "sweep", {"grid": {"height": 8, "width": 8}, "bits": [1, 2], "frames": [1, 2],
                                         "methods": ["naive", "sigmoid"], "targets": ["camera"], "iterations": 4})
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["cells"] == 8 and m["failed_cells"] == 0
    assert set(m["frontier"]) == {"naive", "sigmoid"} and "reference_psnr" in m
    assert {"heatmap_naive.png", "heatmap_sigmoid.png", "sweep.csv"} <= set(os.listdir(out))
    rows = list(csv.DictReader(io.StringIO((out / "sweep.csv").read_text())))
    assert len(rows) == 8


def _sweep_body():
    return {"grid": {"height": 8, "width": 8}, "bits": [1, 2], "frames": [1, 2],
            "methods": ["naive", "gs_surrogate"], "targets": ["camera", "moon"], "iterations": 6}


def test_sweep_byte_identical_across_jobs(tmp_path):
    outs = []
    for name, jobs in (("j1", "1"), ("j1b", "1"), ("j2", "2")):
        code, out = _run(tmp_path, "sweep", _sweep_body(), name, ["--jobs", jobs, "--seed", "3"])
        assert code == 0
        outs.append(out)
    for f in ("metrics.json", "sweep.csv", "config.json", "heatmap_gs_surrogate.png"):
        ref = (outs[0] / f).read_bytes()
        assert all((o / f).read_bytes() == ref for o in outs[1:]), f


def test_optimize_byte_identical_rerun(tmp_path):
    body = dict(SMALL, optim={"iterations": 8, "frames": 2})
    outs = [_run(tmp_path, "optimize", body, n, ["--seed", "5"])[1] for n in ("a", "b")]
    for f in ("metrics.json", "phases_frame0.png", "phases_frame1.png", "loss.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    other = _run(tmp_path, "optimize", body, "c", ["--seed", "6"])[1]
    assert (other / "metrics.json").read_bytes() != (outs[0] / "metrics.json").read_bytes()


def test_citl_report_has_both_variants(tmp_path):
    body = {"grid": {"height": 16, "width": 16}, "scheme": {"bits": 4}, "target": {"builtin": "moon"},
            "optim": {"iterations": 5, "frames": 2}}
    code, out = _run(tmp_path, "citl", body)
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    for v in ("naive", "surrogate"):
        assert np.isfinite(m[v]["psnr"]) and (out / f"loss_{v}.csv").exists()
    assert m["gain_db"] == m["surrogate"]["psnr"] - m["naive"]["psnr"]
    assert (out / "display.json").exists() and (out / "loss.png").exists()
    again = _run(tmp_path, "citl", body, "again")[1]
    assert (again / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()
    code, _ = _run(tmp_path, "citl", dict(body, variants=["naive", "magic"]), "bad")
    assert code == 1


def test_calibrate_ablation_rows(tmp_path):
    ladder = [[], ["a_src"], ["a_src", "phi_src"]]
    body = {"grid": {"height": 16, "width": 16}, "dataset": {"count": 10, "opt_iterations": 3, "save": True},
            "fit": {"epochs": 1}, "ladder": ladder}
    code, out = _run(tmp_path, "calibrate", body)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "ablation.csv").read_text())))
    assert len(rows) == len(ladder)
    assert set(rows[0]) == {"groups", "train", "val", "test", "held_out"}
    assert all(r["held_out"] for r in rows)
    train = [float(r["train"]) for r in rows]
    assert all(b >= a - 1e-6 for a, b in zip(train, train[1:]))
    assert (out / "model.json").exists() and (out / "dataset").is_dir()
    # the saved dataset reloads through the config
    code, out2 = _run(tmp_path, "calibrate", dict(body, dataset={"path": str(out / "dataset")}), "again")
    assert code == 0
    assert (out2 / "ablation.csv").read_text() == (out / "ablation.csv").read_text()
    code, _ = _run(tmp_path, "calibrate", dict(body, ladder=[["a_srcc"]]), "bad")
    assert code == 1


def test_metrics_command(tmp_path):
    from quantholo.io import save_amplitude_png
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    save_amplitude_png(tmp_path / "a.png", a)
    code, out = _run(tmp_path, "metrics", {"reference": str(tmp_path / "a.png"), "test": str(tmp_path / "a.png")})
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["psnr"] == 100.0 and m["ssim"] == pytest.approx(1.0)
    code, _ = _run(tmp_path, "metrics", {"reference": str(tmp_path / "a.png"), "test": str(tmp_path / "x.png")})
    assert code == 1
