import json

import numpy as np

from zonalseg import plotting
from zonalseg.reports import stats_report, write_stats_report


def _input(methods, n):
    rng = np.random.default_rng(0)
    block = {"methods": methods, "blocks": [f"b{i}" for i in range(n)], "scores": rng.random((n, len(methods))).tolist()}
    return {"all": {"cg": block, "pz": block}}


def test_stats_report_fields_and_control():
    rep = stats_report(_input(["unet", "enc_use", "enc_dec_use"], 12), control="unet")
    e = rep["scopes"]["all"]["cg"]
    assert e["control"] == "unet" and e["n_blocks"] == 12
    assert len(e["mean_ranks"]) == 3 and sum(e["mean_ranks"]) == 6
    assert set(e["significant_vs_control"]) == {"unet", "enc_use", "enc_dec_use"}


def test_stats_report_skips_single_method():
    rep = stats_report(_input(["unet"], 5))
    assert "skipped" in rep["scopes"]["all"]["cg"]


def test_figures_are_byte_stable(tmp_path):
    rep = stats_report(_input(["a", "b", "c"], 8))
    p1 = write_stats_report(rep, tmp_path / "one")
    p2 = write_stats_report(rep, tmp_path / "two")
    assert len(p1) == 2
    for a, b in zip(p1, p2):
        assert open(a, "rb").read() == open(b, "rb").read()
    assert json.loads((tmp_path / "one" / "stats.json").read_text())["alpha"] == 0.05


def test_kiviat_and_loss_curve_render(tmp_path):
    spokes = [str(i) for i in range(21)]
    plotting.kiviat(spokes, np.linspace(10, 90, 21), np.linspace(90, 10, 21), tmp_path / "k.svg", title="x")
    plotting.loss_curve([-0.1, -0.5, -0.7], [0.1, 0.1, 0.02], tmp_path / "l.png")
    assert (tmp_path / "k.svg").read_text().startswith("<?xml")
    assert (tmp_path / "l.png").stat().st_size > 0
