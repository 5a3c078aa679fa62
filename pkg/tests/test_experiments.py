import os

import numpy as np
import pytest

from zonalseg import experiments as E
from zonalseg.dataset import PatientCase, default_profiles, generate_phantoms
from zonalseg.training import TrainConfig

TAGS = ("A", "B", "C")


def test_published_partitions_verbatim():
    assert E.make_folds(21) == [list(range(1, 6)), list(range(6, 11)), list(range(11, 16)), list(range(16, 22))]
    assert E.make_folds(19) == [list(range(1, 6)), list(range(6, 11)), list(range(11, 16)), list(range(16, 20))]
    assert E.make_folds(40) == [list(range(1, 11)), list(range(11, 21)), list(range(21, 31)), list(range(31, 41))]


@pytest.mark.parametrize("n", [4, 8, 9, 13, 21, 22, 40])
def test_folds_partition(n):
    folds = E.make_folds(n)
    flat = [i for f in folds for i in f]
    assert sorted(flat) == list(range(1, n + 1)) and len(flat) == n
    assert len(folds) == 4


def test_generic_folds_remainder_last():
    assert E.make_folds(8) == [[1, 2], [3, 4], [5, 6], [7, 8]]
    assert E.make_folds(10) == [[1, 2], [3, 4], [5, 6], [7, 8, 9, 10]]
    with pytest.raises(ValueError, match="at least 4"):
        E.make_folds(3)


def test_conditions_order_and_counts():
    conds = E.enumerate_conditions(TAGS)
    assert len(conds) == 21 and len(set(conds)) == 21
    assert conds[0].label == "A->A" and conds[-1].label == "A/B/C->C"
    assert [c.label for c in conds[9:12]] == ["A/B->A", "A/B->B", "A/B->C"]
    assert sorted(c.test for c in conds).count("B") == 7
    assert E.spoke_of(E.Condition(("B",), "C"), TAGS) == "VI"
    assert E.Condition(("A", "C"), "B").slug == "A-C_to_B"
    with pytest.raises(ValueError, match="duplicate"):
        E.enumerate_conditions(["A", "A", "B"])
    with pytest.raises(ValueError, match="exactly 3"):
        E.enumerate_conditions(["A", "B"])


@pytest.fixture(scope="module")
def datasets():
    sets = generate_phantoms(default_profiles(6, 16), 1, seed=0)
    return dict(zip(TAGS, sets))


def test_round_split_cover_and_whole_out_of_training(datasets):
    folds = {t: E.make_folds(len(datasets[t])) for t in TAGS}
    tested = []
    for r in range(4):
        train, tests = E.round_split(datasets, folds, ("A", "C"), r)
        ids = {c.patient_id for c in train}
        assert not ids & {c.patient_id for c in tests["A"] + tests["C"]}
        assert len(tests["B"]) == len(datasets["B"])
        assert len(train) + len(tests["A"]) + len(tests["C"]) == 12
        tested += [c.patient_id for c in tests["A"]]
    assert sorted(tested) == sorted(c.patient_id for c in datasets["A"])


def test_leakage_detected(datasets):
    cases = list(datasets["A"])
    cases[5] = PatientCase(cases[0].patient_id, cases[0].slices, "A")  # same patient in two folds
    bad = dict(datasets, A=cases)
    folds = {t: E.make_folds(6) for t in TAGS}
    with pytest.raises(E.LeakageError, match="A001"):
        E.round_split(bad, folds, ("A",), 0)


def _row(fold, region, dsc, patient="p"):
    return {"fold": str(fold), "region": region, "patient": patient, "dsc": str(dsc),
            "sen": "1", "spc": "1", "avgd": "nan", "maxd": "nan"}


def test_summarize_against_arithmetic_oracle():
    label = "A->B"
    rows = [_row(0, "CG", 80), _row(0, "CG", 90, "q"), _row(1, "CG", 70), _row(2, "CG", 60), _row(3, "CG", 95)]
    rows += [_row(r, "PZ", 50 + r) for r in range(4)]
    summary = E.summarize({"unet": {label: rows}}, TAGS)
    (entry,) = summary["tables"]["unet"]
    rounds = [85, 70, 60, 95]
    assert entry["spoke"] == "II"
    assert entry["cg_dsc_rounds"] == rounds
    assert entry["cg_dsc_mean"] == pytest.approx(np.mean(rounds))
    assert entry["cg_dsc_sd"] == pytest.approx(np.std(rounds, ddof=1))
    assert entry["pz_dsc_mean"] == pytest.approx(51.5)
    assert np.isnan(entry["cg_avgd_mean"])
    assert summary["kiviat"]["unet"]["spokes"] == ["II"]


def test_stats_matrices_blocks():
    rows = {c.label: [_row(r, g, 50 + r + (c.test == "A")) for r in range(4) for g in ("CG", "PZ")] for c in E.enumerate_conditions(TAGS)}
    summary = E.summarize({"unet": rows, "enc_use": rows}, TAGS)
    si = summary["stats_input"]
    assert len(si["all"]["cg"]["scores"]) == 21 * 4
    assert len(si["three_dataset"]["pz"]["scores"]) == 3 * 4
    assert si["three_dataset"]["cg"]["blocks"][0] == "A/B/C->A#0"
    union, single = E.generalization_contrast(summary, "unet")
    assert union == pytest.approx(np.mean([52.5, 51.5, 51.5]))
    assert single == pytest.approx(np.mean([51.5, 51.5, 52.5, 51.5, 52.5, 51.5]))


def _plan(datasets, **kw):
    cfg = TrainConfig(epochs=1, decay_epochs=(), canvas=16, crop=16, batch_size=4, lr=0.05)
    base = dict(tags=TAGS, folds={t: E.make_folds(len(datasets[t])) for t in TAGS}, variants=("unet",),
                spec={"depth": 1, "base_width": 4, "se_reduction": 4}, config=cfg, seed=0)
    base.update(kw)
    return E.MatrixPlan(**base)


def test_matrix_resume_and_outputs(datasets, tmp_path):
    plan = _plan(datasets)
    reports = E.run_matrix(plan, datasets, tmp_path)
    assert len(reports) == 7 and not any(r["error"] for r in reports)
    files = sorted(os.listdir(tmp_path / "unet"))
    assert len(files) == 21 and not any(f.endswith(".partial") for f in files)
    rows = E.read_condition_csv(tmp_path / "unet" / "A_to_A.csv")
    assert sorted({r["fold"] for r in rows}) == ["0", "1", "2", "3"]
    assert len(rows) == 2 * 6  # two regions per held-out patient, every patient once
    before = (tmp_path / "unet" / "B_to_C.csv").read_bytes()
    again = E.run_matrix(plan, datasets, tmp_path)
    assert all(r["skipped"] for r in again)
    assert (tmp_path / "unet" / "B_to_C.csv").read_bytes() == before


def test_matrix_records_failure_and_continues(datasets, tmp_path):
    plan = _plan(datasets, spec={"depth": 1, "base_width": 4, "se_reduction": 3}, variants=("unet", "enc_use"))
    reports = E.run_matrix(plan, datasets, tmp_path)
    assert all(r["error"] is None for r in reports if r["variant"] == "unet")
    failed = [r for r in reports if r["error"]]
    assert len(failed) == 7 and "enc0" in failed[0]["error"]
    assert not any(f.endswith(".csv") for f in os.listdir(tmp_path / "enc_use"))


def test_matrix_rejects_bad_folds(datasets, tmp_path):
    plan = _plan(datasets, folds={t: [[1], [2], [3], [4]] for t in TAGS})
    with pytest.raises(ValueError, match="partition"):
        E.run_matrix(plan, datasets, tmp_path)
