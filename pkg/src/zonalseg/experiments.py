"""Cross-validation folds, the 21 train -> test conditions and the matrix runner."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import metrics as M
from .architectures import ModelSpec, build_model, save_checkpoint
from .dataset import preprocess_patient
from .postprocess import postprocess_cg
from .training import TrainConfig, center_crop, predict, train

log = logging.getLogger(__name__)

N_FOLDS = 4

# Published partitions (1-based patient indices) for 21, 19 and 40 patients.
PUBLISHED_FOLDS = {
    21: [list(range(1, 6)), list(range(6, 11)), list(range(11, 16)), list(range(16, 22))],
    19: [list(range(1, 6)), list(range(6, 11)), list(range(11, 16)), list(range(16, 20))],
    40: [list(range(1, 11)), list(range(11, 21)), list(range(21, 31)), list(range(31, 41))],
}

ROMAN = [
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI",
    "XII", "XIII", "XIV", "XV", "XVI", "XVII", "XVIII", "XIX", "XX", "XXI",
]


class LeakageError(AssertionError):
    pass


def make_folds(n_patients, n_folds=N_FOLDS):
    """Partition patients 1..n into contiguous folds (1-based indices)."""
    if n_patients < n_folds:
        raise ValueError(f"need at least {n_folds} patients for {n_folds} folds, got {n_patients}")
    if n_folds == N_FOLDS and n_patients in PUBLISHED_FOLDS:
        return [list(f) for f in PUBLISHED_FOLDS[n_patients]]
    size = n_patients // n_folds
    folds = [list(range(i * size + 1, (i + 1) * size + 1)) for i in range(n_folds - 1)]
    folds.append(list(range((n_folds - 1) * size + 1, n_patients + 1)))
    return folds


@dataclass(frozen=True)
class Condition:
    train: tuple
    test: str

    @property
    def label(self):
        return f"{'/'.join(self.train)}->{self.test}"

    @property
    def slug(self):
        return f"{'-'.join(self.train)}_to_{self.test}"


def training_sets(tags):
    tags = list(tags)
    out = []
    for r in (1, 2, 3):
        out += [tuple(c) for c in itertools.combinations(tags, r)]
    return out


def enumerate_conditions(tags):
    """All 7 x 3 train -> test conditions, in Kiviat spoke order I..XXI."""
    tags = list(tags)
    if len(tags) != 3:
        raise ValueError(f"exactly 3 datasets are required, got {len(tags)}")
    if len(set(tags)) != 3:
        raise ValueError(f"duplicate dataset tags {tags}")
    return [Condition(tr, te) for tr in training_sets(tags) for te in tags]


def spoke_of(condition, tags):
    return ROMAN[enumerate_conditions(tags).index(condition)]


def round_split(datasets, folds, train_tags, round_index):
    """Training patients and per-dataset test patients for one round.

    ``datasets`` maps tag -> ordered PatientCase list, ``folds`` maps tag ->
    1-based fold partition. In-training datasets hold out fold ``round_index``;
    out-of-training datasets are tested whole. Returns
    ``(train_cases, {tag: test_cases})``.
    """
    train_cases, tests = [], {}
    for tag, cases in datasets.items():
        held = {i - 1 for i in folds[tag][round_index]}
        if tag in train_tags:
            train_cases += [c for i, c in enumerate(cases) if i not in held]
            tests[tag] = [c for i, c in enumerate(cases) if i in held]
        else:
            tests[tag] = list(cases)
    train_ids = {(c.source, c.patient_id) for c in train_cases}
    for tag in train_tags:
        leaked = [c.patient_id for c in tests[tag] if (c.source, c.patient_id) in train_ids]
        if leaked:
            raise LeakageError(f"round {round_index}: test patients {leaked} of {tag} appear in training")
    return train_cases, tests


# --------------------------------------------------------------------------
# evaluation


def evaluate_patient(state, case, canvas, crop, spacing_mm=False):
    """Per-patient metrics of a model on one case (center crop, post-processing)."""
    case = preprocess_patient(case, canvas)
    slices = [s for s in case.slices if not s.excluded]
    if not slices:
        return None
    images = np.stack([center_crop(s.image, crop) for s in slices])
    probs = predict(state, images)
    records = []
    for s, prob in zip(slices, probs):
        wg = center_crop(s.wg_mask, crop)
        cg_true = center_crop(s.cg_mask, crop)
        cg, pz = postprocess_cg(prob, wg)
        truth = {"CG": cg_true, "PZ": wg & ~cg_true}
        records.append(M.slice_metrics({"CG": cg, "PZ": pz}, truth, s.spacing if spacing_mm else None))
    return M.aggregate_patient(records)


@dataclass
class ConditionResult:
    condition: Condition
    fold: int
    patients: dict  # patient id -> MetricsRecord
    checkpoint: str = ""
    wall_clock: float = 0.0
    seed: int = 0


# --------------------------------------------------------------------------
# matrix


@dataclass
class MatrixPlan:
    tags: tuple
    folds: dict
    variants: tuple
    spec: dict
    config: TrainConfig
    seed: int = 0
    save_checkpoints: bool = False
    spacing_mm: bool = False


def _job_seed(seed, variant_index, train_index, round_index):
    ss = np.random.SeedSequence([seed, variant_index, train_index, round_index])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def _condition_csv(out_dir, variant, cond):
    return os.path.join(out_dir, variant, f"{cond.slug}.csv")


def _run_job(plan, datasets, variant_index, train_index, out_dir):
    variant = plan.variants[variant_index]
    train_tags = training_sets(plan.tags)[train_index]
    conds = [Condition(train_tags, t) for t in plan.tags]
    vdir = os.path.join(out_dir, variant)
    os.makedirs(vdir, exist_ok=True)
    finals = [_condition_csv(out_dir, variant, c) for c in conds]
    if all(os.path.exists(p) for p in finals):
        log.info("%s %s: already complete, skipping", variant, "/".join(train_tags))
        return {"variant": variant, "train": list(train_tags), "skipped": True, "timings": [], "error": None}

    partial = [p + ".partial" for p in finals]
    handles = [open(p, "w", newline="") for p in partial]
    writers = [csv.writer(h, lineterminator="\n") for h in handles]
    for w in writers:
        w.writerow(M.METRICS_CSV_HEADER)
    timings = []
    error = None
    try:
        for r in range(N_FOLDS):
            t0 = time.perf_counter()
            model_seed, train_seed = _job_seed(plan.seed, variant_index, train_index, r)
            train_cases, tests = round_split(datasets, plan.folds, train_tags, r)
            canvas = plan.config.canvas
            slices = [s for c in train_cases for s in preprocess_patient(c, canvas).slices if not s.excluded]
            spec = ModelSpec(variant=variant, **plan.spec)
            state = build_model(spec, model_seed, dtype=np.dtype(plan.config.dtype))
            result = train(state, slices, replace(plan.config, seed=train_seed))
            ckpt = ""
            if plan.save_checkpoints:
                ckpt = os.path.join(vdir, "checkpoints", f"{'-'.join(train_tags)}_round{r}.npz")
                os.makedirs(os.path.dirname(ckpt), exist_ok=True)
                save_checkpoint(state, ckpt, {"round": r, "train": list(train_tags), "final_loss": result.losses[-1]})
            for cond, w, h in zip(conds, writers, handles):
                for case in tests[cond.test]:
                    rec = evaluate_patient(state, case, canvas, plan.config.crop, plan.spacing_mm)
                    if rec is None:
                        log.warning("%s: patient %s has no evaluable slices", cond.label, case.patient_id)
                        continue
                    for row in M.csv_rows(rec, cond.test, cond.label, r, case.patient_id):
                        w.writerow(row)
                    h.flush()
            timings.append({"round": r, "seconds": time.perf_counter() - t0, "checkpoint": ckpt})
    except Exception as exc:  # recorded; the rest of the matrix continues
        log.error("%s %s failed: %s", variant, "/".join(train_tags), exc)
        error = f"{type(exc).__name__}: {exc}"
    finally:
        for h in handles:
            h.close()
    if error is None:
        for p, f in zip(partial, finals):
            os.replace(p, f)
    return {"variant": variant, "train": list(train_tags), "skipped": False, "timings": timings, "error": error}


def run_matrix(plan, datasets, out_dir, workers=1):
    """Train and evaluate every (variant, training set) job; write per-condition CSVs.

    ``datasets`` maps each tag in ``plan.tags`` to its ordered PatientCase list.
    Returns the list of job reports (timings, errors).
    """
    for tag in plan.tags:
        n = len(datasets[tag])
        covered = sorted(i for f in plan.folds[tag] for i in f)
        if covered != list(range(1, n + 1)):
            raise ValueError(f"folds of {tag} do not partition its {n} patients")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(v, t) for v in range(len(plan.variants)) for t in range(len(training_sets(plan.tags)))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_job, plan, datasets, v, t, out_dir) for v, t in jobs]
            reports = [f.result() for f in futures]
    else:
        reports = [_run_job(plan, datasets, v, t, out_dir) for v, t in jobs]
    return reports


# --------------------------------------------------------------------------
# results


def read_condition_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_results(out_dir, variants, tags):
    """Rows of every completed condition: {variant: {condition label: rows}}."""
    out = {}
    for v in variants:
        out[v] = {}
        for cond in enumerate_conditions(tags):
            p = _condition_csv(out_dir, v, cond)
            if os.path.exists(p):
                out[v][cond.label] = read_condition_csv(p)
    return out


def _round_means(rows, region, metric="dsc"):
    by_round = {}
    for row in rows:
        if row["region"] != region:
            continue
        v = float(row[metric])
        if math.isnan(v):
            continue
        by_round.setdefault(int(row["fold"]), []).append(v)
    return {r: float(np.mean(vs)) for r, vs in sorted(by_round.items())}


def summarize(results, tags):
    """Tables of mean +- sd over rounds, Kiviat spoke data and stats inputs.

    ``results`` is the output of :func:`load_results`.
    """
    conditions = enumerate_conditions(tags)
    variants = list(results)
    tables = {}
    for v in variants:
        rows = []
        for spoke, cond in zip(ROMAN, conditions):
            crow = results[v].get(cond.label)
            if crow is None:
                continue
            entry = {"spoke": spoke, "condition": cond.label, "train": list(cond.train), "test": cond.test}
            for region in M.REGIONS:
                for metric in M.METRIC_NAMES:
                    rm = _round_means(crow, region, metric)
                    vals = list(rm.values())
                    mean = float(np.mean(vals)) if vals else math.nan
                    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else math.nan)
                    entry[f"{region.lower()}_{metric}_mean"] = mean
                    entry[f"{region.lower()}_{metric}_sd"] = sd
                    if metric == "dsc":
                        entry[f"{region.lower()}_dsc_rounds"] = [rm[r] for r in sorted(rm)]
            rows.append(entry)
        tables[v] = rows

    kiviat = {
        v: {
            "spokes": [r["spoke"] for r in tables[v]],
            "labels": [r["condition"] for r in tables[v]],
            "cg": [r["cg_dsc_mean"] for r in tables[v]],
            "pz": [r["pz_dsc_mean"] for r in tables[v]],
        }
        for v in variants
    }
    return {"tags": list(tags), "variants": variants, "tables": tables, "kiviat": kiviat, "stats_input": stats_matrices(tables, tags)}


def stats_matrices(tables, tags):
    """Block x method DSC matrices for the three-dataset and all-condition scopes.

    A block is one (condition, cross-validation round); only blocks present
    for every method are kept.
    """
    variants = list(tables)
    full = tuple(tags)
    out = {}
    for scope in ("three_dataset", "all"):
        out[scope] = {}
        for region in ("cg", "pz"):
            blocks = None
            per_variant = {}
            for v in variants:
                d = {}
                for r in tables[v]:
                    if scope == "three_dataset" and tuple(r["train"]) != full:
                        continue
                    for i, val in enumerate(r[f"{region}_dsc_rounds"]):
                        d[(r["condition"], i)] = val
                per_variant[v] = d
                blocks = set(d) if blocks is None else blocks & set(d)
            order = sorted(blocks or [], key=lambda b: ([c.label for c in enumerate_conditions(tags)].index(b[0]), b[1]))
            out[scope][region] = {
                "methods": variants,
                "blocks": [f"{c}#{i}" for c, i in order],
                "scores": [[per_variant[v][b] for v in variants] for b in order],
            }
    return out


def generalization_contrast(summary, variant):
    """Mean CG DSC of the union-trained conditions vs single-dataset cross-institution conditions."""
    tags = summary["tags"]
    union, single = [], []
    for r in summary["tables"][variant]:
        if len(r["train"]) == len(tags):
            union.append(r["cg_dsc_mean"])
        elif len(r["train"]) == 1 and r["test"] not in r["train"]:
            single.append(r["cg_dsc_mean"])
    return float(np.mean(union)), float(np.mean(single))


def write_summary(summary, path, extra=None):
    doc = dict(summary)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def format_table(summary, region="cg"):
    """Plain-text DSC table (mean +- sd per condition, one column per variant)."""
    buf = io.StringIO()
    variants = summary["variants"]
    buf.write("spoke\tcondition\t" + "\t".join(variants) + "\n")
    first = summary["tables"][variants[0]] if variants else []
    for i, r in enumerate(first):
        cells = []
        for v in variants:
            e = summary["tables"][v][i]
            cells.append(f"{e[f'{region}_dsc_mean']:.1f} +- {e[f'{region}_dsc_sd']:.1f}")
        buf.write(f"{r['spoke']}\t{r['condition']}\t" + "\t".join(cells) + "\n")
    return buf.getvalue()
