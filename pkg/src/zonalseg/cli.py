"""Command-line interface: ``zonalseg <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (JSON, see ``CONFIG_SCHEMA``);
flags override file values and the effective configuration is echoed as
``config.json`` into every output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time

import jsonschema
import numpy as np
from PIL import Image

from . import experiments as E
from . import metrics as M
from .architectures import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .dataset import (
    INTENSITY_SCALE,
    default_profiles,
    fit_to_canvas,
    generate_phantoms,
    labels_to_masks,
    load_dataset,
    preprocess_patient,
    read_label_png,
    read_manifest,
    save_dataset,
    InstitutionProfile,
)
from .postprocess import postprocess_cg
from .reports import stats_report, write_kiviat_figures, write_stats_report
from .training import TrainConfig, center_crop, predict, train
from .verification import GRADCHECK_TOL, layer_checks, model_check

log = logging.getLogger("zonalseg")

_num = {"type": "number"}
_int = {"type": "integer"}
CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "zonalseg run configuration",
    "type": "object",
    "properties": {
        "seed": _int,
        "out": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "variants": {"type": "array", "items": {"enum": ["unet", "enc_use", "enc_dec_use"]}, "minItems": 1},
        "save_checkpoints": {"type": "boolean"},
        "spacing_mm": {"type": "boolean"},
        "data": {"type": "array", "items": {"type": "string"}},
        "spec": {
            "type": "object",
            "properties": {
                "variant": {"enum": ["unet", "enc_use", "enc_dec_use"]},
                "depth": _int,
                "base_width": _int,
                "se_reduction": _int,
            },
            "additionalProperties": False,
        },
        "config": {
            "type": "object",
            "properties": {
                "lr": _num, "momentum": _num, "weight_decay": _num, "batch_size": _int, "epochs": _int,
                "decay_epochs": {"type": "array", "items": _int}, "decay_factor": _num,
                "canvas": _int, "crop": _int, "flip": {"type": "boolean"},
                "dtype": {"enum": ["float64", "float32"]},
                "checkpoint_epochs": {"type": "array", "items": _int},
            },
            "additionalProperties": False,
        },
        "datasets": {
            "type": "object",
            "properties": {
                "paths": {"type": "object", "additionalProperties": {"type": "string"}},
                "phantom": {
                    "type": "object",
                    "properties": {
                        "patients": {"type": "integer", "minimum": 4},
                        "slices_per_patient": {"type": "integer", "minimum": 1},
                        "native_size": {"type": "integer", "minimum": 8},
                        "profiles": {"type": "array", "items": {"type": "object"}},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "spec": {"variant": "enc_dec_use", "depth": 4, "base_width": 8, "se_reduction": 8},
    "config": {},
    "variants": ["unet", "enc_use", "enc_dec_use"],
    "workers": 1,
    "save_checkpoints": False,
    "spacing_mm": False,
    "datasets": {"phantom": {"patients": 8, "slices_per_patient": 2, "native_size": 72}},
}


class CLIError(Exception):
    pass


def _deep_update(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {path}: {exc}") from exc
        try:
            jsonschema.validate(user, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(k) for k in exc.absolute_path) or "<root>"
            raise CLIError(f"invalid config {path}: {where}: {exc.message}") from exc
        _deep_update(cfg, user)
    return cfg


def _apply_overrides(cfg, args):
    for key in ("seed", "out", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "variants", None):
        cfg["variants"] = args.variants
    for key in ("variant", "depth", "base_width", "se_reduction"):
        v = getattr(args, key, None)
        if v is not None:
            cfg["spec"][key] = v
    for key in ("lr", "momentum", "weight_decay", "batch_size", "epochs", "canvas", "crop", "dtype"):
        v = getattr(args, key, None)
        if v is not None:
            cfg["config"][key] = v
    if getattr(args, "decay_epochs", None) is not None:
        cfg["config"]["decay_epochs"] = args.decay_epochs
    return cfg


def _train_config(cfg, seed):
    try:
        return TrainConfig(seed=seed, **cfg["config"])
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid training configuration: {exc}") from exc


def _echo(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _profiles(pcfg):
    n = pcfg.get("patients", 8)
    size = pcfg.get("native_size", 72)
    if "profiles" in pcfg:
        return [InstitutionProfile(**{**p, "n_patients": p.get("n_patients", n)}) for p in pcfg["profiles"]]
    return default_profiles(n, size)


def _phantom_sets(pcfg, seed):
    profiles = _profiles(pcfg)
    sets = generate_phantoms(profiles, pcfg.get("slices_per_patient", 2), seed)
    return {p.tag: cases for p, cases in zip(profiles, sets)}


# --------------------------------------------------------------------------
# subcommands


def cmd_generate_phantom(args, cfg):
    pcfg = cfg["datasets"]["phantom"]
    if args.patients is not None:
        pcfg["patients"] = args.patients
    if args.slices is not None:
        pcfg["slices_per_patient"] = args.slices
    if args.native_size is not None:
        pcfg["native_size"] = args.native_size
    out = cfg.get("out") or "phantoms"
    sets = _phantom_sets(pcfg, cfg["seed"])
    _echo(cfg, out)
    for tag, cases in sets.items():
        save_dataset(cases, os.path.join(out, tag), tag=tag)
        print(f"{tag}: {len(cases)} patients -> {os.path.join(out, tag)}")
    return 0


def _load_many(paths):
    cases = []
    for p in paths:
        if not os.path.isdir(p):
            raise CLIError(f"dataset directory not found: {p}")
        cases += load_dataset(p)
    return cases


def cmd_train(args, cfg):
    data = args.data or cfg.get("data")
    if not data:
        raise CLIError("train needs --data DIR [DIR ...]")
    out = cfg.get("out") or "run"
    seed = cfg["seed"]
    tc = _train_config(cfg, seed)
    cases = _load_many(data)
    slices = [s for c in cases for s in preprocess_patient(c, tc.canvas).slices if not s.excluded]
    spec = ModelSpec(**cfg["spec"])
    state = build_model(spec, seed, dtype=np.dtype(tc.dtype))
    _echo(cfg, out)
    boundaries = set(tc.decay_epochs) | set(tc.checkpoint_epochs)
    loss_path = os.path.join(out, "loss.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr"])

        def on_epoch(epoch, loss, lr, st):
            w.writerow([epoch, f"{loss:.10f}", f"{lr:.10g}"])
            fh.flush()
            if epoch + 1 in boundaries:
                save_checkpoint(st, os.path.join(out, f"checkpoint_epoch{epoch + 1:03d}.npz"), {"epoch": epoch + 1})

        result = train(state, slices, tc, on_epoch=on_epoch)
    save_checkpoint(state, os.path.join(out, "checkpoint_final.npz"), {"epoch": tc.epochs, "final_loss": result.losses[-1]})
    if not args.no_figures:
        from .plotting import loss_curve

        loss_curve(result.losses, result.lrs, os.path.join(out, "loss.svg"))
    print(f"trained {spec.variant} for {tc.epochs} epochs on {len(slices)} slices; final loss {result.losses[-1]:.4f}")
    return 0


def _write_metrics(rows, out):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(M.METRICS_CSV_HEADER)
        for r in rows:
            w.writerow(r)
    finally:
        if out:
            fh.close()


def _mask_pairs(pred_root, truth_root):
    truth = read_manifest(truth_root)
    for entry in truth["patients"]:
        pid = entry["id"]
        for k in range(entry["n_slices"]):
            t_path = os.path.join(truth_root, pid, f"slice_{k:03d}_mask.png")
            p_path = os.path.join(pred_root, pid, f"slice_{k:03d}_mask.png")
            if not os.path.exists(p_path):
                raise CLIError(f"missing prediction {p_path}")
            yield truth, pid, k, read_label_png(p_path), read_label_png(t_path)


def cmd_evaluate(args, cfg):
    condition = args.condition or "-"
    rows = []
    tc = _train_config(cfg, cfg["seed"])
    if args.pred and args.truth:
        by_patient = {}
        tag = ""
        for manifest, pid, k, plab, tlab in _mask_pairs(args.pred, args.truth):
            tag = manifest.get("tag", "")
            spacing = manifest.get("pixel_spacing") if args.mm else None
            tlab = _match_shape(tlab, plab.shape, tc.canvas)
            pwg, pcg = labels_to_masks(plab)
            twg, tcg = labels_to_masks(tlab)
            pred = {"CG": pcg, "PZ": pwg & ~pcg}
            truth = {"CG": tcg, "PZ": twg & ~tcg}
            by_patient.setdefault(pid, []).append(M.slice_metrics(pred, truth, spacing))
        for pid, recs in by_patient.items():
            rec = M.aggregate_patient(recs)
            if rec is not None:
                rows += list(M.csv_rows(rec, tag, condition, 0, pid))
    elif args.checkpoint and args.data:
        state = load_checkpoint(args.checkpoint)
        for root in args.data:
            tag = read_manifest(root).get("tag", "")
            for case in load_dataset(root):
                rec = E.evaluate_patient(state, case, tc.canvas, tc.crop, args.mm)
                if rec is not None:
                    rows += list(M.csv_rows(rec, tag, condition, 0, case.patient_id))
                if args.save_prob:
                    _save_probabilities(state, case, tc, os.path.join(args.save_prob, tag, case.patient_id))
    else:
        raise CLIError("evaluate needs either --pred and --truth, or --checkpoint and --data")
    _write_metrics(rows, args.out)
    return 0


def _save_probabilities(state, case, tc, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    pre = preprocess_patient(case, tc.canvas)
    images = np.stack([center_crop(s.image, tc.crop) for s in pre.slices])
    for k, prob in enumerate(predict(state, images)):
        arr = np.round(np.clip(prob, 0, 1) * INTENSITY_SCALE).astype(np.uint16)
        Image.fromarray(arr).save(os.path.join(out_dir, f"slice_{k:03d}_prob.png"))


def cmd_postprocess(args, cfg):
    truth = read_manifest(args.truth)
    tc = _train_config(cfg, cfg["seed"])
    out_manifest = dict(truth)
    for entry in truth["patients"]:
        pid = entry["id"]
        os.makedirs(os.path.join(args.out, pid), exist_ok=True)
        for k in range(entry["n_slices"]):
            prob_path = os.path.join(args.prob, pid, f"slice_{k:03d}_prob.png")
            if not os.path.exists(prob_path):
                raise CLIError(f"missing probability map {prob_path}")
            prob = np.array(Image.open(prob_path)).astype(np.float64) / INTENSITY_SCALE
            wg, _ = labels_to_masks(read_label_png(os.path.join(args.truth, pid, f"slice_{k:03d}_mask.png")))
            wg = _match_shape(wg, prob.shape, tc.canvas)
            cg, pz = postprocess_cg(prob, wg, args.threshold)
            lab = np.zeros(wg.shape, np.uint8)
            lab[pz] = 1
            lab[cg] = 2
            Image.fromarray(lab, mode="L").save(os.path.join(args.out, pid, f"slice_{k:03d}_mask.png"))
    with open(os.path.join(args.out, "dataset.json"), "w") as fh:
        json.dump(out_manifest, fh, indent=2, sort_keys=True)
    print(f"post-processed {sum(e['n_slices'] for e in truth['patients'])} slices -> {args.out}")
    return 0


def _match_shape(mask, shape, canvas):
    """Bring a native-resolution mask onto a network canvas crop of ``shape``."""
    if mask.shape == shape:
        return mask
    return center_crop(fit_to_canvas(mask, canvas), shape[-1])


def _matrix_datasets(cfg):
    dcfg = cfg["datasets"]
    if "paths" in dcfg:
        datasets = {}
        for tag, root in dcfg["paths"].items():
            if not os.path.isdir(root):
                raise CLIError(f"dataset directory not found: {root}")
            datasets[tag] = load_dataset(root)
        return datasets
    return _phantom_sets(dcfg.get("phantom", {}), cfg["seed"])


def build_plan(cfg, datasets):
    tags = tuple(datasets)
    if len(tags) != 3:
        raise CLIError(f"the matrix needs exactly 3 datasets, got {len(tags)}")
    spec = {k: v for k, v in cfg["spec"].items() if k != "variant"}
    for v in cfg["variants"]:
        ModelSpec(variant=v, **spec)
    return E.MatrixPlan(
        tags=tags,
        folds={t: E.make_folds(len(datasets[t])) for t in tags},
        variants=tuple(cfg["variants"]),
        spec=spec,
        config=_train_config(cfg, cfg["seed"]),
        seed=cfg["seed"],
        save_checkpoints=cfg["save_checkpoints"],
        spacing_mm=cfg["spacing_mm"],
    )


def run_matrix_from_config(cfg, out, figures=True):
    datasets = _matrix_datasets(cfg)
    plan = build_plan(cfg, datasets)
    _echo(cfg, out)
    with open(os.path.join(out, "matrix.json"), "w") as fh:
        json.dump(
            {"tags": list(plan.tags), "folds": plan.folds, "variants": list(plan.variants), "spec": plan.spec,
             "config": plan.config.to_dict(), "seed": plan.seed},
            fh, indent=2, sort_keys=True,
        )
    t0 = time.perf_counter()
    reports = E.run_matrix(plan, datasets, out, workers=cfg["workers"])
    results = E.load_results(out, plan.variants, plan.tags)
    summary = E.summarize(results, plan.tags)
    failures = [r for r in reports if r["error"]]
    E.write_summary(summary, os.path.join(out, "summary.json"), {"failures": failures})
    with open(os.path.join(out, "timings.json"), "w") as fh:
        json.dump({"total_seconds": time.perf_counter() - t0, "jobs": reports}, fh, indent=2)
    if figures:
        write_kiviat_figures(summary, out)
    return summary, failures


def cmd_matrix(args, cfg):
    out = cfg.get("out") or "matrix_results"
    summary, failures = run_matrix_from_config(cfg, out, figures=not args.no_figures)
    for v in summary["variants"]:
        print(f"# {v}")
        for r in summary["tables"][v]:
            print(
                f"{r['spoke']:>5}  {r['condition']:<10}  CG DSC {r['cg_dsc_mean']:5.1f} +- {r['cg_dsc_sd']:4.1f}"
                f"  PZ DSC {r['pz_dsc_mean']:5.1f} +- {r['pz_dsc_sd']:4.1f}"
            )
    for f in failures:
        print(f"FAILED {f['variant']} {'/'.join(f['train'])}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def cmd_stats(args, cfg):
    summary_path = os.path.join(args.results, "summary.json")
    if not os.path.exists(summary_path):
        raise CLIError(f"no summary.json in {args.results}; run `matrix` first")
    with open(summary_path) as fh:
        summary = json.load(fh)
    report = stats_report(summary["stats_input"], args.alpha, args.control, args.f_refinement)
    out = args.out or args.results
    write_stats_report(report, out, figures=not args.no_figures)
    for scope, regions in report["scopes"].items():
        for region, e in regions.items():
            if "statistic" not in e:
                print(f"{scope:<14} {region}: skipped ({e['skipped']})")
                continue
            ranks = ", ".join(f"{m}={r:.2f}" for m, r in zip(e["methods"], e["mean_ranks"]))
            print(f"{scope:<14} {region}: chi2={e['statistic']:.3f} p={e['p_value']:.3g} CD={e['cd']:.3f} ranks: {ranks}")
    return 0


def cmd_gradcheck(args, cfg):
    seed = cfg["seed"]
    ok = True
    results = layer_checks(seed, args.eps)
    if not args.skip_model:
        results["model(enc_dec_use,depth2,width4,16x16)"] = model_check(seed, args.eps)
    for name, err in results.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name:<40} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


# --------------------------------------------------------------------------


def _add_common(p, train_flags=False, model_flags=False):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    if model_flags:
        p.add_argument("--variant", choices=["unet", "enc_use", "enc_dec_use"])
        p.add_argument("--depth", type=int)
        p.add_argument("--base-width", dest="base_width", type=int)
        p.add_argument("--se-reduction", dest="se_reduction", type=int)
    if train_flags:
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--decay-epochs", dest="decay_epochs", type=int, nargs="*")
        p.add_argument("--canvas", type=int)
        p.add_argument("--crop", type=int)
        p.add_argument("--dtype", choices=["float64", "float32"])


def build_parser():
    parser = argparse.ArgumentParser(prog="zonalseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantom", help="write three synthetic institution datasets")
    _add_common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--slices", type=int)
    p.add_argument("--native-size", dest="native_size", type=int)
    p.set_defaults(func=cmd_generate_phantom)

    p = sub.add_parser("train", help="train one model on one or more datasets")
    _add_common(p, train_flags=True, model_flags=True)
    p.add_argument("--data", nargs="+")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-patient metrics CSV")
    _add_common(p, train_flags=True)
    p.add_argument("--pred", help="dataset directory of predicted label masks")
    p.add_argument("--truth", help="dataset directory of reference label masks")
    p.add_argument("--checkpoint")
    p.add_argument("--data", nargs="+")
    p.add_argument("--save-prob", dest="save_prob", help="write probability maps here")
    p.add_argument("--condition")
    p.add_argument("--mm", action="store_true", help="distances in mm using the manifest pixel spacing")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="run the 21-condition cross-validation matrix")
    _add_common(p, train_flags=True, model_flags=True)
    p.add_argument("--variants", nargs="+", choices=["unet", "enc_use", "enc_dec_use"])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("stats", help="Friedman + Bonferroni-Dunn report for a completed matrix")
    _add_common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--alpha", type=float, default=0.05, choices=[0.05, 0.10])
    p.add_argument("--control")
    p.add_argument("--f-refinement", dest="f_refinement", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and a small network")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--skip-model", dest="skip_model", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("postprocess", help="threshold + morphology on saved probability maps")
    _add_common(p, train_flags=True)
    p.add_argument("--prob", required=True, help="directory of slice_###_prob.png per patient")
    p.add_argument("--truth", required=True, help="dataset directory providing the WG masks")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_postprocess)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and os.environ.get("ZONALSEG_WORKERS"):
        args.workers = int(os.environ["ZONALSEG_WORKERS"])
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "postprocess" and not args.out:
            raise CLIError("postprocess needs --out DIR")
        return args.func(args, cfg)
    except (CLIError, ValueError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
