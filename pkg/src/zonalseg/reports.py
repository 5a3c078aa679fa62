"""Stats report assembly and figure rendering for completed matrices."""

from __future__ import annotations

import json
import logging
import os

from . import plotting
from .stats import bonferroni_dunn, friedman

log = logging.getLogger(__name__)


def stats_report(stats_input, alpha=0.05, control=None, f_refinement=False):
    """Friedman + Bonferroni-Dunn per scope and region.

    ``stats_input`` is the ``stats_input`` block of a matrix summary.
    ``control`` names a method; by default the best-ranked one is used.
    """
    report = {"alpha": alpha, "scopes": {}}
    for scope, regions in stats_input.items():
        report["scopes"][scope] = {}
        for region, data in regions.items():
            methods, scores = data["methods"], data["scores"]
            entry = {"methods": methods, "n_blocks": len(scores)}
            if len(methods) < 2 or len(scores) < 2:
                entry["skipped"] = f"need >= 2 methods and >= 2 blocks (have {len(methods)}, {len(scores)})"
                report["scopes"][scope][region] = entry
                continue
            fr = friedman(scores, f_refinement=f_refinement)
            ctrl = methods.index(control) if control is not None else None
            bd = bonferroni_dunn(scores, ctrl, alpha)
            entry.update(
                statistic=fr.statistic,
                p_value=fr.p_value,
                mean_ranks=[float(x) for x in fr.mean_ranks],
                cd=bd.cd,
                q_alpha=bd.q_alpha,
                control=methods[bd.control],
                significant_vs_control={m: s for m, s in zip(methods, bd.significant)},
                friedman_rejects=bool(fr.p_value < alpha),
            )
            if f_refinement:
                entry.update(iman_davenport=fr.iman_davenport, p_value_f=fr.p_value_f)
            report["scopes"][scope][region] = entry
    return report


def write_stats_report(report, out_dir, figures=True, fmt="svg"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    paths = []
    if figures:
        for scope, regions in report["scopes"].items():
            for region, e in regions.items():
                if "cd" not in e:
                    continue
                p = os.path.join(out_dir, f"cd_{scope}_{region}.{fmt}")
                plotting.cd_diagram(
                    e["methods"], e["mean_ranks"], e["cd"], e["methods"].index(e["control"]), p,
                    title=f"{region.upper()} DSC, {scope.replace('_', ' ')} (p = {e['p_value']:.2g})",
                )
                paths.append(p)
    return paths


def write_kiviat_figures(summary, out_dir, fmt="svg"):
    paths = []
    for v, data in summary["kiviat"].items():
        if not data["spokes"]:
            continue
        p = os.path.join(out_dir, f"kiviat_{v}.{fmt}")
        plotting.kiviat(data["spokes"], data["cg"], data["pz"], p, title=v)
        paths.append(p)
    return paths
