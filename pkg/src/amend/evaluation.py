"""Displacement metrics, tail splits, value-at-risk and report assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .routing import ExpertRanking

SPLITS = (("Top1%", 1), ("Top3%", 3), ("Top5%", 5))


@dataclass(frozen=True)
class SampleError:
    sample_id: int
    min_ade: float
    min_fde: float
    policy: str = ""


def _hyps(pred) -> np.ndarray:
    return np.asarray(getattr(pred, "hypotheses", pred), dtype=float)


def min_ade(pred, truth) -> float:
    d = np.linalg.norm(_hyps(pred) - np.asarray(truth, dtype=float)[None], axis=-1)
    return float(d.mean(axis=1).min())


def min_fde(pred, truth) -> float:
    d = np.linalg.norm(_hyps(pred)[:, -1] - np.asarray(truth, dtype=float)[-1], axis=-1)
    return float(d.min())


def var_alpha(errors: Sequence[float], alpha: float) -> float:
    """Smallest observed e with empirical P(E >= e) <= 1 - alpha (the maximum if none).

    ``alpha`` is read as the decimal it prints as, so 0.97 means 97/100 exactly.
    """
    e = np.sort(np.asarray(errors, dtype=float))
    if len(e) == 0:
        raise ValueError("VaR of an empty error list")
    a = Fraction(repr(float(alpha)))
    if not 0 < a < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = len(e)
    budget = (1 - a) * n  # allowed count of errors >= e
    # count(E >= e[i]) = n - (first index holding e[i])
    first = np.searchsorted(e, e, side="left")
    ok = (n - first) <= budget
    return float(e[np.argmax(ok)]) if ok.any() else float(e[-1])


def relative_metrics(split_ade: float, split_fde: float, all_ade: float, all_fde: float) -> tuple[float, float]:
    if not (all_ade > 0 and all_fde > 0):
        raise ValueError("All-split metrics must be positive")
    return split_ade / all_ade, split_fde / all_fde


def routing_accuracy(selections: Mapping[int, int], rankings: Mapping[int, ExpertRanking]) -> tuple[float, float]:
    """Fraction of samples whose chosen expert ranks first on ADE, and on FDE."""
    if set(selections) != set(rankings):
        raise ValueError("selections and rankings must cover the same sample ids")
    if not selections:
        raise ValueError("no samples")
    ade_hits = sum(rankings[s].rank_ade[c] == 1 for s, c in selections.items())
    fde_hits = sum(rankings[s].rank_fde[c] == 1 for s, c in selections.items())
    n = len(selections)
    return ade_hits / n, fde_hits / n


@dataclass
class EvalReport:
    splits: dict
    var: dict
    routing: dict
    config_fingerprint: str
    policy: str = ""

    def to_dict(self) -> dict:
        return {
            "splits": self.splits,
            "var": self.var,
            "routing": self.routing,
            "config_fingerprint": self.config_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def build_report(
    errors: Sequence[SampleError],
    splits: Mapping[str, set],
    routing: Mapping[str, tuple[float, float]] | None = None,
    var_level: float = 0.97,
    config_fingerprint: str = "",
) -> EvalReport:
    """Aggregate per-sample errors; ``splits`` maps split name to sample ids (All is added)."""
    if not errors:
        raise ValueError("no per-sample errors")
    by_id = {e.sample_id: e for e in errors}
    ordered = [by_id[i] for i in sorted(by_id)]
    all_ade = float(np.mean([e.min_ade for e in ordered]))
    all_fde = float(np.mean([e.min_fde for e in ordered]))
    table = {}
    for name in [*splits, "All"]:
        ids = sorted(by_id) if name == "All" else sorted(splits[name])
        ade = float(np.mean([by_id[i].min_ade for i in ids]))
        fde = float(np.mean([by_id[i].min_fde for i in ids]))
        rel_ade, rel_fde = relative_metrics(ade, fde, all_ade, all_fde)
        table[name] = {"ade": ade, "fde": fde, "rel_ade": rel_ade, "rel_fde": rel_fde, "n": len(ids)}
    var = {
        "alpha": var_level,
        "ade": var_alpha([e.min_ade for e in ordered], var_level),
        "fde": var_alpha([e.min_fde for e in ordered], var_level),
    }
    routes = {p: {"acc_ade": a, "acc_fde": f} for p, (a, f) in sorted((routing or {}).items())}
    return EvalReport(table, var, routes, config_fingerprint, ordered[0].policy)


def format_table(reports: Mapping[str, EvalReport]) -> str:
    """Fixed-width table: ADE/FDE at 2 decimals, relative columns at 1 decimal."""
    names = list(next(iter(reports.values())).splits)
    split_names = [n for n in names if n != "All"]
    head = ["Method", *names, "VaR", *(f"rel {n}" for n in split_names)]
    rows = [head]
    for method, rep in reports.items():
        row = [method]
        row += [f"{rep.splits[n]['ade']:.2f}/{rep.splits[n]['fde']:.2f}" for n in names]
        row.append(f"{rep.var['ade']:.2f}/{rep.var['fde']:.2f}")
        row += [f"{rep.splits[n]['rel_ade']:.1f}/{rep.splits[n]['rel_fde']:.1f}" for n in split_names]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    routing = next(iter(reports.values())).routing
    if routing:
        lines += ["", "Routing accuracy (ADE/FDE)"]
        lines += [f"  {p:<8} {v['acc_ade']:.2f}/{v['acc_fde']:.2f}" for p, v in routing.items()]
    return "\n".join(lines) + "\n"


def errors_csv(errors_by_policy: Mapping[str, Sequence[SampleError]]) -> str:
    lines = ["policy,sample_id,min_ade,min_fde"]
    for policy, errs in errors_by_policy.items():
        for e in sorted(errs, key=lambda e: e.sample_id):
            lines.append(f"{policy},{e.sample_id},{float(e.min_ade)!r},{float(e.min_fde)!r}")
    return "\n".join(lines) + "\n"
