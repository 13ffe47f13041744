"""Aggregate finished run directories into metric tables, curve data and a summary."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .metrics import METRIC_KEYS, mean_sd
from .runtime import write_json, write_text
from .schemas import validate
from .stats import paired_t_test
from .trainer import TrainHistory


class MissingRunError(FileNotFoundError):
    pass


@dataclass
class ScoreSet:
    """Per-case scores for one run (or one variant inside an ablation run)."""

    label: str
    cases: dict[str, dict]


def _read_json(path: Path):
    return json.loads(path.read_text())


def load_runs(run_dirs) -> list[tuple[Path, dict]]:
    runs, missing = [], []
    for d in map(Path, run_dirs):
        m = d / "manifest.json"
        if m.is_file():
            runs.append((d, _read_json(m)))
        else:
            missing.append(str(m))
    if missing:
        raise MissingRunError("missing run manifests:\n  " + "\n  ".join(missing))
    if not runs:
        raise ValueError("emit_report needs at least one run")
    return runs


def _score_sets(run_dir: Path) -> list[ScoreSet]:
    out = []
    if (run_dir / "metrics.json").is_file():
        out.append(ScoreSet(run_dir.name, _read_json(run_dir / "metrics.json")["cases"]))
    if (run_dir / "comparison.json").is_file():
        for variant, reports in _read_json(run_dir / "comparison.json")["reports"].items():
            pooled = {f"{rep['label'].rsplit('/', 1)[-1]}/{cid}": row
                      for rep in reports for cid, row in rep["cases"].items()}
            out.append(ScoreSet(f"{run_dir.name}:{variant}", pooled))
    return out


def metric_table(score_sets: list[ScoreSet]) -> dict:
    """One row per (score set, metric).

    Sets sharing the same case keys are comparable; each gets a paired test
    against the first set in its group. The ``p`` column exists only when
    some group holds two or more sets.
    """
    groups: dict[tuple, list[ScoreSet]] = {}
    for s in score_sets:
        groups.setdefault(tuple(sorted(s.cases)), []).append(s)
    has_p = any(len(g) > 1 for g in groups.values())
    rows = []
    for keys, group in groups.items():
        ref = group[0]
        for s in group:
            for metric in METRIC_KEYS:
                vals = [s.cases[k][metric] for k in keys]
                m, sd, n = mean_sd(vals)
                row = {"run": s.label, "metric": metric, "mean": m, "sd": sd, "n": n}
                if has_p:
                    row["p"] = None
                    if s is not ref:
                        pairs = [(a, b) for a, b in zip(vals, (ref.cases[k][metric] for k in keys))
                                 if a is not None and b is not None]
                        if len(pairs) >= 2:
                            row["p"] = paired_t_test(*zip(*pairs)).p
                        row["reference"] = ref.label
                rows.append(row)
    return {"schema": "report-table/1", "has_p": has_p, "rows": rows}


def table_csv(table: dict) -> str:
    cols = ["run", "metric", "mean±sd", "n", *(["p"] if table["has_p"] else [])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in table["rows"]:
        cell = "" if r["mean"] is None else f"{r['mean']!r}±{r['sd']!r}"
        line = [r["run"], r["metric"], cell, r["n"]]
        if table["has_p"]:
            line.append("" if r.get("p") is None else repr(r["p"]))
        w.writerow(line)
    return buf.getvalue()


def _curve_sources(run_dir: Path) -> dict[str, str]:
    """fraction tag → history CSV text, for few-shot runs."""
    path = run_dir / "fewshot.json"
    if not path.is_file():
        return {}
    runs = _read_json(path)["fractions"]
    return {f: TrainHistory.from_dict(r["history"]).to_csv() for f, r in runs.items()}


def _summary(runs, table: dict, curves: list[str]) -> str:
    lines = [f"runs: {len(runs)}"]
    for d, man in runs:
        lines.append(f"  {d.name}: {man['command']} (seeds {man['seeds']}, threads {man['threads']})")
    lines.append("")
    for r in table["rows"]:
        if r["mean"] is None:
            continue
        line = f"{r['run']:<32} {r['metric']:<12} {r['mean']:.4f} ± {r['sd']:.4f} (n={r['n']})"
        if r.get("p") is not None:
            line += f"  p={r['p']:.4g} vs {r['reference']}"
        lines.append(line)
    if curves:
        lines += ["", "curve files:", *(f"  {c}" for c in curves)]
    return "\n".join(lines) + "\n"


def emit_report(run_dirs, out_dir: str | os.PathLike) -> dict:
    """Write ``metrics_table.{json,csv}``, ``curves/*.csv`` and ``summary.txt``."""
    runs = load_runs(run_dirs)
    out = Path(out_dir)
    sets = [s for d, _ in runs for s in _score_sets(d)]
    table = metric_table(sets)
    validate(table, "report-table/1")
    write_json(out / "metrics_table.json", table)
    write_text(out / "metrics_table.csv", table_csv(table))

    curves = []
    tag_run = len(runs) > 1
    for d, _ in runs:
        for frac, text in _curve_sources(d).items():
            name = f"{d.name}_fraction_{frac}.csv" if tag_run else f"fraction_{frac}.csv"
            write_text(out / "curves" / name, text)
            curves.append(f"curves/{name}")
    write_text(out / "summary.txt", _summary(runs, table, curves))
    return {"table": table, "curves": curves}
