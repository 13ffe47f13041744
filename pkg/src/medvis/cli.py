"""Command-line entry point: ``medvis <command> [--config PATH] [--seed N] [--out-dir DIR]``.

Exit status is 0 on success, 1 on usage or config errors and 2 on runtime failure.
Every command writes its outputs atomically and finishes with ``manifest.json``;
a run directory without a manifest did not complete.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import ablation
from .activations import export_activation_maps
from .config import ConfigError, RunConfig, load_config
from .data import load_cases, load_mask, make_split
from .data.synthetic import generate_dataset, write_dataset
from .insert import weight_source_id
from .metrics import MetricsReport
from .model import ModelSpec, build_model
from .numerics import snapshot
from .report import emit_report
from .runtime import limited_threads, manifest, write_json, write_text
from .schemas import validate
from .trainer import evaluate, run_few_shot, train

log = logging.getLogger("medvis")

COMMANDS = ("gen-data", "train", "eval", "few-shot", "ablate", "rank-sweep", "export-activations", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medvis", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="run config JSON; defaults apply to omitted fields")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out-dir", type=Path, help=f"output directory (default runs/{name})")
        if name == "report":
            p.add_argument("runs", nargs="*", type=Path, help="run directories (default experiment.runs)")
    return parser


class Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.weight_source: str | None = None
        self.extra: dict = {}

    def json(self, name: str, obj, schema: str | None = None) -> Path:
        if schema:
            validate(obj, schema)
        self.outputs.append(name)
        return write_json(self.out / name, obj)

    def text(self, name: str, text: str) -> Path:
        self.outputs.append(name)
        return write_text(self.out / name, text)

    def finish(self) -> Path:
        c = self.cfg
        seeds = {"data": c.data.seed, "split": c.experiment.split_seed, "train": c.train.seed,
                 "experiment": list(c.experiment.seeds)}
        man = manifest(c.resolved(), seeds, self.timings, self.weight_source, self.extra)
        man = {"schema": "run-manifest/1", "command": self.command, **man, "outputs": self.outputs}
        validate(man, "run-manifest/1")
        return write_json(self.out / "manifest.json", man)


def _cases(cfg: RunConfig) -> dict:
    d = cfg.data
    if d.manifest:
        cases = load_cases(d.manifest)
    else:
        cases = generate_dataset(d.synthetic(), d.n_cases, d.seed)
    return {v.case_id: (v, m) for v, m in cases}


def _split(cfg: RunConfig, cases: dict):
    return make_split(cases, cfg.experiment.split_seed)


def _weight_source(spec: ModelSpec) -> str | None:
    return weight_source_id(spec.insert) if spec.insert else None


def _load_trained(path: Path):
    spec = ModelSpec.from_dict(json.loads((path / "spec.json").read_text()))
    model = build_model(spec)
    model.load_state_dict(snapshot.load(path / "weights.lbsw"))
    return model


def cmd_gen_data(run: Run):
    d = run.cfg.data
    cases = generate_dataset(d.synthetic(), d.n_cases, d.seed)
    path = write_dataset(cases, run.out / "data")
    run.outputs.append(str(path.relative_to(run.out)))
    run.extra["cases"] = len(cases)


def cmd_train(run: Run):
    cfg = run.cfg
    cases = _cases(cfg)
    split = _split(cfg, cases)
    spec = cfg.model_spec()
    run.weight_source = _weight_source(spec)
    tcfg = cfg.train.train_config()
    model = build_model(spec, tcfg.seed)
    t0 = time.perf_counter()
    result = train(model, [cases[i] for i in split.train], [cases[i] for i in split.validation], tcfg)
    run.timings["train_s"] = time.perf_counter() - t0
    result.best.save(run.out / "checkpoint")
    write_json(run.out / "checkpoint" / "spec.json", spec.to_dict())
    run.outputs.append("checkpoint")
    model.load_state_dict(result.best.weights)
    report = evaluate(model, [cases[i] for i in split.test], cfg.experiment.tau, label=run.out.name)
    run.json("split.json", split.to_dict())
    run.json("history.json", result.history.to_dict())
    run.text("history.csv", result.history.to_csv())
    run.json("metrics.json", report.to_dict(), "metrics-report/1")
    run.text("metrics.csv", report.to_csv())


def cmd_eval(run: Run):
    cfg = run.cfg
    exp = cfg.experiment
    if exp.predictions:
        truth = _cases(cfg)
        spacing = next(iter(truth.values()))[0].spacing
        report = MetricsReport(tau=min(spacing) if exp.tau is None else exp.tau, spacing=spacing,
                               label=run.out.name)
        for entry in _prediction_entries(Path(exp.predictions)):
            cid = entry["case_id"]
            if cid not in truth:
                raise KeyError(f"prediction for unknown case {cid!r}")
            vol, mask = truth[cid]
            report.add(cid, load_mask(entry["mask"], cid).labels, mask.labels, vol.spacing)
    elif exp.checkpoint:
        model = _load_trained(Path(exp.checkpoint))
        run.weight_source = _weight_source(model.spec)
        cases = _cases(cfg)
        split = _split(cfg, cases)
        report = evaluate(model, [cases[i] for i in split.test], exp.tau, label=run.out.name)
    else:
        raise ConfigError("eval needs experiment.predictions or experiment.checkpoint")
    run.json("metrics.json", report.to_dict(), "metrics-report/1")
    run.text("metrics.csv", report.to_csv())


def _prediction_entries(path: Path) -> list[dict]:
    entries = json.loads(path.read_text())
    return [{"case_id": e["case_id"], "mask": str((path.parent / e["mask"]).resolve())} for e in entries]


def cmd_few_shot(run: Run):
    cfg = run.cfg
    cases = _cases(cfg)
    split = _split(cfg, cases)
    spec = cfg.model_spec()
    run.weight_source = _weight_source(spec)
    t0 = time.perf_counter()
    runs = run_few_shot(cases, split, spec, cfg.train.train_config(), cfg.experiment.fractions)
    run.timings["train_s"] = time.perf_counter() - t0
    payload = {"fractions": {str(f): {"train_ids": r.train_ids, "history": r.history.to_dict()}
                             for f, r in runs.items()}}
    run.json("fewshot.json", payload)
    for f, r in runs.items():
        run.text(f"curve_fraction_{f}.csv", r.history.to_csv())


def cmd_ablate(run: Run):
    cfg = run.cfg
    cases = _cases(cfg)
    split = _split(cfg, cases)
    specs = {k.value: cfg.model_spec(k) for k in cfg.experiment.variants}
    llama = [s for s in specs.values() if s.insert]
    run.weight_source = _weight_source(llama[0]) if llama else None
    t0 = time.perf_counter()
    comp = ablation.compare_variants(specs, cases, split, cfg.train.train_config(), cfg.experiment.seeds,
                                     cfg.experiment.tau)
    run.timings["ablate_s"] = time.perf_counter() - t0
    run.json("budget.json", comp.budget, "budget-report/1")
    run.json("comparison.json", comp.to_dict(), "comparison/1")
    rows = ["variant,metric,mean,sd,n"]
    rows += [f"{r['variant']},{r['metric']},{'' if r['mean'] is None else repr(r['mean'])},"
             f"{'' if r['sd'] is None else repr(r['sd'])},{r['n']}" for r in comp.rows()]
    run.text("comparison.csv", "\n".join(rows) + "\n")


def cmd_rank_sweep(run: Run):
    cfg = run.cfg
    cases = _cases(cfg)
    split = _split(cfg, cases)
    spec = cfg.model_spec(ablation.VariantKind.LLAMA_LORA)
    run.weight_source = _weight_source(spec)
    t0 = time.perf_counter()
    table = ablation.rank_sweep(spec, cases, split, cfg.train.train_config(), cfg.experiment.ranks,
                                cfg.experiment.tau)
    run.timings["sweep_s"] = time.perf_counter() - t0
    run.json("rank_sweep.json", table, "rank-sweep/1")
    run.text("rank_sweep.csv", ablation.rank_sweep_csv(table))


def cmd_export_activations(run: Run):
    cfg = run.cfg
    if cfg.experiment.checkpoint:
        model = _load_trained(Path(cfg.experiment.checkpoint))
    else:
        model = build_model(cfg.model_spec(), cfg.train.seed)
    run.weight_source = _weight_source(model.spec)
    cases = _cases(cfg)
    split = _split(cfg, cases)
    vol = cases[split.test[0]][0]
    bundle = export_activation_maps(model, vol.intensities, run.out / "activations", cfg.experiment.taps)
    validate(json.loads((run.out / "activations" / "activations.json").read_text()), "activations/1")
    run.outputs.append("activations")
    run.extra["case_id"] = vol.case_id
    run.extra["skipped_taps"] = bundle.skipped


def cmd_report(run: Run, runs: list[Path]):
    dirs = runs or [Path(r) for r in run.cfg.experiment.runs]
    if not dirs:
        raise ConfigError("report needs run directories (positional or experiment.runs)")
    result = emit_report(dirs, run.out)
    run.outputs += ["metrics_table.json", "metrics_table.csv", "summary.txt", *result["curves"]]
    run.extra["runs"] = [str(d) for d in dirs]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "few-shot": cmd_few_shot,
    "ablate": cmd_ablate,
    "rank-sweep": cmd_rank_sweep,
    "export-activations": cmd_export_activations,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"medvis: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out_dir or Path("runs") / args.command
    run = Run(args.command, cfg, out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with limited_threads():
            t0 = time.perf_counter()
            if args.command == "report":
                cmd_report(run, args.runs)
            else:
                HANDLERS[args.command](run)
            run.timings["total_s"] = time.perf_counter() - t0
        run.finish()
    except ConfigError as exc:
        print(f"medvis {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"medvis {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
