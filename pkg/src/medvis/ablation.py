"""Model variants under matched parameter budgets, FLOP accounting, rank sweeps."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data.splits import DatasetSplit
from .insert import FrozenBlockConfig, lora_target_dims
from .metrics import METRIC_KEYS, MetricsReport, mean_sd
from .model import ModelSpec, build_model, count_parameters, enumerate_parameters
from .stats import paired_t_test
from .trainer import Case, TrainConfig, evaluate, measure_inference, train
from .vit import ViTConfig

BUDGET_TOLERANCE = 0.02


class VariantKind(str, Enum):
    VIT_BASELINE = "vit-baseline"
    VIT_DEPTH = "vit-depth"
    VIT_MLP = "vit-mlp"
    LLAMA_LORA = "llama-lora"
    LLAMA_LINEAR = "llama-linear"


class BudgetError(ValueError):
    pass


def _scaled_heads(dim: int, head_dim: int) -> int:
    h = max(1, round(dim / head_dim))
    while dim % h:
        h -= 1
    return h


def _search_depth_variant(base: ViTConfig, target: int) -> ViTConfig:
    head_dim = base.embed_dim // base.heads
    best: tuple[int, int, ViTConfig] | None = None
    for depth in range(base.depth, base.depth + 16):
        for dim in range(base.embed_dim, 8 * base.embed_dim + 1, 4):
            cfg = dataclasses.replace(base, embed_dim=dim, depth=depth, heads=_scaled_heads(dim, head_dim))
            total = count_parameters(ModelSpec(vit=cfg))[2]
            key = (abs(total - target), depth)
            if best is None or key < best[:2]:
                best = (*key, cfg)
            if total > target:
                break
    return best[2]


def build_variant(kind, base: ViTConfig, insert: FrozenBlockConfig | None = None,
                  target_params: int | None = None, tolerance: float = BUDGET_TOLERANCE) -> ModelSpec:
    """ModelSpec for ``kind``. Budget-matched kinds default to the llama-lora total."""
    kind = VariantKind(kind)
    insert = insert or FrozenBlockConfig()
    if kind is VariantKind.VIT_BASELINE:
        return ModelSpec(vit=base, name=kind.value)
    if kind is VariantKind.LLAMA_LORA:
        return ModelSpec(vit=base, bridge="llama-lora", insert=insert, name=kind.value)
    if kind is VariantKind.LLAMA_LINEAR:
        return ModelSpec(vit=base, bridge="llama-linear", insert=insert, name=kind.value)

    if target_params is None:
        target_params = count_parameters(build_variant(VariantKind.LLAMA_LORA, base, insert))[2]
    if kind is VariantKind.VIT_MLP:
        d = base.embed_dim
        base_total = count_parameters(ModelSpec(vit=base))[2]
        width = max(1, round((target_params - base_total - d) / (2 * d + 1)))
        spec = ModelSpec(vit=base, bridge="mlp", mlp_width=width, name=kind.value)
    else:
        spec = ModelSpec(vit=_search_depth_variant(base, target_params), name=kind.value)
    total = count_parameters(spec)[2]
    if abs(total - target_params) > tolerance * target_params:
        raise BudgetError(
            f"{kind.value}: cannot reach {target_params} params within {tolerance:.0%}; "
            f"nearest achievable is {total}"
        )
    return spec


# --- FLOPs: a multiply-add counts as 2; elementwise work (bias, norms,
# softmax, activations, residual adds) is not counted.

def matmul_flops(m: int, k: int, n: int) -> int:
    """(m × k) @ (k × n)."""
    return 2 * m * k * n


def _block_flops(t: int, dim: int, hidden: int, lora: list[tuple[int, int]] = (), rank: int = 0) -> dict:
    out = {
        "projections": 4 * matmul_flops(t, dim, dim),
        "attention": 2 * matmul_flops(t, dim, t),  # QK^T and AV summed over heads
        "mlp": matmul_flops(t, dim, hidden) + matmul_flops(t, hidden, dim),
    }
    if lora:
        out["lora"] = sum(matmul_flops(t, i, rank) + matmul_flops(t, rank, o) for i, o in lora)
    return out


def estimate_flops(spec: ModelSpec, input_shape=None) -> dict:
    """Analytic FLOPs per sample, broken down by module; ``total`` and ``gflops`` summarize."""
    cfg = spec.vit
    shape = tuple(input_shape or cfg.image_size)
    t = int(np.prod([n // p for n, p in zip(shape, cfg.patch_size)]))
    d, pv, hid = cfg.embed_dim, cfg.patch_voxels, cfg.mlp_hidden
    parts: dict[str, int] = {"embed": matmul_flops(t, pv, d)}
    enc = [_block_flops(t, d, hid) for _ in range(cfg.depth)]
    parts["encoder"] = sum(sum(b.values()) for b in enc)
    parts["encoder_attention"] = sum(b["attention"] for b in enc)
    if spec.bridge == "llama-lora":
        ins = spec.insert
        parts["mappers"] = 2 * (matmul_flops(t, d, ins.rank) + matmul_flops(t, ins.rank, ins.dim))
        blk = _block_flops(t, ins.dim, ins.mlp_hidden, lora_target_dims(ins), ins.rank)
        parts["frozen_block"] = sum(blk.values())
    elif spec.bridge == "llama-linear":
        ins = spec.insert
        parts["mappers"] = 2 * matmul_flops(t, d, ins.dim)
        parts["frozen_block"] = sum(_block_flops(t, ins.dim, ins.mlp_hidden).values())
    elif spec.bridge == "mlp":
        parts["bridge_mlp"] = 2 * matmul_flops(t, d, spec.mlp_width)
    dec = [_block_flops(t, d, hid) for _ in range(cfg.decoder_depth)]
    parts["decoder"] = sum(sum(b.values()) for b in dec)
    parts["head"] = matmul_flops(t, d, pv)
    total = sum(v for k, v in parts.items() if k != "encoder_attention")
    return {"tokens": t, "parts": parts, "total": total, "gflops": total / 1e9}


@dataclass
class BudgetRow:
    variant: str
    total: int
    trainable: int
    frozen: int
    gflops: float
    ms_per_sample: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def budget_row(spec: ModelSpec, measure: bool = False, volume=None, seed: int = 0) -> BudgetRow:
    trainable, frozen, total = count_parameters(spec)
    ms = None
    if measure:
        model = build_model(spec, seed)
        enum = enumerate_parameters(model)
        if enum != (trainable, frozen, total):
            raise AssertionError(f"{spec.name}: closed form {(trainable, frozen, total)} != enumeration {enum}")
        ms = measure_inference(model, volume)["median_ms"]
    return BudgetRow(spec.name, total, trainable, frozen, estimate_flops(spec)["gflops"], ms)


def budget_report(specs: dict[str, ModelSpec], volume=None) -> dict:
    rows = [budget_row(s, measure=volume is not None, volume=volume) for s in specs.values()]
    return {"schema": "budget-report/1", "variants": [r.to_dict() for r in rows]}


def desk_variants(base: ViTConfig | None = None, insert: FrozenBlockConfig | None = None) -> dict[str, ModelSpec]:
    base = base or ViTConfig()
    insert = insert or FrozenBlockConfig()
    return {k.value: build_variant(k, base, insert) for k in VariantKind}


def _paired(a_vals, b_vals):
    pairs = [(x, y) for x, y in zip(a_vals, b_vals) if x is not None and y is not None]
    if len(pairs) < 2:
        return None
    return paired_t_test([x for x, _ in pairs], [y for _, y in pairs]).to_dict()


@dataclass
class Comparison:
    budget: dict
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    tests: list[dict] = field(default_factory=list)

    def pooled(self, variant: str, key: str) -> list:
        """Per-(seed, case) scores, seed-major, for pairing across variants."""
        return [v for rep in self.reports[variant] for v in rep.values(key)]

    def rows(self) -> list[dict]:
        out = []
        for variant in self.reports:
            for key in METRIC_KEYS:
                m, s, n = mean_sd(self.pooled(variant, key))
                out.append({"variant": variant, "metric": key, "mean": m, "sd": s, "n": n})
        return out

    def to_dict(self) -> dict:
        return {
            "schema": "comparison/1",
            "budget": self.budget,
            "rows": self.rows(),
            "tests": self.tests,
            "reports": {k: [r.to_dict() for r in v] for k, v in self.reports.items()},
        }


def compare_variants(specs: dict[str, ModelSpec], cases: dict[str, Case], split: DatasetSplit,
                     config: TrainConfig, seeds=(0, 1), tau: float | None = None,
                     histories: dict | None = None) -> Comparison:
    """Train every variant for every seed, score on the shared test ids, pair per metric."""
    if len(specs) < 2 or len(seeds) < 2:
        raise ValueError("compare_variants needs >= 2 variants and >= 2 seeds")
    train_set = [cases[i] for i in split.train]
    val_set = [cases[i] for i in split.validation]
    test_set = [cases[i] for i in split.test]
    vol = test_set[0][0]
    comp = Comparison(budget=budget_report(specs, vol))
    for name, spec in specs.items():
        comp.reports[name] = []
        for seed in seeds:
            cfg = dataclasses.replace(config, seed=seed)
            model = build_model(spec, seed)
            result = train(model, train_set, val_set, cfg, tag=f"{name}/seed{seed}")
            if histories is not None:
                histories[(name, seed)] = result.history
            model.load_state_dict(result.best.weights)
            comp.reports[name].append(evaluate(model, test_set, tau, label=f"{name}/seed{seed}"))
    ids = [list(r.cases) for r in next(iter(comp.reports.values()))]
    for name, reps in comp.reports.items():
        if [list(r.cases) for r in reps] != ids:
            raise ValueError(f"{name}: test cases differ from the other variants")
    for a, b in itertools.combinations(comp.reports, 2):
        for key in METRIC_KEYS:
            res = _paired(comp.pooled(a, key), comp.pooled(b, key))
            comp.tests.append({"a": a, "b": b, "metric": key, **(res or {"p": None})})
    return comp


def rank_sweep(base: ModelSpec, cases: dict[str, Case], split: DatasetSplit, config: TrainConfig,
               ranks=(2, 4, 8, 16), tau: float | None = None) -> dict:
    """Train the llama-lora model at each rank with identical seed and data."""
    if not ranks:
        raise ValueError("ranks must be non-empty")
    train_set = [cases[i] for i in split.train]
    val_set = [cases[i] for i in split.validation]
    test_set = [cases[i] for i in split.test]
    rows, reports = [], {}
    for r in ranks:
        spec = dataclasses.replace(base, insert=dataclasses.replace(base.insert, rank=r), name=f"rank{r}")
        model = build_model(spec, config.seed)
        result = train(model, train_set, val_set, config, tag=f"rank={r}")
        model.load_state_dict(result.best.weights)
        rep = evaluate(model, test_set, tau, label=f"rank{r}")
        reports[r] = rep
        agg = rep.aggregate()
        rows.append({
            "rank": r,
            "trainable_params": count_parameters(spec)[0],
            "dice": agg["dice"]["mean"], "dice_sd": agg["dice"]["sd"],
            "nsd": agg["nsd"]["mean"], "nsd_sd": agg["nsd"]["sd"],
        })
    tests = []
    for r1, r2 in zip(ranks, ranks[1:]):
        for key in ("dice", "nsd"):
            res = _paired(reports[r1].values(key), reports[r2].values(key))
            tests.append({"a": r1, "b": r2, "metric": key, **(res or {"p": None})})
    return {"schema": "rank-sweep/1", "rows": rows, "tests": tests}


RANK_SWEEP_COLUMNS = ("rank", "trainable_params", "dice", "dice_sd", "nsd", "nsd_sd")


def rank_sweep_csv(table: dict) -> str:
    lines = [",".join(RANK_SWEEP_COLUMNS)]
    for row in table["rows"]:
        lines.append(",".join("" if row[c] is None else repr(row[c]) for c in RANK_SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"
