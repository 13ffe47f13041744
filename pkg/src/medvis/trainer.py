"""Training loop, cross-validation, few-shot runs, checkpoints and timing."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.augment import augment
from .data.splits import DatasetSplit, few_shot_subset
from .data.volume import Mask, Volume
from .losses import dice_bce_loss
from .metrics import METRIC_KEYS, MetricsReport, mean_sd, overlap_metrics
from .model import ModelSpec, SegmentationModel, build_model
from .numerics import Module, NonFiniteError, Tensor, no_grad, snapshot
from .runtime import config_hash, thread_count

log = logging.getLogger(__name__)

Case = tuple[Volume, Mask]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_dice: float = 1.0
    w_bce: float = 1.0
    seed: int = 0
    fraction: float = 1.0
    clip_norm: float | None = 1.0
    augment: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias-corrected moments; touches trainable parameters only."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = arrays[f"m/{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"v/{k}"].astype(self.v[k].dtype)
        self.t = t


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(math.fsum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_dice: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    seed: int = 0
    threads: int = 1
    tag: str = ""

    def values(self) -> list[tuple]:
        """Records without wall-clock time, for determinism comparisons."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_dice) for r in self.records]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "threads": self.threads, "tag": self.tag,
                "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> TrainHistory:
        return cls([EpochRecord(**r) for r in d["records"]], d["seed"], d["threads"], d.get("tag", ""))

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_dice"]
        for r in self.records:
            cells = [str(r.epoch), repr(r.train_loss)]
            cells += ["" if x is None else repr(x) for x in (r.val_loss, r.val_dice)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    epoch: int
    config_hash: str
    val_dice: float | None = None
    history: list[dict] = field(default_factory=list)

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        w_hash = snapshot.save(d / "weights.lbsw", self.weights)
        snapshot.save(d / "optimizer.lbsw", self.optimizer)
        meta = {"step": self.step, "epoch": self.epoch, "config_hash": self.config_hash,
                "val_dice": self.val_dice, "weights_sha256": w_hash, "history": self.history}
        snapshot.atomic_write_bytes(d / "checkpoint.json", json.dumps(meta, indent=1).encode())
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> Checkpoint:
        d = Path(directory)
        meta = json.loads((d / "checkpoint.json").read_text())
        return cls(snapshot.load(d / "weights.lbsw"), snapshot.load(d / "optimizer.lbsw"),
                   meta["step"], meta["epoch"], meta["config_hash"], meta.get("val_dice"),
                   meta.get("history", []))


@dataclass
class TrainResult:
    model: SegmentationModel
    history: TrainHistory
    best: Checkpoint
    last: Checkpoint


def _stack(cases: list[Case]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([v.intensities for v, _ in cases]).astype(np.float32)
    y = np.stack([m.labels for _, m in cases])
    return x, y


def _aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index, 0xA6]).generate_state(1)[0])


def predict_logits(model: Module, volumes: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            out.append(model(volumes[i : i + batch_size]).data)
    return np.concatenate(out)


def predict_mask(model: Module, volume: Volume) -> np.ndarray:
    """Binary prediction: sigmoid(logit) > 0.5, i.e. logit > 0."""
    return (predict_logits(model, volume.intensities[None])[0] > 0).astype(np.uint8)


def validate(model: Module, cases: list[Case], config: TrainConfig) -> tuple[float, float]:
    """Mean loss and mean hard Dice over ``cases``; never touches weights."""
    x, y = _stack(cases)
    logits = predict_logits(model, x, config.batch_size)
    losses, dices = [], []
    for i in range(len(cases)):
        loss = dice_bce_loss(Tensor(logits[i : i + 1]), y[i : i + 1], config.w_dice, config.w_bce)
        losses.append(float(loss.data))
        dices.append(overlap_metrics((logits[i] > 0).astype(np.uint8), y[i])["dice"])
    return math.fsum(losses) / len(losses), math.fsum(dices) / len(dices)


def train(
    model: SegmentationModel,
    train_cases: list[Case],
    val_cases: list[Case],
    config: TrainConfig,
    resume: Checkpoint | None = None,
    tag: str = "",
) -> TrainResult:
    if not train_cases:
        raise ValueError("empty training set")
    # the epoch budget is left out so a finished run can be extended by resuming
    run_cfg = {k: v for k, v in config.to_dict().items() if k != "epochs"}
    chash = config_hash({"train": run_cfg, "model": model.spec.to_dict(), "seed": model.seed})
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    history = TrainHistory(seed=config.seed, threads=thread_count(), tag=tag)
    start = 0
    best: Checkpoint | None = None
    if resume is not None:
        if resume.config_hash != chash:
            raise ValueError("checkpoint was produced by a different config")
        model.load_state_dict(resume.weights)
        opt.load_state(resume.optimizer, resume.step)
        start = resume.epoch
        history.records = [EpochRecord(**r) for r in resume.history]

    def snap(epoch: int, val_dice) -> Checkpoint:
        return Checkpoint(model.state_dict(), {k: v.copy() for k, v in opt.state().items()}, opt.t,
                          epoch, chash, val_dice, [asdict(r) for r in history.records])

    if best is None:
        best = snap(start, None)
    params = model.trainable_parameters()
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_cases))
        losses = []
        for step, b in enumerate(range(0, len(order), config.batch_size)):
            idx = order[b : b + config.batch_size]
            batch = [train_cases[i] for i in idx]
            if config.augment:
                batch = [augment(v, m, _aug_seed(config.seed, epoch, int(i))) for (v, m), i in zip(batch, idx)]
            x, y = _stack(batch)
            for p in params:
                p.grad = None
            loss = dice_bce_loss(model(x), y, config.w_dice, config.w_bce)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            loss.backward()
            grads = {p.name: p.grad for p in params if p.grad is not None}
            if config.clip_norm is not None:
                clip_global_norm(grads, config.clip_norm)
            opt.step(grads)
            losses.append(value)
        val_loss = val_dice = None
        if val_cases and (epoch + 1) % config.eval_every == 0:
            val_loss, val_dice = validate(model, val_cases, config)
        rec = EpochRecord(epoch, math.fsum(losses) / len(losses), val_loss, val_dice,
                          time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4f val_dice %s", epoch, rec.train_loss, val_dice)
        if val_dice is not None and (best.val_dice is None or val_dice > best.val_dice):
            best = snap(epoch + 1, val_dice)
    last = snap(config.epochs, history.records[-1].val_dice if history.records else None)
    if best.val_dice is None:
        best = last
    return TrainResult(model, history, best, last)


def evaluate(model: Module, cases: list[Case], tau: float | None = None, label: str = "") -> MetricsReport:
    spacing = cases[0][0].spacing if cases else (1.0, 1.0, 1.0)
    report = MetricsReport(tau=min(spacing) if tau is None else tau, spacing=spacing, label=label)
    x, _ = _stack(cases)
    logits = predict_logits(model, x)
    for (vol, mask), lg in zip(cases, logits):
        report.add(vol.case_id, (lg > 0).astype(np.uint8), mask.labels, vol.spacing)
    return report


@dataclass
class CVResult:
    fold_reports: list[MetricsReport]
    histories: list[TrainHistory]
    selected: list[Checkpoint]

    def summary(self) -> dict[str, dict]:
        out = {}
        for key in METRIC_KEYS:
            means = [r.aggregate()[key]["mean"] for r in self.fold_reports]
            m, s, n = mean_sd(means)
            out[key] = {"mean": m, "sd": s, "n": n}
        return out


def cross_validate(cases: dict[str, Case], split: DatasetSplit, spec: ModelSpec, config: TrainConfig,
                   tau: float | None = None) -> CVResult:
    """One run per validation fold; the fold only selects the epoch.

    Every run trains on the fixed training ids. The checkpoint with the best
    fold Dice is then scored once on the held-out test ids.
    """
    split.check_folds()
    train_set = [cases[i] for i in split.train]
    test_set = [cases[i] for i in split.test]
    reports, histories, selected = [], [], []
    for f, fold in enumerate(split.folds):
        model = build_model(spec, config.seed + f)
        result = train(model, train_set, [cases[i] for i in fold], config, tag=f"fold{f}")
        model.load_state_dict(result.best.weights)
        reports.append(evaluate(model, test_set, tau, label=f"fold{f}"))
        histories.append(result.history)
        selected.append(result.best)
    return CVResult(reports, histories, selected)


@dataclass
class FewShotRun:
    fraction: float
    train_ids: list[str]
    history: TrainHistory
    result: TrainResult


def run_few_shot(cases: dict[str, Case], split: DatasetSplit, spec: ModelSpec, config: TrainConfig,
                 fractions=(0.1, 0.3)) -> dict[float, FewShotRun]:
    out = {}
    val = [cases[i] for i in split.validation]
    for frac in fractions:
        ids = few_shot_subset(split.train, frac, config.seed)
        model = build_model(spec, config.seed)
        result = train(model, [cases[i] for i in ids], val, config, tag=f"fraction={frac}")
        out[frac] = FewShotRun(frac, ids, result.history, result)
    return out


def measure_inference(model: Module, volume: Volume, repetitions: int = 5, warmup: int = 2) -> dict:
    """Per-sample forward wall time in ms: median and IQR over ``repetitions``."""
    x = volume.intensities[None].astype(np.float32)
    with no_grad():
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(max(repetitions, 1)):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1e3)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return {"median_ms": float(med), "iqr_ms": float(q3 - q1), "repetitions": len(times),
            "warmup": warmup, "threads": thread_count(), "samples_ms": times}
