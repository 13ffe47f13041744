from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

N_FOLDS = 5
MIN_CASES = 10


@dataclass(frozen=True)
class DatasetSplit:
    train: list[str]
    validation: list[str]
    folds: list[list[str]]
    test: list[str]
    seed: int
    meta: dict = field(default_factory=dict)

    def all_ids(self) -> list[str]:
        return self.train + self.validation + self.test

    def check_folds(self) -> None:
        empty = [i for i, f in enumerate(self.folds) if not f]
        if empty:
            raise ValueError(
                f"validation pool of {len(self.validation)} cases leaves folds {empty} empty; "
                f"cross-validation needs >= {N_FOLDS} validation cases (n >= 25)"
            )

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "folds": self.folds,
                "test": self.test, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSplit:
        return cls(d["train"], d["validation"], d["folds"], d["test"], d["seed"])


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def make_split(case_ids, seed: int, require_folds: bool = False) -> DatasetSplit:
    """Shuffle, then take 10% test and 20% validation (round half up); the rest trains.

    The validation pool is dealt round-robin into five folds.
    """
    case_ids = list(case_ids)
    ids = sorted(set(case_ids))
    if len(ids) != len(case_ids):
        raise ValueError("case ids must be unique")
    n = len(ids)
    if n < MIN_CASES:
        raise ValueError(f"need >= {MIN_CASES} cases to split, got {n}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    n_test = round_half_up(Fraction(n, 10))
    n_val = round_half_up(Fraction(n, 5))
    test = order[:n_test]
    val = order[n_test : n_test + n_val]
    train = order[n_test + n_val :]
    folds = [val[f::N_FOLDS] for f in range(N_FOLDS)]
    split = DatasetSplit(train, val, folds, test, seed)
    if require_folds:
        split.check_folds()
    return split


def few_shot_subset(train_ids, fraction: float, seed: int) -> list[str]:
    """Seeded shuffle of the training ids, keep the first ceil(fraction · n).

    For one seed, smaller fractions always give a prefix of larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = sorted(train_ids)
    if not ids:
        raise ValueError("empty training set")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    k = math.ceil(Fraction(fraction).limit_denominator(10**6) * len(ids))
    return order[:k]
