import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvis.ablation import (
    BUDGET_TOLERANCE,
    RANK_SWEEP_COLUMNS,
    BudgetError,
    VariantKind,
    budget_report,
    build_variant,
    compare_variants,
    desk_variants,
    estimate_flops,
    matmul_flops,
    rank_sweep,
    rank_sweep_csv,
)
from medvis.data.splits import make_split
from medvis.data.synthetic import SyntheticSpec, generate_dataset
from medvis.insert import FrozenBlockConfig
from medvis.model import ModelSpec, build_model, count_parameters, enumerate_parameters
from medvis.schemas import validate
from medvis.trainer import TrainConfig
from medvis.vit import ViTConfig

TOY_VIT = ViTConfig(image_size=16, patch_size=4, embed_dim=32, depth=1, heads=4, decoder_depth=1)
TOY_INSERT = FrozenBlockConfig(dim=32, heads=4, mlp_hidden=64, rank=2)


@pytest.fixture(scope="module")
def toy_data():
    cases = {v.case_id: (v, m) for v, m in
             generate_dataset(SyntheticSpec(shape=(16, 16, 16), size=4.0, jitter=2.0), 20, seed=7)}
    return cases, make_split(cases, seed=0)


def test_desk_variants_within_budget():
    specs = desk_variants()
    target = count_parameters(specs["llama-lora"])[2]
    for kind in ("vit-depth", "vit-mlp"):
        total = count_parameters(specs[kind])[2]
        assert abs(total - target) <= BUDGET_TOLERANCE * target, kind
    assert count_parameters(specs["llama-lora"])[0] < count_parameters(specs["llama-linear"])[0]


configs = st.builds(
    lambda d, depth, dec, ins_dim, rank: (
        ViTConfig(image_size=16, patch_size=4, embed_dim=d, depth=depth, heads=4, decoder_depth=dec),
        FrozenBlockConfig(dim=ins_dim, heads=4, mlp_hidden=2 * ins_dim, rank=rank),
    ),
    st.sampled_from([16, 32]), st.integers(1, 2), st.integers(1, 2), st.sampled_from([32, 48]), st.integers(1, 4),
)


@settings(max_examples=3)
@given(configs)
def test_closed_form_equals_enumeration_every_variant(cfg):
    base, insert = cfg
    for kind in VariantKind:
        try:
            spec = build_variant(kind, base, insert)
        except BudgetError:
            continue
        assert count_parameters(spec) == enumerate_parameters(build_model(spec)), kind


def test_budget_error_names_nearest():
    with pytest.raises(BudgetError, match="nearest achievable is"):
        build_variant("vit-mlp", TOY_VIT, TOY_INSERT, target_params=10)


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_variant("vit-wide", TOY_VIT)


def test_trainable_count_increases_with_rank():
    counts = [count_parameters(build_variant("llama-lora", TOY_VIT,
                                             dataclasses.replace(TOY_INSERT, rank=r)))[0] for r in (2, 4, 8, 16)]
    assert counts == sorted(set(counts))


def test_single_matmul_flops():
    assert matmul_flops(2, 4, 3) == 48


def test_flops_depth_zero_has_no_encoder():
    fl = estimate_flops(ModelSpec(vit=dataclasses.replace(TOY_VIT, depth=0)))
    assert fl["parts"]["encoder"] == 0


def test_doubling_depth_doubles_encoder_flops():
    one = estimate_flops(ModelSpec(vit=TOY_VIT))["parts"]["encoder"]
    two = estimate_flops(ModelSpec(vit=dataclasses.replace(TOY_VIT, depth=2)))["parts"]["encoder"]
    assert two == 2 * one


@pytest.mark.parametrize("kind", [k.value for k in VariantKind])
def test_flops_additive_over_parts(kind):
    fl = estimate_flops(desk_variants()[kind])
    assert fl["total"] == sum(v for k, v in fl["parts"].items() if k != "encoder_attention")
    assert fl["gflops"] == fl["total"] / 1e9


def test_attention_flops_quadratic_in_tokens():
    small = estimate_flops(ModelSpec(vit=TOY_VIT))["parts"]["encoder_attention"]
    big = estimate_flops(ModelSpec(vit=TOY_VIT), input_shape=(32, 16, 16))["parts"]["encoder_attention"]
    assert big == 4 * small


def test_budget_report_schema():
    specs = {k: build_variant(k, TOY_VIT, TOY_INSERT) for k in ("vit-baseline", "llama-lora")}
    vol = generate_dataset(SyntheticSpec(shape=(16, 16, 16), size=4.0), 1, seed=0)[0][0]
    rep = budget_report(specs, vol)
    validate(rep, "budget-report/1")
    assert all(r["ms_per_sample"] > 0 for r in rep["variants"])


def test_self_comparison_gives_p_one(toy_data):
    cases, split = toy_data
    spec = build_variant("vit-baseline", TOY_VIT)
    specs = {"a": spec, "b": dataclasses.replace(spec, name="b")}
    comp = compare_variants(specs, cases, split, TrainConfig(epochs=1), seeds=(0, 1))
    validate(comp.to_dict(), "comparison/1")
    dice = [t for t in comp.tests if t["metric"] == "dice"][0]
    assert dice["p"] == 1.0
    assert len(comp.pooled("a", "dice")) == 2 * len(split.test)


def test_compare_needs_two_of_each(toy_data):
    cases, split = toy_data
    with pytest.raises(ValueError):
        compare_variants({"a": ModelSpec(vit=TOY_VIT)}, cases, split, TrainConfig(epochs=1))


def test_rank_sweep_table(toy_data):
    cases, split = toy_data
    base = build_variant("llama-lora", TOY_VIT, TOY_INSERT)
    table = rank_sweep(base, cases, split, TrainConfig(epochs=1), ranks=(1, 2))
    validate(table, "rank-sweep/1")
    assert [r["rank"] for r in table["rows"]] == [1, 2]
    assert table["rows"][0]["trainable_params"] < table["rows"][1]["trainable_params"]
    lines = rank_sweep_csv(table).splitlines()
    assert lines[0] == ",".join(RANK_SWEEP_COLUMNS) and len(lines) == 3
    assert np.isfinite(float(lines[1].split(",")[2]))
