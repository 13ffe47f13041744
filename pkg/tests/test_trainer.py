import numpy as np
import pytest

from medvis.data.splits import make_split
from medvis.data.synthetic import SyntheticSpec, generate_dataset
from medvis.model import ModelSpec, build_model
from medvis.numerics import NonFiniteError, Parameter
from medvis.trainer import (
    Adam,
    Checkpoint,
    TrainConfig,
    TrainHistory,
    clip_global_norm,
    cross_validate,
    evaluate,
    measure_inference,
    run_few_shot,
    train,
    validate,
)
from medvis.vit import ViTConfig

TOY = ModelSpec(vit=ViTConfig(image_size=16, patch_size=4, embed_dim=32, depth=1, heads=4, decoder_depth=1))
DATA = SyntheticSpec(shape=(16, 16, 16), size=4.0, jitter=2.0)


@pytest.fixture(scope="module")
def cases():
    return generate_dataset(DATA, 10, seed=3)


def weights(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def test_zero_lr_leaves_weights(cases):
    model = build_model(TOY, 0)
    before = weights(model)
    train(model, cases[:4], cases[4:6], TrainConfig(epochs=2, lr=0.0))
    for k, v in model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_is_deterministic(cases):
    cfg = TrainConfig(epochs=2, batch_size=2)
    a, b = build_model(TOY, 1), build_model(TOY, 1)
    ha = train(a, cases[:4], cases[4:6], cfg).history
    hb = train(b, cases[:4], cases[4:6], cfg).history
    assert [r[:4] for r in ha.values()] == [r[:4] for r in hb.values()]
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_resume_matches_continuous_run(cases, tmp_path):
    full = build_model(TOY, 2)
    train(full, cases[:4], cases[4:6], TrainConfig(epochs=4, batch_size=2))

    part = build_model(TOY, 2)
    first = train(part, cases[:4], cases[4:6], TrainConfig(epochs=2, batch_size=2))
    first.last.save(tmp_path / "ck")
    resumed = build_model(TOY, 2)
    res = train(resumed, cases[:4], cases[4:6], TrainConfig(epochs=4, batch_size=2),
                resume=Checkpoint.load(tmp_path / "ck"))
    assert [r.epoch for r in res.history.records] == [0, 1, 2, 3]
    for k, v in full.state_dict().items():
        assert v.tobytes() == resumed.state_dict()[k].tobytes(), k


def test_resume_rejects_other_config(cases):
    model = build_model(TOY, 0)
    ck = train(model, cases[:2], [], TrainConfig(epochs=1)).last
    with pytest.raises(ValueError, match="different config"):
        train(build_model(TOY, 0), cases[:2], [], TrainConfig(epochs=2, lr=1e-4), resume=ck)


def test_adam_matches_hand_step(f64):
    p = Parameter(np.array([1.0, -2.0]), "p")
    frozen = Parameter(np.array([5.0]), "f", trainable=False)
    opt = Adam([p, frozen], lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    opt.step({"p": g1, "f": np.array([1.0])})
    opt.step({"p": g2})
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
    x1 = np.array([1.0, -2.0]) - 0.1 * (0.1 * g1 / 0.1) / (np.sqrt(0.001 * g1**2 / 0.001) + 1e-8)
    x2 = x1 - 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p.data, x2, rtol=0, atol=1e-12)
    assert frozen.data[0] == 5.0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clip_global_norm(g, 1.0)
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-9)
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_validate_does_not_touch_weights(cases):
    model = build_model(TOY, 0)
    before = weights(model)
    loss, dice = validate(model, cases[:3], TrainConfig())
    assert np.isfinite(loss) and 0 <= dice <= 1
    for k, v in model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_single_sample_overfit(cases):
    model = build_model(TOY, 0)
    cfg = TrainConfig(epochs=200, lr=3e-3, batch_size=1, augment=False, eval_every=10)
    res = train(model, cases[:1], cases[:1], cfg)
    dices = [r.val_dice for r in res.history.records if r.val_dice is not None]
    assert max(dices) >= 0.99


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_step(cases):
    model = build_model(TOY, 0)
    model.decoder.head.weight.data[...] = np.inf
    with pytest.raises(NonFiniteError, match="epoch 0, step 0"):
        train(model, cases[:2], [], TrainConfig(epochs=1))


def test_history_roundtrip(cases):
    hist = train(build_model(TOY, 0), cases[:2], cases[2:3], TrainConfig(epochs=2)).history
    assert TrainHistory.from_dict(hist.to_dict()).values() == hist.values()
    header = hist.to_csv().splitlines()[0]
    assert header.startswith("epoch,train_loss")


def test_evaluate_reports_every_case(cases):
    rep = evaluate(build_model(TOY, 0), cases[:3])
    assert list(rep.cases) == [v.case_id for v, _ in cases[:3]]


@pytest.mark.slow
def test_cross_validation_runs_per_fold():
    data = {v.case_id: (v, m) for v, m in generate_dataset(DATA, 25, seed=4)}
    split = make_split(data, seed=0, require_folds=True)
    res = cross_validate(data, split, TOY, TrainConfig(epochs=1))
    assert len(res.fold_reports) == 5 == len(res.selected)
    assert all(list(r.cases) == split.test for r in res.fold_reports)
    assert res.summary()["dice"]["n"] == 5


def test_cross_validation_needs_filled_folds(cases):
    data = {v.case_id: (v, m) for v, m in cases}
    with pytest.raises(ValueError, match="empty"):
        cross_validate(data, make_split(data, seed=0), TOY, TrainConfig(epochs=1))


def test_few_shot_subsets_nest():
    data = {v.case_id: (v, m) for v, m in generate_dataset(DATA, 20, seed=5)}
    split = make_split(data, seed=0)
    runs = run_few_shot(data, split, TOY, TrainConfig(epochs=1), fractions=(0.1, 0.3))
    small, large = runs[0.1].train_ids, runs[0.3].train_ids
    # fourteen training cases: ceil(1.4) and ceil(4.2)
    assert len(small) == 2 and len(large) == 5
    assert set(small) <= set(large) <= set(split.train)


def test_inference_timing_scales_with_depth(cases):
    vol = cases[0][0]
    shallow = measure_inference(build_model(TOY, 0), vol, repetitions=5, warmup=1)
    deep_spec = ModelSpec(vit=ViTConfig(image_size=16, patch_size=4, embed_dim=32, depth=8, heads=4,
                                        decoder_depth=1))
    deep = measure_inference(build_model(deep_spec, 0), vol, repetitions=5, warmup=1)
    assert shallow["repetitions"] == 5 and shallow["iqr_ms"] >= 0
    assert deep["median_ms"] > shallow["median_ms"]
    assert measure_inference(build_model(TOY, 0), vol, repetitions=1)["repetitions"] == 1
