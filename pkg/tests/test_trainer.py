import numpy as np
import pytest

from lesionseg.checkpoint import decode, encode
from lesionseg.data import AugPolicy
from lesionseg.synthetic import ellipse_dataset
from lesionseg.tensor import Tensor
from lesionseg.trainer import (Phase, Segmenter, TrainConfig, TrainingError, format_log, fuse,
                               merge_checkpoints, predict, sgd_step, train_phase, tune_from_probs,
                               tune_threshold)


@pytest.fixture(scope="module")
def tiny():
    return ellipse_dataset(4, 64, seed=3)


def _cfg(**kw):
    base = dict(size=64, width_scale="1/16", batch_size=2, augment=True)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pretrained(tiny):
    sc, _ = train_phase(Phase.SCANET_ONLY, tiny, _cfg())
    up, _ = train_phase(Phase.UPDCNN_ONLY, tiny, _cfg(), init=sc)
    return sc, up


def test_fuse_examples():
    a = Tensor(np.full((1, 1, 1, 1), 0.3))
    b = Tensor(np.full((1, 1, 1, 1), 0.7))
    assert fuse(a, b).item() == 0.7
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 3, 3)))
    np.testing.assert_array_equal(fuse(x, x).data, x.data)


def test_sgd_step_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([2.0])}, {}, lr=0.1, momentum=0.0)
    assert p["w"][0] == pytest.approx(0.8)
    q = {"w": np.array([1.0, 2.0])}
    sgd_step(q, {"w": np.zeros(2)}, {"w": np.zeros(2)}, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(q["w"], [1.0, 2.0])
    with pytest.raises(TrainingError):
        sgd_step(q, {"v": np.zeros(2)}, {}, 0.1, 0.9)


def test_momentum_accumulates():
    p, state = {"w": np.array([0.0])}, {}
    for _ in range(2):
        sgd_step(p, {"w": np.array([1.0])}, state, lr=1.0, momentum=0.5)
    assert p["w"][0] == pytest.approx(-2.5)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(size=70).validate()
    with pytest.raises(ValueError):
        _cfg(lambda_box=-1).validate()
    with pytest.raises(ValueError):
        _cfg(threshold_grid=[0.0, 0.5]).validate()


def test_updcnn_phase_leaves_scanet_side_untouched(tiny, pretrained):
    sc, up = pretrained
    for k, v in sc.params.items():
        if not k.startswith("updcnn."):
            assert up.params[k].tobytes() == v.tobytes(), k
    assert any(up.params[k].tobytes() != sc.params[k].tobytes() for k in up.params if k.startswith("updcnn."))
    assert up.trained == (True, True)


def test_updcnn_log_has_no_box_term(tiny):
    _, log = train_phase(Phase.UPDCNN_ONLY, tiny, _cfg())
    assert all(r["box_loss"] == 0.0 and r["total"] == r["seg_loss"] for r in log)


def test_joint_needs_pretraining(tiny, pretrained):
    with pytest.raises(TrainingError, match="pretrained"):
        train_phase(Phase.JOINT, tiny, _cfg())
    sc, _ = pretrained
    with pytest.raises(TrainingError, match="updcnn=False"):
        train_phase(Phase.JOINT, tiny, _cfg(), init=sc)
    ck, _ = train_phase(Phase.JOINT, tiny, _cfg(), allow_random_init=True)
    assert ck.trained == (True, True)


def test_joint_starts_from_init(tiny, pretrained):
    _, up = pretrained
    seen = {}

    def hook(step, model):
        if step == 0:
            seen.update({k: p.data.copy() for k, p in model.params().items()})

    train_phase(Phase.JOINT, tiny, _cfg(), init=up, on_step=hook)
    assert seen.keys() == up.params.keys()
    assert all(seen[k].tobytes() == up.params[k].tobytes() for k in seen)


def test_init_must_match_geometry(tiny, pretrained):
    sc, _ = pretrained
    with pytest.raises(TrainingError):
        train_phase(Phase.UPDCNN_ONLY, tiny, _cfg(width_scale="1/8"), init=sc)
    with pytest.raises(TrainingError):
        train_phase(Phase.SCANET_ONLY, [], _cfg())


def test_merge_takes_trained_branches(pretrained):
    sc, _ = pretrained
    other = Segmenter.build(64, "1/16", seed=99)
    other.trained = [False, True]
    merged = merge_checkpoints([sc, other.to_checkpoint("updcnn")])
    assert merged.trained == (True, True)
    for k, v in merged.params.items():
        src = other.params()[k].data if k.startswith("updcnn.") else sc.params[k]
        assert v.tobytes() == src.tobytes()


def test_seeded_runs_identical(tiny):
    a = train_phase(Phase.SCANET_ONLY, tiny, _cfg(seed=4))
    b = train_phase(Phase.SCANET_ONLY, tiny, _cfg(seed=4))
    assert encode(a[0]) == encode(b[0])
    assert format_log(a[1]) == format_log(b[1])
    c = train_phase(Phase.SCANET_ONLY, tiny, _cfg(seed=5))
    assert encode(a[0]) != encode(c[0])


def test_checkpoint_carries_config_digest(tiny):
    ck, _ = train_phase(Phase.SCANET_ONLY, tiny, _cfg(), policy=AugPolicy.identity())
    assert decode(encode(ck)).config_digest == _cfg().digest()


def test_predict_threshold_extremes(pretrained, tiny):
    _, up = pretrained
    img = tiny[0].image
    ones, prob = predict(up, img, 0.0)
    zeros, _ = predict(up, img, 1.0)
    assert ones.shape == img.shape[1:] and prob.shape == (64, 64)
    assert ones.all() and not zeros.any()
    with pytest.raises(ValueError):
        predict(up, img, 1.5)


def test_predict_resizes_back():
    model = Segmenter.build(64, "1/16", seed=0)
    mask, prob = predict(model, np.random.default_rng(0).uniform(size=(3, 50, 70)).astype(np.float32), 0.5)
    assert mask.shape == (50, 70) and prob.shape == (64, 64)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_tune_constant_map_ties_low():
    prob = np.full((4, 4), 0.6)
    gt = np.ones((4, 4))
    best, table = tune_from_probs([prob], [gt])
    assert best == 0.05
    assert len(table) == 19


def test_tune_returns_grid_member(pretrained, tiny):
    _, up = pretrained
    best, table = tune_threshold(up, tiny)
    assert best in [t for t, _ in table]
    assert max(s for _, s in table) == dict(table)[best]
