import numpy as np
import pytest

from mmisnet.data import load_records, slices_of, stack_batch
from mmisnet.errors import ConfigError, NumericError, ShapeError, TrainingDiverged
from mmisnet.labels import build_label_space, discover_manifests
from mmisnet.network import Checkpoint, load_checkpoint
from mmisnet.synth import SynthSpec, generate
from mmisnet.train import (AdamState, TrainConfig, adam_step, evaluate, loss_and_grads, overlay,
                           predict, train)
from mmisnet.volume import Volume, read_volume, write_volume

TINY = dict(learning_rate=1e-3, max_epochs=3, batch_size=2, patience=2, base_channels=2, depth=1,
            validation_fraction=0.25, seed=3)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate(SynthSpec.from_dict({"seed": 0, "image_size": 16, "datasets": [
        {"id": "a", "count": 4, "annotate": ["organ"]},
        {"id": "b", "count": 4, "annotate": ["lesion"], "modality": "speckle"},
    ]}), out)
    return out


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_zero_gradient():
    p = {"w": np.array([0.7, -2.0])}
    st = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], [0.7, -2.0]) and st.step == 1


def test_adam_matches_hand_recurrence(rng):
    theta = rng.normal(size=3)
    p = {"w": theta.copy()}
    st = AdamState()
    m = v = np.zeros(3)
    for t in range(1, 5):
        g = rng.normal(size=3)
        adam_step(p, {"w": g}, st, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], theta, rtol=1e-14)


def test_adam_rejects_nonfinite():
    p = {"w": np.array([1.0]), "u": np.array([2.0])}
    with pytest.raises(NumericError):
        adam_step(p, {"u": np.array([1.0]), "w": np.array([np.inf])}, AdamState(), lr=0.1)
    assert p["u"][0] == 2.0


def test_config_rules(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(patience=5, max_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(p)
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig().learning_rate == 0.1 and TrainConfig().max_epochs == 1000


def test_unannotated_head_gets_no_gradient(corpus):
    ms = discover_manifests(corpus)
    space = build_label_space(ms)
    recs = load_records(ms, space)
    res = train(TrainConfig(**dict(TINY, max_epochs=1, patience=0)), ms, records=recs)
    ck = res.checkpoint
    lesion = space.raw_to_global["b"][1]
    organ = space.raw_to_global["a"][1]
    for ds, silent, active in (("a", lesion, organ), ("b", organ, lesion)):
        x, y, m = stack_batch(slices_of([r for r in recs if r.dataset_id == ds]))
        _, grads = loss_and_grads(ck, x, y, m, TrainConfig().loss)
        for part in ("w", "b"):
            g = grads.get(f"head{silent}.{part}")
            assert g is None or not g.any()
            assert np.linalg.norm(grads[f"head{active}.{part}"]) > 0


def test_patience_zero_stops_on_first_miss(corpus, monkeypatch):
    ms = discover_manifests(corpus)
    import mmisnet.train as tr
    losses = iter([0.5, 0.6, 0.4, 0.3])
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: next(losses))
    res = train(TrainConfig(**dict(TINY, max_epochs=4, patience=0)), ms)
    assert res.stopped_epoch == 2
    assert res.checkpoint.epoch == 1 and res.checkpoint.best_val_loss == 0.5


def test_best_never_worse(corpus, monkeypatch):
    ms = discover_manifests(corpus)
    import mmisnet.train as tr
    losses = iter([0.5, 0.7, 0.45, 0.8, 0.9])
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: next(losses))
    res = train(TrainConfig(**dict(TINY, max_epochs=5, patience=2)), ms)
    assert res.stopped_epoch == 5
    assert res.checkpoint.best_val_loss == 0.45 and res.checkpoint.epoch == 3


def test_deterministic_files(corpus, tmp_path):
    ms = discover_manifests(corpus)
    cfg = TrainConfig(**TINY)
    train(cfg, ms, out_dir=tmp_path / "1")
    train(cfg, ms, out_dir=tmp_path / "2")
    for name in ("best.mmck", "train_log.csv"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()
    ck = load_checkpoint(tmp_path / "1" / "best.mmck")
    evaluate(ck, ms).to_csv(tmp_path / "r1.csv")
    evaluate(ck, ms).to_csv(tmp_path / "r2.csv")
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    log = (tmp_path / "1" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_loss" and len(log) == 4


def test_divergence_keeps_last_good(corpus, tmp_path, monkeypatch):
    ms = discover_manifests(corpus)
    import mmisnet.train as tr
    losses = iter([0.5, float("nan")])
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: next(losses))
    with pytest.raises(TrainingDiverged) as exc:
        train(TrainConfig(**TINY), ms, out_dir=tmp_path)
    assert exc.value.checkpoint_path == tmp_path / "best.mmck"
    assert load_checkpoint(tmp_path / "best.mmck").epoch == 1
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 2


def test_evaluate_split_and_truth(corpus):
    ms = discover_manifests(corpus)
    res = train(TrainConfig(**TINY), ms)
    val = evaluate(res.checkpoint, ms, use_truth=True, split="val")
    assert {c.index for c in val.classes} == {1, 2}
    assert all(c.n_volumes == 2 for c in val.classes)   # one validation volume per dataset
    partial = evaluate(res.checkpoint, ms)
    assert all(c.n_volumes == 4 for c in partial.classes)


def test_predict_thresholds_and_outputs(corpus, tmp_path):
    ms = discover_manifests(corpus)
    ck = train(TrainConfig(**TINY), ms).checkpoint
    vol = ms[0].path(ms[0].samples[0].image)
    assert not predict(ck, vol, threshold=1.0)["masks"].any()
    assert predict(ck, vol, threshold=0.0)["masks"].all()
    res = predict(ck, vol, 0.5, tmp_path)
    names = sorted(p.name for p in res["files"])
    assert names == ["class_1.mmiv", "class_2.mmiv", "overlay_000.ppm"]
    head = (tmp_path / "overlay_000.ppm").read_bytes()[:12]
    assert head == b"P6\n16 16\n255"
    assert np.array_equal(read_volume(tmp_path / "class_1.mmiv").data[:, :, :] > 0, res["masks"][:, 0])


def test_predict_needs_divisible_size(corpus, tmp_path):
    ms = discover_manifests(corpus)
    ck = train(TrainConfig(**dict(TINY, depth=2, max_epochs=1, patience=0)), ms).checkpoint
    p = tmp_path / "odd.mmiv"
    write_volume(Volume(np.zeros((1, 10, 14))), p)
    with pytest.raises(ShapeError):
        predict(ck, p)
    assert predict(ck, p, resize=True)["masks"].shape == (1, 2, 10, 14)


def test_overlay_blend():
    img = np.array([[0.0, 1.0]])
    masks = np.array([[[False, True]]])
    rgb = overlay(img, masks, [1])
    assert rgb[0, 0].tolist() == [0, 0, 0]
    assert rgb[0, 1].tolist() == [round(0.5 * 255 + 0.5 * 230), round(0.5 * 255 + 0.5 * 25),
                                  round(0.5 * 255 + 0.5 * 75)]
