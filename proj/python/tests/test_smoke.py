import math

import numpy as np
import pytest

import mtci


def label(mu, sigma, n):
    return mtci.ScoreLabel(mu, sigma, n)


def test_intervals():
    lo, hi = mtci.ci_mean(label(5, 2, 100))
    assert lo == pytest.approx(4.608)
    assert hi == pytest.approx(5.392)
    assert mtci.sigma_of_difference(label(5, 1.2, 25), label(5, 0.9, 25)) == pytest.approx(0.3)
    lo, hi = mtci.ci_difference(label(5.2, 1.2, 25), label(4.6, 0.9, 25))
    assert (lo, hi) == (pytest.approx(0.012), pytest.approx(1.188))
    assert mtci.significantly_different(label(4, 1, 100), label(6, 1, 100))
    assert not mtci.significantly_different(label(4.9, 2, 100), label(5.1, 2, 100))
    assert mtci.compare(label(4, 1, 100), label(6, 1, 100)) == "B>A"
    assert mtci.compare(label(6, 1, 100), label(4, 1, 100)) == "A>B"
    assert mtci.compare(label(5, 1, 100), label(5, 1, 100)) == "not-significant"


def test_votes_and_validation():
    votes = [1, 0, 0, 0, 0, 0, 0, 0, 1, 0]
    l = mtci.label_from_votes(votes, "x")
    assert (l.mu, l.sigma, l.n_obs, l.item_id) == (5.0, 4.0, 2, "x")
    assert list(l.votes) == votes
    with pytest.raises(mtci.ConfigError):
        mtci.label_from_votes([0] * 10)
    with pytest.raises(ValueError):
        mtci.ScoreLabel(5, -1, 10)


def test_metrics():
    assert mtci.pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)
    assert mtci.scc([1, 2, 3], [3, 1, 2]) == pytest.approx(-0.5)
    assert mtci.average_ranks([1, 1, 2]) == [1.5, 1.5, 3]
    assert mtci.binary_accuracy([4.2, 6.1], [5.1, 5.3]) == 0.5
    with pytest.raises(mtci.UndefinedCorrelation):
        mtci.pcc([1, 1, 1], [1, 1, 1])


def test_gate_and_loss():
    assert mtci.gate(label(5, 1.2, 25), label(5, 0.9, 25), tau=0.5)
    assert not mtci.gate(label(5, 0, 25), label(5, 0, 25), tau=0.5)
    # one gated pair: | |5.2 - 4.6| - |5.0 - 4.8| | = 0.4
    assert mtci.loss_ci([5.2, 4.6], [5.0, 4.8], [1.2, 0.9], [25, 25], tau=0.5) == pytest.approx(0.4)
    assert mtci.loss_ci([5.2, 4.6], [5.0, 4.8], [1.2, 0.9], [25, 25], tau=math.inf) == 0.0


def test_tensor_file_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(-0.0), "inf": np.array([np.inf, np.nan])}
    mtci.write_tensor_file(tmp_path / "t.ftns", arrays)
    back = mtci.read_tensor_file(tmp_path / "t.ftns")
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    (tmp_path / "bad.ftns").write_bytes(b"NOPE")
    with pytest.raises(mtci.FormatError):
        mtci.read_tensor_file(tmp_path / "bad.ftns")


def test_defaults():
    cfg = mtci.default_config()
    assert float(cfg["loss.alpha_mu"]) == 0.6
    assert float(cfg["loss.alpha_sigma"]) == 0.4
    assert float(cfg["loss.lambda"]) == 0.5
    assert float(cfg["train.initial_lr"]) == 1e-4


def test_synthetic_and_model():
    data = mtci.generate_synthetic(n_items=12, channels=16, seed=3)
    assert data["features"].shape == (12, 16, 5, 5)
    assert len(data["labels"]) == 12
    again = mtci.generate_synthetic(n_items=12, channels=16, seed=3)
    assert np.array_equal(data["features"], again["features"])

    model = mtci.Model({"model.n_blocks": "2", "model.in_channels": "8", "model.seed": "1"})
    mu, sigma = model.predict(data["features"])
    assert mu.shape == (12,) and sigma.shape == (12,)
    assert np.all(np.isfinite(mu)) and np.all(sigma >= 0)
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 3, 5, 5)))
    with pytest.raises(ValueError):
        mtci.Model({"loss.lambda": "2"})


def test_fit_save_load(tmp_path):
    data = mtci.generate_synthetic(n_items=20, channels=16, seed=4)
    splits = ["train"] * 16 + ["val"] * 2 + ["test"] * 2
    mtci.write_dataset(tmp_path / "d", data["features"], data["labels"], splits)

    cfg = {"model.n_blocks": "2", "model.in_channels": "8", "train.epochs": "2",
           "train.batch_size": "8", "train.initial_lr": "0.001"}
    model = mtci.Model(cfg)
    history = model.fit(tmp_path / "d")
    assert [h["epoch"] for h in history] == [0, 1]
    assert all(math.isfinite(h["loss_total"]) for h in history)
    report = model.evaluate(tmp_path / "d", "train")
    assert report["n"] == 16 and 0 <= report["acc"] <= 1

    model.save(tmp_path / "m.ftns")
    loaded = mtci.Model.load(tmp_path / "m.ftns")
    assert loaded.epochs_done == 2
    assert loaded.config == model.config
    a, b = model.predict(data["features"]), loaded.predict(data["features"])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(mtci.ConfigError):
        model.evaluate(tmp_path / "d", "nope")


def test_grad_check():
    r = mtci.model_grad_check(seed=0)
    assert r["max_rel_error"] < 1e-5
    assert r["elements_per_head"] > 0
