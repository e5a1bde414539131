import numpy as np
import pytest

menet = pytest.importorskip("menet")


def test_version():
    assert menet.__version__.count(".") == 2


def test_metrics_on_identity():
    rng = np.random.default_rng(0)
    mask = (rng.random((8, 8)) > 0.7).astype(np.uint8)
    s = mask.astype(np.float64)
    p, r, f = menet.f_measure(s, mask, menet.adaptive_threshold(s))
    assert (p, r, f) == (1.0, 1.0, 1.0)
    assert menet.mae(s, mask) == 0.0
    assert menet.f_beta(0.4, 0.4) == pytest.approx(0.4, abs=0)


def test_pr_curve_shape():
    s8 = np.arange(64, dtype=np.uint8).reshape(8, 8) * 4
    mask = (s8 > 128).astype(np.uint8)
    precision, recall = menet.pr_curve(s8, mask)
    assert precision.shape == (256,) and recall.shape == (256,)
    assert recall[0] == 1.0


def test_synthetic_data_is_seeded():
    a = menet.generate_synthetic(3, 16, seed=5)
    b = menet.generate_synthetic(3, 16, seed=5)
    assert [x["id"] for x in a] == [x["id"] for x in b]
    for x, y in zip(a, b):
        assert x["image"].shape == (3, 16, 16)
        assert np.array_equal(x["image"], y["image"])
        assert set(np.unique(x["mask"])) <= {0, 1}


def test_metric_loss_forms_agree_when_balanced():
    rng = np.random.default_rng(1)
    labels = np.array([1, 0] * 8, dtype=np.uint8).reshape(4, 4)
    emb = rng.normal(size=(1, 16, 4, 4))
    pairwise, centroid = menet.metric_losses(emb, labels)
    assert abs(pairwise - centroid) <= 1e-6 * (1 + abs(centroid))


def test_distortions():
    img = np.full((3, 16, 16), 0.5, dtype=np.float32)
    noisy = menet.awgn(img, 0.1, seed=3)
    assert noisy.shape == img.shape and 0.05 < np.std(noisy) < 0.15
    assert np.allclose(menet.dct_quant(img, 100), img, atol=1 / 255)


def test_model_predict_train_and_roundtrip(tmp_path):
    model = menet.Model.create({"input_size": 16, "base_channels": 2, "convs_per_block": 1},
                               {"learning_rate": 0.01, "batch_size": 2})
    data = menet.generate_synthetic(6, 16, seed=2)
    losses = model.train(data, 3)
    assert len(losses) == 3 and all(np.isfinite(losses))
    assert model.iteration == 3

    images = np.stack([d["image"] for d in data[:2]])
    maps = model.predict(images)
    assert len(maps) == 2
    assert maps[0]["metric"].shape == (16, 16)
    assert maps[0]["metric"].max() <= 1.0

    path = tmp_path / "m.ment"
    model.save(str(path))
    again = menet.Model.load(str(path))
    assert np.array_equal(again.predict(images)[0]["metric"], maps[0]["metric"])
    assert again.config["input_size"] == 16

    report = menet.evaluate([m["metric"] for m in maps], [d["mask"] for d in data[:2]])
    assert 0.0 <= report["f_beta"] <= 1.0


def test_robustness_bound_dominates():
    model = menet.Model.create({"input_size": 8, "base_channels": 2, "convs_per_block": 1})
    image = menet.generate_synthetic(1, 8, seed=4)[0]["image"][None].astype(np.float64)
    r = model.robustness(image)
    assert r["violations"] == 0
    assert np.all(r["G"] >= np.abs(r["g"]))
    assert r["M"] >= np.linalg.norm(r["g"])


def test_gradcheck_passes():
    cases = menet.gradcheck(network=False)
    assert cases and all(c["passed"] for c in cases)


def test_errors_are_typed():
    with pytest.raises(menet.ContractError):
        menet.Model.create({"input_size": 12})
    with pytest.raises(menet.FormatError):
        menet.Model.load("/nonexistent/model.ment")
