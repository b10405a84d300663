import numpy as np
import pytest

from ksam.dataset import preprocess
from ksam.fixtures import make_fixture_dataset
from ksam.prelim_seg import (EarlyStopping, EncoderSpec, MeanMaskPrior, TrainConfig,
                             UNetSegmenter, binarize, load_model, predict_mask, train_model)


def test_binarize_examples():
    assert binarize(np.full((3, 3), 0.6)).all()
    assert binarize(np.full((3, 3), 0.5)).all()
    assert not binarize(np.full((3, 3), 0.49)).any()


def test_binarize_elementwise():
    rng = np.random.default_rng(0)
    p = rng.random((32, 32))
    b = binarize(p, 0.3)
    for (r, c), v in np.ndenumerate(p):
        assert b[r, c] == (v >= 0.3)
    assert np.array_equal(binarize(b.astype(float)), b)


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize(np.array([1.5]))


def test_early_stopping_flat_after_epoch_3():
    stop = EarlyStopping(patience=3, min_delta=1e-3)
    scores = [0.5, 0.6, 0.7] + [0.7] * 10
    for epoch, s in enumerate(scores, start=1):
        if stop.step(epoch, s):
            break
    assert epoch == 6 and stop.best_epoch == 3


def test_early_stopping_min_delta():
    stop = EarlyStopping(patience=2, min_delta=0.01)
    assert not stop.step(1, 0.5)
    assert not stop.step(2, 0.505)
    assert stop.step(3, 0.509)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=3, patience=3)
    with pytest.raises(ValueError):
        TrainConfig(target="liver")
    with pytest.raises(ValueError):
        EncoderSpec("efficientnet")


def test_mean_prior(prior_models, test_fixtures, tmp_path):
    lung, _ = prior_models
    gray = preprocess(test_fixtures[0]).gray
    p = predict_mask(lung, gray)
    assert p.shape == (128, 128) and 0 <= p.min() and p.max() <= 1
    lm = preprocess(test_fixtures[0]).lung_mask_small
    assert p[lm].mean() > p[~lm].mean()
    lung.save(tmp_path / "m")
    assert np.array_equal(predict_mask(load_model(tmp_path / "m"), gray), p)


def test_predict_mask_dim_mismatch(prior_models):
    with pytest.raises(ValueError):
        predict_mask(prior_models[0], np.zeros((64, 64)))


def test_heart_target_needs_heart_masks():
    ps = [preprocess(s) for s in make_fixture_dataset(3, seed=4, size=128)]
    ps[1].heart_mask_small = None
    with pytest.raises(ValueError, match=ps[1].source_id):
        train_model(ps[:2], ps[2:], EncoderSpec("resnet34", False), TrainConfig(target="heart"))


@pytest.mark.slow
def test_unet_short_fixture_training(tmp_path):
    ps = [preprocess(s) for s in make_fixture_dataset(12, seed=1, size=256)]
    cfg = TrainConfig(max_epochs=5, patience=2, batch_size=4, learning_rate=1e-3, seed=0)
    model = train_model(ps[:10], ps[10:], EncoderSpec("resnet34", pretrained=False), cfg)
    assert 1 <= len(model.history_) <= 5
    assert {"epoch", "train_loss", "val_dice"} <= set(model.history_[0])

    held = ps[11]
    p = predict_mask(model, held.gray)
    assert p.shape == (128, 128) and p.min() >= 0 and p.max() <= 1
    assert p[held.lung_mask_small].mean() > p[~held.lung_mask_small].mean()
    assert np.array_equal(predict_mask(model, held.gray), p)

    model.save(tmp_path / "run")
    again = load_model(tmp_path / "run")
    assert np.allclose(predict_mask(again, held.gray), p, atol=1e-6)
    assert again.history_ == model.history_


def test_unet_estimator_params():
    est = UNetSegmenter(encoder="vgg16", max_epochs=7)
    assert est.get_params()["encoder"] == "vgg16"
    assert est.set_params(patience=2).patience == 2
