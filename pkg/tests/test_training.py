import numpy as np
import pytest
import torch

from relictnet.models import EncoderSpec, ModelSpec, ParameterStore, build_classifier, build_encoder, build_segmenter
from relictnet.training import (
    DATASETS,
    Combination,
    CombinationError,
    TrainConfig,
    TrainingError,
    band_stats,
    combinations,
    finite_difference_check,
    pixel_accuracy,
    pretrain,
    run_framework,
    segmentation_loss,
    train_segmenter,
    validate_combination,
)

from conftest import blob_tiles, make_tileset


def test_defaults_echo_published_settings():
    c = TrainConfig()
    assert c.learning_rate == 0.00001 and c.epochs == 300
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_combination_counts():
    assert len(combinations(["proposed"])) == 3 * 6 * 2 == 36
    assert len(combinations(["standard"])) == 3 * 2 == 6
    full = combinations()
    assert len(full) == 42 and len(set(full)) == 42
    assert DATASETS == ("LD30", "LD50")


def test_combination_validation():
    with pytest.raises(CombinationError):
        Combination("standard", "unet", 4, "LD30")
    with pytest.raises(CombinationError):
        Combination("proposed", "unet", None, "LD30")
    with pytest.raises(CombinationError):
        validate_combination("proposed", "unet", 5, "LD30")
    validate_combination("proposed", "unet", 5, "LD30", allow_any_k=True)
    with pytest.raises(CombinationError):
        Combination("proposed", "pspnet", 4, "LD30")
    assert Combination("proposed", "fpn", 8, "LD50").relpath().as_posix() == "proposed/fpn/k8/LD50"


def test_loss_ignores_invalid_pixels():
    logits = torch.tensor([[[[3.0, -2.0]]]])
    target = torch.tensor([[[[1.0, 1.0]]]])
    valid = torch.tensor([[[[True, False]]]])
    expected = torch.nn.functional.softplus(torch.tensor(-3.0))
    assert segmentation_loss(logits, target, valid).item() == pytest.approx(expected.item())


def test_classifier_memorizes_one_tile_per_cluster():
    rng = np.random.default_rng(0)
    pix = rng.normal(size=(8, 4, 32, 32)) + np.arange(8)[:, None, None, None] * 3
    tiles = make_tileset(pix, labels=np.arange(8))
    clf = build_classifier(build_encoder(EncoderSpec.tiny(), 0), 8, 0)
    _, rec = pretrain(clf, tiles, TrainConfig(learning_rate=1e-3, epochs=500, batch_size=8))
    assert max(m["accuracy"] for m in rec.metrics) == 1.0


def test_single_tile_loss_decreases_and_memorizes():
    s = 32
    mask = np.zeros((1, s, s), np.uint8)
    mask[0, 12:20, 12:20] = 1
    rng = np.random.default_rng(1)
    pix = 300 + 20 * rng.standard_normal((1, 4, s, s)) + mask[:, None] * 400.0
    tiles = make_tileset(pix, mask)
    model = build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=0)
    _, rec = train_segmenter(model, tiles, TrainConfig(learning_rate=1e-3, epochs=100))
    assert all(b < a for a, b in zip(rec.losses[:20], rec.losses[1:20]))
    assert rec.metrics[-1]["accuracy"] >= 0.99


def test_training_is_deterministic(tmp_path):
    tiles = blob_tiles(6)
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, seed=5)
    sums = []
    for i in range(2):
        m = build_segmenter(ModelSpec("fpn", EncoderSpec.tiny()), seed=5)
        store, rec = train_segmenter(m, tiles, cfg, tmp_path / str(i))
        sums.append(store.checksum())
        assert rec.checkpoints == ["epoch_2.pt"]
    assert sums[0] == sums[1]
    assert (tmp_path / "0" / "epoch_2.pt").read_bytes() != b""


def test_input_statistics_fitted_and_kept():
    tiles = blob_tiles(4)
    m = build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=0)
    train_segmenter(m, tiles, TrainConfig(epochs=1))
    assert m.encoder.input_mean[3].item() > 2000
    m.encoder.set_input_stats(np.full(4, 7.0), np.full(4, 2.0))
    train_segmenter(m, tiles, TrainConfig(epochs=1))
    assert m.encoder.input_mean.tolist() == [7.0] * 4


def test_batch_of_one_trains():
    tiles = blob_tiles(3)
    m = build_segmenter(ModelSpec("linknet", EncoderSpec.tiny()), seed=0)
    _, rec = train_segmenter(m, tiles, TrainConfig(epochs=1, batch_size=2))
    assert np.isfinite(rec.losses[0])


def test_non_finite_input_raises():
    tiles = blob_tiles(2)
    tiles.pixels[0, 0, 0, 0] = np.nan
    m = build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=0)
    with pytest.raises(TrainingError, match="non-finite"):
        train_segmenter(m, tiles, TrainConfig(epochs=1))


def test_empty_and_bad_label_inputs():
    m = build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=0)
    with pytest.raises(TrainingError):
        train_segmenter(m, blob_tiles(2).subset(slice(0, 0)), TrainConfig(epochs=1))
    clf = build_classifier(build_encoder(EncoderSpec.tiny(), 0), 2, 0)
    with pytest.raises(TrainingError):
        pretrain(clf, make_tileset(np.zeros((2, 4, 32, 32)), labels=[0, 5]), TrainConfig(epochs=1))


def test_frameworks_differ_only_in_initial_encoder():
    tiles = blob_tiles(4)
    cluster = make_tileset(np.random.default_rng(0).normal(size=(4, 4, 32, 32)), labels=[0, 1, 0, 1])
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4)
    spec = EncoderSpec.tiny()
    std = run_framework(Combination("standard", "unet", None, "LD30"), encoder_spec=spec,
                        finetune_config=cfg, train_tiles=tiles)
    prop = run_framework(Combination("proposed", "unet", 2, "LD30"), encoder_spec=spec,
                         finetune_config=cfg, train_tiles=tiles, pretrain_config=cfg,
                         cluster_tiles=cluster)
    fresh_model = build_segmenter(ModelSpec("unet", spec), seed=0)
    fresh_model.encoder.set_input_stats(*band_stats(tiles))
    fresh = ParameterStore.from_module(fresh_model)
    assert std.meta["initial_encoder_checksum"] == fresh.encoder_checksum()
    assert prop.meta["initial_encoder_checksum"] == prop.meta["pretrain_encoder_checksum"]
    assert prop.meta["combination"] == {"framework": "proposed", "arch": "unet", "k": 2, "dataset": "LD30"}
    with pytest.raises(CombinationError):
        run_framework(Combination("proposed", "unet", 2, "LD30"), encoder_spec=spec,
                      finetune_config=cfg, train_tiles=tiles)


def test_gradient_check_small():
    torch.manual_seed(0)
    m = build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=0)
    x = torch.randn(4, 4, 32, 32)
    t = (torch.rand(4, 1, 32, 32) > 0.5).float()
    res = finite_difference_check(m, x, t, n_params=8)
    assert len(res) == 8 and max(r[-1] for r in res) < 1e-3


def test_pixel_accuracy_counts_valid_only():
    tiles = blob_tiles(2)
    tiles.valid[:, :, :16] = False

    class Const(torch.nn.Module):
        def forward(self, x):
            return torch.ones(x.shape[0], 1, 32, 32)

    acc = pixel_accuracy(Const(), tiles)
    v = tiles.valid
    assert acc == pytest.approx(((tiles.mask > 0) & v).sum() / v.sum())
