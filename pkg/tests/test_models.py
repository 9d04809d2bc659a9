import pytest
import torch

from relictnet.models import (
    ARCHITECTURES,
    CheckpointError,
    EncoderSpec,
    ModelSpec,
    ParameterStore,
    TransferError,
    build_classifier,
    build_encoder,
    build_segmenter,
    encoder_state_equal,
    transfer_encoder,
)
from relictnet.models.store import tensor_checksum


def test_tiny_encoder_feature_strides():
    enc = build_encoder(EncoderSpec.tiny(), seed=0)
    feats = enc(torch.zeros(2, 4, 32, 32))
    assert [f.shape[-1] for f in feats] == [16, 8, 4, 2, 1]
    assert [f.shape[1] for f in feats] == list(enc.out_channels)


def test_full_preset_layout():
    spec = EncoderSpec.full()
    assert spec.block_layout == (6, 12, 24, 16)
    assert spec.growth_rate == 32 and spec.init_features == 64
    # 4 dense blocks of 2 convs per layer, stem conv, 3 transitions, and a classifier
    assert 2 * sum(spec.block_layout) + 1 + 3 + 1 == 121
    enc = build_encoder(spec, seed=0)
    assert enc.out_channels[-1] == 1024


def test_same_seed_same_checksum():
    a = ParameterStore.from_module(build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=3))
    b = ParameterStore.from_module(build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=3))
    c = ParameterStore.from_module(build_segmenter(ModelSpec("unet", EncoderSpec.tiny()), seed=4))
    assert a.checksum() == b.checksum() != c.checksum()


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_segmenter_contract(arch):
    m = build_segmenter(ModelSpec(arch, EncoderSpec.tiny()), seed=0).eval()
    with torch.no_grad():
        out = m(torch.zeros(3, 4, 32, 32))
        big = m(torch.randn(5, 4, 32, 32) * 1e4)
    assert out.shape == (3, 1, 32, 32) and big.shape == (5, 1, 32, 32)
    for t in (out, big):
        assert torch.isfinite(t).all() and t.min() >= 0 and t.max() <= 1


def test_architectures_share_encoder_shapes():
    spec = EncoderSpec.tiny()
    clf = ParameterStore.from_module(build_classifier(build_encoder(spec, 0), 6, 0))
    shapes = {k: v for k, v in clf.shapes().items() if k.startswith("encoder.")}
    for arch in ARCHITECTURES:
        seg = ParameterStore.from_module(build_segmenter(ModelSpec(arch, spec), seed=1))
        seg_shapes = {k: v for k, v in seg.shapes().items() if k.startswith("encoder.")}
        assert seg_shapes == shapes


def test_classifier_logit_length():
    clf = build_classifier(build_encoder(EncoderSpec.tiny(), 0), 6, 0).eval()
    with torch.no_grad():
        logits = clf(torch.randn(2, 4, 32, 32))
        proba = clf.predict_proba(torch.randn(2, 4, 32, 32))
    assert logits.shape == (2, 6)
    assert torch.allclose(proba.sum(1), torch.ones(2))


def test_transfer_identity_and_feature_maps():
    spec = EncoderSpec.tiny()
    clf = build_classifier(build_encoder(spec, 0), 4, 0)
    with torch.no_grad():  # perturb batch-norm buffers so they are not defaults
        for name, buf in clf.encoder.named_buffers():
            if buf.dtype.is_floating_point:
                buf.add_(0.1)
    src = ParameterStore.from_module(clf)
    seg = build_segmenter(ModelSpec("fpn", spec), seed=9)
    transfer_encoder(src, seg)
    assert encoder_state_equal(clf, seg)
    assert ParameterStore.from_module(seg).encoder_checksum() == src.encoder_checksum()
    probe = torch.randn(2, 4, 32, 32, generator=torch.Generator().manual_seed(0))
    clf.eval(), seg.eval()
    with torch.no_grad():
        for a, b in zip(clf.encoder(probe), seg.encoder(probe)):
            assert torch.equal(a, b)


def test_transfer_rejects_mismatch():
    src = ParameterStore.from_module(build_classifier(build_encoder(EncoderSpec.tiny(), 0), 4, 0))
    full = build_segmenter(ModelSpec("unet", EncoderSpec.full()), seed=0)
    with pytest.raises(TransferError, match="encoder\\."):
        transfer_encoder(src, full)
    five = build_segmenter(ModelSpec("unet", EncoderSpec.tiny(input_channels=5)), seed=0)
    with pytest.raises(TransferError):
        transfer_encoder(src, five)


def test_store_save_load_and_corruption(tmp_path):
    m = build_segmenter(ModelSpec("linknet", EncoderSpec.tiny()), seed=0)
    store = ParameterStore.from_module(m, {"note": "x"})
    path = store.save(tmp_path / "m.pt")
    back = ParameterStore.load(path)
    assert back.checksum() == store.checksum() and back.meta["note"] == "x"
    rebuilt = back.build()
    assert ParameterStore.from_module(rebuilt).checksum() == store.checksum()
    # tamper with a tensor but keep the stored checksum
    blob = torch.load(path, weights_only=False)
    key = next(iter(blob["state"]))
    blob["state"][key] = blob["state"][key] + 1
    torch.save(blob, path)
    with pytest.raises(CheckpointError):
        ParameterStore.load(path)


def test_checksum_covers_dtype_and_shape():
    a = {"w": torch.zeros(4)}
    assert tensor_checksum(a) != tensor_checksum({"w": torch.zeros(2, 2)})
    assert tensor_checksum(a) != tensor_checksum({"w": torch.zeros(4, dtype=torch.float64)})


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("deeplab", EncoderSpec.tiny())
    spec = ModelSpec("unet", EncoderSpec.tiny())
    assert ModelSpec.from_dict(spec.to_dict()).fingerprint() == spec.fingerprint()
