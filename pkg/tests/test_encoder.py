import numpy as np
import pytest

from minidrive import tensor as T
from minidrive.encoder import CAMERAS, EncoderConfig, LKBlock, VisionEncoder
from minidrive.tensor import DimensionError, Tape, Tensor


def test_default_feature_map_shape(encoder, rng):
    fm = encoder.encode_view(Tensor(rng.random((3, 64, 64))))
    assert fm.values.shape == (64, 8, 8)
    assert fm.view_name == "CAM_FRONT"


@pytest.mark.parametrize("kwargs", [
    {"input_size": 60},
    {"large_kernel": 6},
    {"stages": [[32, 1], [16, 1]]},
])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_wrong_image_size(encoder, rng):
    with pytest.raises(DimensionError):
        encoder(Tensor(rng.random((3, 32, 32))))


def test_zero_block_is_identity(rng):
    block = LKBlock(rng, 4, 7)
    block.dw.data[:] = 0
    block.pw.data[:] = 0
    x = Tensor(rng.standard_normal((4, 8, 8)))
    out = block(x)
    assert out.shape == (4, 8, 8)
    np.testing.assert_array_equal(out.data, x.data)


def test_block_matches_primitive_composition(rng):
    block = LKBlock(rng, 3, 5)
    block.dw_bias.data[:] = rng.standard_normal(3)
    x = rng.standard_normal((3, 6, 6)).astype(np.float32)
    # naive depthwise + pointwise
    pad = np.pad(x, ((0, 0), (2, 2), (2, 2)))
    dw = np.zeros_like(x)
    for c in range(3):
        for i in range(6):
            for j in range(6):
                dw[c, i, j] = np.sum(pad[c, i:i + 5, j:j + 5] * block.dw.data[c, 0]) + block.dw_bias.data[c]
    pw = np.einsum("oc,chw->ohw", block.pw.data[:, :, 0, 0], dw) + block.pw_bias.data[:, None, None]
    expected = x + np.maximum(pw, 0)
    np.testing.assert_allclose(block(Tensor(x)).data, expected, rtol=1e-5, atol=1e-5)


def test_block_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        LKBlock(rng, 4, 3)(Tensor(np.zeros((5, 8, 8))))


def test_identical_images_identical_features(encoder, rng):
    img = rng.random((3, 64, 64))
    a = encoder(Tensor(img)).data
    b = encoder(Tensor(img.copy())).data
    assert a.tobytes() == b.tobytes()


def test_batched_matches_single(encoder, rng):
    imgs = rng.random((2, 3, 64, 64)).astype(np.float32)
    batched = encoder(Tensor(imgs)).data
    np.testing.assert_allclose(batched[1], encoder(Tensor(imgs[1])).data, rtol=1e-5, atol=1e-5)


def test_frozen_encoder_gets_no_gradient(rng):
    enc = VisionEncoder(EncoderConfig(input_size=16, stages=[[4, 1], [8, 1]]))
    x = Tensor(rng.random((3, 16, 16)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(enc(x))
    tape.backward(loss)
    assert all(p.grad is None or not p.grad.any() for p in enc.parameters())
    assert x.grad is not None and np.abs(x.grad).sum() > 0


def test_views_permute_with_inputs(rng):
    enc = VisionEncoder(EncoderConfig(input_size=16, stages=[[4, 1], [8, 1]]))
    views = [Tensor(rng.random((3, 16, 16)).astype(np.float32)) for _ in CAMERAS]
    maps = enc.encode_views(views)
    assert [m.view_name for m in maps] == list(CAMERAS)
    perm = [3, 0, 5, 1, 4, 2]
    maps_p = enc.encode_views([views[i] for i in perm])
    for k, i in enumerate(perm):
        np.testing.assert_allclose(maps_p[k].values.data, maps[i].values.data, rtol=1e-6, atol=1e-6)


def test_view_count_enforced(rng):
    enc = VisionEncoder(EncoderConfig(input_size=16, stages=[[4, 1], [8, 1]]))
    one = [Tensor(rng.random((3, 16, 16)))]
    with pytest.raises(ValueError):
        enc.encode_views(one)
    maps = enc.encode_views(one, single_view=True)
    assert len(maps) == 1 and maps[0].values.shape == (8, 4, 4)
