import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minidrive import tensor as T
from minidrive.moe import FEMoE, MoEConfig
from minidrive.tensor import DimensionError, Tensor


@pytest.fixture(scope="module")
def moe():
    return FEMoE(MoEConfig(), 64, 8)


def randomize_gate(m, rng):
    m.gate.linear.weight.data[:] = rng.standard_normal(m.gate.linear.weight.shape) * 0.1


def test_zero_gate_is_uniform(moe, rng):
    w = moe.gate_weights(Tensor(rng.standard_normal((64, 8, 8))))
    np.testing.assert_allclose(w.data, [0.25] * 4, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 50.0))
def test_gate_is_probability_vector(seed, scale):
    rng = np.random.default_rng(seed)
    m = FEMoE(MoEConfig(seed=seed % 1000), 64, 8)
    randomize_gate(m, rng)
    w = m.gate_weights(Tensor(rng.standard_normal((3, 64, 8, 8)) * scale)).data
    assert w.shape == (3, 4)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_expert_shape_law(moe, rng):
    out = moe.expert_forward(Tensor(rng.standard_normal((64, 8, 8))), 0)
    assert out.shape == (16, 16, 16)


def test_expert_zero_input_gives_bias_pattern(rng):
    m = FEMoE(MoEConfig(), 64, 8)
    e = m.expert[0]
    e.deconv_bias.data[:] = rng.standard_normal(16)
    e.conv_bias.data[:] = rng.standard_normal(16)
    out = m.expert_forward(Tensor(np.zeros((64, 8, 8))), 0).data
    relu_b = np.maximum(e.deconv_bias.data, 0)[:, None, None] * np.ones((16, 16, 16), np.float32)
    expected = T.conv2d(Tensor(relu_b), e.conv, e.conv_bias, padding=1).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_expert_vs_naive_oracle(rng):
    m = FEMoE(MoEConfig(num_experts=1, expert_out_channels=3), 8, 4)
    e = m.expert[0]
    x = rng.standard_normal((8, 4, 4)).astype(np.float32)
    up = np.zeros((3, 8, 8))
    for ci in range(8):
        for i in range(4):
            for j in range(4):
                up[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[ci, i, j] * e.deconv.data[ci]
    up = np.maximum(up + e.deconv_bias.data[:, None, None], 0)
    pad = np.pad(up, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 8, 8))
    for o in range(3):
        for i in range(8):
            for j in range(8):
                ref[o, i, j] = np.sum(pad[:, i:i + 3, j:j + 3] * e.conv.data[o]) + e.conv_bias.data[o]
    np.testing.assert_allclose(m.expert_forward(Tensor(x), 0).data, ref, rtol=1e-4, atol=1e-5)


def test_one_hot_gate_selects_expert(moe, rng):
    f1 = Tensor(rng.standard_normal((64, 8, 8)))
    for i in range(4):
        w = np.zeros(4)
        w[i] = 1.0
        out = moe.combine(f1, Tensor(w))
        np.testing.assert_allclose(out.data, moe.expert_forward(f1, i).data, atol=1e-6)


def test_identical_experts_any_weights(rng):
    m = FEMoE(MoEConfig(), 64, 8)
    for e in m.expert[1:]:
        for name, p in e.named_parameters():
            p.data = dict(m.expert[0].named_parameters())[name].data.copy()
    f1 = Tensor(rng.standard_normal((64, 8, 8)))
    w = rng.dirichlet(np.ones(4))
    np.testing.assert_allclose(m.combine(f1, Tensor(w)).data, m.expert_forward(f1, 0).data, atol=1e-5)


def test_combine_matches_manual_sum_and_is_linear(moe, rng):
    f1 = Tensor(rng.standard_normal((64, 8, 8)))
    w = rng.dirichlet(np.ones(4))
    outs = [moe.expert_forward(f1, i).data for i in range(4)]
    manual = sum(wi * o for wi, o in zip(w, outs))
    np.testing.assert_allclose(moe.combine(f1, Tensor(w)).data, manual, rtol=1e-5, atol=1e-5)
    # linear in the expert outputs for fixed weights
    stacked = np.stack(outs)
    alpha = 2.5
    np.testing.assert_allclose(np.tensordot(w, alpha * stacked, 1), alpha * manual, rtol=1e-5, atol=1e-5)


def test_flatten_project_tokens(moe, rng):
    v_moe = Tensor(rng.standard_normal((16, 16, 16)))
    assert T.flatten(v_moe, -2).shape == (16, 256)
    assert moe.flatten_project(v_moe).shape == (16, 128)


def test_identity_projection(rng):
    m = FEMoE(MoEConfig(expert_out_channels=4, proj_dim=16), 8, 2)
    assert m.out_size ** 2 == 16
    m.proj.weight.data = np.eye(16, dtype=np.float32)
    m.proj.bias.data[:] = 0
    v = Tensor(rng.standard_normal((4, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(m.flatten_project(v).data, v.data.reshape(4, 16))


def test_pipeline_token_matrix(moe, rng):
    views = Tensor(rng.standard_normal((6, 64, 8, 8)))
    v = moe.pipeline(views)
    assert v.shape == (96, 128)
    assert moe.pipeline(Tensor(rng.standard_normal((1, 64, 8, 8))), single_view=True).shape == (16, 128)
    with pytest.raises(ValueError):
        moe.pipeline(Tensor(rng.standard_normal((5, 64, 8, 8))))
    swapped = views.data.copy()
    swapped[[1, 4]] = swapped[[4, 1]]
    vs = moe.pipeline(Tensor(swapped)).data
    np.testing.assert_allclose(vs[16:32], v.data[64:80], atol=1e-6)
    np.testing.assert_allclose(vs[64:80], v.data[16:32], atol=1e-6)


def test_token_count_independent_of_experts(rng):
    f = Tensor(rng.standard_normal((6, 64, 8, 8)))
    for n in (2, 4, 6):
        assert FEMoE(MoEConfig(num_experts=n), 64, 8).pipeline(f).shape == (96, 128)
    for c in (8, 16, 32):
        assert FEMoE(MoEConfig(expert_out_channels=c), 64, 8).pipeline(f).shape == (6 * c, 128)


def test_shape_errors(moe, rng):
    with pytest.raises(DimensionError):
        moe.gate_weights(Tensor(rng.standard_normal((32, 8, 8))))
    with pytest.raises(ValueError):
        FEMoE(MoEConfig(expert_out_channels=64), 64, 8)
    with pytest.raises(ValueError):
        FEMoE(MoEConfig(num_experts=0), 64, 8)


def test_stable_parameter_names(moe):
    names = dict(moe.named_parameters())
    assert "gate.conv" in names and "expert.0.deconv" in names and "expert.3.conv_bias" in names
