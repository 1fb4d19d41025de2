import numpy as np
import pytest

from minidrive.adapter import AdapterConfig, DIAdapter, attention, residual_fuse
from minidrive.tensor import DimensionError, Tensor

DIM = 16


def live_adapter(seed, heads=1):
    return DIAdapter(AdapterConfig(heads=heads, zero_init_output=False, seed=seed), DIM)


def naive_attention(v, t, a):
    q, k, val = v @ a.w_q.weight.data, t @ a.w_k.weight.data, t @ a.w_v.weight.data
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        s = np.array([q[i] @ k[j] for j in range(k.shape[0])]) / np.sqrt(q.shape[1])
        p = np.exp(s - s.max())
        p /= p.sum()
        for j in range(k.shape[0]):
            out[i] += p[j] * val[j]
    return out


def test_single_key_returns_value_row(rng):
    a = live_adapter(0)
    v = Tensor(rng.standard_normal((5, DIM)).astype(np.float32))
    t = Tensor(rng.standard_normal((1, DIM)).astype(np.float32))
    out = a.attend(v, t).data
    value = (t.data @ a.w_v.weight.data)[0]
    for row in out:
        assert np.array_equal(row, value)


def test_zero_query_gives_mean_of_values(rng):
    a = live_adapter(1)
    a.w_q.weight.data[:] = 0
    v = Tensor(rng.standard_normal((3, DIM)).astype(np.float32))
    t = Tensor(rng.standard_normal((4, DIM)).astype(np.float32))
    mean = (t.data @ a.w_v.weight.data).mean(axis=0)
    np.testing.assert_allclose(a.attend(v, t).data, np.broadcast_to(mean, (3, DIM)), rtol=1e-6, atol=1e-6)


def test_matches_naive_oracle(rng):
    a = live_adapter(2).astype(np.float64)
    v = rng.standard_normal((6, DIM))
    t = rng.standard_normal((5, DIM))
    got = a.attend(Tensor(v, dtype=np.float64), Tensor(t, dtype=np.float64)).data
    want = naive_attention(v, t, a)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12)) <= 1e-6


def test_rows_in_convex_hull_of_values(rng):
    a = live_adapter(3)
    v = Tensor(rng.standard_normal((4, DIM)).astype(np.float32))
    t = Tensor(rng.standard_normal((3, DIM)).astype(np.float32))
    vals = t.data @ a.w_v.weight.data
    out = a.attend(v, t).data
    # coefficients are recoverable by least squares and form a probability vector
    coef, *_ = np.linalg.lstsq(vals.T, out.T, rcond=None)
    assert (coef > -1e-4).all()
    np.testing.assert_allclose(coef.sum(axis=0), 1.0, atol=1e-4)


def test_zero_output_projection_is_identity(rng):
    a = DIAdapter(AdapterConfig(), DIM)
    v = Tensor(rng.standard_normal((7, DIM)).astype(np.float32))
    t = Tensor(rng.standard_normal((3, DIM)).astype(np.float32))
    assert a(v, t).data.tobytes() == v.data.tobytes()


def test_dynamism_distinct_instructions(rng):
    hits = 0
    for trial in range(100):
        a = live_adapter(trial)
        r = np.random.default_rng(trial)
        v = Tensor(r.standard_normal((8, DIM)).astype(np.float32))
        t1 = Tensor(r.standard_normal((4, DIM)).astype(np.float32))
        t2 = Tensor(r.standard_normal((4, DIM)).astype(np.float32))
        hits += np.linalg.norm(a(v, t1).data - a(v, t2).data) > 1e-9
    assert hits == 100


def test_residual_fuse(rng):
    v = Tensor(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(residual_fuse(v, w).data, v.data + w.data)
    np.testing.assert_array_equal(residual_fuse(v, Tensor(-v.data)).data, np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        residual_fuse(v, Tensor(np.zeros((2, 4))))


def test_errors(rng):
    a = live_adapter(0)
    v = Tensor(rng.standard_normal((2, DIM)))
    with pytest.raises(ValueError):
        a.attend(v, Tensor(np.zeros((0, DIM))))
    with pytest.raises(DimensionError):
        a.attend(v, Tensor(np.zeros((2, DIM + 1))))
    with pytest.raises(ValueError):
        DIAdapter(AdapterConfig(heads=3), DIM)


def test_text_mask_ignores_pad_content(rng):
    a = live_adapter(4, heads=2)
    v = Tensor(rng.standard_normal((3, DIM)).astype(np.float32))
    t = rng.standard_normal((4, DIM)).astype(np.float32)
    mask = np.array([True, True, False, False])
    t2 = t.copy()
    t2[2:] = rng.standard_normal((2, DIM))
    assert np.array_equal(a(v, Tensor(t), mask).data, a(v, Tensor(t2), mask).data)


def test_attention_causal_mask(rng):
    q = Tensor(rng.standard_normal((4, 8)))
    out = attention(q, q, q, causal=True).data
    np.testing.assert_allclose(out[0], q.data[0])
