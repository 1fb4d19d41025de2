"""Gradient certification: every primitive plus the composed model at a tiny size."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig
from .encoder import EncoderConfig
from .gradcheck import THRESHOLD_64, finite_diff_gradcheck, parameter_gradcheck
from .lm import LMConfig
from .model import MiniDrive, ModelConfig
from .moe import MoEConfig

Case = tuple[str, Callable[..., T.Tensor], list[np.ndarray]]


def primitive_cases(rng: np.random.Generator) -> Iterator[Case]:
    n = rng.standard_normal
    mask = rng.random((3, 4)) < 0.3
    yield "add", T.add, [n((3, 4)), n(4)]
    yield "mul", T.mul, [n((2, 3, 4)), n((3, 1))]
    yield "scale", lambda x: T.scale(x, 1.7), [n(5)]
    yield "relu", T.relu, [n((4, 5))]
    yield "masked_fill", lambda x: T.masked_fill(x, mask, 0.5), [n((3, 4))]
    yield "reshape", lambda x: T.reshape(x, (4, 6)), [n((2, 3, 4))]
    yield "flatten", lambda x: T.flatten(x, 1), [n((2, 3, 4))]
    yield "transpose", lambda x: T.transpose(x, (2, 0, 1)), [n((2, 3, 4))]
    yield "take", lambda x: T.take(x, np.array([2, 0, 2]), axis=0), [n((4, 3))]
    yield "concat", lambda a, b: T.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]
    yield "sum", lambda x: T.sum(x, axis=1), [n((3, 4, 2))]
    yield "mean", lambda x: T.mean(x, axis=-1, keepdims=True), [n((3, 4))]
    yield "matmul", T.matmul, [n((2, 3, 4)), n((4, 5))]
    yield "matmul.batched", T.matmul, [n((2, 3, 4)), n((2, 4, 5))]
    yield "softmax", T.softmax, [n((3, 5))]
    yield "layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [n((3, 6)), n(6), n(6)]
    ids = np.array([[1, 4, 0], [5, 1, 1]])
    yield "embedding", lambda t: T.embedding(t, ids), [n((6, 4))]
    targets = np.array([[2, 5, 0], [1, 0, 0]])
    yield "cross_entropy", lambda x: T.cross_entropy(x, targets, pad_id=0), [n((2, 3, 6))]
    yield "conv2d", lambda x, k, b: T.conv2d(x, k, b, padding=1), [n((3, 6, 6)), n((4, 3, 3, 3)), n(4)]
    yield "conv2d.stride2", lambda x, k: T.conv2d(x, k, stride=2, padding=1), [n((2, 3, 7, 7)), n((2, 3, 3, 3))]
    yield "conv2d.depthwise", lambda x, k: T.conv2d(x, k, padding=2, groups=4), [n((4, 6, 6)), n((4, 1, 5, 5))]
    yield "conv_transpose2d", lambda x, k, b: T.conv_transpose2d(x, k, b, stride=2), \
        [n((4, 3, 3)), n((4, 2, 2, 2)), n(2)]
    yield "conv_transpose2d.overlap", lambda x, k: T.conv_transpose2d(x, k, stride=2), \
        [n((2, 3, 3, 3)), n((3, 2, 3, 3))]
    yield "maxpool2d", lambda x: T.maxpool2d(x, 2), [n((2, 6, 6))]


def tiny_config(seed: int, vocab_size: int = 12) -> ModelConfig:
    """8px images and dimension 16; the adapter output projection is not zero so every path is live."""
    return ModelConfig(
        encoder=EncoderConfig(input_size=8, stages=[[4, 1], [8, 1]], large_kernel=3, frozen=False,
                              seed=seed),
        moe=MoEConfig(num_experts=2, expert_out_channels=4, proj_dim=16, seed=seed + 1),
        adapter=AdapterConfig(heads=2, zero_init_output=False, seed=seed + 2),
        lm=LMConfig(dim=16, enc_layers=1, dec_layers=1, heads=2, ffn_dim=32, max_text_len=5,
                    max_answer_len=4, vocab_size=vocab_size, seed=seed + 3),
    )


def composed_check(seed: int, max_checks: int = 3) -> tuple[float, int]:
    """Loss from pixels through encoder, FE-MoE, adapter and LM, checked over all parameters.

    Returns the worst relative error and the number of probes skipped as kinks.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config(seed)
    model = MiniDrive(cfg).astype(np.float64)
    # pixel-level input: 2 samples, 6 views
    images = rng.random((2, cfg.num_views, 3, 8, 8))
    questions = np.array([[4, 5, 6, 0, 0], [7, 4, 8, 9, 10]])
    decoder_in = np.array([[1, 6, 7, 0], [1, 11, 5, 4]])
    targets = np.array([[6, 7, 2, 0], [11, 5, 4, 2]])

    def loss_fn():
        f1 = model.features(T.Tensor(images, dtype=np.float64))
        _, loss = model.forward(f1, questions, decoder_in, targets)
        return loss

    worst, kinks = parameter_gradcheck(loss_fn, model.parameters(), max_checks=max_checks, seed=seed)
    return max(worst.values()), kinks


MAX_KINK_FRACTION = 0.05


def run(trials: int = 5, seed: int = 0, composed: bool = True) -> dict[str, float]:
    """Worst relative error per op over ``trials`` random instances (64-bit).

    The composed entry also reports ``pipeline.kinks``, the fraction of probes
    skipped at non-differentiable points; more than 5% counts as a failure.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    worst: dict[str, float] = {}
    kinks = probes = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, op, inputs in primitive_cases(rng):
            err = finite_diff_gradcheck(op, inputs, seed=seed * 1000 + trial)
            worst[name] = max(worst.get(name, 0.0), err)
        if composed:
            err, k = composed_check(seed * 1000 + trial)
            worst["pipeline"] = max(worst.get("pipeline", 0.0), err)
            kinks += k
            probes += composed_probe_count()
    if composed:
        worst["pipeline.kinks"] = kinks / probes
    return worst


def composed_probe_count(max_checks: int = 3) -> int:
    return sum(min(p.size, max_checks) for p in MiniDrive(tiny_config(0)).parameters())


def failures(results: dict[str, float], threshold: float = THRESHOLD_64) -> list[str]:
    bad = [k for k, v in results.items() if k != "pipeline.kinks" and v > threshold]
    if results.get("pipeline.kinks", 0.0) > MAX_KINK_FRACTION:
        bad.append("pipeline.kinks")
    return bad


def passed(results: dict[str, float], threshold: float = THRESHOLD_64) -> bool:
    return not failures(results, threshold)
