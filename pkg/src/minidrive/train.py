"""Training loop, greedy evaluation and exact-match scoring."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .lm import Vocabulary, detokenize, normalize
from .model import MiniDrive, cached_features, encode_question, make_batch, pad_rows
from .nn import AdamW
from .scenes import SceneSample
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    steps: int = 2000
    batch: int = 8
    seed: int = 0
    warmup: int = 0
    clip_norm: float = 1.0
    log_every: int = 50


def build_vocab(samples: Sequence[SceneSample]) -> Vocabulary:
    return Vocabulary.build([s.question for s in samples] + [s.answer for s in samples])


def train(model: MiniDrive, samples: Sequence[SceneSample], vocab: Vocabulary, cfg: TrainConfig,
          on_step: Callable[[int, float], None] | None = None,
          features: np.ndarray | None = None) -> list[float]:
    """Teacher-forced AdamW training; returns the per-step loss history."""
    if not samples:
        raise ValueError("empty training set")
    frozen = not any(p.requires_grad for p in model.encoder.parameters())
    if features is None and frozen:
        features = cached_features(model, samples)
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm)
    order_rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    losses = []
    started = time.perf_counter()
    for step in range(cfg.steps):
        if len(order) < cfg.batch:
            order.extend(order_rng.permutation(len(samples)).tolist())
        idx, order = order[:cfg.batch], order[cfg.batch:]
        chunk = [samples[i] for i in idx]
        opt.zero_grad()
        with Tape() as tape:
            if frozen:
                batch = make_batch(chunk, features[idx], vocab, model.cfg.lm)
            else:
                from .model import images_array
                f1 = model.features(images_array(chunk))
                batch = make_batch(chunk, f1.data, vocab, model.cfg.lm)
                batch.features = f1
            loss = model.loss(batch)
        tape.backward(loss)
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup) if cfg.warmup else cfg.lr
        opt.step(lr)
        value = loss.item()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.4f (%.1fs)", step, value, time.perf_counter() - started)
    return losses


def predict(model: MiniDrive, samples: Sequence[SceneSample], vocab: Vocabulary,
            chunk: int = 32, features: np.ndarray | None = None) -> list[str]:
    if features is None:
        features = cached_features(model, samples)
    out = []
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        qs = pad_rows([encode_question(s.question, vocab, model.cfg.lm.max_text_len) for s in part])
        ids = model.generate(Tensor(features[start:start + chunk]), qs)
        out.extend(detokenize(seq, vocab) for seq in ids)
    return out


def exact_match(predictions: Sequence[str], samples: Sequence[SceneSample]) -> float:
    if not samples:
        raise ValueError("no samples to score")
    hits = sum(normalize(p) == normalize(s.answer) for p, s in zip(predictions, samples))
    return hits / len(samples)
