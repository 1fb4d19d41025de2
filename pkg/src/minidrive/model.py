"""The assembled vision-language model and batch preparation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, DIAdapter
from .encoder import CAMERAS, EncoderConfig, VisionEncoder
from .lm import BOS, EOS, PAD, LanguageModel, LMConfig, greedy_decode, split_words
from .moe import FEMoE, MoEConfig
from .nn import Module
from .scenes import SceneSample
from .tensor import Tensor, no_tape


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    single_view: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            moe=MoEConfig(**d.get("moe", {})),
            adapter=AdapterConfig(**d.get("adapter", {})),
            lm=LMConfig(**d.get("lm", {})),
            single_view=d.get("single_view", False),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def num_views(self) -> int:
        return 1 if self.single_view else len(CAMERAS)


class MiniDrive(Module):
    def __init__(self, cfg: ModelConfig):
        if cfg.moe.proj_dim != cfg.lm.dim:
            raise ValueError("moe.proj_dim must equal lm.dim")
        self.cfg = cfg
        self.encoder = VisionEncoder(cfg.encoder)
        self.moe = FEMoE(cfg.moe, cfg.encoder.out_channels, cfg.encoder.out_size)
        self.adapter = DIAdapter(cfg.adapter, cfg.lm.dim)
        self.lm = LanguageModel(cfg.lm)

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- stages

    def features(self, images: np.ndarray | Tensor) -> Tensor:
        """``[batch, views, 3, H, W]`` pixels in [0,1] to feature maps ``[batch, views, c, h, w]``."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        lead = x.shape[:2]
        f = self.encoder(T.reshape(x, (-1,) + x.shape[2:]))
        return T.reshape(f, lead + f.shape[1:])

    def visual_tokens(self, f1: Tensor) -> Tensor:
        return self.moe.pipeline(f1, single_view=self.cfg.single_view)

    def fuse(self, v: Tensor, question_ids: np.ndarray) -> tuple[Tensor, Tensor, np.ndarray]:
        question_ids = np.asarray(question_ids, dtype=np.int64)
        text_mask = question_ids != PAD
        t = self.lm.embed_text(question_ids)
        return self.adapter(v, t, text_mask), t, text_mask

    def forward(self, f1: Tensor, question_ids, decoder_ids, targets=None):
        v = self.visual_tokens(f1)
        v_input, t_input, text_mask = self.fuse(v, question_ids)
        return self.lm.forward(v_input, t_input, text_mask, decoder_ids, targets)

    def loss(self, batch: "Batch") -> Tensor:
        _, loss = self.forward(batch.features, batch.questions, batch.decoder_in, batch.targets)
        return loss

    def generate(self, f1: Tensor, question_ids, max_len: int | None = None) -> list[list[int]]:
        max_len = self.cfg.lm.max_answer_len if max_len is None else max_len
        question_ids = np.asarray(question_ids, dtype=np.int64)
        with no_tape():
            v = self.visual_tokens(f1)
            v_input, t_input, text_mask = self.fuse(v, question_ids)
            memory, mask = self.lm.encode(v_input, t_input, text_mask)

            def step(prefix):
                return self.lm.decode(memory, mask, prefix).data[:, -1, :]

            return greedy_decode(step, max_len, batch=question_ids.shape[0])


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    features: Tensor
    questions: np.ndarray
    decoder_in: np.ndarray
    targets: np.ndarray
    ids: list[str]


def images_array(samples: Sequence[SceneSample], cameras: Sequence[str] = CAMERAS) -> np.ndarray:
    """Stack views as float32 ``[batch, views, 3, H, W]`` scaled by 1/255."""
    arr = np.stack([np.stack([s.views[c] for c in cameras]) for s in samples])
    return arr.transpose(0, 1, 4, 2, 3).astype(np.float32) / np.float32(255.0)


def pad_rows(rows: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = max(len(r) for r in rows) if length is None else length
    out = np.full((len(rows), length), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r[:length]
    return out


def encode_answer(answer: str, vocab, max_len: int) -> tuple[list[int], list[int]]:
    ids = vocab.encode(split_words(answer))[:max_len]
    return [BOS] + ids, ids + [EOS]


def encode_question(question: str, vocab, max_len: int) -> list[int]:
    return vocab.encode(split_words(question))[:max_len]


def cached_features(model: MiniDrive, samples: Sequence[SceneSample], chunk: int = 32) -> np.ndarray:
    """Frozen-encoder outputs for every sample, ``[n, views, c, h, w]``."""
    cams = CAMERAS[:model.cfg.num_views]
    out = []
    with no_tape():
        for start in range(0, len(samples), chunk):
            out.append(model.features(images_array(samples[start:start + chunk], cams)).data)
    return np.concatenate(out, axis=0)


def make_batch(samples: Sequence[SceneSample], features: np.ndarray, vocab, lm: LMConfig) -> Batch:
    qs = [encode_question(s.question, vocab, lm.max_text_len) for s in samples]
    answers = [encode_answer(s.answer, vocab, lm.max_answer_len) for s in samples]
    return Batch(
        Tensor(features),
        pad_rows(qs),
        pad_rows([a for a, _ in answers]),
        pad_rows([t for _, t in answers]),
        [s.id for s in samples],
    )
