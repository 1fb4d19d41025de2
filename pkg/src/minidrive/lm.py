"""Tokenizer, vocabulary and a small pre-norm encoder-decoder transformer."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .adapter import attention, merge_heads, split_heads
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_CLOSE_PUNCT = set(".,;:!?)")


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation; punctuation stays as tokens."""
    return _TOKEN_RE.findall(text.lower())


def join_words(words: Iterable[str]) -> str:
    out = ""
    for w in words:
        if out and w not in _CLOSE_PUNCT:
            out += " "
        out += w
    return out


def normalize(text: str) -> str:
    return join_words(split_words(text))


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        counts = Counter(w for text in texts for w in split_words(text))
        for r in RESERVED:
            counts.pop(r, None)
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(list(RESERVED) + ordered)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return words

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32) -> list[int]:
    return vocab.encode(split_words(text))[:max_len]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return join_words(vocab.decode(ids))


@dataclass
class LMConfig:
    dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_text_len: int = 32
    max_answer_len: int = 24
    vocab_size: int = 0  # filled from the corpus vocabulary
    seed: int = 3

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("heads must divide dim")
        if self.max_text_len < 1 or self.max_answer_len < 1:
            raise ValueError("sequence lengths must be >= 1")


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        # bias-free projections, as in T5; a key bias would be softmax-invariant dead weight
        self.q = Linear(rng, dim, dim, bias=False)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim, bias=False)
        self.o = Linear(rng, dim, dim, bias=False)
        self.heads = heads

    def __call__(self, x: Tensor, ctx: Tensor, key_mask=None, causal: bool = False) -> Tensor:
        h = self.heads
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
        out = attention(split_heads(self.q(x), h), split_heads(self.k(ctx), h),
                        split_heads(self.v(ctx), h), mask, causal=causal)
        return self.o(merge_heads(out))


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: LMConfig):
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(rng, cfg.dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(rng, cfg.dim, cfg.ffn_dim)

    def __call__(self, x: Tensor, mask) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, mask))
        return T.add(x, self.ffn(self.ln2(x)))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: LMConfig):
        self.ln1 = LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(rng, cfg.dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(rng, cfg.dim, cfg.heads)
        self.ln3 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(rng, cfg.dim, cfg.ffn_dim)

    def __call__(self, y: Tensor, memory: Tensor, memory_mask, target_mask) -> Tensor:
        h = self.ln1(y)
        y = T.add(y, self.self_attn(h, h, target_mask, causal=True))
        y = T.add(y, self.cross_attn(self.ln2(y), memory, memory_mask))
        return T.add(y, self.ffn(self.ln3(y)))


def embed_tokens(table: Tensor, positions: Tensor, ids) -> Tensor:
    """Token lookup plus learned absolute positions."""
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1]
    if length > positions.shape[0]:
        raise ValueError(f"sequence of {length} exceeds {positions.shape[0]} positions")
    x = T.embedding(table, ids, pad_id=PAD)
    return T.add(x, T.embedding(positions, np.arange(length)))


class LanguageModel(Module):
    def __init__(self, cfg: LMConfig):
        if cfg.vocab_size <= len(RESERVED):
            raise ValueError("vocab_size must be set from the corpus vocabulary")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        # one token table shared by instruction and answer text
        self.token_table = param(rng.normal(0.0, cfg.dim ** -0.5, size=(cfg.vocab_size, cfg.dim)))
        self.text_positions = param(rng.normal(0.0, 0.02, size=(cfg.max_text_len, cfg.dim)))
        self.answer_positions = param(rng.normal(0.0, 0.02, size=(cfg.max_answer_len + 1, cfg.dim)))
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(cfg.dim)
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(cfg.dim)
        self.head = Linear(rng, cfg.dim, cfg.vocab_size, init="small")

    def embed_text(self, ids) -> Tensor:
        return embed_tokens(self.token_table, self.text_positions, ids)

    def encode(self, v_input: Tensor, t_input: Tensor, text_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Run the encoder over ``[V_input, T_input]`` (visual tokens first)."""
        x = T.concat([v_input, t_input], axis=-2)
        lead = v_input.shape[:-2]
        visual_mask = np.ones(lead + (v_input.shape[-2],), dtype=bool)
        mask = np.concatenate([visual_mask, np.broadcast_to(text_mask, lead + text_mask.shape[-1:])], axis=-1)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x), mask

    def decode(self, memory: Tensor, memory_mask: np.ndarray, decoder_ids) -> Tensor:
        """Teacher-forced logits ``[..., steps, vocab]`` for ``decoder_ids`` (starting with bos)."""
        decoder_ids = np.asarray(decoder_ids, dtype=np.int64)
        y = embed_tokens(self.token_table, self.answer_positions, decoder_ids)
        target_mask = decoder_ids != PAD
        for layer in self.decoder:
            y = layer(y, memory, memory_mask, target_mask)
        return self.head(self.dec_norm(y))

    def forward(self, v_input: Tensor, t_input: Tensor, text_mask, decoder_ids, targets=None):
        memory, mask = self.encode(v_input, t_input, np.asarray(text_mask, dtype=bool))
        logits = self.decode(memory, mask, decoder_ids)
        loss = None if targets is None else T.cross_entropy(logits, targets, pad_id=PAD)
        return logits, loss


def greedy_decode(step_logits: Callable[[np.ndarray], np.ndarray], max_len: int,
                  batch: int = 1) -> list[list[int]]:
    """Iterative argmax from bos until eos or ``max_len`` generated tokens.

    ``step_logits`` maps a ``[batch, t]`` prefix to next-token logits ``[batch, vocab]``.
    ``np.argmax`` picks the lowest id among ties.
    """
    prefix = np.full((batch, 1), BOS, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(batch)]
    for _ in range(max_len):
        nxt = np.asarray(step_logits(prefix)).argmax(axis=-1)
        for b in range(batch):
            if done[b]:
                continue
            if nxt[b] == EOS:
                done[b] = True
            else:
                outputs[b].append(int(nxt[b]))
        if done.all():
            break
        nxt = np.where(done, PAD, nxt)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outputs
