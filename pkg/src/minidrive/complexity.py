"""Closed-form parameter and multiply-add counts for a model configuration.

Multiply-adds cover convolutions, transposed convolutions, linear layers and
attention matmuls for one sample at full text and answer length; elementwise
work (activations, norms, softmax, mixing) is not counted.
"""

from __future__ import annotations

from .encoder import CAMERAS
from .model import ModelConfig


def encoder_params(cfg: ModelConfig) -> int:
    e = cfg.encoder
    total, c_in = 0, 3
    for c, blocks in e.stages:
        total += c * c_in * 9 + c
        total += blocks * (c * e.large_kernel ** 2 + c + c * c + c)
        c_in = c
    return total


def _moe_dims(cfg: ModelConfig) -> tuple[int, int, int, int, int]:
    c = cfg.encoder.out_channels
    s = cfg.encoder.out_size
    hidden = cfg.moe.gate_hidden or max(1, c // 4)
    out = (s - 1) * cfg.moe.expert_stride + cfg.moe.expert_kernel
    return c, s, hidden, cfg.moe.expert_out_channels, out


def moe_params(cfg: ModelConfig) -> dict[str, int]:
    m = cfg.moe
    c, s, hidden, cp, out = _moe_dims(cfg)
    gate = hidden * c * 9 + hidden + hidden * (s // 2) ** 2 * m.num_experts + m.num_experts
    experts = m.num_experts * (c * cp * m.expert_kernel ** 2 + cp + cp * cp * 9 + cp)
    proj = out * out * m.proj_dim + m.proj_dim
    return {"gate": gate, "experts": experts, "projection": proj}


def adapter_params(cfg: ModelConfig) -> int:
    return 4 * cfg.lm.dim ** 2


def lm_params(cfg: ModelConfig) -> int:
    lm = cfg.lm
    d, v = lm.dim, lm.vocab_size
    mha = 4 * d * d
    ffn = 2 * d * lm.ffn_dim + lm.ffn_dim + d
    ln = 2 * d
    enc = lm.enc_layers * (2 * ln + mha + ffn)
    dec = lm.dec_layers * (3 * ln + 2 * mha + ffn)
    embed = v * d + lm.max_text_len * d + (lm.max_answer_len + 1) * d
    return embed + enc + dec + 2 * ln + d * v + v


def parameter_counts(cfg: ModelConfig) -> dict[str, int]:
    counts = {"encoder": encoder_params(cfg)}
    counts.update({f"moe.{k}": n for k, n in moe_params(cfg).items()})
    counts["adapter"] = adapter_params(cfg)
    counts["lm"] = lm_params(cfg)
    total = sum(counts.values())
    frozen = counts["encoder"] if cfg.encoder.frozen else 0
    counts.update(total=total, frozen=frozen, trainable=total - frozen)
    return counts


def multiply_adds(cfg: ModelConfig) -> dict[str, int]:
    views = 1 if cfg.single_view else len(CAMERAS)
    e, m, lm = cfg.encoder, cfg.moe, cfg.lm
    d, f = lm.dim, lm.ffn_dim

    enc, c_in, size = 0, 3, e.input_size
    for c, blocks in e.stages:
        size //= 2
        enc += c * c_in * 9 * size ** 2
        enc += blocks * (c * e.large_kernel ** 2 + c * c) * size ** 2
        c_in = c

    c, s, hidden, cp, out = _moe_dims(cfg)
    gate = hidden * c * 9 * s * s + hidden * (s // 2) ** 2 * m.num_experts
    experts = m.num_experts * (c * cp * m.expert_kernel ** 2 * s * s + cp * cp * 9 * out * out)
    proj = cp * out * out * m.proj_dim

    lv, lt, la = views * cp, lm.max_text_len, lm.max_answer_len + 1
    adapter = lv * d * d + 2 * lt * d * d + 2 * lv * lt * d + lv * d * d

    length = lv + lt
    lm_enc = lm.enc_layers * (4 * length * d * d + 2 * length * length * d + 2 * length * d * f)
    self_attn = 4 * la * d * d + 2 * la * la * d
    cross = 2 * la * d * d + 2 * length * d * d + 2 * la * length * d
    lm_dec = lm.dec_layers * (self_attn + cross + 2 * la * d * f)
    head = la * d * lm.vocab_size

    counts = {
        "encoder": views * enc,
        "moe.gate": views * gate,
        "moe.experts": views * experts,
        "moe.projection": views * proj,
        "adapter": adapter,
        "lm.encoder": lm_enc,
        "lm.decoder": lm_dec,
        "lm.head": head,
    }
    counts["total"] = sum(counts.values())
    return counts
