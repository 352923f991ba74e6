"""Byte-level decoder-only transformer that reads a visual-token prefix.

Visual embeddings skip the token table and are placed before the text; both
share one learned absolute position table.  Attention is causal across the
whole mixed sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .numerics import Tensor, cross_entropy, embedding, no_grad

LM_PREFIX = "lm."
PAD, BOS, EOS = 0, 1, 2


def encode_text(text: str) -> list[int]:
    ids = list(text.encode("utf-8"))
    if any(i in (PAD, BOS, EOS) for i in ids):
        raise ValueError("text contains reserved control bytes")
    return ids


def decode_text(ids) -> str:
    return bytes(int(i) for i in ids if int(i) not in (PAD, BOS, EOS)).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 256
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_seq_len: int = 512
    pad_token: int = PAD
    bos_token: int = BOS
    eos_token: int = EOS

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.vocab_size, self.dim, self.heads, self.max_seq_len) < 1 or self.depth < 0:
            raise ValueError("LM sizes must be positive")


@dataclass(eq=False)
class MixedSequence:
    text_ids: np.ndarray
    loss_mask: np.ndarray
    visual_embeds: Tensor | None = None

    def __post_init__(self):
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.text_ids.ndim != 1 or self.loss_mask.shape != self.text_ids.shape:
            raise ValueError("loss_mask must match text_ids one-to-one")
        if self.visual_embeds is not None and self.visual_embeds.ndim != 2:
            raise ValueError("visual_embeds must be (tokens, dim)")

    @property
    def visual_len(self) -> int:
        return 0 if self.visual_embeds is None else self.visual_embeds.shape[0]

    def __len__(self) -> int:
        return self.visual_len + len(self.text_ids)


class LanguageModel:
    def __init__(self, cfg: LMConfig, seed: int, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        ps: layers.Params = {}
        ps[LM_PREFIX + "tok_emb"] = layers.normal(rng, (cfg.vocab_size, cfg.dim), self.dtype)
        ps[LM_PREFIX + "pos"] = layers.normal(rng, (cfg.max_seq_len, cfg.dim), self.dtype)
        for i in range(cfg.depth):
            layers.add_block(ps, rng, f"{LM_PREFIX}block{i}", cfg.dim, self.dtype)
        layers.add_norm(ps, LM_PREFIX + "ln_f", cfg.dim, self.dtype)
        layers.add_linear(ps, rng, LM_PREFIX + "head", cfg.dim, cfg.vocab_size, self.dtype)
        self.params = ps

    def forward_batch(self, visual: Tensor | None, ids: np.ndarray) -> Tensor:
        """Logits (B, T_text, vocab) for a batch sharing one prefix length."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"ids must be (batch, seq), got {ids.shape}")
        b, tt = ids.shape
        tv = 0 if visual is None else visual.shape[1]
        total = tv + tt
        if total > self.cfg.max_seq_len:
            raise ValueError(f"sequence of {total} tokens exceeds max_seq_len {self.cfg.max_seq_len}")
        if visual is not None and (visual.ndim != 3 or visual.shape[0] != b or visual.shape[2] != self.cfg.dim):
            raise ValueError(f"visual prefix {visual.shape} does not fit batch {b} x dim {self.cfg.dim}")
        x = embedding(self.params[LM_PREFIX + "tok_emb"], ids)
        if visual is not None and tv:
            x = layers.cat([visual, x], axis=1)
        x = x + self.params[LM_PREFIX + "pos"][:total]
        mask = layers.causal_mask(total)
        for i in range(self.cfg.depth):
            x = layers.block(x, self.params, f"{LM_PREFIX}block{i}", self.cfg.heads, mask)
        if tv:
            x = x[:, tv:, :]
        x = layers.norm(x, self.params, LM_PREFIX + "ln_f")
        return layers.linear(x, self.params, LM_PREFIX + "head")

    def forward(self, seq: MixedSequence) -> Tensor:
        vis = None if seq.visual_embeds is None else seq.visual_embeds.reshape(1, *seq.visual_embeds.shape)
        return self.forward_batch(vis, seq.text_ids[None])[0]

    def loss_batch(self, visual: Tensor | None, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Next-token cross-entropy averaged over targets flagged in ``mask``."""
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if not mask[:, 1:].any():
            raise ValueError("loss: no target positions are flagged")
        logits = self.forward_batch(visual, ids)
        return cross_entropy(logits[:, :-1, :], ids[:, 1:], mask[:, 1:])

    def loss(self, seq: MixedSequence) -> Tensor:
        vis = None if seq.visual_embeds is None else seq.visual_embeds.reshape(1, *seq.visual_embeds.shape)
        return self.loss_batch(vis, seq.text_ids[None], seq.loss_mask[None])

    def generate(self, prefix: MixedSequence, max_new: int) -> list[int]:
        """Greedy decoding; the eos token ends generation and is not returned."""
        ids = list(prefix.text_ids)
        out: list[int] = []
        vis = None
        if prefix.visual_embeds is not None:
            vis = Tensor(prefix.visual_embeds.data[None])
        with no_grad():
            for _ in range(max_new):
                if prefix.visual_len + len(ids) > self.cfg.max_seq_len:
                    break
                logits = self.forward_batch(vis, np.asarray([ids]))
                nxt = int(np.argmax(logits.data[0, -1]))
                if nxt == self.cfg.eos_token:
                    break
                out.append(nxt)
                ids.append(nxt)
        return out
