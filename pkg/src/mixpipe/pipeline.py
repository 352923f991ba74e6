"""The assembled model: frozen encoders -> mixer -> language model.

Because encoder weights never change, their outputs for a given view are
cached per sample; only the projections and the language model sit in the
training graph.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .encoders import ENCODER_PREFIX, EncoderConfig, build_encoder
from .layers import cat
from .hires_tiler import apply_plan, make_plan, resample, total_visual_tokens
from .images import ImageTensor
from .language_core import LanguageModel, LMConfig, MixedSequence, decode_text
from .numerics import Tensor, cross_entropy, no_grad
from .task_data import ConversationSample, encode_conversation, pad_to_square, prompt_ids
from .visual_mixer import MixLayout
from .weight_ops import Checkpoint, CheckpointMeta, config_digest

TRAINABLE_PREFIXES = ("lm.", "mixer.")


@dataclass(frozen=True)
class ModelConfig:
    input_res: int = 32
    base_res: int = 32
    patch_size: int = 8
    enc_dim: int = 16
    enc_depth: int = 1
    enc_heads: int = 2
    conv_strides: tuple[int, ...] = (4, 2)
    num_queries: int = 4
    vocab_size: int = 256
    lm_dim: int = 64
    lm_depth: int = 2
    lm_heads: int = 4
    max_seq_len: int = 512
    seed: int = 0
    dtype: str = "float32"

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(asdict(self).items()):
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return config_digest(self.to_text())

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "conv_strides":
                kw[f.name] = tuple(int(x) for x in str(raw).split(",")) if isinstance(raw, str) else tuple(raw)
            elif f.name == "dtype":
                kw[f.name] = str(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)

    def encoder_configs(self) -> list[tuple[str, EncoderConfig]]:
        r = self.base_res
        return [
            ("clip_vit", EncoderConfig("patch", r, self.enc_dim, self.enc_depth, patch_size=self.patch_size,
                                       heads=self.enc_heads)),
            ("dino_vit", EncoderConfig("patch", r, self.enc_dim, self.enc_depth, patch_size=self.patch_size,
                                       heads=self.enc_heads)),
            ("clip_conv", EncoderConfig("conv", r, self.enc_dim, self.enc_depth, strides=self.conv_strides)),
            ("qformer", EncoderConfig("query", r, self.enc_dim, 1, num_queries=self.num_queries,
                                      in_dim=self.enc_dim)),
        ]

    def lm_config(self) -> LMConfig:
        return LMConfig(self.vocab_size, self.lm_dim, self.lm_depth, self.lm_heads, self.max_seq_len)


PATCH_SOURCES = ("clip_vit", "dino_vit", "clip_conv")
QUERY_SOURCE = "qformer"
QUERY_INPUT = "clip_vit"


def validate_pairing(cfgs: Sequence[EncoderConfig]) -> None:
    counts = {c.token_count() for c in cfgs if c.kind != "query"}
    if len(counts) != 1:
        raise ValueError(f"patch-level encoders disagree on token count: {sorted(counts)}")


def _image_key(img: ImageTensor) -> bytes:
    return hashlib.blake2b(img.pixels.tobytes(), digest_size=16,
                           person=str(img.pixels.shape).encode()[:16]).digest()


class MixModel:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        encs = cfg.encoder_configs()
        validate_pairing([c for _, c in encs])
        self.encoders = {name: build_encoder(c, name, cfg.seed * 100 + i + 1, self.dtype)
                         for i, (name, c) in enumerate(encs)}
        dims = tuple(self.encoders[n].cfg.dim for n in PATCH_SOURCES)
        self.layout = MixLayout.create(PATCH_SOURCES, dims, QUERY_SOURCE, self.encoders[QUERY_SOURCE].cfg.dim,
                                       cfg.lm_dim, cfg.seed * 100 + 11, self.dtype)
        self.lm = LanguageModel(cfg.lm_config(), cfg.seed * 100 + 12, self.dtype)
        self.params: dict[str, Tensor] = {}
        for e in self.encoders.values():
            self.params.update(e.params)
        self.params.update(self.layout.params)
        self.params.update(self.lm.params)
        self.plan = make_plan(cfg.input_res, cfg.base_res)
        self.global_plan = make_plan(cfg.base_res, cfg.base_res)
        self._cache: dict[tuple[str, bool], tuple[np.ndarray, np.ndarray]] = {}

    # -- bookkeeping ---------------------------------------------------
    @property
    def patch_tokens(self) -> int:
        return self.encoders["clip_vit"].cfg.token_count()

    @property
    def tokens_per_group(self) -> int:
        return self.patch_tokens + self.encoders[QUERY_SOURCE].cfg.token_count()

    def visual_tokens(self, global_only: bool = False) -> int:
        return total_visual_tokens(self.global_plan if global_only else self.plan, self.tokens_per_group)

    def trainable(self, prefixes: Sequence[str] = TRAINABLE_PREFIXES) -> list[str]:
        return [k for k in sorted(self.params) if k.startswith(tuple(prefixes))]

    def set_encoders_frozen(self, frozen: bool) -> None:
        for e in self.encoders.values():
            e.set_frozen(frozen)
        self._cache.clear()

    @property
    def encoders_frozen(self) -> bool:
        return not any(t.requires_grad for k, t in self.params.items() if k.startswith(ENCODER_PREFIX))

    def to_checkpoint(self, stage_tag: str = "init", step: int = 0) -> Checkpoint:
        return Checkpoint({k: t.data.copy() for k, t in self.params.items()},
                          CheckpointMeta(stage_tag, self.cfg.digest(), step))

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        if ckpt.meta.config_digest and ckpt.meta.config_digest != self.cfg.digest():
            raise ValueError("checkpoint was produced under a different model config")
        if set(ckpt.entries) != set(self.params):
            raise ValueError(f"checkpoint keys differ: {sorted(set(ckpt.entries) ^ set(self.params))}")
        for k, t in self.params.items():
            src = ckpt.entries[k]
            if src.shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {src.shape} vs model {t.shape}")
            t.data[...] = src
        self._cache.clear()

    # -- vision side ---------------------------------------------------
    def views(self, img: ImageTensor, global_only: bool = False) -> list[ImageTensor]:
        sq = pad_to_square(img)
        if global_only:
            return [resample(sq, self.cfg.base_res)]
        return apply_plan(resample(sq, self.cfg.input_res), self.plan)

    def encode_views(self, pixels: np.ndarray) -> tuple[Tensor, Tensor]:
        """(N, base, base, 3) views -> channel-mixed patch features and query features."""
        outs = {n: self.encoders[n].forward_batch(pixels) for n in ("clip_vit", "dino_vit", "clip_conv")}
        patch = cat([outs[n] for n in PATCH_SOURCES], axis=2)
        query = self.encoders[QUERY_SOURCE].forward_batch(outs[QUERY_INPUT])
        return patch, query

    def _features(self, samples: Sequence[ConversationSample], global_only: bool):
        """Per-sample (views, tokens, dim) features; cached while encoders are frozen."""
        frozen = self.encoders_frozen
        if frozen:
            keys = [(_image_key(s.image), global_only) for s in samples]
            todo = {k: s for k, s in zip(keys, samples) if k not in self._cache}
            if todo:
                pix = np.stack([v.pixels for s in todo.values() for v in self.views(s.image, global_only)])
                with no_grad():
                    patch, query = self.encode_views(pix.astype(self.dtype))
                nv = pix.shape[0] // len(todo)
                for i, k in enumerate(todo):
                    self._cache[k] = (patch.data[i * nv:(i + 1) * nv], query.data[i * nv:(i + 1) * nv])
            got = [self._cache[k] for k in keys]
            return Tensor(np.stack([g[0] for g in got])), Tensor(np.stack([g[1] for g in got]))
        pix = np.stack([v.pixels for s in samples for v in self.views(s.image, global_only)])
        patch, query = self.encode_views(pix.astype(self.dtype))
        b = len(samples)
        nv = pix.shape[0] // b
        return patch.reshape(b, nv, *patch.shape[1:]), query.reshape(b, nv, *query.shape[1:])

    def visual_prefix(self, samples: Sequence[ConversationSample], global_only: bool = False) -> Tensor:
        """(B, views * tokens_per_group, lm_dim); views in plan order, query tokens first in each."""
        patch, query = self._features(samples, global_only)
        p = self.layout.project_patch(patch)
        q = self.layout.project_query(query)
        mixed = cat([q, p], axis=2)
        b, nv, g, d = mixed.shape
        return mixed.reshape(b, nv * g, d)

    def clear_cache(self) -> None:
        self._cache.clear()

    # -- language side -------------------------------------------------
    def loss_on(self, items: Sequence[tuple[ConversationSample, np.ndarray, np.ndarray]],
                global_only: bool = False) -> tuple[Tensor, int]:
        """Mean next-token loss over every flagged target in ``items``.

        Items are grouped by whether they carry an image; each group is padded
        on the right and run as one batch.
        """
        groups: dict[bool, list] = {}
        for it in items:
            groups.setdefault(it[0].image is not None, []).append(it)
        total = sum(int(m[1:].sum()) for _, _, m in items)
        if total == 0:
            raise ValueError("loss: no target positions are flagged")
        loss = None
        for has_image, grp in sorted(groups.items()):
            width = max(len(ids) for _, ids, _ in grp)
            ids = np.zeros((len(grp), width), dtype=np.int64)
            mask = np.zeros((len(grp), width), dtype=bool)
            for i, (_, a, m) in enumerate(grp):
                ids[i, :len(a)] = a
                mask[i, :len(m)] = m
            n = int(mask[:, 1:].sum())
            if n == 0:
                continue
            vis = self.visual_prefix([s for s, _, _ in grp], global_only) if has_image else None
            logits = self.lm.forward_batch(vis, ids)
            part = cross_entropy(logits[:, :-1, :], ids[:, 1:], mask[:, 1:]) * (n / total)
            loss = part if loss is None else loss + part
        return loss, total

    def conversation_loss(self, samples: Sequence[ConversationSample], global_only: bool = False) -> Tensor:
        items = [(s, *encode_conversation(s)) for s in samples]
        return self.loss_on(items, global_only)[0]

    def mixed_sequence(self, sample: ConversationSample, global_only: bool = False) -> MixedSequence:
        ids, mask = encode_conversation(sample)
        vis = None
        if sample.image is not None:
            vis = self.visual_prefix([sample], global_only)[0]
        return MixedSequence(ids, mask, vis)

    def respond(self, sample: ConversationSample, max_new: int = 96, global_only: bool = False) -> str:
        """Greedy answer to the sample's final user turn."""
        vis = None
        if sample.image is not None:
            with no_grad():
                vis = self.visual_prefix([sample], global_only)[0]
        prefix = MixedSequence(prompt_ids(sample), np.zeros(len(prompt_ids(sample)), dtype=bool), vis)
        return decode_text(self.lm.generate(prefix, max_new))
