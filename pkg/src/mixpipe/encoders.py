"""Frozen toy visual encoders.

Three families stand in for the heterogeneous backbones being mixed:

* ``PatchEncoder``: patchify, linear embed, optional class token, learned
  position table, pre-norm transformer blocks (long-range interaction).
* ``ConvEncoder``: a schedule of non-overlapping strided convolutions with a
  pointwise MLP stack (local aggregation).  With ``cls_token`` the grid is
  prefixed by its mean-pooled summary so it lines up with a patch encoder.
* ``QueryEncoder``: learned queries cross-attending over another encoder's
  tokens, yielding a fixed number of global tokens.

Weights are drawn from a seeded normal(0, 0.02) and never trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers
from .images import ImageTensor
from .numerics import Tensor, gelu, softmax

ENCODER_PREFIX = "encoder."
KINDS = ("patch", "conv", "query")


@dataclass(frozen=True)
class Provenance:
    encoder_id: str
    scale_tag: str = "global"
    crop_index: int = 0

    def __post_init__(self):
        if not self.encoder_id or not self.scale_tag or self.crop_index < 0:
            raise ValueError(f"incomplete provenance {self}")


@dataclass(eq=False)
class TokenGroup:
    """Ordered visual tokens, shape (count, dim), tagged with their origin.

    ``spans`` records sub-ranges with their own provenance when the group
    was assembled from several sources.
    """

    tokens: Tensor
    provenance: Provenance
    spans: tuple[tuple[int, int, Provenance], ...] = ()

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"token group needs a (count, dim) tensor, got {self.tokens.shape}")
        if self.tokens.shape[0] == 0 or self.tokens.shape[1] == 0:
            raise ValueError("token group is empty")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def provenance_sequence(self) -> list[Provenance]:
        if not self.spans:
            return [self.provenance] * self.count
        out: list[Provenance] = []
        for start, stop, prov in self.spans:
            out.extend([prov] * (stop - start))
        return out


@dataclass(frozen=True)
class EncoderConfig:
    kind: str
    input_size: int
    dim: int
    depth: int = 1
    patch_size: int = 0
    strides: tuple[int, ...] = ()
    num_queries: int = 0
    in_dim: int = 0
    heads: int = 1
    cls_token: bool = True
    frozen: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 1 or self.depth < 0:
            raise ValueError("encoder dim must be positive and depth non-negative")
        if self.kind == "patch":
            if self.patch_size < 1 or self.input_size % self.patch_size:
                raise ValueError(f"patch size {self.patch_size} does not divide input {self.input_size}")
            if self.dim % self.heads:
                raise ValueError("encoder dim must be divisible by heads")
        elif self.kind == "conv":
            if not self.strides or any(s < 1 for s in self.strides):
                raise ValueError("conv encoder needs a stride schedule")
            if self.input_size % math.prod(self.strides):
                raise ValueError(f"stride schedule {self.strides} does not divide input {self.input_size}")
        else:
            if self.num_queries < 1:
                raise ValueError("query encoder needs num_queries >= 1")
            if self.in_dim < 1:
                raise ValueError("query encoder needs in_dim")

    @property
    def grid(self) -> int:
        if self.kind == "patch":
            return self.input_size // self.patch_size
        if self.kind == "conv":
            return self.input_size // math.prod(self.strides)
        raise ValueError("query encoders have no spatial grid")

    def token_count(self) -> int:
        if self.kind == "query":
            return self.num_queries
        return self.grid**2 + (1 if self.cls_token else 0)


def _as_batch(pixels: np.ndarray, size: int, name: str) -> np.ndarray:
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[1:] != (size, size, 3):
        raise ValueError(f"{name}: expected {size}x{size} RGB input, got {pixels.shape[1:]} "
                         "(resizing belongs to the tiler)")
    return pixels


def _blocks_of(x: Tensor, s: int) -> Tensor:
    """(B, H, W, C) -> (B, H/s, W/s, s*s*C) with each cell's pixels flattened."""
    b, h, w, c = x.shape
    g = h // s
    return x.reshape(b, g, s, g, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, g, g, s * s * c)


class _Encoder:
    def __init__(self, cfg: EncoderConfig, name: str, seed: int, dtype=np.float64):
        self.cfg = cfg
        self.name = name
        self.prefix = f"{ENCODER_PREFIX}{name}."
        self.dtype = np.dtype(dtype)
        self.params: layers.Params = {}
        self._build(np.random.default_rng(seed))
        self.set_frozen(cfg.frozen)

    def _build(self, rng) -> None:
        raise NotImplementedError

    def p(self, key: str) -> str:
        return self.prefix + key

    def set_frozen(self, frozen: bool) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen

    def _const(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))


class PatchEncoder(_Encoder):
    def _build(self, rng):
        c = self.cfg
        ps = self.params
        layers.add_linear(ps, rng, self.p("patch_embed"), c.patch_size**2 * 3, c.dim, self.dtype)
        if c.cls_token:
            ps[self.p("cls")] = layers.normal(rng, (1, 1, c.dim), self.dtype)
        ps[self.p("pos")] = layers.normal(rng, (c.token_count(), c.dim), self.dtype)
        for i in range(c.depth):
            layers.add_block(ps, rng, self.p(f"block{i}"), c.dim, self.dtype)
        layers.add_norm(ps, self.p("ln_out"), c.dim, self.dtype)

    def forward_batch(self, pixels: np.ndarray) -> Tensor:
        c = self.cfg
        pixels = _as_batch(pixels, c.input_size, "patch_encode")
        b = pixels.shape[0]
        x = _blocks_of(self._const(pixels), c.patch_size).reshape(b, c.grid**2, -1)
        x = layers.linear(x, self.params, self.p("patch_embed"))
        if c.cls_token:
            cls = self.params[self.p("cls")] * self._const(np.ones((b, 1, 1)))
            x = layers.cat([cls, x], axis=1)
        x = x + self.params[self.p("pos")]
        for i in range(c.depth):
            x = layers.block(x, self.params, self.p(f"block{i}"), c.heads)
        return layers.norm(x, self.params, self.p("ln_out"))

    def encode(self, img: ImageTensor, scale_tag: str = "global", crop_index: int = 0) -> TokenGroup:
        out = self.forward_batch(img.pixels)
        return TokenGroup(out[0], Provenance(self.name, scale_tag, crop_index))


class ConvEncoder(_Encoder):
    def _build(self, rng):
        c = self.cfg
        ps = self.params
        cin = 3
        for i, s in enumerate(c.strides):
            layers.add_linear(ps, rng, self.p(f"stage{i}"), s * s * cin, c.dim, self.dtype)
            layers.add_norm(ps, self.p(f"stage{i}.ln"), c.dim, self.dtype)
            cin = c.dim
        for i in range(c.depth):
            layers.add_norm(ps, self.p(f"mlp{i}.ln"), c.dim, self.dtype)
            layers.add_linear(ps, rng, self.p(f"mlp{i}.fc1"), c.dim, 4 * c.dim, self.dtype)
            layers.add_linear(ps, rng, self.p(f"mlp{i}.fc2"), 4 * c.dim, c.dim, self.dtype)

    def forward_batch(self, pixels: np.ndarray) -> Tensor:
        c = self.cfg
        pixels = _as_batch(pixels, c.input_size, "conv_encode")
        b = pixels.shape[0]
        x = self._const(pixels)
        for i, s in enumerate(c.strides):
            x = gelu(layers.linear(_blocks_of(x, s), self.params, self.p(f"stage{i}")))
            x = layers.norm(x, self.params, self.p(f"stage{i}.ln"))
        for i in range(c.depth):
            h = layers.norm(x, self.params, self.p(f"mlp{i}.ln"))
            h = layers.linear(gelu(layers.linear(h, self.params, self.p(f"mlp{i}.fc1"))),
                              self.params, self.p(f"mlp{i}.fc2"))
            x = x + h
        tokens = x.reshape(b, c.grid**2, c.dim)
        if c.cls_token:
            tokens = layers.cat([tokens.mean(axis=1, keepdims=True), tokens], axis=1)
        return tokens

    def encode(self, img: ImageTensor, scale_tag: str = "global", crop_index: int = 0) -> TokenGroup:
        out = self.forward_batch(img.pixels)
        return TokenGroup(out[0], Provenance(self.name, scale_tag, crop_index))


class QueryEncoder(_Encoder):
    def _build(self, rng):
        c = self.cfg
        ps = self.params
        ps[self.p("queries")] = layers.normal(rng, (c.num_queries, c.dim), self.dtype)
        for i in range(max(c.depth, 1)):
            layers.add_linear(ps, rng, self.p(f"layer{i}.q"), c.dim, c.dim, self.dtype)
            layers.add_linear(ps, rng, self.p(f"layer{i}.k"), c.in_dim, c.dim, self.dtype)
            layers.add_linear(ps, rng, self.p(f"layer{i}.v"), c.in_dim, c.dim, self.dtype)

    def forward_batch(self, tokens: Tensor) -> Tensor:
        """(B, N, in_dim) source tokens -> (B, num_queries, dim)."""
        c = self.cfg
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape)
        if tokens.shape[1] == 0:
            raise ValueError("query_encode: empty input group")
        if tokens.shape[2] != c.in_dim:
            raise ValueError(f"query_encode: input dim {tokens.shape[2]} != configured {c.in_dim}")
        b = tokens.shape[0]
        h = self.params[self.p("queries")] * self._const(np.ones((b, 1, 1)))
        scale = 1.0 / math.sqrt(c.dim)
        for i in range(max(c.depth, 1)):
            q = layers.linear(h, self.params, self.p(f"layer{i}.q"))
            k = layers.linear(tokens, self.params, self.p(f"layer{i}.k"))
            v = layers.linear(tokens, self.params, self.p(f"layer{i}.v"))
            attn = softmax((q @ k.transpose(0, 2, 1)) * scale, axis=-1)
            h = attn @ v
        return h

    def encode(self, group: TokenGroup) -> TokenGroup:
        out = self.forward_batch(group.tokens)
        prov = group.provenance
        return TokenGroup(out[0], Provenance(self.name, prov.scale_tag, prov.crop_index))


def build_encoder(cfg: EncoderConfig, name: str, seed: int, dtype=np.float64) -> _Encoder:
    cls = {"patch": PatchEncoder, "conv": ConvEncoder, "query": QueryEncoder}[cfg.kind]
    return cls(cfg, name, seed, dtype)


def patch_encode(img: ImageTensor, encoder: PatchEncoder, scale_tag="global", crop_index=0) -> TokenGroup:
    return encoder.encode(img, scale_tag, crop_index)


def conv_encode(img: ImageTensor, encoder: ConvEncoder, scale_tag="global", crop_index=0) -> TokenGroup:
    return encoder.encode(img, scale_tag, crop_index)


def query_encode(patch_tokens: TokenGroup, encoder: QueryEncoder) -> TokenGroup:
    if encoder.cfg.kind != "query":
        raise ValueError("query_encode needs a query-kind encoder")
    return encoder.encode(patch_tokens)
