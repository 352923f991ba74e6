"""Embedding mix: channel-concatenate aligned patch-level groups, project to
the language width, then put the projected query tokens in front."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .encoders import Provenance, TokenGroup
from .numerics import Tensor

MIXER_PREFIX = "mixer."


def channel_concat(groups: list[TokenGroup]) -> TokenGroup:
    if not groups:
        raise ValueError("channel_concat: no groups")
    if len(groups) == 1:
        return groups[0]
    first = groups[0]
    for g in groups[1:]:
        if g.count != first.count:
            raise ValueError(f"channel_concat: token count mismatch ({first.count} vs {g.count}) "
                             f"between {first.provenance.encoder_id} and {g.provenance.encoder_id}")
        if (g.provenance.scale_tag, g.provenance.crop_index) != (
                first.provenance.scale_tag, first.provenance.crop_index):
            raise ValueError("channel_concat: groups come from different views")
    prov = Provenance("+".join(g.provenance.encoder_id for g in groups),
                      first.provenance.scale_tag, first.provenance.crop_index)
    return TokenGroup(layers.cat([g.tokens for g in groups], axis=1), prov)


@dataclass
class MixLayout:
    patch_sources: tuple[str, ...]
    query_source: str
    patch_dims: tuple[int, ...]
    query_dim: int
    lm_dim: int
    params: layers.Params

    @classmethod
    def create(cls, patch_sources, patch_dims, query_source, query_dim, lm_dim, seed, dtype=np.float64):
        if len(patch_sources) != len(patch_dims) or not patch_sources:
            raise ValueError("MixLayout: need one dim per patch source")
        rng = np.random.default_rng(seed)
        params: layers.Params = {}
        layers.add_linear(params, rng, MIXER_PREFIX + "patch_proj", sum(patch_dims), lm_dim, dtype)
        layers.add_linear(params, rng, MIXER_PREFIX + "query_proj", query_dim, lm_dim, dtype)
        return cls(tuple(patch_sources), query_source, tuple(patch_dims), query_dim, lm_dim, params)

    def __post_init__(self):
        pw = self.params[MIXER_PREFIX + "patch_proj.w"]
        qw = self.params[MIXER_PREFIX + "query_proj.w"]
        if pw.shape != (sum(self.patch_dims), self.lm_dim):
            raise ValueError(f"patch projection {pw.shape} does not map {sum(self.patch_dims)} -> {self.lm_dim}")
        if qw.shape != (self.query_dim, self.lm_dim):
            raise ValueError(f"query projection {qw.shape} does not map {self.query_dim} -> {self.lm_dim}")

    def project_patch(self, x: Tensor) -> Tensor:
        return layers.linear(x, self.params, MIXER_PREFIX + "patch_proj")

    def project_query(self, x: Tensor) -> Tensor:
        return layers.linear(x, self.params, MIXER_PREFIX + "query_proj")


def project(group: TokenGroup, layout: MixLayout, which: str) -> TokenGroup:
    fn = layout.project_patch if which == "patch" else layout.project_query
    return TokenGroup(fn(group.tokens), group.provenance, group.spans)


def assemble_group(patch: TokenGroup, query: TokenGroup, layout: MixLayout) -> TokenGroup:
    """Sequence-concatenate projected groups, query tokens first."""
    if patch.dim != layout.lm_dim or query.dim != layout.lm_dim:
        raise ValueError(f"assemble_group: dims {query.dim}/{patch.dim} must both equal lm_dim {layout.lm_dim}")
    nq = query.count
    spans = ((0, nq, query.provenance), (nq, nq + patch.count, patch.provenance))
    prov = Provenance("mixed", patch.provenance.scale_tag, patch.provenance.crop_index)
    return TokenGroup(layers.cat([query.tokens, patch.tokens], axis=0), prov, spans)


def mix_view(patch_groups: list[TokenGroup], query_group: TokenGroup, layout: MixLayout) -> TokenGroup:
    names = tuple(g.provenance.encoder_id for g in patch_groups)
    if names != layout.patch_sources:
        raise ValueError(f"patch groups {names} do not follow layout order {layout.patch_sources}")
    patch = project(channel_concat(patch_groups), layout, "patch")
    return assemble_group(patch, project(query_group, layout, "query"), layout)


def group_size(patch_tokens: int, query_tokens: int) -> int:
    return patch_tokens + query_tokens
