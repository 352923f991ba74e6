import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixpipe.encoders import EncoderConfig, Provenance, TokenGroup
from mixpipe.numerics import Tensor, zero_grads
from mixpipe.visual_mixer import MixLayout, assemble_group, channel_concat, group_size, mix_view, project


def group(n, d, name, seed=0, crop=0, grad=False):
    data = np.random.default_rng(seed).normal(size=(n, d))
    return TokenGroup(Tensor(data, requires_grad=grad), Provenance(name, "global" if crop == 0 else "crop", crop))


def layout(dims=(16, 24), qdim=8, lm=12, seed=0):
    names = tuple(f"e{i}" for i in range(len(dims)))
    return MixLayout.create(names, dims, "q", qdim, lm, seed)


def test_channel_concat_sums_dims_and_keeps_order():
    a, b = group(17, 16, "e0", 1), group(17, 24, "e1", 2)
    out = channel_concat([a, b])
    assert (out.count, out.dim) == (17, 40)
    assert np.array_equal(out.tokens.data[:, :16], a.tokens.data)
    assert np.array_equal(out.tokens.data[:, 16:], b.tokens.data)
    assert out.provenance.encoder_id == "e0+e1"


def test_channel_concat_paper_scale_count():
    assert channel_concat([group(257, 4, "clip"), group(257, 6, "dino")]).count == 257


def test_channel_concat_mismatch_cites_both_counts():
    with pytest.raises(ValueError, match=r"17 vs 16"):
        channel_concat([group(17, 4, "a"), group(16, 4, "b")])
    with pytest.raises(ValueError, match="views"):
        channel_concat([group(4, 4, "a", crop=0), group(4, 4, "b", crop=1)])


def test_group_sizes():
    assert group_size(257, 32) == 289
    assert group_size(17, 4) == 21


def test_assemble_puts_queries_first_with_span_provenance():
    lay = layout()
    out = mix_view([group(17, 16, "e0"), group(17, 24, "e1", 1)], group(4, 8, "q", 2), lay)
    assert (out.count, out.dim) == (21, 12)
    q = project(group(4, 8, "q", 2), lay, "query")
    assert np.array_equal(out.tokens.data[:4], q.tokens.data)
    provs = out.provenance_sequence()
    assert [p.encoder_id for p in provs[:4]] == ["q"] * 4
    assert all(p.encoder_id == "e0+e1" for p in provs[4:])


def test_mix_view_enforces_layout_order():
    with pytest.raises(ValueError, match="layout order"):
        mix_view([group(17, 24, "e1"), group(17, 16, "e0")], group(4, 8, "q"), layout())


def test_assemble_rejects_unprojected_dims():
    with pytest.raises(ValueError):
        assemble_group(group(17, 40, "p"), group(4, 8, "q"), layout())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**16), st.floats(-3, 3), st.floats(-3, 3))
def test_mix_is_linear_in_each_encoder_with_zero_bias(seed, alpha, beta):
    lay = layout(seed=seed % 7)
    for k in ("mixer.patch_proj.b", "mixer.query_proj.b"):
        lay.params[k].data[...] = 0.0
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 5, 16))
    fixed = group(5, 24, "e1", seed + 1)
    q = group(2, 8, "q", seed + 2)

    def out(x):
        return mix_view([TokenGroup(Tensor(x), Provenance("e0")), fixed], q, lay).tokens.data[2:]

    zero = out(np.zeros((5, 16)))
    combo = out(alpha * x1 + beta * x2) - zero
    np.testing.assert_allclose(combo, alpha * (out(x1) - zero) + beta * (out(x2) - zero), atol=1e-10)


def test_gradients_reach_both_projections():
    lay = layout()
    for t in lay.params.values():
        t.requires_grad = True
    zero_grads(list(lay.params.values()))
    out = mix_view([group(17, 16, "e0"), group(17, 24, "e1", 1)], group(4, 8, "q", 2), lay)
    (out.tokens * out.tokens).sum().backward()
    for k in ("mixer.patch_proj.w", "mixer.query_proj.w"):
        assert np.abs(lay.params[k].grad).sum() > 0


def test_layout_validates_projection_shapes():
    lay = layout()
    with pytest.raises(ValueError):
        MixLayout(lay.patch_sources, "q", (16, 20), 8, 12, lay.params)
    with pytest.raises(ValueError):
        MixLayout.create(("a",), (1, 2), "q", 8, 12, 0)
