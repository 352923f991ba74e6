"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.
"""
import hashlib
import itertools
import time

import numpy as np
import pytest

from mixpipe.experiments import (PROBE_MODEL, forgetting_experiment, gradcheck_full_model, hires_probe_experiment,
                                 overfit_experiment, two_stage_run)
from mixpipe.hires_tiler import make_plan, total_visual_tokens
from mixpipe.numerics import PAPER_PRETRAIN, lr_at_step
from mixpipe.pipeline import MixModel, ModelConfig
from mixpipe.task_data import TEMPLATES, CLASSIFY_RESPONSE
from mixpipe.visual_mixer import group_size
from mixpipe.weight_ops import Checkpoint, CheckpointMeta, from_bytes, mix_weights, to_bytes

from test_task_data import GOLDEN


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


@pytest.mark.criterion(1, "token arithmetic 289 / 1,445 / 2,890")
def test_c01_token_arithmetic(record):
    with Budget(1.0):
        counts = []
        for res in (224, 448, 762):
            m = MixModel(ModelConfig(input_res=res, base_res=224, patch_size=14, conv_strides=(14,), num_queries=32,
                                     lm_dim=16, lm_depth=1, lm_heads=2, max_seq_len=3072))
            assert m.patch_tokens == 257
            assert m.encoders["qformer"].cfg.token_count() == 32
            assert group_size(257, 32) == m.tokens_per_group == 289
            counts.append(m.visual_tokens())
        assert counts == [289, 1445, 2890]
        assert [total_visual_tokens(make_plan(r, 224), 289) for r in (224, 448, 762)] == counts
    record(f"{counts}")


@pytest.mark.criterion(2, "tiling layout and coverage")
def test_c02_tiling_layout(record):
    with Budget(5.0) as b:
        p448 = make_plan(448, 224)
        assert len(p448.views) == 5 and p448.views[0].kind == "global"
        assert [v.source_rect for v in p448.crops()] == [(0, 0, 224, 224), (224, 0, 224, 224),
                                                        (0, 224, 224, 224), (224, 224, 224, 224)]
        assert len(make_plan(762, 224).views) == 10
        n = 0
        for base in (7, 16, 224):
            for res in range(base, 13 * base, max(1, base // 3)):
                plan = make_plan(res, base)
                k = res // base
                assert len(plan.views) == (1 if k < 2 else k * k + 1)
                if k < 2:
                    continue
                cover = np.zeros((plan.canvas_res, plan.canvas_res), dtype=np.int32)
                for v in plan.crops():
                    x, y, w, h = v.source_rect
                    cover[y:y + h, x:x + w] += 1
                assert (cover == 1).all()
                for a, c in itertools.combinations(plan.crops(), 2):
                    ax, ay, aw, ah = a.source_rect
                    cx, cy, cw, ch = c.source_rect
                    assert ax + aw <= cx or cx + cw <= ax or ay + ah <= cy or cy + ch <= ay
                n += 1
    record(f"{n} tiled plans swept in {b.elapsed:.2f}s")


@pytest.mark.criterion(3, "weight mixing exactness")
def test_c03_weight_mixing(record):
    with Budget(1.0):
        rng = np.random.default_rng(0)
        enc = rng.normal(size=(4, 4))
        a = Checkpoint({"encoder.e.w": enc, "lm.w": rng.normal(size=(8, 8)), "mixer.b": rng.normal(size=8)},
                       CheckpointMeta("pretrain_real", "cfg", 10))
        b = Checkpoint({"encoder.e.w": enc.copy(), "lm.w": rng.normal(size=(8, 8)), "mixer.b": rng.normal(size=8)},
                       CheckpointMeta("pretrain_syn", "cfg", 12))
        assert to_bytes(mix_weights(a, b, 1.0)) == to_bytes(a)
        assert to_bytes(mix_weights(a, b, 0.0)) == to_bytes(b)
        for beta in np.linspace(0.0, 1.0, 101):
            m1, m2 = mix_weights(a, b, float(beta)), mix_weights(b, a, 1.0 - float(beta))
            assert all(m1[k].tobytes() == m2[k].tobytes() for k in m1.keys())
        m = mix_weights(Checkpoint({"w": np.array(2.0)}), Checkpoint({"w": np.array(4.0)}), 0.5)
        assert m["w"] == 3.0
        blob = to_bytes(a)
        assert to_bytes(from_bytes(blob)) == blob and from_bytes(blob).equals(a)
    record("endpoints, symmetry over 101 betas, 2/4->3, round-trip")


@pytest.mark.criterion(4, "full-model gradient check < 1e-3")
def test_c04_gradient_check(record):
    with Budget(120.0) as b:
        err, n = gradcheck_full_model(eps=1e-5)
    record(f"max rel err {err:.2e} over {n} coords in {b.elapsed:.0f}s")
    assert err < 1e-3


@pytest.mark.criterion(5, "schedule fidelity")
def test_c05_schedule(record):
    with Budget(1.0):
        for step, want in ((0, 0.0), (2000, 5e-5), (91_000, 2.75e-5), (180_000, 5e-6)):
            got = lr_at_step(step, PAPER_PRETRAIN)
            if want == 0.0:
                assert got == 0.0
            else:
                assert abs(got - want) / want < 1e-12, (step, got)
    record("4 reference steps within 1e-12")


@pytest.mark.criterion(6, "forgetting: joint vs caption-only")
def test_c06_forgetting(record):
    with Budget(15 * 60.0):
        r = forgetting_experiment(steps=2000)
    record(f"text final joint {r.text_final['joint']:.3f} vs caption-only {r.text_final['caption_only']:.3f} "
           f"(initial {r.text_initial['caption_only']:.3f}); caption "
           f"{r.caption_initial['joint']:.2f}->{r.caption_final['joint']:.2f} / "
           f"{r.caption_initial['caption_only']:.2f}->{r.caption_final['caption_only']:.2f}; {r.seconds:.0f}s")
    assert r.text_final["joint"] < r.text_final["caption_only"]
    assert r.text_final["caption_only"] > r.text_initial["caption_only"]
    for run in ("joint", "caption_only"):
        assert r.caption_final[run] <= 0.5 * r.caption_initial[run]


@pytest.mark.criterion(7, "overfit sanity on 32 samples")
def test_c07_overfit(record):
    with Budget(5 * 60.0) as b:
        loss, exact, n = overfit_experiment(steps=400)
    record(f"loss {loss:.4f}, exact {exact}/{n}, 400 steps, {b.elapsed:.0f}s")
    assert n == 32
    assert loss < 0.05
    assert exact >= 30


@pytest.mark.criterion(8, "high-resolution benefit on marker probe")
def test_c08_hires_probe(record):
    with Budget(30 * 60.0):
        r = hires_probe_experiment(steps=2000, n_eval=500)
    record(f"tiled {r.tiled_accuracy:.3f} vs global {r.global_accuracy:.3f} on {r.n_eval}; {r.seconds:.0f}s")
    assert r.tiled_views == 5 and len(MixModel(PROBE_MODEL).plan.views) == 5
    assert r.n_eval >= 500
    assert r.tiled_accuracy > r.global_accuracy
    assert r.tiled_accuracy - r.global_accuracy >= 0.10


@pytest.mark.criterion(9, "instruction template fidelity")
def test_c09_templates(record):
    with Budget(1.0):
        assert set(TEMPLATES) == set(GOLDEN)
        for k, v in GOLDEN.items():
            assert TEMPLATES[k].encode("utf-8") == v.encode("utf-8"), k
        assert CLASSIFY_RESPONSE == "This is a [CLASS]"
    record(f"{len(GOLDEN)} strings byte-equal")


@pytest.mark.criterion(10, "end-to-end determinism")
def test_c10_determinism(tmp_path, record):
    with Budget(20 * 60.0) as b:
        digests = [hashlib.sha256(two_stage_run(tmp_path / run, seed=0).read_bytes()).hexdigest()
                   for run in ("a", "b")]
    record(f"sha256 {digests[0][:16]}... twice in {b.elapsed:.0f}s")
    assert digests[0] == digests[1]
