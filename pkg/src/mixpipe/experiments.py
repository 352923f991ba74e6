"""Desk-scale experiments used by the acceptance suite.

Each function is deterministic given its seed arguments and returns plain
numbers so the tests can state the expected inequalities directly.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import score_vqa, text_loss_of
from .images import ImageTensor
from .numerics import AdamW, AdamWHyper, ScheduleConfig, grad_check, no_grad, zero_grads
from .pipeline import MixModel, ModelConfig
from .task_data import (ConversationSample, DatasetSpec, encode_plain, gen_marker_probe, gen_synthetic,
                        gen_text_corpus)
from .trainer import (FinetuneData, PretrainData, StageConfig, WeightMixSpec, run_two_stage,
                      train_stage)

log = logging.getLogger(__name__)


# -- gradient verification ---------------------------------------------
GRADCHECK_MODEL = ModelConfig(input_res=16, base_res=16, patch_size=4, enc_dim=8, enc_depth=1, enc_heads=2,
                              conv_strides=(2, 2), num_queries=2, vocab_size=128, lm_dim=8, lm_depth=1,
                              lm_heads=2, max_seq_len=56, dtype="float64")


def gradcheck_full_model(seed: int = 0, eps: float = 1e-5, jitter: float = 0.1,
                         fit_steps: int = 150) -> tuple[float, int]:
    """Max relative gradient error over every parameter of a tiny float64 model.

    Encoders are unfrozen so the loss depends on every parameter group.
    The model is first fitted to its one sample: at a confident point the
    loss barely moves under logit roundoff, which keeps the central
    differences clean down to the 1e-8 floor.  Returns (error, coordinates).
    """
    model = MixModel(GRADCHECK_MODEL)
    model.set_encoders_frozen(False)
    rng = np.random.default_rng(seed)
    for k in sorted(model.params):
        t = model.params[k]
        t.data += rng.normal(0.0, jitter, size=t.shape)
    img = ImageTensor(rng.random((16, 16, 3)))
    sample = ConversationSample([("user", "Hi?"), ("assistant", "ok.")], "vqa", img)
    params = [model.params[k] for k in sorted(model.params)]
    opt = AdamW(params, AdamWHyper(weight_decay=0.0))
    for _ in range(fit_steps):
        zero_grads(params)
        model.conversation_loss([sample]).backward()
        opt.step(1e-2)
    err = grad_check(lambda _: model.conversation_loss([sample]), params, eps)
    return err, sum(p.size for p in params)


# -- catastrophic forgetting -------------------------------------------
@dataclass
class ForgettingResult:
    text_initial: dict[str, float]
    text_final: dict[str, float]
    caption_initial: dict[str, float]
    caption_final: dict[str, float]
    seconds: float


def held_out_text(train: list[str], seed: int, count: int) -> list[str]:
    """Fresh sentences from the corpus grammar that never occur in ``train``."""
    seen = set(train)
    out = [s for s in gen_text_corpus(seed, count * 4) if s not in seen]
    if len(out) < count:
        raise ValueError("not enough unseen sentences for the held-out split")
    return out[:count]


def text_pretrained_model(cfg: ModelConfig, corpus: list[str], steps: int = 400, seed: int = 5) -> MixModel:
    """Language model pretrained on text alone, standing in for an off-the-shelf LLM."""
    model = MixModel(cfg)
    if steps:
        stage = StageConfig("pretrain", ScheduleConfig(1e-3, 1e-4, 20, steps), caption_items=0,
                            ablation=True, seed=seed)
        train_stage(model, stage, PretrainData([], corpus), steps)
    return model


def forgetting_experiment(steps: int = 2000, base_steps: int = 400, seed: int = 7,
                          cfg: ModelConfig = ModelConfig()) -> ForgettingResult:
    """Joint (captions + text) vs caption-only stage-1 runs from one text-pretrained start."""
    t0 = time.perf_counter()
    corpus = gen_text_corpus(0, 2000)
    held = held_out_text(corpus, 1, 64)
    captions = gen_synthetic("caption", 0, 256)
    probe = [(s, *encode_plain(s.response)) for s in captions[:32]]
    base = text_pretrained_model(cfg, corpus, base_steps).to_checkpoint()
    model = MixModel(cfg)

    def caption_loss() -> float:
        with no_grad():
            return model.loss_on(probe, global_only=True)[0].item()

    res = ForgettingResult({}, {}, {}, {}, 0.0)
    for name, text_tokens in (("joint", 256), ("caption_only", 0)):
        model.load_checkpoint(base)
        stage = StageConfig("pretrain", ScheduleConfig(3e-4, 3e-5, 50, steps), text_tokens=text_tokens,
                            ablation=text_tokens == 0, seed=seed)
        res.text_initial[name] = text_loss_of(model.lm, held)
        res.caption_initial[name] = caption_loss()
        train_stage(model, stage, PretrainData(captions, corpus), steps)
        res.text_final[name] = text_loss_of(model.lm, held)
        res.caption_final[name] = caption_loss()
        log.info("%s: text %.3f -> %.3f, caption %.3f -> %.3f", name, res.text_initial[name],
                 res.text_final[name], res.caption_initial[name], res.caption_final[name])
    res.seconds = time.perf_counter() - t0
    return res


# -- overfit sanity ----------------------------------------------------
def overfit_samples(seed: int = 3) -> list[ConversationSample]:
    return (gen_synthetic("caption", seed, 8) + gen_synthetic("vqa", seed, 8)
            + gen_synthetic("rec", seed, 8) + gen_synthetic("reg", seed, 8))


def overfit_experiment(steps: int = 400, seed: int = 1) -> tuple[float, int, int]:
    """Fine-tune on 32 mixed-task samples; returns (final loss, exact generations, count)."""
    data = overfit_samples()
    model = MixModel(ModelConfig())
    stage = StageConfig("finetune", ScheduleConfig(1e-3, 1e-4, 20, steps), samples=16, seed=seed)
    train_stage(model, stage, FinetuneData.single("mixed32", data), steps)
    with no_grad():
        loss = model.conversation_loss(data).item()
    exact = sum(model.respond(s) == s.response for s in data)
    return loss, exact, len(data)


# -- high-resolution probe ---------------------------------------------
PROBE_MODEL = ModelConfig(input_res=64, base_res=32)
# 4x4 cells of 16 px with 8 px striped markers; the 2 px / 8x8 variant trains too slowly at desk scale
PROBE_GRID = {"grid": 4, "mark": 8, "distractors": 3}


@dataclass
class ProbeResult:
    tiled_accuracy: float
    global_accuracy: float
    n_eval: int
    tiled_views: int
    seconds: float


def probe_accuracy(model: MixModel, samples: list[ConversationSample], global_only: bool) -> float:
    outs = [model.respond(s, 4, global_only) for s in samples]
    return score_vqa(outs, [s.response for s in samples])


def hires_probe_experiment(steps: int = 2000, n_train: int = 4000, n_eval: int = 500,
                           seed: int = 1) -> ProbeResult:
    """Same-seed models trained and evaluated with all views vs the global view only."""
    t0 = time.perf_counter()
    train = gen_marker_probe(0, n_train, **PROBE_GRID)
    test = gen_marker_probe(1, n_eval, **PROBE_GRID)
    data = FinetuneData([(DatasetSpec("marker", len(train), seed, "vqa"), train)])
    acc = {}
    for global_only in (False, True):
        model = MixModel(PROBE_MODEL)
        stage = StageConfig("finetune", ScheduleConfig(2e-3, 2e-4, 50, steps), samples=16, seed=seed,
                            global_only=global_only)
        train_stage(model, stage, data, steps)
        acc[global_only] = probe_accuracy(model, test, global_only)
        log.info("global_only=%s accuracy %.3f", global_only, acc[global_only])
    views = len(MixModel(PROBE_MODEL).plan.views)
    return ProbeResult(acc[False], acc[True], n_eval, views, time.perf_counter() - t0)


# -- end-to-end determinism --------------------------------------------
def two_stage_run(out_dir: str | Path, seed: int = 0, steps: tuple[int, int, int] = (30, 20, 30),
                  beta: float = 0.5) -> Path:
    """Small pretrain -> continued pretrain -> mix -> finetune run; returns the final checkpoint path."""
    out = Path(out_dir)
    model = MixModel(ModelConfig(seed=seed))
    corpus = gen_text_corpus(seed, 400)
    real = PretrainData(gen_synthetic("caption", seed, 64), corpus)
    syn = PretrainData(gen_synthetic("caption", seed + 1, 64, variant="long"), corpus)
    p_steps, s_steps, f_steps = steps
    pre = StageConfig("pretrain", ScheduleConfig(3e-4, 3e-5, 5, p_steps), seed=seed)
    cont = StageConfig("pretrain", ScheduleConfig(3e-4, 3e-5, 5, s_steps), seed=seed + 1,
                       stage_tag="pretrain_syn")
    ft = StageConfig("finetune", ScheduleConfig(2e-4, 0.0, 3, f_steps), hyper=AdamWHyper(), samples=8,
                     seed=seed)
    tasks = [gen_synthetic(t, seed, 16) for t in ("vqa", "rec", "reg")]
    ft_data = FinetuneData([(DatasetSpec(t[0].task_tag, len(t), seed, t[0].task_tag), t) for t in tasks])
    run_two_stage(model, pre, real, p_steps, ft, ft_data, f_steps,
                        WeightMixSpec(beta, syn_data=syn, syn_cfg=cont, syn_steps=s_steps), out)
    return out / "finetuned.mxck"
