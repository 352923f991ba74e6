"""Two-stage training: caption + text pretraining, optional weight mix,
multi-task fine-tuning.

Batches are a pure function of ``(seed, step)``, so a run can be replayed
exactly.  Encoder weights are snapshotted before every stage and compared
bit for bit afterwards.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoders import ENCODER_PREFIX
from .language_core import BOS, encode_text
from .numerics import AdamW, AdamWHyper, NonFiniteError, ScheduleConfig, lr_at_step, zero_grads
from .pipeline import TRAINABLE_PREFIXES, MixModel
from .task_data import (ConversationSample, DatasetSpec, encode_plain,
                        natural_frequency_sampler)
from .weight_ops import Checkpoint, mix_weights, save

log = logging.getLogger(__name__)

# Paper-scale values, recorded for reference; toy runs use the defaults below.
PAPER_PRETRAIN_BATCH = {"caption_items": 640, "text_tokens": 65_536}
PAPER_PRETRAIN_STEPS = 180_000
PAPER_FINETUNE = {"batch": 128, "peak_lr": 2e-5, "final_lr": 0.0, "warmup_epochs": 0.03}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str
    schedule: ScheduleConfig
    hyper: AdamWHyper = AdamWHyper()
    trainable: tuple[str, ...] = TRAINABLE_PREFIXES
    caption_items: int = 8
    text_tokens: int = 256
    text_seq_len: int = 64
    samples: int = 16
    seed: int = 0
    global_only: bool = False
    ablation: bool = False
    stage_tag: str = ""

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if any(p.startswith(ENCODER_PREFIX) or ENCODER_PREFIX.startswith(p) for p in self.trainable):
            raise ValueError("encoder parameters may not be trainable")
        if self.stage == "pretrain":
            if self.caption_items < 1 and not self.ablation:
                raise ValueError("pretrain batch needs caption items")
            if self.text_tokens < 1 and not self.ablation:
                raise ValueError("pretrain batch needs text tokens (set ablation=True to drop them)")
            if self.text_tokens % self.text_seq_len:
                raise ValueError("text_tokens must be a multiple of text_seq_len")
        elif self.samples < 1:
            raise ValueError("finetune batch needs samples >= 1")

    @property
    def tag(self) -> str:
        return self.stage_tag or ("pretrain_real" if self.stage == "pretrain" else "finetuned")


@dataclass
class PretrainData:
    captions: Sequence[ConversationSample]
    text: Sequence[str]

    def __post_init__(self):
        joined = " ".join(self.text)
        self._stream = np.asarray(encode_text(joined), dtype=np.int64) if joined else np.zeros(0, np.int64)


@dataclass
class FinetuneData:
    datasets: Sequence[tuple[DatasetSpec, Sequence[ConversationSample]]]

    def __post_init__(self):
        for spec, items in self.datasets:
            if spec.size != len(items):
                raise ValueError(f"dataset {spec.name!r} declares {spec.size} samples, holds {len(items)}")

    @classmethod
    def single(cls, name: str, samples: Sequence[ConversationSample], seed: int = 0) -> "FinetuneData":
        tag = samples[0].task_tag if samples else "vqa"
        return cls([(DatasetSpec(name, len(samples), seed, tag), samples)])


@dataclass
class PretrainBatch:
    captions: list[tuple[ConversationSample, np.ndarray, np.ndarray]]
    text_ids: np.ndarray
    batch_id: str


@dataclass
class TraceRecord:
    step: int
    lr: float
    caption_loss: float | None
    text_loss: float | None
    total_loss: float


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "caption_loss", "text_loss", "total_loss"])
            for r in self.records:
                w.writerow([r.step, repr(r.lr), "" if r.caption_loss is None else repr(r.caption_loss),
                            "" if r.text_loss is None else repr(r.text_loss), repr(r.total_loss)])


def text_windows(stream: np.ndarray, count: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` windows of ``seq_len`` tokens, each a bos followed by a corpus slice."""
    if count == 0:
        return np.zeros((0, seq_len), dtype=np.int64)
    span = seq_len - 1
    if stream.size < span:
        raise ValueError("text corpus shorter than one window")
    starts = rng.integers(0, stream.size - span + 1, size=count)
    out = np.empty((count, seq_len), dtype=np.int64)
    out[:, 0] = BOS
    for i, s in enumerate(starts):
        out[i, 1:] = stream[s:s + span]
    return out


def build_pretrain_batch(data: PretrainData, cfg: StageConfig, step: int) -> PretrainBatch:
    """Fixed-composition batch for ``step``: caption items plus text windows.

    Captions are encoded without any instruction template.
    """
    rng = np.random.default_rng([cfg.seed, step])
    caps = []
    if cfg.caption_items:
        for i in rng.integers(0, len(data.captions), size=cfg.caption_items):
            s = data.captions[int(i)]
            caps.append((s, *encode_plain(s.response)))
    text = text_windows(data._stream, cfg.text_tokens // cfg.text_seq_len, cfg.text_seq_len, rng)
    return PretrainBatch(caps, text, f"pretrain-{cfg.seed}-{step}")


def build_finetune_batch(data: FinetuneData, cfg: StageConfig, step: int) -> list[ConversationSample]:
    specs = [s for s, _ in data.datasets]
    draws = islice(natural_frequency_sampler(specs, [cfg.seed, step]), cfg.samples)
    return [data.datasets[d][1][i] for d, i in draws]


def _frozen_digest(model: MixModel, trainable: Sequence[str]) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        if not k.startswith(tuple(trainable)):
            h.update(k.encode())
            h.update(model.params[k].data.tobytes())
    return h.hexdigest()


def text_loss(model: MixModel, ids: np.ndarray):
    mask = np.ones(ids.shape, dtype=bool)
    mask[:, 0] = False
    return model.lm.loss_batch(None, ids, mask)


def train_stage(model: MixModel, cfg: StageConfig, data: PretrainData | FinetuneData, steps: int,
                callback: Callable[[int, MixModel], None] | None = None) -> tuple[Checkpoint, LossTrace]:
    """Run ``steps`` optimizer steps; lr at step ``n`` is ``lr_at_step(n, schedule)``."""
    if steps > cfg.schedule.total_steps + 1:
        raise ValueError(f"{steps} steps exceed the schedule's {cfg.schedule.total_steps}")
    keys = model.trainable(cfg.trainable)
    for p in cfg.trainable:
        if not any(k.startswith(p) for k in keys):
            raise ValueError(f"model has no parameters under trainable prefix {p!r}")
    if not model.encoders_frozen:
        raise TrainingError("encoders must be frozen during training")
    tensors = [model.params[k] for k in keys]
    saved_flags = {k: t.requires_grad for k, t in model.params.items()}
    for k, t in model.params.items():
        t.requires_grad = k in keys
    before = _frozen_digest(model, cfg.trainable)
    opt = AdamW(tensors, cfg.hyper)
    trace = LossTrace()
    try:
        for step in range(steps):
            lr = lr_at_step(step, cfg.schedule)
            zero_grads(tensors)
            batch_id = f"{cfg.stage}-{cfg.seed}-{step}"
            try:
                if cfg.stage == "pretrain":
                    batch = build_pretrain_batch(data, cfg, step)
                    cap = txt = None
                    total = None
                    if batch.captions:
                        cap, _ = model.loss_on(batch.captions, global_only=True)
                        total = cap
                    if batch.text_ids.size:
                        txt = text_loss(model, batch.text_ids)
                        total = txt if total is None else total + txt
                else:
                    samples = build_finetune_batch(data, cfg, step)
                    total = model.conversation_loss(samples, cfg.global_only)
                    cap = txt = None
                if total is None or not np.isfinite(total.data).all():
                    raise NonFiniteError("loss is not finite")
                total.backward()
                opt.step(lr)
            except NonFiniteError as e:
                raise TrainingError(f"step {step}, batch {batch_id}: {e}") from e
            trace.records.append(TraceRecord(step, lr, None if cap is None else cap.item(),
                                             None if txt is None else txt.item(), total.item()))
            if callback is not None:
                callback(step, model)
    finally:
        for k, t in model.params.items():
            t.requires_grad = saved_flags[k]
    if _frozen_digest(model, cfg.trainable) != before:
        raise TrainingError("frozen parameters changed during training")
    return model.to_checkpoint(cfg.tag, steps), trace


@dataclass
class WeightMixSpec:
    beta: float
    other: Checkpoint | None = None
    syn_data: PretrainData | None = None
    syn_cfg: StageConfig | None = None
    syn_steps: int = 0


@dataclass
class TwoStageResult:
    real: Checkpoint
    syn: Checkpoint | None
    mixed: Checkpoint | None
    final: Checkpoint
    traces: dict[str, LossTrace]


def run_two_stage(model: MixModel, pretrain_cfg: StageConfig, pretrain_data: PretrainData, pretrain_steps: int,
                  finetune_cfg: StageConfig, finetune_data: FinetuneData, finetune_steps: int,
                  mix: WeightMixSpec | None = None, out_dir: str | Path | None = None) -> TwoStageResult:
    """Pretrain on domain A, optionally continue on domain B and mix, then fine-tune.

    Each intermediate checkpoint is written to ``out_dir`` when given.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    traces: dict[str, LossTrace] = {}

    def persist(name: str, ckpt: Checkpoint, trace: LossTrace | None = None) -> None:
        if out is not None:
            save(ckpt, out / f"{name}.mxck")
            if trace is not None:
                trace.write_csv(out / f"{name}.csv")

    real, traces["pretrain_real"] = train_stage(model, pretrain_cfg, pretrain_data, pretrain_steps)
    real = real.with_meta(stage_tag="pretrain_real")
    persist("pretrain_real", real, traces["pretrain_real"])
    syn = mixed = None
    if mix is not None:
        syn = mix.other
        if syn is None:
            if mix.syn_data is None or mix.syn_cfg is None:
                raise ValueError("weight mix needs either a checkpoint or synthetic-domain data")
            syn, traces["pretrain_syn"] = train_stage(model, mix.syn_cfg, mix.syn_data, mix.syn_steps)
            syn = syn.with_meta(stage_tag="pretrain_syn")
            persist("pretrain_syn", syn, traces["pretrain_syn"])
        mixed = mix_weights(real, syn, mix.beta)
        persist("mixed", mixed)
        model.load_checkpoint(mixed)
    else:
        model.load_checkpoint(real)
    final, traces["finetune"] = train_stage(model, finetune_cfg, finetune_data, finetune_steps)
    final = final.with_meta(stage_tag="finetuned")
    persist("finetuned", final, traces["finetune"])
    return TwoStageResult(real, syn, mixed, final, traces)
