"""Command-line entry point: ``mixpipe <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation
from .config import ConfigError, default_seed, load_config, model_config, stage_config
from .hires_tiler import apply_plan, make_plan, write_manifest
from .images import read_ppm, write_ppm
from .pipeline import MixModel
from .task_data import (TASK_TAGS, ConversationSample, DatasetSpec, gen_marker_probe,
                        gen_synthetic, parse_bbox, read_dataset, write_dataset)
from .trainer import FinetuneData, PretrainData, train_stage
from .weight_ops import load, mix_weights, save

log = logging.getLogger("mixpipe")


class CLIError(Exception):
    pass


def _model(cfg: dict[str, str], ckpt: str | None) -> MixModel:
    m = MixModel(model_config(cfg))
    if ckpt:
        m.load_checkpoint(load(ckpt))
    return m


def _require(cfg: dict[str, str], key: str, path: str) -> str:
    if key not in cfg:
        raise CLIError(f"{path}: missing required key {key!r}")
    return cfg[key]


def _train(args, stage: str) -> int:
    cfg = load_config(args.config)
    scfg = stage_config(cfg, stage, args.seed)
    model = _model(cfg, cfg.get("init"))
    out = Path(_require(cfg, "out", args.config))
    if stage == "pretrain":
        captions = read_dataset(_require(cfg, "captions", args.config)) if scfg.caption_items else []
        text: list[str] = []
        if "text" in cfg:
            text = [ln for ln in Path(cfg["text"]).read_text().splitlines() if ln.strip()]
        elif scfg.text_tokens:
            raise CLIError(f"{args.config}: text_tokens > 0 needs a 'text' corpus file")
        data = PretrainData(captions, text)
    else:
        sets = []
        for i, d in enumerate(_require(cfg, "data", args.config).split(",")):
            items = read_dataset(d.strip())
            if not items:
                raise CLIError(f"{d}: empty dataset")
            sets.append((DatasetSpec(Path(d).name or f"set{i}", len(items), scfg.seed, items[0].task_tag), items))
        data = FinetuneData(sets)
    ckpt, trace = train_stage(model, scfg, data, int(cfg.get("steps", 2000)))
    out.parent.mkdir(parents=True, exist_ok=True)
    save(ckpt, out)
    trace.write_csv(cfg.get("trace", str(out) + ".csv"))
    print(f"wrote {out} ({len(trace)} steps)")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train(args, "finetune")


def cmd_mix(args) -> int:
    mixed = mix_weights(load(args.a), load(args.b), args.beta)
    save(mixed, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_tile(args) -> int:
    img = read_ppm(args.image)
    if not img.is_square:
        raise CLIError(f"{args.image}: tiling needs a square image, got {img.height}x{img.width}")
    plan = make_plan(img.height, args.base_res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(apply_plan(img, plan)):
        write_ppm(out / f"view_{i}.ppm", view)
    write_manifest(plan, out / "manifest.txt")
    print(f"wrote {len(plan.views)} views to {out}")
    return 0


def cmd_infer(args) -> int:
    model = _model(load_config(args.config), args.ckpt)
    img = read_ppm(args.image)
    sample = ConversationSample([("user", args.prompt), ("assistant", "?")], args.task, img)
    print(model.respond(sample, args.max_new, args.global_only))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = _model(cfg, args.ckpt)
    data = read_dataset(args.data)
    if not data:
        raise CLIError(f"{args.data}: empty dataset")
    report = evaluation.EvalReport(model.cfg.digest())
    metric = args.metric
    if metric == "auto":
        metric = {"rec": "rec", "text_only": "perplexity"}.get(data[0].task_tag, "vqa")
    if metric == "perplexity":
        report.add("text_perplexity", evaluation.text_perplexity(model, [s.response for s in data]), len(data))
    else:
        outs = [model.respond(s, args.max_new, args.global_only) for s in data]
        if metric == "rec":
            score = evaluation.score_rec(outs, [parse_bbox(s.response) for s in data])
            report.add("rec_accuracy", score.accuracy, score.n)
            report.add("rec_parse_failure_rate", score.parse_failure_rate, score.n)
        else:
            report.add("vqa_exact_match", evaluation.score_vqa(outs, [s.response for s in data]), len(data))
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_gen_data(args) -> int:
    if args.task == "marker":
        samples = gen_marker_probe(args.seed, args.count, args.size, args.grid, mark=args.mark)
    else:
        samples = gen_synthetic(args.task, args.seed, args.count, args.size, args.variant)
    if args.task == "text_only" and args.text_file:
        Path(args.text_file).write_text("".join(s.response + "\n" for s in samples))
    path = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixpipe", description="Toy multi-encoder vision-language pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    for name, fn, doc in (("pretrain", cmd_pretrain, "stage-1 caption + text pretraining"),
                          ("finetune", cmd_finetune, "stage-2 multi-task fine-tuning")):
        s = sub.add_parser(name, help=doc)
        s.add_argument("--config", required=True, help="key=value config file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed and $MIXPIPE_SEED")
        s.set_defaults(func=fn)

    s = sub.add_parser("mix-weights", help="interpolate two checkpoints")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("tile", help="write the global view and sub-image crops of a square PPM")
    s.add_argument("--image", required=True)
    s.add_argument("--base-res", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("infer", help="answer a prompt about an image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--task", default="vqa", choices=[t for t in TASK_TAGS if t != "text_only"])
    s.add_argument("--max-new", type=int, default=96)
    s.add_argument("--global-only", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metric", default="auto", choices=["auto", "rec", "vqa", "perplexity"])
    s.add_argument("--out")
    s.add_argument("--max-new", type=int, default=96)
    s.add_argument("--global-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--task", required=True, choices=list(TASK_TAGS) + ["marker"])
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--grid", type=int, default=8, help="marker task: cells per side")
    s.add_argument("--mark", type=int, default=2, help="marker task: marker side in pixels")
    s.add_argument("--variant", default="")
    s.add_argument("--text-file", help="also write text_only responses one per line")
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.func is cmd_gen_data and args.seed is None:
            args.seed = default_seed()
        return args.func(args)
    except (CLIError, ConfigError, ValueError, KeyError, OSError) as e:
        print(f"mixpipe {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
