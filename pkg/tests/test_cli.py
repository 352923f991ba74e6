import hashlib
from pathlib import Path

import numpy as np
import pytest

from mixpipe.cli import main
from mixpipe.evaluation import EvalReport
from mixpipe.hires_tiler import read_manifest
from mixpipe.images import ImageTensor, read_ppm, write_ppm
from mixpipe.pipeline import MixModel, ModelConfig
from mixpipe.weight_ops import load, save

TINY_KEYS = ("input_res=16\nbase_res=16\npatch_size=4\nenc_dim=8\nconv_strides=2,2\nnum_queries=2\n"
             "lm_dim=16\nlm_depth=1\nlm_heads=2\nmax_seq_len=256\n")


def sha(p):
    return hashlib.sha256(Path(p).read_bytes()).hexdigest()


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_mix_beta_one_copies_a(tmp_path):
    cfg = ModelConfig(input_res=16, base_res=16, patch_size=4, enc_dim=8, conv_strides=(2, 2), num_queries=2,
                      lm_dim=16, lm_depth=1, lm_heads=2, max_seq_len=160)
    a = MixModel(cfg).to_checkpoint("pretrain_real")
    b = MixModel(cfg)
    b.params["lm.head.w"].data += 1.0
    save(a, tmp_path / "a.mxck")
    save(b.to_checkpoint("pretrain_syn"), tmp_path / "b.mxck")
    assert main(["mix-weights", "--a", str(tmp_path / "a.mxck"), "--b", str(tmp_path / "b.mxck"),
                 "--beta", "1", "--out", str(tmp_path / "m.mxck")]) == 0
    assert sha(tmp_path / "m.mxck") == sha(tmp_path / "a.mxck")
    assert main(["mix-weights", "--a", str(tmp_path / "a.mxck"), "--b", str(tmp_path / "b.mxck"),
                 "--beta", "0.5", "--out", str(tmp_path / "h.mxck")]) == 0
    assert load(tmp_path / "h.mxck").meta.stage_tag == "mixed"
    assert main(["mix-weights", "--a", str(tmp_path / "a.mxck"), "--b", str(tmp_path / "nope.mxck"),
                 "--beta", "0.5", "--out", str(tmp_path / "x.mxck")]) == 1


def test_tile_writes_views_and_manifest(tmp_path):
    write_ppm(tmp_path / "in.ppm", ImageTensor(np.random.default_rng(0).random((448, 448, 3))))
    assert main(["tile", "--image", str(tmp_path / "in.ppm"), "--base-res", "224", "--out",
                 str(tmp_path / "views")]) == 0
    files = sorted(p.name for p in (tmp_path / "views").glob("view_*.ppm"))
    assert files == [f"view_{i}.ppm" for i in range(5)]
    assert read_ppm(tmp_path / "views" / "view_3.ppm").height == 224
    plan = read_manifest(tmp_path / "views" / "manifest.txt")
    assert [v.source_rect for v in plan.crops()][3] == (224, 224, 224, 224)
    write_ppm(tmp_path / "rect.ppm", ImageTensor(np.zeros((10, 20, 3))))
    assert main(["tile", "--image", str(tmp_path / "rect.ppm"), "--base-res", "5", "--out",
                 str(tmp_path / "v2")]) == 1


def test_gen_data_is_seed_deterministic(tmp_path, monkeypatch):
    for d in ("a", "b"):
        assert main(["gen-data", "--task", "rec", "--count", "5", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert sha(tmp_path / "a" / "manifest.jsonl") == sha(tmp_path / "b" / "manifest.jsonl")
    monkeypatch.setenv("MIXPIPE_SEED", "3")
    assert main(["gen-data", "--task", "rec", "--count", "5", "--out", str(tmp_path / "c")]) == 0
    assert sha(tmp_path / "c" / "manifest.jsonl") == sha(tmp_path / "a" / "manifest.jsonl")
    assert main(["gen-data", "--task", "marker", "--count", "2", "--seed", "1", "--grid", "4", "--mark", "8",
                 "--out", str(tmp_path / "m")]) == 0


def _write_pretrain_config(tmp_path, name, steps=6):
    main(["gen-data", "--task", "caption", "--count", "8", "--seed", "0", "--out", str(tmp_path / "caps")])
    main(["gen-data", "--task", "text_only", "--count", "50", "--seed", "0", "--out", str(tmp_path / "txt"),
          "--text-file", str(tmp_path / "corpus.txt")])
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(TINY_KEYS + f"steps={steps}\nwarmup_steps=2\ncaption_items=2\ntext_tokens=64\n"
                   f"text_seq_len=32\ncaptions={tmp_path / 'caps'}\ntext={tmp_path / 'corpus.txt'}\n"
                   f"out={tmp_path / (name + '.mxck')}\n")
    return cfg


def test_pretrain_finetune_eval_infer_round(tmp_path, capsys):
    cfg = _write_pretrain_config(tmp_path, "p1")
    assert main(["pretrain", "--config", str(cfg), "--seed", "5"]) == 0
    cfg2 = _write_pretrain_config(tmp_path, "p2")
    assert main(["pretrain", "--config", str(cfg2), "--seed", "5"]) == 0
    assert sha(tmp_path / "p1.mxck") == sha(tmp_path / "p2.mxck")
    assert (tmp_path / "p1.mxck.csv").read_text().startswith("step,lr,caption_loss,text_loss,total_loss")

    main(["gen-data", "--task", "rec", "--count", "6", "--seed", "0", "--out", str(tmp_path / "rec")])
    ft = tmp_path / "ft.cfg"
    ft.write_text(TINY_KEYS + f"steps=3\nwarmup_steps=1\nsamples=2\ninit={tmp_path / 'p1.mxck'}\n"
                  f"data={tmp_path / 'rec'}\nout={tmp_path / 'ft.mxck'}\n")
    assert main(["finetune", "--config", str(ft)]) == 0
    assert load(tmp_path / "ft.mxck").meta.stage_tag == "finetuned"

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "ft.mxck"), "--config", str(ft), "--data", str(tmp_path / "rec"),
                 "--max-new", "4", "--out", str(tmp_path / "rep.csv")]) == 0
    rep = EvalReport.read(tmp_path / "rep.csv")
    assert set(rep.rows) == {"rec_accuracy", "rec_parse_failure_rate"}
    assert rep.rows["rec_accuracy"][1] == 6
    assert main(["eval", "--ckpt", str(tmp_path / "ft.mxck"), "--config", str(ft), "--data",
                 str(tmp_path / "txt"), "--out", str(tmp_path / "ppl.csv")]) == 0
    assert EvalReport.read(tmp_path / "ppl.csv").rows["text_perplexity"][0] >= 1.0

    img = tmp_path / "rec" / "000000.ppm"
    capsys.readouterr()
    assert main(["infer", "--ckpt", str(tmp_path / "ft.mxck"), "--config", str(ft), "--image", str(img),
                 "--prompt", "What is this?", "--max-new", "3"]) == 0
    out1 = capsys.readouterr().out
    main(["infer", "--ckpt", str(tmp_path / "ft.mxck"), "--config", str(ft), "--image", str(img),
          "--prompt", "What is this?", "--max-new", "3"])
    assert capsys.readouterr().out == out1


def test_bad_config_returns_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps=3\nwhat=1\n")
    assert main(["pretrain", "--config", str(cfg)]) == 1
    assert "unknown key" in capsys.readouterr().err
