import json
from pathlib import Path

import numpy as np
import pytest

from rsg import autodiff as ad
from rsg.cli import load_corpus, main
from rsg.config import load_config
from rsg.graph import validate_graph
from rsg.labels import RelationshipLabel as RL
from rsg.model import ModelConfig, init_params
from rsg.rules import RuleParams

SMALL = {
    "version": 1,
    "sim": {"duration": 10.0},
    "model": {"k_max": 32, "ecc_widths": [8, 8], "filter_hidden": 8, "pool_dim": 8, "z_dim": 4,
              "decoder_hidden": [16], "bev_size": 16},
    "train": {"epochs": 2, "batch_size": 8, "test_fraction": 0.34},
}


def run(*argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-scenes", "-q", "--config", str(cfg), "--out", str(root / "scenes"), "--scenes", "3"]) == 0
    assert main(["extract", "-q", "--config", str(cfg), "--scenes", str(root / "scenes"),
                 "--out", str(root / "graphs")]) == 0
    return root, cfg


def tree_bytes(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_scenes_deterministic_and_counts(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["gen-scenes", "-q", "--config", str(cfg), "--out", str(tmp_path / "again"), "--scenes", "3"]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(root / "scenes")
    man = json.loads((root / "scenes" / "manifest.json").read_text())
    assert [s["frames"] for s in man["scenes"]] == [20, 20, 20]
    seeds = {s["seed"] for s in man["scenes"]}
    assert len(seeds) == 3


def test_gen_scenes_default_duration(tmp_path):
    assert main(["gen-scenes", "-q", "--out", str(tmp_path), "--scenes", "10"]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert [s["frames"] for s in man["scenes"]] == [40] * 10


def test_gen_scenes_zero(tmp_path):
    assert main(["gen-scenes", "-q", "--out", str(tmp_path), "--scenes", "0"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["scenes"] == []


def test_extract_counts_and_validity(pipeline):
    root, _ = pipeline
    scenes, _ = load_corpus(root / "graphs")
    frames = [len((root / "scenes" / f"scene_{i:04d}" / "frames.jsonl").read_text().splitlines()) for i in range(3)]
    assert [len(s) for s in scenes] == frames
    assert all(validate_graph(g).ok for s in scenes for g in s)
    # default archetypes include vehicles queued at a red light
    assert any(lab is RL.WaitingForTs for s in scenes for g in s for _, _, lab in g.rel_edges)


def test_train_epochs_zero_is_initialisation(pipeline, tmp_path):
    root, cfg = pipeline
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "-q", "--config", str(cfg), "--task", "rsgrn", "--graphs", str(root / "graphs"),
                 "--epochs", "0", "--seed", "5", "--out", str(ckpt)]) == 0
    mcfg = ModelConfig(**{**SMALL["model"], "ecc_widths": (8, 8), "decoder_hidden": (16,)})
    expect = init_params(mcfg, 33, 5)
    got = ad.load_checkpoint(ckpt)
    assert got.keys() == expect.keys()
    assert all(np.array_equal(got[k], expect[k]) for k in got)
    assert (tmp_path / "m.ckpt.log.csv").read_text().strip() == "epoch,steps,loss,adj,feat,edge,cont,kl"


def _train(root, cfg, out, task="rsgrn", pooling="gated", seed=0):
    return main(["train", "-q", "--config", str(cfg), "--task", task, "--pooling", pooling, "--seed", str(seed),
                 "--graphs", str(root / "graphs"), "--out", str(out)])


def test_train_deterministic(pipeline, tmp_path):
    root, cfg = pipeline
    assert _train(root, cfg, tmp_path / "a.ckpt") == 0
    assert _train(root, cfg, tmp_path / "b.ckpt") == 0
    for suffix in ("", ".json", ".log.csv"):
        assert (tmp_path / f"a.ckpt{suffix}").read_bytes() == (tmp_path / f"b.ckpt{suffix}").read_bytes()
    rows = (tmp_path / "a.ckpt.log.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("1,")


def test_eval_grid_and_predict(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    ckpts = []
    for task in ("rsgrn", "ngpgv", "ngpgveb"):
        for pooling in ("gated", "none"):
            ckpts.append(tmp_path / f"{task}_{pooling}.ckpt")
            assert _train(root, cfg, ckpts[-1], task, pooling) == 0
    capsys.readouterr()
    args = ["eval", "-q", "--graphs", root / "graphs", "--ks", "5,15,25", "--markdown", tmp_path / "t.md"]
    for c in reversed(ckpts):
        args += ["--ckpt", c]
    code, out = run(*args, capsys=capsys)
    assert code == 0
    rows = out.out.strip().splitlines()
    assert rows[0] == "task,pooling,R@5,R@15,R@25"
    assert [r.split(",")[:2] for r in rows[1:]] == [[t, p] for t in ("RSGRN", "NGPGV", "NGPGVEB")
                                                    for p in ("none", "gated")]
    for r in rows[1:]:
        vals = [float(v) for v in r.split(",")[2:]]
        assert vals == sorted(vals) and all(0 <= v <= 100 for v in vals)
    md = (tmp_path / "t.md").read_text().splitlines()
    assert md[0] == "| task | R@k | none | gated |" and len(md) == 2 + 9

    graph = root / "graphs" / "scene_0000.jsonl"
    code, out = run("predict", "--ckpt", ckpts[0], "--graph", graph, "--index", 4, capsys=capsys)
    assert code == 0
    triples = json.loads(out.out)["triples"]
    keys = [(-t["score"], t["src"], t["dst"], t["label"]) for t in triples]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)

    code, out = run("predict", "--ckpt", ckpts[4], "--graph", graph, capsys=capsys)
    assert code == 3 and out.err.startswith("data-error: ")
    code, out = run("predict", "--ckpt", ckpts[4], "--graph", graph, "--map", root / "graphs" / "map.json",
                    "--k", 2, capsys=capsys)
    assert code == 0 and len(json.loads(out.out)["triples"]) == 2


def test_refine_k0_leaves_graph_unchanged(pipeline, tmp_path):
    root, cfg = pipeline
    ckpt = tmp_path / "m.ckpt"
    assert _train(root, cfg, ckpt) == 0
    src = root / "graphs" / "scene_0001.jsonl"
    line = src.read_text().splitlines()[3]
    assert main(["refine", "--ckpt", str(ckpt), "--graph", str(src), "--index", "3", "--k", "0",
                 "--out", str(tmp_path / "r.json"), "--out-graph", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text()) == json.loads(line)
    assert json.loads((tmp_path / "r.json").read_text())["triples"] == []
    assert main(["refine", "--ckpt", str(ckpt), "--graph", str(src), "--index", "3", "--k", "2",
                 "--out", str(tmp_path / "r.json"), "--out-graph", str(tmp_path / "g.json")]) == 0
    grown = json.loads((tmp_path / "g.json").read_text())
    assert len(grown["edges"]) == len(json.loads(line)["edges"]) + 2


def test_stats_and_motifs(pipeline, capsys):
    root, _ = pipeline
    code, out = run("stats", "--graphs", root / "graphs", capsys=capsys)
    assert code == 0
    lines = out.out.splitlines()
    assert lines[0] == "kind,label,count" and len(lines) == 1 + 15 + 18
    code, out = run("motifs", "--graphs", root / "graphs", "--k", 3, "--top", 4, capsys=capsys)
    doc = json.loads(out.out)
    assert code == 0 and [d["rank"] for d in doc] == [1, 2, 3, 4]
    assert [d["count"] for d in doc] == sorted((d["count"] for d in doc), reverse=True)


def test_rules_print_defaults(capsys):
    code, out = run("rules", "--print-defaults", capsys=capsys)
    assert code == 0 and json.loads(out.out) == RuleParams().to_dict()


def test_config_provenance(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"version": 1, "train": {"lr": 0.01, "epochs": 3}}))
    code, out = run("config", "--config", p, "--set", "train.epochs=7", "--provenance", capsys=capsys)
    assert code == 0
    lines = dict(line.split(" = ", 1) for line in out.out.splitlines())
    assert lines["train.lr"] == "0.01  (file)"
    assert lines["train.epochs"] == "7  (flag)"
    assert lines["train.seed"] == "0  (default)"
    assert load_config(p).train.lr == 0.01


@pytest.mark.parametrize("doc, fragment", [
    ({"version": 1, "train": {"nope": 1}}, "unknown config key train.nope"),
    ({"version": 1, "model": {"weights": {"gamma": 1}}}, "unknown config key model.weights.gamma"),
    ({"version": 2}, "version"),
    ({"version": 1, "rules": {"group_dist": -1}}, "rules.group_dist"),
    ({"version": 1, "train": {"task": "XYZ"}}, "unknown task"),
])
def test_config_errors_exit_2(tmp_path, capsys, doc, fragment):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    code, out = run("config", "--config", p, capsys=capsys)
    assert code == 2
    assert out.err.startswith("config-error: ") and fragment in out.err and out.err.count("\n") == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_error_exit_codes(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    code, out = run("train", "--graphs", tmp_path / "missing", "--out", tmp_path / "x", "-q", capsys=capsys)
    assert code == 3 and out.err.startswith("data-error: ")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    ckpt = tmp_path / "m.ckpt"
    assert _train(root, cfg, ckpt) == 0
    code, out = run("predict", "--ckpt", ckpt, "--graph", bad, capsys=capsys)
    assert code == 3 and out.err.startswith("parse-error: ")
    code, out = run("eval", "-q", "--ckpt", ckpt, "--graphs", root / "graphs", "--split", "test",
                    "--set", "train.test_fraction=0", capsys=capsys)
    assert code == 0  # split is taken from the checkpoint, not the current config
    code, out = run("train", "-q", "--config", cfg, "--graphs", root / "graphs", "--out", tmp_path / "n",
                    "--lr", "1e300", "--epochs", "3", capsys=capsys)
    assert code == 4 and out.err.startswith("nan-loss: ")
    code, out = run("gen-scenes", "--out", tmp_path / "s", "--scenes", "nine", capsys=capsys)
    assert code == 2 and out.err.count("\n") == 1
