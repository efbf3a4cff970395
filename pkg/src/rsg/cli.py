"""``rsg`` command line: scenes -> graphs -> training -> prediction, evaluation, statistics.

Errors print one ``code: message`` line on stderr and exit 2 (config),
3 (data / io) or 4 (numeric abort).
"""
from __future__ import annotations

import os

# BLAS pools are sized when numpy loads, so honour RSG_THREADS before that.
_THREADS_ENV = os.environ.get("RSG_THREADS", "").strip()
if _THREADS_ENV.isdigit() and int(_THREADS_ENV) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS_ENV)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .analysis import EvalTable, distribution_stats, mine_motifs, motif_report, stats_csv  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .errors import ConfigError, DataError, ParseError, RsgError, SchemaVersionError  # noqa: E402
from .graph import RoadSceneGraph, deserialize_graph, graph_to_doc, read_jsonl, serialize_graph, \
    validate_graph, write_jsonl  # noqa: E402
from .io import atomic_write_text  # noqa: E402
from .model import POOLINGS, TASKS, VGAE  # noqa: E402
from .roadmap import RoadMap, build_map, map_from_json, map_to_json  # noqa: E402
from .rules import RuleParams, extract_scene  # noqa: E402
from .sim import ScenarioConfig, frames_from_jsonl, frames_to_jsonl, simulate  # noqa: E402
from .train import Sample, bev_for, build_samples, evaluate, fit_standardizer, format_log, split_scenes, \
    train, with_task  # noqa: E402

log = logging.getLogger("rsg")

MANIFEST = "manifest.json"
MAP_FILE = "map.json"
CORPUS_VERSION = 1


# -- plumbing ---------------------------------------------------------------------------

def thread_cap() -> int:
    if not _THREADS_ENV:
        return os.cpu_count() or 1
    if not _THREADS_ENV.isdigit() or int(_THREADS_ENV) < 1:
        raise ConfigError(f"RSG_THREADS must be a positive integer, got {_THREADS_ENV!r}")
    return int(_THREADS_ENV)


def _pmap(fn, items: list) -> list:
    """Order-preserving map over a process pool capped by RSG_THREADS."""
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args, flags: dict) -> RunConfig:
    """File config, then ``--set`` pairs, then dedicated flags (highest precedence)."""
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), _parse_value(value))
    for key, value in flags.items():
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    if not getattr(args, "quiet", False):
        sys.stderr.write("# effective config\n" + cfg.echo())
    return cfg


def _task(name: str) -> str:
    t = name.upper()
    if t not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected rsgrn, ngpgv or ngpgveb")
    return t


# -- corpora ------------------------------------------------------------------------------

def _manifest(root: Path, kind: str) -> dict:
    path = root / MANIFEST
    if not path.exists():
        raise DataError(f"{root} has no {MANIFEST}")
    doc = _read_json(path)
    if doc.get("version") != CORPUS_VERSION:
        raise SchemaVersionError(f"{path}: version {doc.get('version')!r}, expected {CORPUS_VERSION}")
    if doc.get("kind") != kind:
        raise DataError(f"{root} holds {doc.get('kind')!r} data, expected {kind!r}")
    return doc


def load_corpus(root) -> tuple[list[list[RoadSceneGraph]], RoadMap]:
    """Per-scene graph lists of an ``extract`` output directory, plus its map."""
    root = Path(root)
    doc = _manifest(root, "graphs")
    scenes = [read_jsonl(root / s["file"]) for s in doc["scenes"]]
    return scenes, map_from_json((root / MAP_FILE).read_text(encoding="utf-8"))


def _corpus_graphs(root) -> list[RoadSceneGraph]:
    return [g for scene in load_corpus(root)[0] for g in scene]


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _simulate_one(job) -> str:
    map_json, sim_doc = job
    return frames_to_jsonl(simulate(map_from_json(map_json), ScenarioConfig.from_dict(sim_doc)))


def _extract_one(job) -> str:
    map_json, frames_text, rules_doc = job
    frames = frames_from_jsonl(frames_text)
    graphs = extract_scene(frames, map_from_json(map_json), RuleParams.from_dict(rules_doc))
    for i, g in enumerate(graphs):
        report = validate_graph(g)
        if report:
            raise DataError(f"frame {i}: extracted graph is invalid: {report[0].message}")
    return "".join(serialize_graph(g) + "\n" for g in graphs)


# -- commands ------------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    cfg = _config(args, {"sim.seed": args.seed})
    if args.scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    sim = cfg.sim
    m = build_map(sim.map)
    map_json = map_to_json(m)
    out = Path(args.out)
    entries, jobs = [], []
    for i in range(args.scenes):
        doc = sim.to_dict()
        doc["seed"] = _scene_seed(sim.seed, i)
        entries.append({"name": f"scene_{i:04d}", "seed": doc["seed"]})
        jobs.append((map_json, doc))
    texts = _pmap(_simulate_one, jobs)
    for entry, text in zip(entries, texts):
        entry["frames"] = text.count("\n")
        entry["file"] = f"{entry['name']}/frames.jsonl"
        atomic_write_text(out / entry["file"], text)
    atomic_write_text(out / MAP_FILE, map_json + "\n")
    atomic_write_text(out / MANIFEST, _dump({"version": CORPUS_VERSION, "kind": "scenes",
                                             "config": cfg.doc["sim"], "scenes": entries}))
    log.info("wrote %d scenes to %s", len(entries), out)
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args, {})
    src, out = Path(args.scenes), Path(args.out)
    doc = _manifest(src, "scenes")
    map_text = (src / MAP_FILE).read_text(encoding="utf-8")
    map_json = map_to_json(map_from_json(map_text))
    rules = cfg.rules.to_dict()
    jobs = [(map_json, (src / s["file"]).read_text(encoding="utf-8"), rules) for s in doc["scenes"]]
    texts = _pmap(_extract_one, jobs)
    entries = []
    for s, text in zip(doc["scenes"], texts):
        entries.append({"name": s["name"], "file": f"{s['name']}.jsonl", "graphs": text.count("\n")})
        atomic_write_text(out / entries[-1]["file"], text)
    atomic_write_text(out / MAP_FILE, map_json + "\n")
    atomic_write_text(out / MANIFEST, _dump({"version": CORPUS_VERSION, "kind": "graphs", "rules": rules,
                                             "scenes": entries}))
    log.info("extracted %d graphs from %d scenes", sum(e["graphs"] for e in entries), len(entries))
    return 0


def _split_samples(scenes, task, run: dict, split: str, m: RoadMap, model_cfg) -> list[Sample]:
    train_ids, test_ids = split_scenes(len(scenes), run["test_fraction"], run["seed"])
    ids = {"train": train_ids, "test": test_ids, "all": list(range(len(scenes)))}[split]
    return build_samples([scenes[i] for i in ids], task, run["mask_k"], run["seed"], m, model_cfg)


def cmd_train(args) -> int:
    task = _task(args.task) if args.task else None
    cfg = _config(args, {"train.task": task, "model.task": task, "model.pooling": args.pooling,
                         "train.epochs": args.epochs, "train.seed": args.seed, "train.lr": args.lr,
                         "train.batch_size": args.batch_size, "train.mask_k": args.mask_k})
    tcfg = cfg.train
    mcfg = with_task(cfg.model, tcfg.task)
    scenes, m = load_corpus(args.graphs)
    run = {"seed": tcfg.seed, "mask_k": tcfg.mask_k, "test_fraction": tcfg.test_fraction,
           "scenes": len(scenes), "epochs": tcfg.epochs, "lr": tcfg.lr, "batch_size": tcfg.batch_size}
    samples = _split_samples(scenes, tcfg.task, run, "train", m, mcfg)
    if not samples:
        raise DataError(f"the corpus yields no {tcfg.task} training samples")
    model = VGAE.create(mcfg, standardizer=fit_standardizer(samples, mcfg), seed=tcfg.seed)
    model.run_info = run

    def progress(row):
        sys.stderr.write(f"epoch {row['epoch']}: loss={row['loss']:.6f} kl={row['kl']:.6f}\n")

    rows = train(model, samples, tcfg, None if args.quiet else progress)
    atomic_write_text(args.log or f"{args.out}.log.csv", format_log(rows))
    model.save(args.out)
    return 0


def _load_graph(path, index: int) -> RoadSceneGraph:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) > 1 or str(path).endswith(".jsonl"):
        if not 0 <= index < len(lines):
            raise DataError(f"{path} has {len(lines)} graphs; --index {index} is out of range")
        return deserialize_graph(lines[index])
    return deserialize_graph(text)


def _ranked(args):
    model = VGAE.load(args.ckpt)
    g = _load_graph(args.graph, args.index)
    bev = None
    if model.cfg.task == "NGPGVEB":
        if not args.map:
            raise DataError("an NGPGVEB checkpoint needs --map for the BEV raster")
        bev = bev_for(g, map_from_json(Path(args.map).read_text(encoding="utf-8")), model.cfg)
    from .model import predict_relationships

    ranked = predict_relationships(g, model, bev=bev)
    if args.k is not None:
        if args.k < 0:
            raise ConfigError("--k must be >= 0")
        ranked = ranked[: args.k]
    doc = {"task": model.cfg.task, "tie_break": "score desc, then src, dst, label ascending",
           "triples": [{"rank": r + 1, "src": a, "dst": b, "label": lab.value, "score": s}
                       for r, (a, b, lab, s) in enumerate(ranked)]}
    return g, ranked, doc


def cmd_predict(args) -> int:
    _, _, doc = _ranked(args)
    _emit(_dump(doc), args.out)
    return 0


def cmd_refine(args) -> int:
    g, ranked, doc = _ranked(args)
    completed = g.with_edges(set(g.rel_edges) | {(a, b, lab) for a, b, lab, _ in ranked})
    _emit(_dump(doc), args.out)
    if args.out_graph:
        atomic_write_text(args.out_graph, serialize_graph(completed) + "\n")
    return 0


def cmd_eval(args) -> int:
    ks = [int(k) for k in args.ks.split(",")] if args.ks else None
    cfg = _config(args, {"eval.ks": ks})
    scenes, m = load_corpus(args.graphs)
    order = {(t, p): i for i, (t, p) in enumerate((t, p) for t in TASKS for p in ("none", "gated"))}
    results = []
    for path in args.ckpt:
        model = VGAE.load(path)
        run = {"seed": cfg.train.seed, "mask_k": cfg.train.mask_k,
               "test_fraction": cfg.train.test_fraction} | model.run_info
        if run.get("scenes", len(scenes)) != len(scenes):
            raise DataError(f"{path} was trained on a corpus of {run['scenes']} scenes, got {len(scenes)}")
        samples = _split_samples(scenes, model.cfg.task, run, args.split, m, model.cfg)
        results.append(((model.cfg.task, model.cfg.pooling), evaluate(model, samples, cfg.ks)))
    table = EvalTable(cfg.ks)
    for (task, pooling), values in sorted(results, key=lambda r: order[r[0]]):
        table.add(task, pooling, values)
    _emit(table.to_csv(), args.out)
    if args.markdown:
        atomic_write_text(args.markdown, table.to_markdown())
    return 0


def cmd_motifs(args) -> int:
    graphs = _corpus_graphs(args.graphs)
    _emit(motif_report(mine_motifs(graphs, args.k, args.top)), args.out)
    return 0


def cmd_stats(args) -> int:
    _emit(stats_csv(*distribution_stats(_corpus_graphs(args.graphs))), args.out)
    return 0


def cmd_rules(args) -> int:
    if not args.print_defaults:
        raise ConfigError("rules: nothing to do (use --print-defaults)")
    sys.stdout.write(_dump(RuleParams().to_dict()))
    return 0


def cmd_config(args) -> int:
    cfg = load_config(args.config)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), _parse_value(value))
    cfg.validate()
    sys.stdout.write(cfg.echo() if args.provenance else cfg.to_json())
    return 0


# -- argument parsing ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line usage errors with the config exit code
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsg", description="Road scene graphs: simulate, extract, train, evaluate.")
    p.add_argument("--version", action="version", version=f"rsg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config leaf, e.g. train.lr=0.01 (repeatable)")
        sp.add_argument("-q", "--quiet", action="store_true", help="do not echo the effective config")
        return sp

    sp = with_config(sub.add_parser("gen-scenes", help="simulate scenes"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_gen_scenes)

    sp = with_config(sub.add_parser("extract", help="scene directory -> graph corpus"))
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_extract)

    sp = with_config(sub.add_parser("train", help="train a VGAE for one task"))
    sp.add_argument("--task", choices=[t.lower() for t in TASKS], type=str.lower)
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--pooling", choices=POOLINGS)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--mask-k", type=int)
    sp.add_argument("--out", required=True, help="checkpoint path; sidecar goes to OUT.json")
    sp.add_argument("--log", help="loss CSV (default OUT.log.csv)")
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("predict", cmd_predict), ("refine", cmd_refine)):
        sp = sub.add_parser(name, help=f"{name} relationships of one graph")
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--graph", required=True, help="graph JSON, or JSONL with --index")
        sp.add_argument("--index", type=int, default=0)
        sp.add_argument("--k", type=int, default=None if name == "predict" else 3)
        sp.add_argument("--map", help="map JSON for the BEV raster (NGPGVEB)")
        sp.add_argument("--out", help="ranked triples JSON (default stdout)")
        if name == "refine":
            sp.add_argument("--out-graph", help="input graph plus the top-k triples")
        sp.set_defaults(fn=fn)

    sp = with_config(sub.add_parser("eval", help="R@k table for one or more checkpoints"))
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--ks", help="comma-separated, e.g. 5,15,25")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test")
    sp.add_argument("--out")
    sp.add_argument("--markdown", help="also write the task x pooling grid as markdown")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("motifs", help="most frequent connected subgraphs")
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--k", type=int, default=5, help="max nodes per motif")
    sp.add_argument("--top", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_motifs)

    sp = sub.add_parser("stats", help="relationship and attribute counts")
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_stats)

    sp = sub.add_parser("rules", help="rule thresholds")
    sp.add_argument("--print-defaults", action="store_true")
    sp.set_defaults(fn=cmd_rules)

    sp = sub.add_parser("config", help="print the effective configuration")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--provenance", action="store_true", help="one line per leaf with its source")
    sp.set_defaults(fn=cmd_config)
    return p


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        thread_cap()
        return args.fn(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except RsgError as exc:
        sys.stderr.write(f"{exc.code}: {_one_line(exc)}\n")
        return exc.exit_status
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        sys.stderr.write(f"io-error: {_one_line(exc.strerror or exc)}{where}\n")
        return 3
    except (KeyError, TypeError, ValueError) as exc:
        sys.stderr.write(f"data-error: {type(exc).__name__}: {_one_line(exc)}\n")
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
